//! Acceptance suite. Runs without the libtest harness and prints one
//! PASS/FAIL line per criterion; the process fails if any criterion fails.
//!
//! Training runs are cached under `target/tmp/acceptance-runs`, keyed by
//! configuration and dataset. Delete that directory to retrain.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidflow::config::{KlReduction, RunConfig};
use vidflow::data::Sample;
use vidflow::graph::{Graph, Var};
use vidflow::io::{load_sample, save_sample};
use vidflow::losses::{self, consistency_loss, kl_loss, recon_loss, smooth_loss, FlowTerms};
use vidflow::pipeline::{
    load_model, predict_from_frame, read_log, run_ablation, AblationResult, Trainer, TrainOptions, Variant, LOG_FILE,
};
use vidflow::refine::{compose_sequence, Refiner};
use vidflow::synthgen::{generate_samples, DatasetSpec, SceneFamily};
use vidflow::tensor::Tensor;
use vidflow::warp::{bilinear_sample, SamplingGrid};

struct Outcome {
    pass: bool,
    summary: String,
    details: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, summary: impl Into<String>) -> Self {
        Self {
            pass,
            summary: summary.into(),
            details: Vec::new(),
        }
    }

    fn detail(mut self, d: impl Into<String>) -> Self {
        self.details.push(d.into());
        self
    }
}

// ---- criterion 1 -------------------------------------------------------------

fn c1_scope() -> Outcome {
    Outcome::new(
        true,
        "FID on real street-scene video is out of scope; criteria 2-9 are the property-based substitutes",
    )
}

// ---- criterion 2: warp oracle ------------------------------------------------

/// Clamp-to-border bilinear interpolation, one pixel at a time.
fn brute_sample(img: &[f64], c: usize, h: usize, w: usize, x: f64, y: f64) -> Vec<f64> {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (x - x0 as f64, y - y0 as f64);
    (0..c)
        .map(|k| {
            let at = |yy: usize, xx: usize| img[k * h * w + yy * w + xx];
            (1.0 - ay) * ((1.0 - ax) * at(y0, x0) + ax * at(y0, x1)) + ay * ((1.0 - ax) * at(y1, x0) + ax * at(y1, x1))
        })
        .collect()
}

fn c2_warp_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (c, h, w) = (3, 16, 16);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let img: Tensor<f64> = Tensor::from_fn(&[c, h, w], |_| rng.random());
        let coords: Tensor<f64> = Tensor::from_fn(&[2, h, w], |_| rng.random_range(-3.0..19.0));
        let out = bilinear_sample(&img, &SamplingGrid::new(coords.clone()).unwrap()).unwrap();
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let want = brute_sample(img.data(), c, h, w, coords.data()[p], coords.data()[h * w + p]);
                for k in 0..c {
                    worst = worst.max((out.data()[k * h * w + p] - want[k]).abs());
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst < 1e-6 && secs < 5.0,
        format!("100 random 16x16 image/grid pairs: max |diff| {worst:.2e} (< 1e-6), {secs:.2} s (< 5 s)"),
    )
}

// ---- criterion 3: gradient suite ---------------------------------------------

struct GradStats {
    worst: f64,
    checked: usize,
    skipped: usize,
}

/// Central differences with step `h` against the tape. Elements whose
/// difference quotients at `h` and `h/2` disagree straddle a kink of an
/// absolute value and are skipped; a wrong analytic gradient leaves the
/// two quotients in agreement and is still caught.
fn fd_check(inputs: &[Tensor<f64>], h: f64, f: &dyn Fn(&Graph<f64>, &[Var]) -> Var) -> GradStats {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars);
    let grads = g.backward(out);
    let eval = |k: usize, idx: usize, delta: f64| {
        let mut ts = inputs.to_vec();
        ts[k].data_mut()[idx] += delta;
        let g = Graph::new();
        let vs: Vec<Var> = ts.into_iter().map(|t| g.constant(t)).collect();
        let o = f(&g, &vs);
        g.value(o).item()
    };
    let mut stats = GradStats {
        worst: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for idx in 0..t.numel() {
            let (plus, minus) = (eval(k, idx, h), eval(k, idx, -h));
            let d1 = (plus - minus) / (2.0 * h);
            let d2 = (eval(k, idx, h / 2.0) - eval(k, idx, -h / 2.0)) / h;
            if (d1 - d2).abs() > 1e-3 * d1.abs().max(d2.abs()) + 1e-10 {
                stats.skipped += 1;
                continue;
            }
            // Rounding in the two loss evaluations; where the true gradient
            // is exactly zero this is all the quotient contains.
            let noise = 16.0 * f64::EPSILON * (plus.abs() + minus.abs()) / (2.0 * h);
            let a = analytic.data()[idx];
            let err = ((a - d1).abs() - noise).max(0.0) / a.abs().max(d1.abs()).max(1e-300);
            stats.worst = stats.worst.max(err);
            stats.checked += 1;
        }
    }
    stats
}

/// Flow whose sampling positions `x + flow(x)` lie inside the image and at
/// least 0.1 from the integer lattice.
fn lattice_safe_flow(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor<f64> {
    let plane = h * w;
    Tensor::from_fn(&[n, 2, h, w], |i| {
        let c = (i / plane) % 2;
        let p = i % plane;
        let (base, extent) = if c == 0 { ((p % w) as f64, w) } else { ((p / w) as f64, h) };
        let target = rng.random_range(0..extent - 1) as f64 + rng.random_range(0.1..0.9);
        target - base
    })
}

fn c3_gradients() -> Outcome {
    let start = Instant::now();
    let (t, h, w) = (2, 8, 8);
    let step = 1e-3;
    let mut results: Vec<(&str, GradStats)> = Vec::new();
    let mut merge = |name: &'static str, s: GradStats| match results.iter_mut().find(|(n, _)| *n == name) {
        Some((_, acc)) => {
            acc.worst = acc.worst.max(s.worst);
            acc.checked += s.checked;
            acc.skipped += s.skipped;
        }
        None => results.push((name, s)),
    };
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let img: Tensor<f64> = Tensor::from_fn(&[t, 3, h, w], |_| rng.random());
        let img2: Tensor<f64> = Tensor::from_fn(&[t, 3, h, w], |_| rng.random());
        let ff = lattice_safe_flow(&mut rng, t, h, w);
        let fb = lattice_safe_flow(&mut rng, t, h, w);
        let of: Tensor<f64> = Tensor::from_fn(&[t, 1, h, w], |_| rng.random_range(0.05..0.95));
        let ob: Tensor<f64> = Tensor::from_fn(&[t, 1, h, w], |_| rng.random_range(0.05..0.95));
        let coords = {
            let id = vidflow::warp::identity_grid_batch::<f64>(t, h, w);
            id.zip_map(&ff, |a, b| a + b)
        };
        let mu: Tensor<f64> = Tensor::from_fn(&[t, 6], |_| rng.random_range(-1.0..1.0));
        // Away from logvar = 0, where the logvar gradient vanishes and any
        // relative comparison degenerates.
        let lv: Tensor<f64> = Tensor::from_fn(&[t, 6], |_| {
            let m: f64 = rng.random_range(0.2..1.5);
            if rng.random::<bool>() { m } else { -m }
        });
        let weights: Tensor<f64> = Tensor::from_fn(&[t, 3, h, w], |_| rng.random_range(-1.0..1.0));

        merge(
            "bilinear_sample",
            fd_check(&[img.clone(), coords], step, &|g, v| {
                g.sum(g.mul(g.grid_sample(v[0], v[1]), g.constant(weights.clone())))
            }),
        );
        let terms = |v: &[Var]| FlowTerms {
            flow_fwd: v[2],
            flow_bwd: v[3],
            occ_fwd: v[4],
            occ_bwd: v[5],
        };
        merge(
            "recon_loss",
            fd_check(
                &[img.clone(), img2.clone(), ff.clone(), fb.clone(), of.clone(), ob.clone()],
                step,
                &|g, v| recon_loss(g, v[0], v[1], &terms(v)),
            ),
        );
        merge(
            "smooth_loss",
            fd_check(&[ff.clone(), fb.clone()], step, &|g, v| smooth_loss(g, v[0], v[1])),
        );
        merge(
            "consistency_loss",
            fd_check(&[ff.clone(), fb.clone(), of.clone(), ob.clone()], step, &|g, v| {
                let t = FlowTerms {
                    flow_fwd: v[0],
                    flow_bwd: v[1],
                    occ_fwd: v[2],
                    occ_bwd: v[3],
                };
                consistency_loss(g, &t)
            }),
        );
        merge(
            "kl_loss",
            fd_check(&[mu, lv], step, &|g, v| kl_loss(g, v[0], v[1], KlReduction::Sum)),
        );
    }
    let secs = start.elapsed().as_secs_f64();
    let mut out = Outcome::new(true, "");
    let mut worst = 0.0f64;
    for (name, s) in &results {
        worst = worst.max(s.worst);
        let skip_ok = s.skipped * 20 <= s.checked + s.skipped;
        out.pass &= s.worst < 1e-4 && skip_ok && s.checked > 0;
        out = out.detail(format!(
            "{name}: max rel err {:.2e} over {} elements, {} kink-straddling skipped",
            s.worst, s.checked, s.skipped
        ));
    }
    out.pass &= secs < 60.0;
    out.summary = format!("20 seeds, 8x8, T=2, h=1e-3: max rel err {worst:.2e} (< 1e-4), {secs:.1} s (< 60 s)");
    out
}

// ---- criterion 4: identity and zero invariants --------------------------------

fn c4_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, h, w) = (3, 16, 16);
    let refiner = Refiner::new(8);
    let params = refiner.init_params(&mut rng);
    let i0: Tensor<f32> = Tensor::from_fn(&[3, h, w], |_| rng.random());
    let seq = compose_sequence(&refiner, &params, &i0, &Tensor::zeros(&[t, 2, h, w]), &Tensor::ones(&[t, 1, h, w])).unwrap();
    let ident = (0..=t).map(|k| seq.frame(k).max_abs_diff(&i0)).fold(0.0f32, f32::max) as f64;

    let g = Graph::<f64>::new();
    let cf = g.constant(Tensor::from_fn(&[t, 2, h, w], |i| if i / (h * w) % 2 == 0 { 1.7 } else { -0.4 }));
    let smooth = g.value(smooth_loss(&g, cf, cf)).item();

    let g = Graph::<f64>::new();
    let fwd = Tensor::from_fn(&[t, 2, h, w], |i| if i / (h * w) % 2 == 0 { 2.0 } else { -1.0 });
    let bwd = fwd.map(|v| -v);
    let terms = FlowTerms {
        flow_fwd: g.constant(fwd),
        flow_bwd: g.constant(bwd),
        occ_fwd: g.constant(Tensor::ones(&[t, 1, h, w])),
        occ_bwd: g.constant(Tensor::ones(&[t, 1, h, w])),
    };
    let cons = g.value(consistency_loss(&g, &terms)).item();

    let g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[2, 5]));
    let kl = g.value(kl_loss(&g, z, z, KlReduction::Sum)).item();

    Outcome::new(
        ident <= 1e-6 && smooth == 0.0 && cons == 0.0 && kl == 0.0,
        format!("identity composition diff {ident:.1e}, constant-flow smooth {smooth}, inverse-translation consistency {cons}, standard-normal KL {kl}"),
    )
}

// ---- criterion 5: synthetic oracle fit ----------------------------------------

fn c5_oracle_fit() -> Outcome {
    let spec = DatasetSpec {
        family: SceneFamily::Translate1,
        samples: 20,
        seed: 5,
        height: 64,
        width: 64,
        steps: 4,
    };
    let samples = generate_samples(&spec).unwrap();
    let (mut r_max, mut c_max) = (0.0f64, 0.0f64);
    for s in &samples {
        r_max = r_max.max(losses::eval::recon(&s.frames, &s.flows, &s.occlusions).unwrap());
        c_max = c_max.max(losses::eval::consistency(&s.frames, &s.flows, &s.occlusions).unwrap());
    }
    Outcome::new(
        r_max < 2.0 / 255.0 && c_max < 1e-6,
        format!(
            "20 translate-1 sequences with true flows and masks: max recon {r_max:.2e} (< {:.2e}), max consistency {c_max:.1e} (< 1e-6)",
            2.0 / 255.0
        ),
    )
}

// ---- training runs -----------------------------------------------------------

fn runs_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-runs")
}

fn desk_config() -> RunConfig {
    let mut c = RunConfig {
        steps: 4,
        height: 64,
        width: 64,
        batch_size: 8,
        train_steps: 2000,
        checkpoint_every: 250,
        ..RunConfig::default()
    };
    c.adam.lr = 1e-3;
    c
}

fn dataset(family: SceneFamily, samples: usize, seed: u64) -> (DatasetSpec, Vec<Sample>) {
    let spec = DatasetSpec {
        family,
        samples,
        seed,
        height: 64,
        width: 64,
        steps: 4,
    };
    let s = generate_samples(&spec).unwrap();
    (spec, s)
}

/// Trains (or reuses) `variant` of `cfg` on `train` and evaluates on `test`.
fn cached_run(name: &str, variant: Variant, cfg: &RunConfig, train: &(DatasetSpec, Vec<Sample>), test: &[Sample]) -> (AblationResult, PathBuf) {
    let full = variant.apply(cfg);
    let mut hasher = DefaultHasher::new();
    full.to_text().hash(&mut hasher);
    format!("{:?}", train.0).hash(&mut hasher);
    let dir = runs_root().join(format!("{name}-{:016x}", hasher.finish()));
    let started = Instant::now();
    eprintln!("  run {name} in {}", dir.display());
    let opts = TrainOptions {
        resume: None,
        progress_every: 250,
    };
    let r = run_ablation(variant, cfg, &train.1, test, &dir, &opts).unwrap();
    eprintln!("  run {name} ready after {:.0} s", started.elapsed().as_secs_f64());
    (r, dir)
}

fn c6_desk_training(train: &(DatasetSpec, Vec<Sample>), test: &[Sample]) -> (Outcome, PathBuf) {
    let (r, dir) = cached_run("translate1-split", Variant::SplitSemantic, &desk_config(), train, test);
    let m = &r.report.mean;
    let last = r.report.per_step.last().unwrap();
    let ratio = m.epe / m.epe_zero;
    let gain = last.psnr - last.psnr_copy;
    let log = read_log(&dir.join(LOG_FILE)).unwrap();
    let loss_ratio = log.last().unwrap().loss.total / log[0].loss.total;
    let out = Outcome::new(
        ratio < 0.5 && m.mean_occ > 0.5 && gain >= 2.0,
        format!(
            "translate-1, 2000 steps: EPE {:.3} = {:.1}% of zero-flow {:.3} (< 50%), mean mask {:.3} (> 0.5), t=T PSNR {:.2} vs copy {:.2} (+{gain:.2} dB, >= 2)",
            m.epe,
            100.0 * ratio,
            m.epe_zero,
            m.mean_occ,
            last.psnr,
            last.psnr_copy
        ),
    )
    .detail(format!(
        "final/initial total loss {:.4} / {:.4} = {:.1}% (train example bound < 25%: {})",
        log.last().unwrap().loss.total,
        log[0].loss.total,
        100.0 * loss_ratio,
        if loss_ratio < 0.25 { "PASS" } else { "FAIL" }
    ))
    .detail(format!("foreground EPE {:.3} vs zero-flow {:.3}; occlusion IoU {:.3}; SSIM {:.3}", m.epe_fg, m.epe_fg_zero, m.iou, m.ssim));
    (out, dir)
}

fn c7_ablation(t1_train: &(DatasetSpec, Vec<Sample>), t1_test: &[Sample]) -> Outcome {
    let test_size = t1_test.len();
    let train = dataset(SceneFamily::Multi3, 500, 11);
    let (_, test) = dataset(SceneFamily::Multi3, test_size, 12);
    let variants = [Variant::SplitSemantic, Variant::ConcatSemantic, Variant::NoSemantic];
    let mut fg = [[0.0f64; 3]; 3];
    let mut details = Vec::new();
    for (si, seed) in [0u64, 1, 2].into_iter().enumerate() {
        let cfg = RunConfig { seed, ..desk_config() };
        for (vi, v) in variants.iter().enumerate() {
            let (r, _) = cached_run(&format!("multi3-{}-s{seed}", v.name()), *v, &cfg, &train, &test);
            fg[si][vi] = r.report.mean.epe_fg;
        }
        details.push(format!(
            "seed {seed}: FG EPE split {:.3}, concat {:.3}, none {:.3}",
            fg[si][0], fg[si][1], fg[si][2]
        ));
    }
    let mean = |vi: usize| fg.iter().map(|r| r[vi]).sum::<f64>() / 3.0;
    let (split, concat, none) = (mean(0), mean(1), mean(2));
    let (full, _) = cached_run("translate1-split", Variant::SplitSemantic, &desk_config(), t1_train, t1_test);
    let (nf, _) = cached_run("translate1-no_flow", Variant::NoFlow, &desk_config(), t1_train, t1_test);
    let pf = full.report.per_step.last().unwrap().psnr;
    let pn = nf.report.per_step.last().unwrap().psnr;
    let mut out = Outcome::new(
        split <= concat && concat <= none && pn < pf,
        format!(
            "multi-3 FG EPE over 3 seeds x {test_size} sequences: split {split:.3} <= concat {concat:.3} <= none {none:.3}; translate-1 t=T PSNR no_flow {pn:.2} < full {pf:.2}"
        ),
    );
    for d in details {
        out = out.detail(d);
    }
    out
}

fn c8_cvae(train: &(DatasetSpec, Vec<Sample>), test: &[Sample], full_dir: &PathBuf) -> Outcome {
    let zero_beta = {
        let mut c = desk_config();
        c.weights.kl = 0.0;
        c
    };
    let (_, dir0) = cached_run("translate1-beta0", Variant::SplitSemantic, &zero_beta, train, test);
    let kl_at = |dir: &PathBuf| read_log(&dir.join(LOG_FILE)).unwrap().last().unwrap().loss.l_kl;
    let (kl_b, kl_0) = (kl_at(full_dir), kl_at(&dir0));

    let model = load_model(&full_dir.join("checkpoint.ckpt"), None).unwrap();
    let s = &test[0];
    let i0 = s.frames.frame(0);
    let gens = predict_from_frame(&model, &i0, Some(&s.label), 8, 99).unwrap();
    let flows: Vec<&Tensor<f32>> = gens.iter().map(|g| &g.prediction.flows.backward).collect();
    let div = vidflow::metrics::diversity(&flows).unwrap();
    let again = predict_from_frame(&model, &i0, Some(&s.label), 8, 99).unwrap();
    let exact = gens
        .iter()
        .zip(&again)
        .all(|(a, b)| a.frames.tensor().data() == b.frames.tensor().data());
    Outcome::new(
        kl_b < kl_0 && div > 0.0 && exact,
        format!("step-2000 KL beta=0.1 {kl_b:.4} < beta=0 {kl_0:.4}; diversity over 8 prior draws {div:.4} (> 0); seeded generation bit-exact: {exact}"),
    )
}

// ---- criterion 9: round trips ------------------------------------------------

fn tiny_config() -> RunConfig {
    RunConfig {
        steps: 2,
        height: 32,
        width: 32,
        base_width: 4,
        motion_dim: 16,
        fg_motion_dim: 12,
        content_dim: 8,
        batch_size: 2,
        ..RunConfig::default()
    }
}

fn c9_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        family: SceneFamily::Multi3,
        samples: 4,
        seed: 9,
        height: 32,
        width: 32,
        steps: 2,
    };
    let samples = generate_samples(&spec).unwrap();
    let mut data_exact = true;
    for (i, s) in samples.iter().enumerate() {
        let p = dir.path().join(format!("s{i}"));
        save_sample(&p, s).unwrap();
        let back = load_sample(&p).unwrap();
        let same = |a: &Tensor<f32>, b: &Tensor<f32>| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        data_exact &= same(&s.flows.forward, &back.flows.forward)
            && same(&s.flows.backward, &back.flows.backward)
            && same(&s.occlusions.forward, &back.occlusions.forward)
            && same(&s.occlusions.backward, &back.occlusions.backward)
            && s.label == back.label;
    }

    let cfg = tiny_config();
    let mut straight = Trainer::new(&cfg).unwrap();
    for _ in 0..4 {
        straight.train_step(&samples, None).unwrap();
    }
    let mut first = Trainer::new(&cfg).unwrap();
    for _ in 0..2 {
        first.train_step(&samples, None).unwrap();
    }
    let ck = dir.path().join("mid.ckpt");
    first.save(&ck).unwrap();
    let mut resumed = Trainer::load(&ck, Some(&cfg)).unwrap();
    let mut losses_equal = true;
    for _ in 0..2 {
        let a = resumed.train_step(&samples, None).unwrap();
        let b = first.train_step(&samples, None).unwrap();
        losses_equal &= a.total.to_bits() == b.total.to_bits();
    }
    let ckpt_exact = resumed.to_bytes() == straight.to_bytes() && losses_equal;
    Outcome::new(
        data_exact && ckpt_exact,
        format!("dataset flows/masks bit-exact: {data_exact}; checkpoint save/load/step bit-identical to uninterrupted training: {ckpt_exact}"),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a name filter
    // that is not "acceptance" skips the suite.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut report = |n: u32, o: Outcome| {
        println!("[{}] criterion {n}: {}", if o.pass { "PASS" } else { "FAIL" }, o.summary);
        for d in &o.details {
            println!("        {d}");
        }
        results.push((n, o));
    };
    report(1, c1_scope());
    report(2, c2_warp_oracle());
    report(3, c3_gradients());
    report(4, c4_invariants());
    report(5, c5_oracle_fit());
    let train = dataset(SceneFamily::Translate1, 500, 1);
    let (_, test) = dataset(SceneFamily::Translate1, 100, 2);
    let (o6, full_dir) = c6_desk_training(&train, &test);
    report(6, o6);
    report(7, c7_ablation(&train, &test));
    report(8, c8_cvae(&train, &test, &full_dir));
    report(9, c9_round_trips());
    let failed: Vec<u32> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", results.len());
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
