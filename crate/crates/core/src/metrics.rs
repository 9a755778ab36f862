//! Evaluation metrics and reports.

use serde::{Deserialize, Serialize};

use crate::config::SemanticMode;
use crate::data::{LabelMap, Sample};
use crate::error::{Error, Result};
use crate::pipeline::{predict_from_frame, predict_posterior, Model};
use crate::tensor::Tensor;

/// Reported instead of infinity for identical images.
pub const PSNR_IDENTICAL: f64 = 99.0;

/// Mean endpoint error between `[.., 2, H, W]` flows, optionally restricted
/// to pixels where `region [.., 1, H, W]` is nonzero. `None` when the
/// region is empty.
pub fn epe(pred: &Tensor<f32>, gt: &Tensor<f32>, region: Option<&Tensor<f32>>) -> Result<Option<f64>> {
    gt.expect_shape(pred.shape())?;
    let s = pred.shape();
    if s.len() < 3 || s[s.len() - 3] != 2 {
        return Err(Error::InvalidInput(format!("flow must be [.., 2, H, W], got {s:?}")));
    }
    let plane = s[s.len() - 2] * s[s.len() - 1];
    let outer = pred.numel() / (2 * plane);
    if let Some(r) = region {
        if r.numel() != outer * plane {
            return Err(Error::shape(&[outer, 1, plane], r.shape()));
        }
    }
    let (p, g) = (pred.data(), gt.data());
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for o in 0..outer {
        for k in 0..plane {
            if let Some(r) = region {
                if r.data()[o * plane + k] == 0.0 {
                    continue;
                }
            }
            let du = (p[(2 * o) * plane + k] - g[(2 * o) * plane + k]) as f64;
            let dv = (p[(2 * o + 1) * plane + k] - g[(2 * o + 1) * plane + k]) as f64;
            sum += (du * du + dv * dv).sqrt();
            count += 1;
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    b.expect_shape(a.shape())?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.numel().max(1) as f64;
    Ok(if mse == 0.0 {
        PSNR_IDENTICAL
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" Gaussian filtering of one plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM of `[C, H, W]` images over channels and valid window
/// positions (Gaussian window 11, sigma 1.5, dynamic range 1).
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    b.expect_shape(a.shape())?;
    if a.ndim() != 3 || a.dim(1) < SSIM_WINDOW || a.dim(2) < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "ssim needs [C, H, W] with H, W >= {SSIM_WINDOW}, got {:?}",
            a.shape()
        )));
    }
    let (c, h, w) = (a.dim(0), a.dim(1), a.dim(2));
    let k = gaussian_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa: Vec<f64> = a.data()[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.data()[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v as f64).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let (ma, ..) = filter(&pa, h, w, &k);
        let (mb, ..) = filter(&pb, h, w, &k);
        let (saa, ..) = filter(&prod(&pa, &pa), h, w, &k);
        let (sbb, ..) = filter(&prod(&pb, &pb), h, w, &k);
        let (sab, ..) = filter(&prod(&pa, &pb), h, w, &k);
        for i in 0..ma.len() {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cxy = sab[i] - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// IoU of the occluded sets (`value < 0.5`) of two masks; 1 when both are
/// empty.
pub fn occlusion_iou(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    gt.expect_shape(pred.shape())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (p < 0.5, g < 0.5);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean over unordered pairs of the mean absolute difference.
pub fn diversity(samples: &[&Tensor<f32>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidInput("diversity needs at least two samples".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            samples[j].expect_shape(samples[i].shape())?;
            let d: f64 = samples[i]
                .data()
                .iter()
                .zip(samples[j].data())
                .map(|(&a, &b)| (a - b).abs() as f64)
                .sum();
            total += d / samples[i].numel().max(1) as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub t: usize,
    /// Backward-flow endpoint error.
    pub epe: f64,
    /// Same, restricted to foreground pixels of frame `t`.
    pub epe_fg: f64,
    /// Endpoint error of an all-zero flow.
    pub epe_zero: f64,
    pub epe_fg_zero: f64,
    pub psnr: f64,
    /// PSNR of copying `I_0`.
    pub psnr_copy: f64,
    pub ssim: f64,
    pub iou: f64,
    /// Mean predicted backward mask.
    pub mean_occ: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub per_step: Vec<StepMetrics>,
    pub mean: StepMetrics,
    /// Mean pairwise flow difference over prior samples.
    pub diversity: f64,
    pub diversity_draws: usize,
    /// Mean |predicted backward flow| over the evaluated samples.
    pub mean_flow_magnitude: f64,
}

fn fg_region(labels: &[LabelMap]) -> Tensor<f32> {
    let parts: Vec<Tensor<f32>> = labels.iter().map(|l| l.foreground_mask()).collect();
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Tensor::concat(&refs, 0).expect("same size")
}

/// Evaluates posterior-mean predictions on `samples` and prior diversity on
/// the first `diversity_samples` of them with `draws` samples each.
pub fn evaluate(model: &Model, samples: &[Sample], diversity_samples: usize, draws: usize, seed: u64) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples to evaluate".into()));
    }
    let steps = model.config.steps;
    let preds = predict_posterior(model, samples, 8)?;
    let mut sums = vec![StepMetrics::default(); steps];
    let mut fg_counts = vec![0usize; steps];
    let mut magnitude = 0.0;
    for ((s, p), seq) in samples.iter().zip(&preds.predictions).zip(&preds.sequences) {
        let zero = Tensor::zeros(&[2, s.frames.height(), s.frames.width()]);
        magnitude += p.flows.backward.data().iter().map(|v| v.abs() as f64).sum::<f64>() / p.flows.backward.numel() as f64;
        let fg = fg_region(&s.step_labels);
        for t in 0..steps {
            let pf = p.flows.backward.index0(t);
            let gf = s.flows.backward.index0(t);
            let region = fg.index0(t);
            let m = &mut sums[t];
            m.epe += epe(&pf, &gf, None)?.unwrap_or(0.0);
            m.epe_zero += epe(&zero, &gf, None)?.unwrap_or(0.0);
            if let (Some(a), Some(b)) = (epe(&pf, &gf, Some(&region))?, epe(&zero, &gf, Some(&region))?) {
                m.epe_fg += a;
                m.epe_fg_zero += b;
                fg_counts[t] += 1;
            }
            let truth = s.frames.frame(t + 1);
            m.psnr += psnr(&seq.frame(t + 1), &truth)?;
            m.psnr_copy += psnr(&s.frames.frame(0), &truth)?;
            m.ssim += ssim(&seq.frame(t + 1), &truth)?;
            let po = p.occlusions.backward.index0(t);
            m.iou += occlusion_iou(&po, &s.occlusions.backward.index0(t))?;
            m.mean_occ += po.mean() as f64;
        }
    }
    let n = samples.len() as f64;
    let per_step: Vec<StepMetrics> = sums
        .into_iter()
        .zip(fg_counts)
        .enumerate()
        .map(|(t, (m, fgc))| {
            let fgn = fgc.max(1) as f64;
            StepMetrics {
                t: t + 1,
                epe: m.epe / n,
                epe_fg: m.epe_fg / fgn,
                epe_zero: m.epe_zero / n,
                epe_fg_zero: m.epe_fg_zero / fgn,
                psnr: m.psnr / n,
                psnr_copy: m.psnr_copy / n,
                ssim: m.ssim / n,
                iou: m.iou / n,
                mean_occ: m.mean_occ / n,
            }
        })
        .collect();
    let k = per_step.len() as f64;
    let avg = |f: fn(&StepMetrics) -> f64| per_step.iter().map(f).sum::<f64>() / k;
    let mean = StepMetrics {
        t: 0,
        epe: avg(|m| m.epe),
        epe_fg: avg(|m| m.epe_fg),
        epe_zero: avg(|m| m.epe_zero),
        epe_fg_zero: avg(|m| m.epe_fg_zero),
        psnr: avg(|m| m.psnr),
        psnr_copy: avg(|m| m.psnr_copy),
        ssim: avg(|m| m.ssim),
        iou: avg(|m| m.iou),
        mean_occ: avg(|m| m.mean_occ),
    };
    let mut div = 0.0;
    let used = diversity_samples.min(samples.len());
    if draws >= 2 && used > 0 {
        for (i, s) in samples.iter().take(used).enumerate() {
            let label = (model.config.semantic_mode != SemanticMode::None).then_some(&s.label);
            let gens = predict_from_frame(model, &s.frames.frame(0), label, draws, seed.wrapping_add(i as u64))?;
            let flows: Vec<&Tensor<f32>> = gens.iter().map(|g| &g.prediction.flows.backward).collect();
            div += diversity(&flows)?;
        }
        div /= used as f64;
    }
    Ok(MetricsReport {
        samples: samples.len(),
        per_step,
        mean,
        diversity: div,
        diversity_draws: draws,
        mean_flow_magnitude: magnitude / n,
    })
}
