//! Training, checkpoints, inference and the label-to-frame stage.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SemanticMode};
use crate::data::{FrameSequence, LabelMap, Palette, Sample};
use crate::error::{Error, Result};
use crate::flownet::{BatchInputs, FlowNet, FlowPrediction, MotionSource};
use crate::graph::{Graph, Var};
use crate::metrics::{evaluate, MetricsReport};
use crate::losses::{
    consistency_loss, kl_loss, l1_mean, occlusion_penalty, perceptual_loss, recon_loss, smooth_loss, total_loss,
    weighted_sum, FlowTerms, LossBreakdown, LossComponents, RandomConvFeatures,
};
use crate::nn::{Adam, Bound, Params};
use crate::refine::Refiner;
use crate::tensor::Tensor;

/// Label map to first frame.
pub trait I2IStage {
    /// Returns `[3, H, W]` in `[0, 1]`.
    fn translate(&self, label: &LabelMap) -> Result<Tensor<f32>>;
}

/// Paints every pixel with its class colour.
#[derive(Clone, Debug)]
pub struct ColorizeBaseline {
    pub palette: Palette,
}

impl I2IStage for ColorizeBaseline {
    fn translate(&self, label: &LabelMap) -> Result<Tensor<f32>> {
        colorize_baseline(label, &self.palette)
    }
}

pub fn colorize_baseline(label: &LabelMap, palette: &Palette) -> Result<Tensor<f32>> {
    let plane = label.height() * label.width();
    let mut out = vec![0.0f32; 3 * plane];
    for (p, &c) in label.classes().iter().enumerate() {
        let color = palette
            .color(c)
            .ok_or_else(|| Error::InvalidInput(format!("palette has no colour for class {c}")))?;
        for k in 0..3 {
            out[k * plane + p] = color[k];
        }
    }
    Tensor::from_vec(&[3, label.height(), label.width()], out)
}

/// Network description plus parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub net: FlowNet,
    pub refiner: Refiner,
    pub params: Params<f32>,
}

/// RNG stream ids derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_NOISE: u64 = 2;

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl Model {
    pub fn init(config: &RunConfig) -> Result<Self> {
        let net = FlowNet::new(config)?;
        let refiner = Refiner::new(config.base_width);
        let mut rng = seeded(config.seed, STREAM_INIT);
        let mut params = net.init_params(&mut rng);
        if config.use_flow {
            params.extend(refiner.init_params(&mut rng));
        }
        Ok(Self {
            config: config.clone(),
            net,
            refiner,
            params,
        })
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        let c = &self.config;
        if s.steps() != c.steps || s.frames.height() != c.height || s.frames.width() != c.width {
            return Err(Error::InvalidInput(format!(
                "sample T={} {}x{} does not match config T={} {}x{}",
                s.steps(),
                s.frames.height(),
                s.frames.width(),
                c.steps,
                c.height,
                c.width
            )));
        }
        if s.label.num_classes() != c.num_classes {
            return Err(Error::InvalidInput("sample class count does not match config".into()));
        }
        Ok(())
    }
}

/// Graph nodes of one forward pass.
pub struct Forward {
    pub total: Var,
    pub recon: Option<Var>,
    pub smooth: Option<Var>,
    pub consistency: Option<Var>,
    pub penalty_fwd: Option<Var>,
    pub penalty_bwd: Option<Var>,
    pub pixel: Var,
    pub perceptual: Var,
    pub kl: Var,
    /// Composed frames `[N * T, 3, H, W]`.
    pub frames: Var,
}

/// Stacked training tensors.
pub struct Batch {
    pub inputs: BatchInputs,
    /// `I_0` repeated per step, `[N * T, 3, H, W]`.
    pub i0_steps: Tensor<f32>,
    /// `I_1..I_T`, `[N * T, 3, H, W]`.
    pub targets: Tensor<f32>,
}

impl Batch {
    pub fn new(model: &Model, samples: &[&Sample]) -> Result<Self> {
        for s in samples {
            model.check_sample(s)?;
        }
        let c = &model.config;
        let (n, t, h, w) = (samples.len(), c.steps, c.height, c.width);
        let i0: Vec<Tensor<f32>> = samples.iter().map(|s| s.frames.frame(0)).collect();
        let i0r: Vec<&Tensor<f32>> = i0.iter().collect();
        let labels: Vec<Option<&LabelMap>> = samples.iter().map(|s| Some(&s.label)).collect();
        let seqs: Vec<&FrameSequence> = samples.iter().map(|s| &s.frames).collect();
        let inputs = BatchInputs::new(&model.net, &i0r, &labels, Some(&seqs))?;
        let mut reps = Vec::with_capacity(n * t);
        let mut targets = Vec::with_capacity(n * t);
        for (s, f0) in samples.iter().zip(&i0) {
            for k in 1..=t {
                reps.push(f0.clone());
                targets.push(s.frames.frame(k));
            }
        }
        let stack = |v: &[Tensor<f32>]| -> Result<Tensor<f32>> {
            let r: Vec<&Tensor<f32>> = v.iter().collect();
            Tensor::concat(&r, 0)?.reshape(&[n * t, 3, h, w])
        };
        Ok(Self {
            inputs,
            i0_steps: stack(&reps)?,
            targets: stack(&targets)?,
        })
    }
}

/// Builds the full objective on `g`. `eps [N, motion_dim]` is the
/// reparameterisation noise.
pub fn forward(
    model: &Model,
    p: &Bound<f32>,
    batch: &Batch,
    eps: Tensor<f32>,
    features: &RandomConvFeatures,
) -> Result<Forward> {
    let g = p.graph();
    let net = &model.net;
    let cfg = &model.config;
    let i0 = g.constant(batch.inputs.i0.clone());
    let heat = batch.inputs.heat.clone().map(|h| g.constant(h));
    let seq = g.constant(
        batch
            .inputs
            .sequence
            .clone()
            .ok_or_else(|| Error::InvalidInput("training batch needs frames".into()))?,
    );
    let img = net.encode_image(p, i0, heat)?;
    let (mu, logvar) = net.encode_motion(p, seq, heat)?;
    let z = FlowNet::reparameterize(g, mu, logvar, eps);
    let d = net.decode(p, img.z, z, &img.skips)?;
    let i0s = g.constant(batch.i0_steps.clone());
    let it = g.constant(batch.targets.clone());
    let w = &cfg.weights;
    let kl = kl_loss(g, mu, logvar, cfg.kl_reduction);
    let (frames, flow_terms) = match d.frames {
        None => {
            let t = FlowTerms {
                flow_fwd: d.flow_fwd,
                flow_bwd: d.flow_bwd,
                occ_fwd: d.occ_fwd,
                occ_bwd: d.occ_bwd,
            };
            let frames = model.refiner.compose(p, i0s, d.flow_bwd, d.occ_bwd)?;
            (frames, Some(t))
        }
        Some(direct) => (g.clamp(g.add(i0s, direct), 0.0, 1.0), None),
    };
    let pixel = l1_mean(g, frames, it);
    let perceptual = perceptual_loss(g, features, frames, it)?;
    let mut terms = Vec::new();
    let mut fwd = Forward {
        total: pixel,
        recon: None,
        smooth: None,
        consistency: None,
        penalty_fwd: None,
        penalty_bwd: None,
        pixel,
        perceptual,
        kl,
        frames,
    };
    if let Some(t) = flow_terms {
        let recon = recon_loss(g, i0s, it, &t);
        let smooth = smooth_loss(g, t.flow_fwd, t.flow_bwd);
        let cons = consistency_loss(g, &t);
        let pf = occlusion_penalty(g, t.occ_fwd);
        let pb = occlusion_penalty(g, t.occ_bwd);
        terms.extend([
            (w.recon, recon),
            (w.smooth, smooth),
            (w.consistency, cons),
            (w.occlusion, pf),
            (w.occlusion, pb),
        ]);
        fwd.recon = Some(recon);
        fwd.smooth = Some(smooth);
        fwd.consistency = Some(cons);
        fwd.penalty_fwd = Some(pf);
        fwd.penalty_bwd = Some(pb);
    }
    terms.extend([(w.l1, pixel), (w.l1, perceptual), (w.kl, kl)]);
    fwd.total = weighted_sum(g, &terms);
    Ok(fwd)
}

impl Forward {
    pub fn components(&self, g: &Graph<f32>) -> LossComponents {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item() as f64);
        LossComponents {
            recon: v(self.recon),
            smooth: v(self.smooth),
            consistency: v(self.consistency),
            pixel: v(Some(self.pixel)),
            perceptual: v(Some(self.perceptual)),
            penalty_fwd: v(self.penalty_fwd),
            penalty_bwd: v(self.penalty_bwd),
            kl: v(Some(self.kl)),
        }
    }
}

/// One JSON-lines log record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            Ok(serde_json::from_str(&l)?)
        })
        .collect()
}

/// Mutable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
    pub data_rng: ChaCha8Rng,
    pub noise_rng: ChaCha8Rng,
    pub features: RandomConvFeatures,
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    step: u64,
    reason: &'a str,
    sample_indices: &'a [usize],
    components: LossComponents,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let model = Model::init(config)?;
        Ok(Self {
            adam: Adam::new(config.adam),
            step: 0,
            data_rng: seeded(config.seed, STREAM_DATA),
            noise_rng: seeded(config.seed, STREAM_NOISE),
            features: RandomConvFeatures::new(config.perceptual_seed),
            model,
        })
    }

    /// Draws a batch (with replacement), runs one optimisation step and
    /// returns the losses measured before the update.
    ///
    /// On a non-finite loss or gradient nothing is updated; a JSON dump of
    /// the batch is written to `dump_dir` if given.
    pub fn train_step(&mut self, samples: &[Sample], dump_dir: Option<&Path>) -> Result<LossBreakdown> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("empty dataset".into()));
        }
        let bs = self.model.config.batch_size;
        let idx: Vec<usize> = (0..bs).map(|_| self.data_rng.random_range(0..samples.len())).collect();
        let picked: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let batch = Batch::new(&self.model, &picked)?;
        let eps = FlowNet::noise(bs, self.model.config.motion_dim, &mut self.noise_rng);
        let g = Graph::<f32>::new();
        let p = self.model.params.bind(&g, true);
        let fwd = forward(&self.model, &p, &batch, eps, &self.features)?;
        let comps = fwd.components(&g);
        let breakdown = total_loss(&comps, &self.model.config.weights)?;
        let mut reason = None;
        if !breakdown.total.is_finite() || !g.value(fwd.total).all_finite() {
            reason = Some("non-finite loss");
        }
        let grads = if reason.is_none() {
            let mut raw = g.backward(fwd.total);
            let grads = p.gradients(&mut raw);
            if grads.iter().any(|(_, t)| !t.all_finite()) {
                reason = Some("non-finite gradient");
            }
            Some(grads)
        } else {
            None
        };
        if let Some(reason) = reason {
            if let Some(dir) = dump_dir {
                let dump = DivergenceDump {
                    step: self.step,
                    reason,
                    sample_indices: &idx,
                    components: comps,
                };
                let path = dir.join(format!("diverged_step_{}.json", self.step));
                fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(&path, e))?;
            }
            return Err(Error::Diverged {
                step: self.step,
                reason: format!("{reason}; components {comps:?}; batch {idx:?}"),
            });
        }
        self.adam.update(&mut self.model.params, &grads.expect("checked"));
        self.step += 1;
        Ok(breakdown)
    }
}

// ---- checkpoints -----------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"VFCK";
const CKPT_VERSION: u32 = 1;

fn put_rng(buf: &mut Vec<u8>, r: &ChaCha8Rng) {
    buf.extend_from_slice(&r.get_seed());
    buf.extend_from_slice(&r.get_stream().to_le_bytes());
    buf.extend_from_slice(&r.get_word_pos().to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(t.ndim() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn rng(&mut self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self.take(32)?.try_into().expect("32");
        let stream = self.u64()?;
        let pos = u128::from_le_bytes(self.take(16)?.try_into().expect("16"));
        let mut r = ChaCha8Rng::from_seed(seed);
        r.set_stream(stream);
        r.set_word_pos(pos);
        Ok(r)
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u16()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        let ndim = self.u8()? as usize;
        let shape = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
            .collect();
        Ok((name, Tensor::from_vec(&shape, data)?))
    }
}

impl Trainer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let text = self.model.config.to_text();
        buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.adam.step.to_le_bytes());
        put_rng(&mut buf, &self.data_rng);
        put_rng(&mut buf, &self.noise_rng);
        let groups = [("params/", &self.model.params), ("adam_m/", &self.adam.m), ("adam_v/", &self.adam.v)];
        let count: usize = groups.iter().map(|(_, p)| p.len()).sum();
        buf.extend_from_slice(&(count as u32).to_le_bytes());
        for (prefix, group) in groups {
            for (name, t) in group.iter() {
                put_tensor(&mut buf, &format!("{prefix}{name}"), t);
            }
        }
        buf
    }

    /// Restores a trainer. When `expect` is given, the stored config must
    /// produce identically shaped parameters.
    pub fn from_bytes(bytes: &[u8], expect: Option<&RunConfig>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Checkpoint("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("config is not utf-8".into()))?;
        let config = RunConfig::from_text(text)?;
        let mut trainer = Trainer::new(&config)?;
        if let Some(want) = expect {
            let reference = Model::init(want)?;
            trainer.model.params.check_compatible(&reference.params)?;
        }
        trainer.step = r.u64()?;
        trainer.adam.step = r.u64()?;
        trainer.data_rng = r.rng()?;
        trainer.noise_rng = r.rng()?;
        let count = r.u32()? as usize;
        let mut params = Params::new();
        let mut m = Params::new();
        let mut v = Params::new();
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            if let Some(n) = name.strip_prefix("params/") {
                params.insert(n, t);
            } else if let Some(n) = name.strip_prefix("adam_m/") {
                m.insert(n, t);
            } else if let Some(n) = name.strip_prefix("adam_v/") {
                v.insert(n, t);
            } else {
                return Err(Error::Checkpoint(format!("unknown tensor group in {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        params.check_compatible(&trainer.model.params)?;
        if let Some(want) = expect {
            params.check_compatible(&Model::init(want)?.params)?;
        }
        trainer.model.params = params;
        trainer.adam.m = m;
        trainer.adam.v = v;
        Ok(trainer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expect: Option<&RunConfig>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_bytes(&bytes, expect)
    }
}

/// Loads only the model from a checkpoint.
pub fn load_model(path: &Path, expect: Option<&RunConfig>) -> Result<Model> {
    Ok(Trainer::load(path, expect)?.model)
}

// ---- training loop ---------------------------------------------------------

pub const LOG_FILE: &str = "loss_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint.ckpt";

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoint to resume from.
    pub resume: Option<PathBuf>,
    /// Print a progress line every this many steps (0 disables).
    pub progress_every: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub last: Option<LossBreakdown>,
    pub trainer: Trainer,
}

/// The final checkpoint in `dir` if present, else the periodic one with
/// the highest step.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let last = dir.join(FINAL_CHECKPOINT);
    if last.exists() {
        return Some(last);
    }
    fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let step: u64 = name.strip_prefix("checkpoint_")?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((step, e.path()))
        })
        .max_by_key(|(step, _)| *step)
        .map(|(_, p)| p)
}

/// Trains up to `config.train_steps`, appending to the loss log and writing
/// a checkpoint every `checkpoint_every` steps and at the end.
pub fn train(config: &RunConfig, samples: &[Sample], out_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer = match &opts.resume {
        Some(p) => Trainer::load(p, Some(config))?,
        None => Trainer::new(config)?,
    };
    // Runtime-only settings may differ from the checkpoint.
    trainer.model.config.train_steps = config.train_steps;
    trainer.model.config.checkpoint_every = config.checkpoint_every;
    let log_path = out_dir.join(LOG_FILE);
    let kept = match &opts.resume {
        // Records past the checkpoint came from an interrupted run and are
        // about to be produced again.
        Some(_) if log_path.exists() => read_log(&log_path)?
            .into_iter()
            .filter(|r| r.step < trainer.step)
            .collect(),
        _ => Vec::new(),
    };
    let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    for rec in &kept {
        writeln!(log, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(&log_path, e))?;
    }
    let mut last = None;
    while trainer.step < config.train_steps {
        let step = trainer.step;
        let b = trainer.train_step(samples, Some(out_dir))?;
        let rec = LogRecord { step, loss: b };
        writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
        if opts.progress_every > 0 && step % opts.progress_every == 0 {
            eprintln!("step {step} total {:.5} recon {:.5} kl {:.3}", b.total, b.l_r, b.l_kl);
        }
        last = Some(b);
        if config.checkpoint_every > 0 && trainer.step % config.checkpoint_every == 0 {
            trainer.save(&out_dir.join(format!("checkpoint_{:06}.ckpt", trainer.step)))?;
        }
    }
    let checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.save(&checkpoint)?;
    Ok(TrainOutcome {
        checkpoint,
        log: log_path,
        last,
        trainer,
    })
}

// ---- inference -------------------------------------------------------------

/// Model outputs for a batch of samples, all on plain tensors.
#[derive(Clone, Debug)]
pub struct BatchPrediction {
    pub predictions: Vec<FlowPrediction>,
    /// Composed sequences including `I_0`.
    pub sequences: Vec<FrameSequence>,
}

/// Runs the model on `i0` frames with optional labels and motion source.
/// `frames` must be given for posterior modes and is ignored for the prior.
pub fn infer<R: Rng>(
    model: &Model,
    i0: &[&Tensor<f32>],
    labels: &[Option<&LabelMap>],
    frames: Option<&[&FrameSequence]>,
    posterior_sample: bool,
    rng: &mut R,
) -> Result<BatchPrediction> {
    let net = &model.net;
    let cfg = &model.config;
    let n = i0.len();
    let inputs = BatchInputs::new(net, i0, labels, frames)?;
    let g = Graph::<f32>::new();
    let p = model.params.bind(&g, false);
    let i0v = g.constant(inputs.i0.clone());
    let heat = inputs.heat.map(|h| g.constant(h));
    let img = net.encode_image(&p, i0v, heat)?;
    let (z, mu, lv) = match inputs.sequence {
        None => (g.constant(FlowNet::noise(n, cfg.motion_dim, rng)), None, None),
        Some(seq) => {
            let (mu, lv) = net.encode_motion(&p, g.constant(seq), heat)?;
            let z = if posterior_sample {
                FlowNet::reparameterize(&g, mu, lv, FlowNet::noise(n, cfg.motion_dim, rng))
            } else {
                mu
            };
            (z, Some(mu), Some(lv))
        }
    };
    let d = net.decode(&p, img.z, z, &img.skips)?;
    let (t, h, w) = (cfg.steps, cfg.height, cfg.width);
    let mut reps = Vec::with_capacity(n * t);
    for f in i0 {
        for _ in 0..t {
            reps.push(*f);
        }
    }
    let i0s = g.constant(Tensor::concat(&reps, 0)?.reshape(&[n * t, 3, h, w])?);
    let composed = match d.frames {
        None => model.refiner.compose(&p, i0s, d.flow_bwd, d.occ_bwd)?,
        Some(direct) => g.clamp(g.add(i0s, direct), 0.0, 1.0),
    };
    let part = |v: Var, k: usize| {
        let val = g.value(v);
        let per = val.numel() / n;
        let c = per / (t * h * w);
        Tensor::from_vec(&[t, c, h, w], val.data()[k * per..(k + 1) * per].to_vec()).expect("shape")
    };
    let rows = |v: Var, k: usize| {
        let val = g.value(v);
        let d = val.dim(1);
        val.data()[k * d..(k + 1) * d].to_vec()
    };
    let mut predictions = Vec::with_capacity(n);
    let mut sequences = Vec::with_capacity(n);
    for k in 0..n {
        predictions.push(FlowPrediction {
            flows: crate::data::FlowVolume::new(part(d.flow_fwd, k), part(d.flow_bwd, k))?,
            occlusions: crate::data::OcclusionVolume::new(part(d.occ_fwd, k), part(d.occ_bwd, k))?,
            latent: crate::data::LatentCode {
                content: rows(img.z, k),
                motion: rows(z, k),
                mu: mu.map(|m| rows(m, k)),
                logvar: lv.map(|l| rows(l, k)),
            },
            frames: d.frames.map(|f| part(f, k)),
        });
        let first = i0[k].clone().reshape(&[1, 3, h, w])?;
        let rest = part(composed, k);
        sequences.push(FrameSequence::new(Tensor::concat(&[&first, &rest], 0)?)?);
    }
    Ok(BatchPrediction { predictions, sequences })
}

/// Posterior-mean predictions for dataset samples, in chunks of `chunk`.
pub fn predict_posterior(model: &Model, samples: &[Sample], chunk: usize) -> Result<BatchPrediction> {
    let mut out = BatchPrediction {
        predictions: Vec::new(),
        sequences: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mode = model.config.semantic_mode;
    for part in samples.chunks(chunk.max(1)) {
        let i0: Vec<Tensor<f32>> = part.iter().map(|s| s.frames.frame(0)).collect();
        let i0r: Vec<&Tensor<f32>> = i0.iter().collect();
        let labels: Vec<Option<&LabelMap>> = part
            .iter()
            .map(|s| (mode != SemanticMode::None).then_some(&s.label))
            .collect();
        let seqs: Vec<&FrameSequence> = part.iter().map(|s| &s.frames).collect();
        let b = infer(model, &i0r, &labels, Some(&seqs), false, &mut rng)?;
        out.predictions.extend(b.predictions);
        out.sequences.extend(b.sequences);
    }
    Ok(out)
}

/// One generated video.
#[derive(Clone, Debug)]
pub struct Generated {
    pub frames: FrameSequence,
    pub prediction: FlowPrediction,
}

/// Prior samples from a given first frame. Sample `k` uses the `k`-th
/// draw of a generator seeded with `seed`.
pub fn predict_from_frame(
    model: &Model,
    i0: &Tensor<f32>,
    label: Option<&LabelMap>,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Generated>> {
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label = if model.config.semantic_mode == SemanticMode::None {
        None
    } else {
        Some(label.ok_or_else(|| Error::InvalidInput("semantic mode needs a label map".into()))?)
    };
    let i0s: Vec<&Tensor<f32>> = vec![i0; n_samples];
    let labels = vec![label; n_samples];
    let b = infer(model, &i0s, &labels, None, false, &mut rng)?;
    Ok(b
        .sequences
        .into_iter()
        .zip(b.predictions)
        .map(|(frames, prediction)| Generated { frames, prediction })
        .collect())
}

/// Label map to videos through an image stage and prior samples.
pub fn generate(
    model: &Model,
    label: &LabelMap,
    i2i: &dyn I2IStage,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Generated>> {
    let i0 = i2i.translate(label)?;
    i0.expect_shape(&[3, model.config.height, model.config.width])?;
    predict_from_frame(model, &i0, Some(label), n_samples, seed)
}

/// Single-sample prediction with an explicit motion source.
pub fn predict_single<R: Rng>(
    model: &Model,
    i0: &Tensor<f32>,
    label: Option<&LabelMap>,
    source: MotionSource<'_>,
    rng: &mut R,
) -> Result<FlowPrediction> {
    crate::flownet::predict(&model.net, &model.params, i0, label, source, rng)
}

// ---- ablations -------------------------------------------------------------

/// Model variants compared under identical seeds and data order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Direct frame regression, no warping; split conditioning.
    NoFlow,
    NoSemantic,
    ConcatSemantic,
    SplitSemantic,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::NoFlow, Self::NoSemantic, Self::ConcatSemantic, Self::SplitSemantic];

    pub fn name(self) -> &'static str {
        match self {
            Self::NoFlow => "no_flow",
            Self::NoSemantic => "no_semantic",
            Self::ConcatSemantic => "concat_semantic",
            Self::SplitSemantic => "split_semantic",
        }
    }

    /// `config` with the variant's switches applied.
    pub fn apply(self, config: &RunConfig) -> RunConfig {
        let mut c = config.clone();
        let (mode, flow) = match self {
            Self::NoFlow => (SemanticMode::Split, false),
            Self::NoSemantic => (SemanticMode::None, true),
            Self::ConcatSemantic => (SemanticMode::Concat, true),
            Self::SplitSemantic => (SemanticMode::Split, true),
        };
        c.semantic_mode = mode;
        c.use_flow = flow;
        c
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::InvalidInput(format!("unknown ablation variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: Variant,
    pub seed: u64,
    pub train_steps: u64,
    pub final_loss: Option<LossBreakdown>,
    pub report: MetricsReport,
}

pub const REPORT_FILE: &str = "report.json";

/// Trains `variant` into `out_dir` and evaluates it on `test`.
///
/// Checkpoints already in `out_dir` are resumed rather than retrained, so
/// an interrupted sweep picks up where it stopped.
pub fn run_ablation(
    variant: Variant,
    config: &RunConfig,
    train_set: &[Sample],
    test_set: &[Sample],
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<AblationResult> {
    let cfg = variant.apply(config);
    cfg.validate()?;
    let mut opts = opts.clone();
    if opts.resume.is_none() {
        opts.resume = latest_checkpoint(out_dir);
    }
    let outcome = train(&cfg, train_set, out_dir, &opts)?;
    let final_loss = match outcome.last {
        Some(b) => Some(b),
        None => read_log(&outcome.log)?.last().map(|r| r.loss),
    };
    let report = evaluate(&outcome.trainer.model, test_set, 8, 8, cfg.seed)?;
    let result = AblationResult {
        variant,
        seed: cfg.seed,
        train_steps: cfg.train_steps,
        final_loss,
        report,
    };
    let path = out_dir.join(REPORT_FILE);
    fs::write(&path, serde_json::to_string_pretty(&result)?).map_err(|e| Error::io(&path, e))?;
    Ok(result)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_samples, DatasetSpec, SceneFamily};

    fn tiny() -> RunConfig {
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

    fn data() -> Vec<Sample> {
        generate_samples(&DatasetSpec {
            family: SceneFamily::Translate1,
            samples: 4,
            seed: 1,
            height: 32,
            width: 32,
            steps: 2,
        })
        .unwrap()
    }

    #[test]
    fn checkpoint_resume_is_bit_identical() {
        let samples = data();
        let cfg = tiny();
        let mut a = Trainer::new(&cfg).unwrap();
        a.train_step(&samples, None).unwrap();
        let mut b = Trainer::from_bytes(&a.to_bytes(), Some(&cfg)).unwrap();
        let la = a.train_step(&samples, None).unwrap();
        let lb = b.train_step(&samples, None).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn untrained_generation_copies_first_frame() {
        let samples = data();
        let model = Model::init(&tiny()).unwrap();
        let out = generate(
            &model,
            &samples[0].label,
            &ColorizeBaseline {
                palette: Palette::standard(4),
            },
            2,
            3,
        )
        .unwrap();
        let i0 = out[0].frames.frame(0);
        for t in 1..=2 {
            assert!(out[0].frames.frame(t).max_abs_diff(&i0) <= 1e-6);
        }
    }
}
