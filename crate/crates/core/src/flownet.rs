//! Conditional VAE predicting bidirectional flow and occlusion volumes.
//!
//! Image encoder: four conv levels (full, 1/2, 1/4, 1/8 resolution) whose
//! outputs double as decoder skips, then a dense layer to `z_I0`.
//! Sequence encoder: frames stacked on channels, five conv + pool levels
//! and a bias-free dense layer to `(mu, logvar)`.
//! Decoder: dense seed upsampled to 1/8 resolution, three 3D-conv blocks
//! that double time (capped at T), the first two also doubling space, a
//! (1,3,3) head at 1/2 resolution and a final bilinear 2x upsampling of the
//! head outputs.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{RunConfig, SemanticMode};
use crate::data::{split_fg_bg, FlowVolume, FrameSequence, LabelMap, LatentCode, OcclusionVolume};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, ParamBuilder, Params, LEAK};
use crate::tensor::{Real, Tensor};

pub const LOGVAR_MIN: f64 = -20.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// Channel count of the flow head: forward flow, backward flow, forward and
/// backward occlusion logits.
pub const FLOW_HEAD: usize = 6;

/// Flow head outputs are multiplied by `max(H, W) / FLOW_SCALE_DIVISOR`.
pub const FLOW_SCALE_DIVISOR: f64 = 16.0;

/// Architecture description derived from a [`RunConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct FlowNet {
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub fg_classes: Vec<u8>,
    pub content_dim: usize,
    pub motion_dim: usize,
    pub fg_motion_dim: usize,
    pub base_width: usize,
    pub mode: SemanticMode,
    pub use_flow: bool,
}

/// Image-encoder outputs.
#[derive(Clone, Debug)]
pub struct ImageFeatures {
    pub z: Var,
    /// Skips at 1/2, 1/4 and 1/8 resolution.
    pub skips: [Var; 3],
}

/// Decoder outputs, per step, flattened to `[N * T, ., H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    pub flow_fwd: Var,
    pub flow_bwd: Var,
    pub occ_fwd: Var,
    pub occ_bwd: Var,
    /// Directly regressed frames of the flow-free variant.
    pub frames: Option<Var>,
}

fn lrelu<F: Real>(g: &Graph<F>, x: Var) -> Var {
    g.leaky_relu(x, LEAK)
}

impl FlowNet {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            steps: cfg.steps,
            height: cfg.height,
            width: cfg.width,
            num_classes: cfg.num_classes,
            fg_classes: cfg.fg_classes.clone(),
            content_dim: cfg.content_dim,
            motion_dim: cfg.motion_dim,
            fg_motion_dim: cfg.fg_motion_dim,
            base_width: cfg.base_width,
            mode: cfg.semantic_mode,
            use_flow: cfg.use_flow,
        })
    }

    fn heat_channels(&self) -> usize {
        if self.mode == SemanticMode::None {
            0
        } else {
            self.num_classes
        }
    }

    pub fn image_channels(&self) -> usize {
        3 + self.heat_channels()
    }

    /// `(name, input channels, latent dim)` of each sequence encoder.
    pub fn motion_encoders(&self) -> Vec<(&'static str, usize, usize)> {
        let frames = 3 * (self.steps + 1);
        match self.mode {
            SemanticMode::None => vec![("flow.mot", frames, self.motion_dim)],
            SemanticMode::Concat => vec![("flow.mot", frames + self.num_classes, self.motion_dim)],
            SemanticMode::Split => {
                let n_fg = self.fg_classes.len();
                vec![
                    ("flow.mot_fg", frames + n_fg, self.fg_motion_dim),
                    ("flow.mot_bg", frames + self.num_classes - n_fg, self.motion_dim - self.fg_motion_dim),
                ]
            }
        }
    }

    /// Pixels per unit of head output, so displacements of a few pixels
    /// are reachable with small head weights.
    pub fn flow_scale(&self) -> f64 {
        self.height.max(self.width) as f64 / FLOW_SCALE_DIVISOR
    }

    fn head_channels(&self) -> usize {
        if self.use_flow {
            FLOW_HEAD
        } else {
            3
        }
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Params<f32> {
        let w = self.base_width;
        let (h16, w16) = (self.height / 16, self.width / 16);
        let (h32, w32) = (self.height / 32, self.width / 32);
        let mut b = ParamBuilder::new(rng);
        b.conv2d("flow.img.c0", self.image_channels(), w, 3);
        b.conv2d("flow.img.c1", w, 2 * w, 3);
        b.conv2d("flow.img.c2", 2 * w, 2 * w, 3);
        b.conv2d("flow.img.c3", 2 * w, 4 * w, 3);
        b.linear("flow.img.fc", 4 * w * h16 * w16, self.content_dim, true);
        for (name, cin, dim) in self.motion_encoders() {
            let widths = [cin, w, 2 * w, 4 * w, 4 * w, 4 * w];
            for i in 0..5 {
                b.conv2d(&format!("{name}.c{i}"), widths[i], widths[i + 1], 3);
            }
            b.linear(&format!("{name}.fc"), 4 * w * h32 * w32, 2 * dim, false);
        }
        b.linear("flow.dec.fc", self.content_dim + self.motion_dim, 4 * w * h16 * w16, true);
        b.conv3d("flow.dec.b0", 8 * w, 4 * w, 3, 3);
        b.conv3d("flow.dec.b1", 6 * w, 2 * w, 3, 3);
        b.conv3d("flow.dec.b2", 4 * w, w, 3, 3);
        b.weight("flow.dec.head", &[self.head_channels(), w, 1, 3, 3], true);
        b.bias("flow.dec.head", self.head_channels());
        b.finish()
    }

    fn check_spatial(&self, shape: &[usize], channels: usize, what: &str) -> Result<()> {
        if shape.len() != 4 || shape[1] != channels || shape[2] != self.height || shape[3] != self.width {
            return Err(Error::InvalidInput(format!(
                "{what}: expected [N, {channels}, {}, {}], got {shape:?}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// `i0 [N, 3, H, W]`; `heat [N, C, H, W]` iff the semantic mode uses it.
    pub fn encode_image<F: Real>(&self, p: &Bound<F>, i0: Var, heat: Option<Var>) -> Result<ImageFeatures> {
        let g = p.graph();
        self.check_spatial(&g.shape(i0), 3, "image")?;
        let x = match (self.mode, heat) {
            (SemanticMode::None, None) => i0,
            (SemanticMode::None, Some(_)) => {
                return Err(Error::InvalidInput("heatmaps given but semantic mode is none".into()))
            }
            (_, Some(h)) => {
                self.check_spatial(&g.shape(h), self.num_classes, "heatmaps")?;
                g.concat(&[i0, h], 1)
            }
            (_, None) => return Err(Error::InvalidInput("semantic mode needs heatmaps".into())),
        };
        let f0 = lrelu(g, p.conv2d("flow.img.c0", x));
        let f1 = lrelu(g, p.conv2d("flow.img.c1", g.maxpool2d(f0)));
        let f2 = lrelu(g, p.conv2d("flow.img.c2", g.maxpool2d(f1)));
        let f3 = lrelu(g, p.conv2d("flow.img.c3", g.maxpool2d(f2)));
        let bottom = g.maxpool2d(f3);
        let n = g.shape(bottom)[0];
        let flat = g.reshape(bottom, &[n, g.value(bottom).numel() / n]);
        let z = p.linear("flow.img.fc", flat);
        Ok(ImageFeatures { z, skips: [f1, f2, f3] })
    }

    fn sequence_encoder<F: Real>(&self, p: &Bound<F>, name: &str, x: Var) -> (Var, Var) {
        let g = p.graph();
        let mut h = x;
        for i in 0..5 {
            h = g.maxpool2d(lrelu(g, p.conv2d(&format!("{name}.c{i}"), h)));
        }
        let n = g.shape(h)[0];
        let flat = g.reshape(h, &[n, g.value(h).numel() / n]);
        let out = p.linear(&format!("{name}.fc"), flat);
        let dim = g.shape(out)[1] / 2;
        let mu = g.narrow(out, 1, 0, dim);
        let logvar = g.clamp(g.narrow(out, 1, dim, dim), LOGVAR_MIN, LOGVAR_MAX);
        (mu, logvar)
    }

    /// `frames [N, (T+1)*3, H, W]` (frames stacked on channels); heatmaps as
    /// for [`FlowNet::encode_image`]. Returns `(mu, logvar)`, `[N, motion_dim]`.
    pub fn encode_motion<F: Real>(&self, p: &Bound<F>, frames: Var, heat: Option<Var>) -> Result<(Var, Var)> {
        let g = p.graph();
        let s = g.shape(frames);
        if s.len() != 4 || s[1] % 3 != 0 || s[1] / 3 != self.steps + 1 {
            return Err(Error::InvalidInput(format!(
                "sequence encoder expects {} stacked frames, got shape {s:?}",
                self.steps + 1
            )));
        }
        self.check_spatial(&s, 3 * (self.steps + 1), "sequence")?;
        match self.mode {
            SemanticMode::None => {
                if heat.is_some() {
                    return Err(Error::InvalidInput("heatmaps given but semantic mode is none".into()));
                }
                Ok(self.sequence_encoder(p, "flow.mot", frames))
            }
            SemanticMode::Concat => {
                let h = heat.ok_or_else(|| Error::InvalidInput("concat mode needs heatmaps".into()))?;
                self.check_spatial(&g.shape(h), self.num_classes, "heatmaps")?;
                Ok(self.sequence_encoder(p, "flow.mot", g.concat(&[frames, h], 1)))
            }
            SemanticMode::Split => {
                let h = heat.ok_or_else(|| Error::InvalidInput("split mode needs heatmaps".into()))?;
                self.check_spatial(&g.shape(h), self.num_classes, "heatmaps")?;
                let (fg, bg) = self.split_heat(g, h)?;
                let (mf, lf) = self.sequence_encoder(p, "flow.mot_fg", g.concat(&[frames, fg], 1));
                let (mb, lb) = self.sequence_encoder(p, "flow.mot_bg", g.concat(&[frames, bg], 1));
                Ok((g.concat(&[mf, mb], 1), g.concat(&[lf, lb], 1)))
            }
        }
    }

    fn split_heat<F: Real>(&self, g: &Graph<F>, heat: Var) -> Result<(Var, Var)> {
        // Validate the partition once on the first sample's channels.
        let first = g.value(heat).index0(0);
        split_fg_bg(&first, &self.fg_classes)?;
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        for c in 0..self.num_classes {
            let ch = g.narrow(heat, 1, c, 1);
            if self.fg_classes.contains(&(c as u8)) {
                fg.push(ch);
            } else {
                bg.push(ch);
            }
        }
        Ok((g.concat(&fg, 1), g.concat(&bg, 1)))
    }

    /// `z = mu + exp(logvar / 2) * eps` with `eps [N, D]` supplied.
    pub fn reparameterize<F: Real>(g: &Graph<F>, mu: Var, logvar: Var, eps: Tensor<F>) -> Var {
        let std = g.exp(g.scale(logvar, 0.5));
        g.add(mu, g.mul(std, g.constant(eps)))
    }

    /// Standard-normal noise `[n, dim]`.
    pub fn noise<F: Real, R: Rng>(n: usize, dim: usize, rng: &mut R) -> Tensor<F> {
        Tensor::from_fn(&[n, dim], |_| {
            let v: f64 = StandardNormal.sample(rng);
            F::lit(v)
        })
    }

    pub fn decode<F: Real>(&self, p: &Bound<F>, z_content: Var, z_motion: Var, skips: &[Var; 3]) -> Result<Decoded> {
        let g = p.graph();
        let (sc, sm) = (g.shape(z_content), g.shape(z_motion));
        if sc.len() != 2 || sm.len() != 2 || sc[1] != self.content_dim || sm[1] != self.motion_dim || sc[0] != sm[0] {
            return Err(Error::InvalidInput(format!(
                "latent shapes {sc:?} and {sm:?} do not match dims {} and {}",
                self.content_dim, self.motion_dim
            )));
        }
        let n = sc[0];
        let w = self.base_width;
        let (h16, w16) = (self.height / 16, self.width / 16);
        let z = g.concat(&[z_content, z_motion], 1);
        let seed = lrelu(g, p.linear("flow.dec.fc", z));
        let mut x = g.upsample2x(g.reshape(seed, &[n, 4 * w, 1, h16, w16]));
        let mut time = 1;
        for (i, &skip) in skips.iter().rev().enumerate() {
            let rep = g.repeat_time(skip, time);
            x = lrelu(g, p.conv3d(&format!("flow.dec.b{i}"), g.concat(&[x, rep], 1)));
            let next = (2 * time).min(self.steps);
            x = g.resize_axis(x, 2, next);
            if i < 2 {
                x = g.upsample2x(x);
            }
            time = next;
        }
        x = g.resize_axis(x, 2, self.steps);
        let head = g.upsample2x(p.conv3d("flow.dec.head", x));
        let c = self.head_channels();
        let per_step = g.reshape(g.swap_axes12(head), &[n * self.steps, c, self.height, self.width]);
        if self.use_flow {
            Ok(Decoded {
                flow_fwd: g.scale(g.narrow(per_step, 1, 0, 2), self.flow_scale()),
                flow_bwd: g.scale(g.narrow(per_step, 1, 2, 2), self.flow_scale()),
                occ_fwd: g.sigmoid(g.narrow(per_step, 1, 4, 1)),
                occ_bwd: g.sigmoid(g.narrow(per_step, 1, 5, 1)),
                frames: None,
            })
        } else {
            let zeros2 = g.constant(Tensor::zeros(&[n * self.steps, 2, self.height, self.width]));
            let halves = g.constant(Tensor::full(&[n * self.steps, 1, self.height, self.width], F::lit(0.5)));
            Ok(Decoded {
                flow_fwd: zeros2,
                flow_bwd: zeros2,
                occ_fwd: halves,
                occ_bwd: halves,
                frames: Some(per_step),
            })
        }
    }
}

/// Where the motion code comes from at prediction time.
#[derive(Clone, Copy, Debug)]
pub enum MotionSource<'a> {
    /// Posterior mean given the full sequence.
    PosteriorMean(&'a FrameSequence),
    /// Posterior sample given the full sequence.
    PosteriorSample(&'a FrameSequence),
    /// Standard-normal prior sample.
    Prior,
}

/// Flow, occlusion and latent outputs for a single sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPrediction {
    pub flows: FlowVolume,
    pub occlusions: OcclusionVolume,
    pub latent: LatentCode,
    /// Regressed frames `[T, 3, H, W]` of the flow-free variant.
    pub frames: Option<Tensor<f32>>,
}

/// Stacks per-sample inputs into batch tensors for the networks.
pub struct BatchInputs {
    /// `[N, 3, H, W]`.
    pub i0: Tensor<f32>,
    /// `[N, C, H, W]` when the mode uses heatmaps.
    pub heat: Option<Tensor<f32>>,
    /// `[N, (T+1)*3, H, W]`.
    pub sequence: Option<Tensor<f32>>,
}

impl BatchInputs {
    pub fn new(net: &FlowNet, i0: &[&Tensor<f32>], labels: &[Option<&LabelMap>], frames: Option<&[&FrameSequence]>) -> Result<Self> {
        let n = i0.len();
        let (h, w) = (net.height, net.width);
        for f in i0 {
            f.expect_shape(&[3, h, w])?;
        }
        let i0 = Tensor::concat(i0, 0)?.reshape(&[n, 3, h, w])?;
        let heat = if net.mode == SemanticMode::None {
            None
        } else {
            let maps = labels
                .iter()
                .map(|l| {
                    let l = l.ok_or_else(|| Error::InvalidInput("semantic mode needs a label map".into()))?;
                    if l.num_classes() != net.num_classes || l.height() != h || l.width() != w {
                        return Err(Error::InvalidInput("label map does not match config".into()));
                    }
                    Ok(l.one_hot::<f32>())
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Tensor<f32>> = maps.iter().collect();
            Some(Tensor::concat(&refs, 0)?.reshape(&[n, net.num_classes, h, w])?)
        };
        let sequence = match frames {
            None => None,
            Some(seqs) => {
                for s in seqs {
                    if s.steps() != net.steps {
                        return Err(Error::InvalidInput(format!(
                            "sequence has T={}, config T={}",
                            s.steps(),
                            net.steps
                        )));
                    }
                }
                let refs: Vec<&Tensor<f32>> = seqs.iter().map(|s| s.tensor()).collect();
                let c = 3 * (net.steps + 1);
                Some(Tensor::concat(&refs, 0)?.reshape(&[n, c, h, w])?)
            }
        };
        Ok(Self { i0, heat, sequence })
    }
}

/// Runs the model without gradients on a single sample.
pub fn predict<R: Rng>(
    net: &FlowNet,
    params: &Params<f32>,
    i0: &Tensor<f32>,
    label: Option<&LabelMap>,
    source: MotionSource<'_>,
    rng: &mut R,
) -> Result<FlowPrediction> {
    let frames_vec;
    let frames = match source {
        MotionSource::PosteriorMean(v) | MotionSource::PosteriorSample(v) => {
            frames_vec = [v];
            Some(&frames_vec[..])
        }
        MotionSource::Prior => None,
    };
    let inputs = BatchInputs::new(net, &[i0], &[label], frames)?;
    let g = Graph::<f32>::new();
    let p = params.bind(&g, false);
    let i0v = g.constant(inputs.i0);
    let heat = inputs.heat.map(|h| g.constant(h));
    let img = net.encode_image(&p, i0v, heat)?;
    let (z_m, mu, logvar) = match source {
        MotionSource::Prior => {
            let z = g.constant(FlowNet::noise(1, net.motion_dim, rng));
            (z, None, None)
        }
        MotionSource::PosteriorMean(_) | MotionSource::PosteriorSample(_) => {
            let seq = g.constant(inputs.sequence.expect("posterior has frames"));
            let (mu, lv) = net.encode_motion(&p, seq, heat)?;
            let z = if matches!(source, MotionSource::PosteriorSample(_)) {
                FlowNet::reparameterize(&g, mu, lv, FlowNet::noise(1, net.motion_dim, rng))
            } else {
                mu
            };
            (z, Some(mu), Some(lv))
        }
    };
    let d = net.decode(&p, img.z, z_m, &img.skips)?;
    let vec_of = |v: Var| g.value(v).data().to_vec();
    let latent = LatentCode {
        content: vec_of(img.z),
        motion: vec_of(z_m),
        mu: mu.map(vec_of),
        logvar: logvar.map(vec_of),
    };
    let take = |v: Var| (*g.value(v)).clone();
    Ok(FlowPrediction {
        flows: FlowVolume::new(take(d.flow_fwd), take(d.flow_bwd))?,
        occlusions: OcclusionVolume::new(take(d.occ_fwd), take(d.occ_bwd))?,
        latent,
        frames: d.frames.map(take),
    })
}
