//! Training objectives on the tape.
//!
//! Per-step tensors are laid out `[M, C, H, W]` with `M = N * T`. Every term
//! is a mean over batch, time and space; channel/component L1 norms are
//! summed per pixel first.

use serde::{Deserialize, Serialize};

use crate::config::{KlReduction, LossWeights};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Params, LEAK};
use crate::tensor::{Real, Tensor};
use crate::warp::identity_grid_batch;

/// Bilinearly samples `image` at `x + flow(x)`.
pub fn warp_by<F: Real>(g: &Graph<F>, image: Var, flow: Var) -> Var {
    let s = g.shape(flow);
    let grid = g.constant(identity_grid_batch(s[0], s[2], s[3]));
    g.grid_sample(image, g.add(grid, flow))
}

/// Mean over pixels of `mask * sum_c |x|`.
fn masked_l1<F: Real>(g: &Graph<F>, x: Var, mask: Var) -> Var {
    g.mean(g.mul(g.sum_channels(g.abs(x)), mask))
}

/// Flow-based terms of one prediction, all `[M, ., H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct FlowTerms {
    pub flow_fwd: Var,
    pub flow_bwd: Var,
    pub occ_fwd: Var,
    pub occ_bwd: Var,
}

/// Masked bidirectional photometric loss.
///
/// Forward term: `o^f(x) |I_0(x) - I_t(x + w^f(x))|`; backward term:
/// `o^b(x) |I_t(x) - I_0(x + w^b(x))|`. `i0` is `I_0` repeated per step.
pub fn recon_loss<F: Real>(g: &Graph<F>, i0: Var, it: Var, f: &FlowTerms) -> Var {
    let fwd = g.sub(i0, warp_by(g, it, f.flow_fwd));
    let bwd = g.sub(it, warp_by(g, i0, f.flow_bwd));
    g.add(masked_l1(g, fwd, f.occ_fwd), masked_l1(g, bwd, f.occ_bwd))
}

/// Mean L1 of forward differences along x and y, boundary excluded.
fn smooth_field<F: Real>(g: &Graph<F>, flow: Var) -> Var {
    let s = g.shape(flow);
    let (h, w) = (s[2], s[3]);
    let mut terms = Vec::new();
    if w > 1 {
        let dx = g.sub(g.narrow(flow, 3, 1, w - 1), g.narrow(flow, 3, 0, w - 1));
        terms.push(g.mean(g.sum_channels(g.abs(dx))));
    }
    if h > 1 {
        let dy = g.sub(g.narrow(flow, 2, 1, h - 1), g.narrow(flow, 2, 0, h - 1));
        terms.push(g.mean(g.sum_channels(g.abs(dy))));
    }
    match terms[..] {
        [] => g.constant(Tensor::scalar(F::zero())),
        [a] => a,
        [a, b, ..] => g.add(a, b),
    }
}

pub fn smooth_loss<F: Real>(g: &Graph<F>, flow_fwd: Var, flow_bwd: Var) -> Var {
    g.add(smooth_field(g, flow_fwd), smooth_field(g, flow_bwd))
}

/// Forward-backward consistency: a forward vector followed by the backward
/// vector found at its endpoint should return to the start, so their sum
/// vanishes on non-occluded pixels.
pub fn consistency_loss<F: Real>(g: &Graph<F>, f: &FlowTerms) -> Var {
    let fwd = g.add(f.flow_fwd, warp_by(g, f.flow_bwd, f.flow_fwd));
    let bwd = g.add(f.flow_bwd, warp_by(g, f.flow_fwd, f.flow_bwd));
    g.add(masked_l1(g, fwd, f.occ_fwd), masked_l1(g, bwd, f.occ_bwd))
}

/// `mean(1 - o)` for one direction.
pub fn occlusion_penalty<F: Real>(g: &Graph<F>, occ: Var) -> Var {
    g.mean(g.add_scalar(g.scale(occ, -1.0), 1.0))
}

/// Mean absolute difference of two equally shaped tensors.
pub fn l1_mean<F: Real>(g: &Graph<F>, a: Var, b: Var) -> Var {
    g.mean(g.abs(g.sub(a, b)))
}

/// Closed-form KL of `N(mu, exp(logvar))` against `N(0, I)` for `[N, D]`
/// inputs, averaged over the batch.
pub fn kl_loss<F: Real>(g: &Graph<F>, mu: Var, logvar: Var, reduction: KlReduction) -> Var {
    let s = g.shape(mu);
    let per = g.sub(
        g.add_scalar(g.add(g.square(mu), g.exp(logvar)), -1.0),
        logvar,
    );
    let total = g.sum(per);
    let denom = match reduction {
        KlReduction::Sum => s[0],
        KlReduction::Mean => s.iter().product(),
    };
    g.scale(total, 0.5 / denom.max(1) as f64)
}

/// Feature stack used by the perceptual term.
pub trait FeatureExtractor<F: Real> {
    /// Feature maps of `[M, 3, H, W]` images, one entry per layer.
    fn features(&self, g: &Graph<F>, images: Var) -> Vec<Var>;
}

/// Fixed random-weight convolution stack with five blocks.
#[derive(Clone, Debug)]
pub struct RandomConvFeatures {
    params: Params<f32>,
}

const FEATURE_WIDTHS: [usize; 6] = [3, 8, 8, 16, 16, 16];

impl RandomConvFeatures {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut b = crate::nn::ParamBuilder::new(&mut rng);
        for i in 0..5 {
            b.conv2d(&format!("feat{i}"), FEATURE_WIDTHS[i], FEATURE_WIDTHS[i + 1], 3);
        }
        Self { params: b.finish() }
    }
}

impl<F: Real> FeatureExtractor<F> for RandomConvFeatures {
    fn features(&self, g: &Graph<F>, images: Var) -> Vec<Var> {
        let bound = self.params.cast::<F>().bind(g, false);
        let mut x = images;
        let mut out = Vec::with_capacity(5);
        for i in 0..5 {
            if i > 0 {
                let s = g.shape(x);
                if s[2] >= 2 && s[3] >= 2 {
                    x = g.maxpool2d(x);
                }
            }
            x = g.leaky_relu(bound.conv2d(&format!("feat{i}"), x), LEAK);
            out.push(x);
        }
        out
    }
}

/// Mean over layers of the mean absolute feature difference.
pub fn perceptual_loss<F: Real>(
    g: &Graph<F>,
    extractor: &dyn FeatureExtractor<F>,
    pred: Var,
    target: Var,
) -> Result<Var> {
    let a = extractor.features(g, pred);
    let b = extractor.features(g, target);
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "extractor returned {} and {} layers",
            a.len(),
            b.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&fa, &fb) in a.iter().zip(&b) {
        let (sa, sb) = (g.shape(fa), g.shape(fb));
        if sa != sb {
            return Err(Error::shape(&sa, &sb));
        }
        let d = l1_mean(g, fa, fb);
        total = Some(match total {
            None => d,
            Some(t) => g.add(t, d),
        });
    }
    Ok(g.scale(total.expect("nonempty"), 1.0 / a.len() as f64))
}

/// Unweighted loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub recon: f64,
    pub smooth: f64,
    pub consistency: f64,
    pub pixel: f64,
    pub perceptual: f64,
    pub penalty_fwd: f64,
    pub penalty_bwd: f64,
    pub kl: f64,
}

/// Logged loss record. `l_occ_penalty` sums both directions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_fs: f64,
    pub l_fc: f64,
    pub l_l1_pixel: f64,
    pub l_l1_perceptual: f64,
    pub l_occ_penalty: f64,
    pub l_kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.recon * self.l_r
            + w.smooth * self.l_fs
            + w.consistency * self.l_fc
            + w.l1 * (self.l_l1_pixel + self.l_l1_perceptual)
            + w.occlusion * self.l_occ_penalty
            + w.kl * self.l_kl
    }
}

/// Combines components with the configured weights.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let mut b = LossBreakdown {
        l_r: c.recon,
        l_fs: c.smooth,
        l_fc: c.consistency,
        l_l1_pixel: c.pixel,
        l_l1_perceptual: c.perceptual,
        l_occ_penalty: c.penalty_fwd + c.penalty_bwd,
        l_kl: c.kl,
        total: 0.0,
    };
    b.total = b.weighted_total(w);
    Ok(b)
}

/// Graph-side weighted sum matching [`LossBreakdown::weighted_total`].
pub fn weighted_sum<F: Real>(g: &Graph<F>, terms: &[(f64, Var)]) -> Var {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        if w == 0.0 {
            continue;
        }
        let t = g.scale(v, w);
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t),
        });
    }
    acc.unwrap_or_else(|| g.constant(Tensor::scalar(F::zero())))
}

/// Value-level evaluation of the flow terms for one `[T, ...]` prediction,
/// for analysis outside training.
pub mod eval {
    use super::*;
    use crate::data::{FlowVolume, FrameSequence, OcclusionVolume};

    fn setup(
        g: &Graph<f64>,
        frames: &FrameSequence,
        flows: &FlowVolume,
        occ: &OcclusionVolume,
    ) -> Result<(Var, Var, FlowTerms)> {
        let steps = frames.steps();
        let (h, w) = (frames.height(), frames.width());
        flows.forward.expect_shape(&[steps, 2, h, w])?;
        flows.backward.expect_shape(&[steps, 2, h, w])?;
        occ.forward.expect_shape(&[steps, 1, h, w])?;
        occ.backward.expect_shape(&[steps, 1, h, w])?;
        let v = frames.tensor().cast::<f64>();
        let i0 = v.narrow(0, 0, 1);
        let reps: Vec<&Tensor<f64>> = (0..steps).map(|_| &i0).collect();
        let i0 = g.constant(Tensor::concat(&reps, 0)?);
        let it = g.constant(v.narrow(0, 1, steps));
        let terms = FlowTerms {
            flow_fwd: g.constant(flows.forward.cast()),
            flow_bwd: g.constant(flows.backward.cast()),
            occ_fwd: g.constant(occ.forward.cast()),
            occ_bwd: g.constant(occ.backward.cast()),
        };
        Ok((i0, it, terms))
    }

    pub fn recon(frames: &FrameSequence, flows: &FlowVolume, occ: &OcclusionVolume) -> Result<f64> {
        let g = Graph::new();
        let (i0, it, t) = setup(&g, frames, flows, occ)?;
        Ok(g.value(recon_loss(&g, i0, it, &t)).item())
    }

    pub fn consistency(frames: &FrameSequence, flows: &FlowVolume, occ: &OcclusionVolume) -> Result<f64> {
        let g = Graph::new();
        let (_, _, t) = setup(&g, frames, flows, occ)?;
        Ok(g.value(consistency_loss(&g, &t)).item())
    }

    pub fn smooth(flows: &FlowVolume) -> f64 {
        let g = Graph::new();
        let f = g.constant(flows.forward.cast::<f64>());
        let b = g.constant(flows.backward.cast::<f64>());
        g.value(smooth_loss(&g, f, b)).item()
    }

    /// KL divergence of `N(mu, exp(logvar))` from `N(0, I)`, both `[N, D]`.
    pub fn kl(mu: &Tensor<f32>, logvar: &Tensor<f32>, reduction: KlReduction) -> Result<f64> {
        if mu.shape() != logvar.shape() || mu.ndim() != 2 {
            return Err(Error::ShapeMismatch {
                expected: mu.shape().to_vec(),
                actual: logvar.shape().to_vec(),
            });
        }
        let g = Graph::new();
        let m = g.constant(mu.cast::<f64>());
        let l = g.constant(logvar.cast::<f64>());
        Ok(g.value(kl_loss(&g, m, l, reduction)).item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gradcheck::max_rel_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c<F: Real>(g: &Graph<F>, shape: &[usize], v: f64) -> Var {
        g.constant(Tensor::full(shape, F::lit(v)))
    }

    fn terms(g: &Graph<f64>, fwd: f64, bwd: f64, mask: f64) -> FlowTerms {
        let s = [2, 2, 6, 6];
        let f = Tensor::from_fn(&s, |i| if i / 36 % 2 == 0 { fwd } else { 0.0 });
        let b = Tensor::from_fn(&s, |i| if i / 36 % 2 == 0 { bwd } else { 0.0 });
        FlowTerms {
            flow_fwd: g.constant(f),
            flow_bwd: g.constant(b),
            occ_fwd: c(g, &[2, 1, 6, 6], mask),
            occ_bwd: c(g, &[2, 1, 6, 6], mask),
        }
    }

    #[test]
    fn recon_zero_for_static_scene() {
        let g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = g.constant(Tensor::from_fn(&[2, 3, 6, 6], |_| rng.random()));
        let t = terms(&g, 0.0, 0.0, 1.0);
        assert_eq!(g.value(recon_loss(&g, img, img, &t)).item(), 0.0);
        let t0 = terms(&g, 0.7, -0.2, 0.0);
        let other = c(&g, &[2, 3, 6, 6], 0.3);
        assert_eq!(g.value(recon_loss(&g, img, other, &t0)).item(), 0.0);
    }

    #[test]
    fn smooth_examples() {
        let g = Graph::<f64>::new();
        let constant = c(&g, &[1, 2, 4, 4], 2.5);
        assert_eq!(g.value(smooth_loss(&g, constant, constant)).item(), 0.0);
        let shear = g.constant(Tensor::from_fn(&[1, 2, 4, 4], |i| if i < 16 { (i % 4) as f64 } else { 0.0 }));
        let zero = c(&g, &[1, 2, 4, 4], 0.0);
        assert!((g.value(smooth_loss(&g, shear, zero)).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn consistency_examples() {
        let g = Graph::<f64>::new();
        let inv = terms(&g, 1.5, -1.5, 1.0);
        assert!(g.value(consistency_loss(&g, &inv)).item().abs() < 1e-12);
        // Both fields (c, 0): 2 * |2c| per pixel.
        let same = terms(&g, 0.5, 0.5, 1.0);
        assert!((g.value(consistency_loss(&g, &same)).item() - 2.0).abs() < 1e-12);
        let masked = terms(&g, 0.5, 0.5, 0.0);
        assert_eq!(g.value(consistency_loss(&g, &masked)).item(), 0.0);
    }

    #[test]
    fn penalty_examples() {
        let g = Graph::<f64>::new();
        for (v, want) in [(1.0, 0.0), (0.0, 2.0), (0.5, 1.0)] {
            let o = c(&g, &[2, 1, 3, 3], v);
            let p = g.add(occlusion_penalty(&g, o), occlusion_penalty(&g, o));
            assert_eq!(g.value(p).item(), want);
        }
    }

    #[test]
    fn kl_examples() {
        let g = Graph::<f64>::new();
        let z = c(&g, &[3, 5], 0.0);
        assert_eq!(g.value(kl_loss(&g, z, z, KlReduction::Sum)).item(), 0.0);
        let one = c(&g, &[1, 1], 1.0);
        let zero = c(&g, &[1, 1], 0.0);
        assert_eq!(g.value(kl_loss(&g, one, zero, KlReduction::Sum)).item(), 0.5);
    }

    #[test]
    fn total_formula() {
        let unit = LossComponents {
            recon: 1.0,
            smooth: 1.0,
            consistency: 1.0,
            pixel: 1.0,
            perceptual: 1.0,
            penalty_fwd: 1.0,
            penalty_bwd: 1.0,
            kl: 1.0,
        };
        let b = total_loss(&unit, &LossWeights::default()).unwrap();
        assert!((b.total - 5.3).abs() < 1e-12);
        assert_eq!(total_loss(&LossComponents::default(), &LossWeights::default()).unwrap().total, 0.0);
        let neg = LossWeights {
            smooth: -1.0,
            ..Default::default()
        };
        assert!(total_loss(&unit, &neg).is_err());
    }

    #[test]
    fn perceptual_zero_on_identical() {
        let g = Graph::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = g.constant(Tensor::from_fn(&[2, 3, 16, 16], |_| rng.random()));
        let ext = RandomConvFeatures::new(5);
        let p = perceptual_loss(&g, &ext, x, x).unwrap();
        assert_eq!(g.value(p).item(), 0.0);
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[2, 3, 5, 5], |_| rng.random_range(0.0..1.0));
        let flow = |rng: &mut ChaCha8Rng| {
            Tensor::from_fn(&[2, 2, 5, 5], |_| {
                rng.random_range(-2..2) as f64 + rng.random_range(0.15..0.85)
            })
        };
        let mask = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[2, 1, 5, 5], |_| rng.random_range(0.1..0.9));
        let inputs = [img(&mut rng), img(&mut rng), flow(&mut rng), flow(&mut rng), mask(&mut rng), mask(&mut rng)];
        let err = max_rel_error(&inputs, 1e-6, |g, v| {
            let t = FlowTerms {
                flow_fwd: v[2],
                flow_bwd: v[3],
                occ_fwd: v[4],
                occ_bwd: v[5],
            };
            let r = recon_loss(g, v[0], v[1], &t);
            let c = consistency_loss(g, &t);
            let s = smooth_loss(g, v[2], v[3]);
            g.add(g.add(r, c), s)
        });
        assert!(err < 1e-5, "{err}");
    }
}
