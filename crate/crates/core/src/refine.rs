//! Post-processing U-Net and frame composition.
//!
//! The refiner sees the masked warp and the backward mask, and predicts a
//! correction added to the unmasked warp. Its last layer starts at zero so
//! an untrained refiner returns the warp itself.

use rand::Rng;

use crate::data::FrameSequence;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::warp_by;
use crate::nn::{Bound, ParamBuilder, Params, LEAK};
use crate::tensor::{Real, Tensor};

/// Input channels: masked warped frame and backward mask.
pub const REFINER_INPUTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Refiner {
    pub base_width: usize,
}

fn lrelu<F: Real>(g: &Graph<F>, x: Var) -> Var {
    g.leaky_relu(x, LEAK)
}

impl Refiner {
    pub fn new(base_width: usize) -> Self {
        Self { base_width }
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Params<f32> {
        let w = self.base_width;
        let mut b = ParamBuilder::new(rng);
        b.conv2d("refine.e0", REFINER_INPUTS, w, 3);
        b.conv2d("refine.e1", w, 2 * w, 3);
        b.conv2d("refine.e2", 2 * w, 2 * w, 3);
        b.conv2d("refine.d1", 4 * w, w, 3);
        b.conv2d("refine.d0", 2 * w, w, 3);
        b.weight("refine.out", &[3, w, 1, 1], true);
        b.bias("refine.out", 3);
        b.finish()
    }

    /// Correction for `input [M, 4, H, W]`; `H` and `W` must be divisible
    /// by 4.
    pub fn correction<F: Real>(&self, p: &Bound<F>, input: Var) -> Var {
        let g = p.graph();
        let s0 = lrelu(g, p.conv2d("refine.e0", input));
        let s1 = lrelu(g, p.conv2d("refine.e1", g.maxpool2d(s0)));
        let bottom = lrelu(g, p.conv2d("refine.e2", g.maxpool2d(s1)));
        let u1 = lrelu(g, p.conv2d("refine.d1", g.concat(&[g.upsample2x(bottom), s1], 1)));
        let u0 = lrelu(g, p.conv2d("refine.d0", g.concat(&[g.upsample2x(u1), s0], 1)));
        p.conv2d("refine.out", u0)
    }

    /// Composes frames for every step at once.
    ///
    /// `i0 [M, 3, H, W]` (repeated per step), `flow_bwd [M, 2, H, W]`,
    /// `occ_bwd [M, 1, H, W]`. Returns `[M, 3, H, W]` in `[0, 1]`.
    pub fn compose<F: Real>(&self, p: &Bound<F>, i0: Var, flow_bwd: Var, occ_bwd: Var) -> Result<Var> {
        let g = p.graph();
        let (si, sf, so) = (g.shape(i0), g.shape(flow_bwd), g.shape(occ_bwd));
        if si.len() != 4 || si[1] != 3 || sf != [si[0], 2, si[2], si[3]] || so != [si[0], 1, si[2], si[3]] {
            return Err(Error::InvalidInput(format!(
                "compose shapes: frame {si:?}, flow {sf:?}, mask {so:?}"
            )));
        }
        if si[2] % 4 != 0 || si[3] % 4 != 0 {
            return Err(Error::InvalidInput(format!("refiner needs H, W divisible by 4, got {si:?}")));
        }
        let warped = warp_by(g, i0, flow_bwd);
        let masked = g.mul_channels(warped, occ_bwd);
        let corr = self.correction(p, g.concat(&[masked, occ_bwd], 1));
        Ok(g.clamp(g.add(warped, corr), 0.0, 1.0))
    }
}

/// Single-step composition on plain tensors: `i0 [3, H, W]`,
/// `flow [2, H, W]`, `mask [1, H, W]`.
pub fn compose_frame(
    refiner: &Refiner,
    params: &Params<f32>,
    i0: &Tensor<f32>,
    flow: &Tensor<f32>,
    mask: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let (h, w) = (i0.dim(1), i0.dim(2));
    let g = Graph::<f32>::new();
    let p = params.bind(&g, false);
    let i0 = g.constant(i0.clone().reshape(&[1, 3, h, w])?);
    let flow = g.constant(flow.clone().reshape(&[1, 2, h, w])?);
    let mask = g.constant(mask.clone().reshape(&[1, 1, h, w])?);
    let out = refiner.compose(&p, i0, flow, mask)?;
    (*g.value(out)).clone().reshape(&[3, h, w])
}

/// `I_0` followed by the composed frames for `flows [T, 2, H, W]` and
/// `masks [T, 1, H, W]`.
pub fn compose_sequence(
    refiner: &Refiner,
    params: &Params<f32>,
    i0: &Tensor<f32>,
    flows: &Tensor<f32>,
    masks: &Tensor<f32>,
) -> Result<FrameSequence> {
    let steps = flows.dim(0);
    let (h, w) = (i0.dim(1), i0.dim(2));
    i0.expect_shape(&[3, h, w])?;
    flows.expect_shape(&[steps, 2, h, w])?;
    masks.expect_shape(&[steps, 1, h, w])?;
    let g = Graph::<f32>::new();
    let p = params.bind(&g, false);
    let reps: Vec<&Tensor<f32>> = (0..steps).map(|_| i0).collect();
    let i0r = g.constant(Tensor::concat(&reps, 0)?.reshape(&[steps, 3, h, w])?);
    let out = refiner.compose(&p, i0r, g.constant(flows.clone()), g.constant(masks.clone()))?;
    let first = i0.clone().reshape(&[1, 3, h, w])?;
    FrameSequence::new(Tensor::concat(&[&first, &g.value(out)], 0)?)
}
