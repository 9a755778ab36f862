//! Backward warping: identity grids, clamped bilinear sampling and
//! occlusion masking.
//!
//! Coordinates are absolute pixel positions, `x` along columns and `y`
//! along rows. Sampling positions outside the image are clamped to the
//! border, which keeps the operator differentiable everywhere except on the
//! clamp boundary itself.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Absolute sampling coordinates, shape `[2, H, W]` with channel 0 = x.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid<F: Real = f32> {
    coords: Tensor<F>,
}

impl<F: Real> SamplingGrid<F> {
    pub fn new(coords: Tensor<F>) -> Result<Self> {
        if coords.ndim() != 3 || coords.dim(0) != 2 {
            return Err(Error::InvalidInput(format!(
                "sampling grid must be [2, H, W], got {:?}",
                coords.shape()
            )));
        }
        if coords.data().iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("NaN in sampling grid".into()));
        }
        Ok(Self { coords })
    }

    /// `identity_grid + flow` for a `[2, H, W]` displacement field.
    pub fn from_flow(flow: &Tensor<F>) -> Result<Self> {
        if flow.ndim() != 3 || flow.dim(0) != 2 {
            return Err(Error::InvalidInput(format!(
                "flow must be [2, H, W], got {:?}",
                flow.shape()
            )));
        }
        let id = identity_grid::<F>(flow.dim(1), flow.dim(2));
        Self::new(id.coords.zip_map(flow, |a, b| a + b))
    }

    pub fn coords(&self) -> &Tensor<F> {
        &self.coords
    }

    pub fn height(&self) -> usize {
        self.coords.dim(1)
    }

    pub fn width(&self) -> usize {
        self.coords.dim(2)
    }
}

/// `coords[:, i, j] = (j, i)`.
pub fn identity_grid<F: Real>(height: usize, width: usize) -> SamplingGrid<F> {
    let plane = height * width;
    let coords = Tensor::from_fn(&[2, height, width], |idx| {
        let (c, p) = (idx / plane, idx % plane);
        if c == 0 {
            F::lit((p % width) as f64)
        } else {
            F::lit((p / width) as f64)
        }
    });
    SamplingGrid { coords }
}

/// Batched identity grid `[n, 2, H, W]`.
pub fn identity_grid_batch<F: Real>(n: usize, height: usize, width: usize) -> Tensor<F> {
    let one = identity_grid::<F>(height, width).coords;
    let parts: Vec<_> = (0..n).map(|_| &one).collect();
    Tensor::stack(&parts).expect("equal shapes")
}

/// Bilinear interpolation of `image` (`[C, H, W]`) at every grid position.
pub fn bilinear_sample<F: Real>(image: &Tensor<F>, grid: &SamplingGrid<F>) -> Result<Tensor<F>> {
    if image.ndim() != 3 {
        return Err(Error::InvalidInput(format!(
            "image must be [C, H, W], got {:?}",
            image.shape()
        )));
    }
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let (ho, wo) = (grid.height(), grid.width());
    let mut out = vec![F::zero(); c * ho * wo];
    sample_forward(
        image.data(),
        grid.coords.data(),
        SampleDims {
            n: 1,
            c,
            h,
            w,
            ho,
            wo,
        },
        &mut out,
    );
    Tensor::from_vec(&[c, ho, wo], out)
}

/// `bilinear_sample(frame, identity_grid + flow)`.
pub fn warp_frame<F: Real>(frame: &Tensor<F>, flow: &Tensor<F>) -> Result<Tensor<F>> {
    if frame.ndim() != 3 || flow.ndim() != 3 || frame.shape()[1..] != flow.shape()[1..] {
        return Err(Error::shape(frame.shape(), flow.shape()));
    }
    bilinear_sample(frame, &SamplingGrid::from_flow(flow)?)
}

/// Multiplies a `[C, H, W]` frame by a `[1, H, W]` mask with values in `[0, 1]`.
pub fn apply_occlusion<F: Real>(frame: &Tensor<F>, mask: &Tensor<F>) -> Result<Tensor<F>> {
    if frame.ndim() != 3 || mask.shape() != [1, frame.dim(1), frame.dim(2)] {
        return Err(Error::shape(&[1, frame.dim(1), frame.dim(2)], mask.shape()));
    }
    if mask
        .data()
        .iter()
        .any(|&m| !(m >= F::zero() && m <= F::one()))
    {
        return Err(Error::InvalidInput("occlusion mask outside [0, 1]".into()));
    }
    let plane = frame.dim(1) * frame.dim(2);
    let m = mask.data();
    Ok(Tensor::from_fn(frame.shape(), |i| frame.data()[i] * m[i % plane]))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct SampleDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Clamped source position along one axis of extent `len`: the two tap
/// indices, the fractional weight of the upper tap, and whether the
/// position lies inside the differentiable range.
#[inline]
fn taps<F: Real>(pos: F, len: usize) -> (usize, usize, F, bool) {
    let hi = F::lit((len - 1) as f64);
    let inside = pos >= F::zero() && pos <= hi;
    let p = pos.max(F::zero()).min(hi);
    let i0 = p.floor().to_usize().unwrap_or(0).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, p - F::lit(i0 as f64), inside)
}

/// `out[n, c, i, j] = bilinear(img[n, c], coords[n, :, i, j])`.
pub(crate) fn sample_forward<F: Real>(img: &[F], coords: &[F], d: SampleDims, out: &mut [F]) {
    let (plane_in, plane_out) = (d.h * d.w, d.ho * d.wo);
    for n in 0..d.n {
        let cx = &coords[(2 * n) * plane_out..(2 * n + 1) * plane_out];
        let cy = &coords[(2 * n + 1) * plane_out..(2 * n + 2) * plane_out];
        for p in 0..plane_out {
            let (x0, x1, fx, _) = taps(cx[p], d.w);
            let (y0, y1, fy, _) = taps(cy[p], d.h);
            let w00 = (F::one() - fx) * (F::one() - fy);
            let w01 = fx * (F::one() - fy);
            let w10 = (F::one() - fx) * fy;
            let w11 = fx * fy;
            for c in 0..d.c {
                let base = (n * d.c + c) * plane_in;
                let src = &img[base..base + plane_in];
                out[(n * d.c + c) * plane_out + p] = w00 * src[y0 * d.w + x0]
                    + w01 * src[y0 * d.w + x1]
                    + w10 * src[y1 * d.w + x0]
                    + w11 * src[y1 * d.w + x1];
            }
        }
    }
}

/// Accumulates gradients of [`sample_forward`] into `grad_img` and/or
/// `grad_coords`.
pub(crate) fn sample_backward<F: Real>(
    img: &[F],
    coords: &[F],
    d: SampleDims,
    grad_out: &[F],
    mut grad_img: Option<&mut [F]>,
    mut grad_coords: Option<&mut [F]>,
) {
    let (plane_in, plane_out) = (d.h * d.w, d.ho * d.wo);
    for n in 0..d.n {
        let cbase = 2 * n * plane_out;
        for p in 0..plane_out {
            let (x0, x1, fx, in_x) = taps(coords[cbase + p], d.w);
            let (y0, y1, fy, in_y) = taps(coords[cbase + plane_out + p], d.h);
            let w00 = (F::one() - fx) * (F::one() - fy);
            let w01 = fx * (F::one() - fy);
            let w10 = (F::one() - fx) * fy;
            let w11 = fx * fy;
            let (mut gx, mut gy) = (F::zero(), F::zero());
            for c in 0..d.c {
                let base = (n * d.c + c) * plane_in;
                let g = grad_out[(n * d.c + c) * plane_out + p];
                if let Some(gi) = grad_img.as_deref_mut() {
                    gi[base + y0 * d.w + x0] += w00 * g;
                    gi[base + y0 * d.w + x1] += w01 * g;
                    gi[base + y1 * d.w + x0] += w10 * g;
                    gi[base + y1 * d.w + x1] += w11 * g;
                }
                if grad_coords.is_some() {
                    let src = &img[base..base + plane_in];
                    let (v00, v01) = (src[y0 * d.w + x0], src[y0 * d.w + x1]);
                    let (v10, v11) = (src[y1 * d.w + x0], src[y1 * d.w + x1]);
                    gx += g * ((F::one() - fy) * (v01 - v00) + fy * (v11 - v10));
                    gy += g * ((F::one() - fx) * (v10 - v00) + fx * (v11 - v01));
                }
            }
            if let Some(gc) = grad_coords.as_deref_mut() {
                if in_x {
                    gc[cbase + p] += gx;
                }
                if in_y {
                    gc[cbase + plane_out + p] += gy;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: bilinear interpolation written as a sum of
    /// separable tent kernels over every source pixel.
    fn tent_sample(image: &Tensor<f64>, grid: &SamplingGrid<f64>) -> Tensor<f64> {
        let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
        let (ho, wo) = (grid.height(), grid.width());
        let tent = |d: f64| (1.0 - d.abs()).max(0.0);
        let mut out = Tensor::zeros(&[c, ho, wo]);
        for i in 0..ho {
            for j in 0..wo {
                let x = grid.coords().data()[i * wo + j].clamp(0.0, (w - 1) as f64);
                let y = grid.coords().data()[ho * wo + i * wo + j].clamp(0.0, (h - 1) as f64);
                for ch in 0..c {
                    let mut acc = 0.0;
                    for si in 0..h {
                        for sj in 0..w {
                            acc += image.data()[(ch * h + si) * w + sj]
                                * tent(x - sj as f64)
                                * tent(y - si as f64);
                        }
                    }
                    out.data_mut()[(ch * ho + i) * wo + j] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_grid_layout() {
        let g = identity_grid::<f32>(2, 2);
        assert_eq!(g.coords().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let g = identity_grid::<f32>(1, 3);
        assert_eq!(&g.coords().data()[..3], &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn integer_coordinates_copy_pixels() {
        let img = Tensor::<f32>::from_fn(&[1, 3, 3], |i| i as f32);
        let grid = SamplingGrid::new(
            Tensor::from_vec(&[2, 1, 2], vec![2.0, 0.0, 1.0, 2.0]).unwrap(),
        )
        .unwrap();
        let out = bilinear_sample(&img, &grid).unwrap();
        assert_eq!(out.data(), &[5.0, 6.0]);
    }

    #[test]
    fn midpoint_on_ramp() {
        let img = Tensor::<f32>::from_vec(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let grid = SamplingGrid::new(Tensor::from_vec(&[2, 1, 1], vec![0.5, 0.0]).unwrap()).unwrap();
        assert_eq!(bilinear_sample(&img, &grid).unwrap().data(), &[0.5]);
    }

    #[test]
    fn random_grid_matches_tent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let img = Tensor::from_fn(&[3, 16, 16], |_| rng.random::<f64>());
            let coords = Tensor::from_fn(&[2, 16, 16], |_| rng.random_range(-3.0..19.0));
            let grid = SamplingGrid::new(coords).unwrap();
            let got = bilinear_sample(&img, &grid).unwrap();
            assert!(got.max_abs_diff(&tent_sample(&img, &grid)) < 1e-12);
        }
    }

    #[test]
    fn nan_grid_rejected() {
        let coords = Tensor::<f32>::from_vec(&[2, 1, 1], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(SamplingGrid::new(coords), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_flow_is_identity() {
        let img = Tensor::<f32>::from_fn(&[3, 5, 7], |i| (i as f32 * 0.37).sin());
        let out = warp_frame(&img, &Tensor::zeros(&[2, 5, 7])).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn constant_flow_shifts_right_with_clamped_column() {
        let img = Tensor::<f32>::from_fn(&[1, 2, 4], |i| i as f32);
        let mut flow = Tensor::zeros(&[2, 2, 4]);
        flow.data_mut()[..8].fill(-1.0);
        let out = warp_frame(&img, &flow).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 1.0, 2.0, 4.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn warp_shape_mismatch() {
        let img = Tensor::<f32>::zeros(&[3, 4, 4]);
        assert!(warp_frame(&img, &Tensor::zeros(&[2, 4, 5])).is_err());
    }

    #[test]
    fn occlusion_masking() {
        let frame = Tensor::<f32>::full(&[3, 2, 2], 0.8);
        let ones = apply_occlusion(&frame, &Tensor::ones(&[1, 2, 2])).unwrap();
        assert_eq!(ones, frame);
        let zeros = apply_occlusion(&frame, &Tensor::zeros(&[1, 2, 2])).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
        let half = apply_occlusion(&frame, &Tensor::full(&[1, 2, 2], 0.5)).unwrap();
        assert!(half.data().iter().all(|&v| (v - 0.4).abs() < 1e-7));
        assert!(apply_occlusion(&frame, &Tensor::full(&[1, 2, 2], 1.5)).is_err());
    }
}
