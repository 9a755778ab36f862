//! Same-padded, stride-1 convolutions lowered to GEMM via im2col.
//!
//! 2D convolution is the `T = 1`, `kt = 1` case of the 3D kernel.

use super::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.kt * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.t * self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.kt == 1 && self.kh == 1 && self.kw == 1
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k` with
/// padding `pad`, so that `out + k - pad` stays in `[0, len)`.
#[inline]
fn valid(len: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(len);
    (lo, hi.max(lo))
}

fn im2col<F: Real>(x: &[F], g: Geom, col: &mut [F]) {
    let (pt, ph, pw) = (g.kt / 2, g.kh / 2, g.kw / 2);
    let (plane, vol) = (g.h * g.w, g.t * g.h * g.w);
    col.fill(F::zero());
    let mut row = 0;
    for c in 0..g.c {
        let src = &x[c * vol..(c + 1) * vol];
        for dt in 0..g.kt {
            let (t_lo, t_hi) = valid(g.t, dt, pt);
            for dy in 0..g.kh {
                let (y_lo, y_hi) = valid(g.h, dy, ph);
                for dx in 0..g.kw {
                    let (x_lo, x_hi) = valid(g.w, dx, pw);
                    let dst = &mut col[row * vol..(row + 1) * vol];
                    for t in t_lo..t_hi {
                        let st = t + dt - pt;
                        for y in y_lo..y_hi {
                            let sy = y + dy - ph;
                            let d0 = t * plane + y * g.w;
                            let s0 = st * plane + sy * g.w;
                            dst[d0 + x_lo..d0 + x_hi].copy_from_slice(
                                &src[s0 + x_lo + dx - pw..s0 + x_hi + dx - pw],
                            );
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<F: Real>(col: &[F], g: Geom, x: &mut [F]) {
    let (pt, ph, pw) = (g.kt / 2, g.kh / 2, g.kw / 2);
    let (plane, vol) = (g.h * g.w, g.t * g.h * g.w);
    let mut row = 0;
    for c in 0..g.c {
        let dst = &mut x[c * vol..(c + 1) * vol];
        for dt in 0..g.kt {
            let (t_lo, t_hi) = valid(g.t, dt, pt);
            for dy in 0..g.kh {
                let (y_lo, y_hi) = valid(g.h, dy, ph);
                for dx in 0..g.kw {
                    let (x_lo, x_hi) = valid(g.w, dx, pw);
                    let src = &col[row * vol..(row + 1) * vol];
                    for t in t_lo..t_hi {
                        let st = t + dt - pt;
                        for y in y_lo..y_hi {
                            let sy = y + dy - ph;
                            let s0 = t * plane + y * g.w;
                            let d0 = st * plane + sy * g.w;
                            for (d, &v) in dst[d0 + x_lo + dx - pw..d0 + x_hi + dx - pw]
                                .iter_mut()
                                .zip(&src[s0 + x_lo..s0 + x_hi])
                            {
                                *d += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl<F: Real> Graph<F> {
    /// `x [N, C, T, H, W]`, `w [O, C, kt, kh, kw]` (odd kernel extents),
    /// optional `b [O]`; output `[N, O, T, H, W]`.
    pub fn conv3d(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let xs = vx.shape().to_vec();
        let ws = vw.shape().to_vec();
        assert_eq!(xs.len(), 5, "conv3d input must be 5D, got {xs:?}");
        assert_eq!(ws.len(), 5, "conv3d weight must be 5D, got {ws:?}");
        assert_eq!(ws[1], xs[1], "conv3d channel mismatch: {ws:?} vs {xs:?}");
        assert!(ws[2] % 2 == 1 && ws[3] % 2 == 1 && ws[4] % 2 == 1);
        let (n, o) = (xs[0], ws[0]);
        let g = Geom {
            c: xs[1],
            t: xs[2],
            h: xs[3],
            w: xs[4],
            kt: ws[2],
            kh: ws[3],
            kw: ws[4],
        };
        let (k, p) = (g.rows(), g.cols());
        let in_vol = g.c * p;
        let mut out = vec![F::zero(); n * o * p];
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![F::zero(); k * p]
        };
        for i in 0..n {
            let xi = &vx.data()[i * in_vol..(i + 1) * in_vol];
            let cols: &[F] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, g, &mut col);
                &col
            };
            F::gemm(
                o,
                k,
                p,
                F::one(),
                vw.data(),
                false,
                cols,
                false,
                F::zero(),
                &mut out[i * o * p..(i + 1) * o * p],
            );
        }
        if let Some(b) = b {
            let vb = self.value(b);
            for i in 0..n {
                for (oc, &bias) in vb.data().iter().enumerate() {
                    for y in &mut out[(i * o + oc) * p..(i * o + oc + 1) * p] {
                        *y += bias;
                    }
                }
            }
        }
        let value =
            Tensor::from_vec(&[n, o, g.t, g.h, g.w], out).expect("conv3d output shape");
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(value, &parents, move |bk| {
            let (vx, vw, gout) = (&bk.inputs[0], &bk.inputs[1], bk.grad.data());
            let mut gx = bk.needs[0].then(|| vec![F::zero(); vx.numel()]);
            let mut gw = bk.needs[1].then(|| vec![F::zero(); vw.numel()]);
            let mut col = vec![F::zero(); if g.is_pointwise() { 0 } else { k * p }];
            let mut dcol = vec![F::zero(); if gx.is_some() { k * p } else { 0 }];
            for i in 0..n {
                let go = &gout[i * o * p..(i + 1) * o * p];
                let xi = &vx.data()[i * in_vol..(i + 1) * in_vol];
                if let Some(gw) = gw.as_mut() {
                    let cols: &[F] = if g.is_pointwise() {
                        xi
                    } else {
                        im2col(xi, g, &mut col);
                        &col
                    };
                    F::gemm(o, p, k, F::one(), go, false, cols, true, F::one(), gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let gxi = &mut gx[i * in_vol..(i + 1) * in_vol];
                    if g.is_pointwise() {
                        F::gemm(k, o, p, F::one(), vw.data(), true, go, false, F::zero(), gxi);
                    } else {
                        F::gemm(k, o, p, F::one(), vw.data(), true, go, false, F::zero(), &mut dcol);
                        col2im(&dcol, g, gxi);
                    }
                }
            }
            let mut grads = vec![
                gx.map(|d| Tensor::from_vec(vx.shape(), d).expect("shape")),
                gw.map(|d| Tensor::from_vec(vw.shape(), d).expect("shape")),
            ];
            if bk.inputs.len() == 3 {
                grads.push(bk.needs[2].then(|| {
                    let mut gb = vec![F::zero(); o];
                    for i in 0..n {
                        for (oc, acc) in gb.iter_mut().enumerate() {
                            *acc += gout[(i * o + oc) * p..(i * o + oc + 1) * p]
                                .iter()
                                .copied()
                                .sum::<F>();
                        }
                    }
                    Tensor::from_vec(&[o], gb).expect("shape")
                }));
            }
            grads
        })
    }

    /// `x [N, C, H, W]`, `w [O, C, k, k]`; output `[N, O, H, W]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs.len(), 4, "conv2d input must be 4D, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be 4D, got {ws:?}");
        let x5 = self.reshape(x, &[xs[0], xs[1], 1, xs[2], xs[3]]);
        let w5 = self.reshape(w, &[ws[0], ws[1], 1, ws[2], ws[3]]);
        let y = self.conv3d(x5, w5, b);
        self.reshape(y, &[xs[0], ws[0], xs[2], xs[3]])
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::max_rel_error;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
        let (n, c, t, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4));
        let (o, kt, kh, kw) = (w.dim(0), w.dim(2), w.dim(3), w.dim(4));
        let at = |a: &Tensor<f64>, i: [usize; 5]| {
            let s = a.shape();
            a.data()[(((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]) * s[4] + i[4]]
        };
        Tensor::from_fn(&[n, o, t, h, wd], |idx| {
            let xx = idx % wd;
            let yy = idx / wd % h;
            let tt = idx / (wd * h) % t;
            let oc = idx / (wd * h * t) % o;
            let ni = idx / (wd * h * t * o);
            let mut acc = 0.0;
            for ci in 0..c {
                for a in 0..kt {
                    for b in 0..kh {
                        for d in 0..kw {
                            let st = tt as isize + a as isize - (kt / 2) as isize;
                            let sy = yy as isize + b as isize - (kh / 2) as isize;
                            let sx = xx as isize + d as isize - (kw / 2) as isize;
                            if st < 0 || sy < 0 || sx < 0 {
                                continue;
                            }
                            let (st, sy, sx) = (st as usize, sy as usize, sx as usize);
                            if st >= t || sy >= h || sx >= wd {
                                continue;
                            }
                            acc += at(x, [ni, ci, st, sy, sx]) * at(w, [oc, ci, a, b, d]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv3d_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (kt, kh) in [(3, 3), (1, 3), (1, 1), (3, 1)] {
            let x = Tensor::from_fn(&[2, 3, 4, 5, 6], |_| rng.random_range(-1.0..1.0));
            let w = Tensor::from_fn(&[2, 3, kt, kh, kh], |_| rng.random_range(-1.0..1.0));
            let g = Graph::new();
            let (vx, vw) = (g.constant(x.clone()), g.constant(w.clone()));
            let y = g.conv3d(vx, vw, None);
            assert!(g.value(y).max_abs_diff(&naive_conv3d(&x, &w)) < 1e-12);
        }
    }

    #[test]
    fn conv3d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::from_fn(&[2, 2, 3, 4, 3], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn(&[3, 2, 3, 3, 3], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn(&[3], |_| rng.random_range(-1.0..1.0));
        let err = max_rel_error(&[x, w, b], 1e-5, |g, v| {
            g.sum(g.square(g.conv3d(v[0], v[1], Some(v[2]))))
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv2d_pointwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn(&[2, 3, 1, 1], |_| rng.random_range(-1.0..1.0));
        let err = max_rel_error(&[x, w], 1e-5, |g, v| {
            g.sum(g.square(g.conv2d(v[0], v[1], None)))
        });
        assert!(err < 1e-6, "{err}");
    }
}
