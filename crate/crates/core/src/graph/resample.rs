//! Pooling, linear resizing and grid sampling.

use super::{Graph, Var};
use crate::tensor::{Real, Tensor};
use crate::warp::{sample_backward, sample_forward, SampleDims};

/// Linear-interpolation taps for resizing an axis of length `src` to `dst`
/// (half-pixel centres, clamped at the ends).
fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|j| {
            let pos = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

impl<F: Real> Graph<F> {
    /// 2x2 max pooling with stride 2 on `[N, C, H, W]` (odd trailing rows
    /// and columns are dropped).
    pub fn maxpool2d(&self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        assert_eq!(s.len(), 4, "maxpool2d expects [N, C, H, W]");
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(nc * ho * wo);
        let mut arg = Vec::with_capacity(nc * ho * wo);
        for i in 0..nc {
            let plane = &vx.data()[i * h * w..(i + 1) * h * w];
            for y in 0..ho {
                for xx in 0..wo {
                    let mut best = (2 * y) * w + 2 * xx;
                    for cand in [
                        (2 * y) * w + 2 * xx + 1,
                        (2 * y + 1) * w + 2 * xx,
                        (2 * y + 1) * w + 2 * xx + 1,
                    ] {
                        if plane[cand] > plane[best] {
                            best = cand;
                        }
                    }
                    out.push(plane[best]);
                    arg.push(i * h * w + best);
                }
            }
        }
        let value = Tensor::from_vec(&[s[0], s[1], ho, wo], out).expect("shape");
        self.push(value, &[x], move |b| {
            let mut gx = Tensor::zeros(&s);
            let gd = gx.data_mut();
            for (&idx, &g) in arg.iter().zip(b.grad.data()) {
                gd[idx] += g;
            }
            vec![Some(gx)]
        })
    }

    /// Linear resize of `axis` to `len` entries.
    pub fn resize_axis(&self, x: Var, axis: usize, len: usize) -> Var {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        if s[axis] == len {
            return x;
        }
        let (outer, src, inner) = vx.split_at_axis(axis);
        let taps: Vec<(usize, usize, F, F)> = linear_taps(src, len)
            .into_iter()
            .map(|(a, b, f)| (a, b, F::lit(1.0 - f), F::lit(f)))
            .collect();
        let mut out = vec![F::zero(); outer * len * inner];
        for o in 0..outer {
            for (j, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
                let dst = &mut out[(o * len + j) * inner..(o * len + j + 1) * inner];
                let a = &vx.data()[(o * src + i0) * inner..(o * src + i0 + 1) * inner];
                let b = &vx.data()[(o * src + i1) * inner..(o * src + i1 + 1) * inner];
                for ((d, &va), &vb) in dst.iter_mut().zip(a).zip(b) {
                    *d = w0 * va + w1 * vb;
                }
            }
        }
        let mut os = s.clone();
        os[axis] = len;
        let value = Tensor::from_vec(&os, out).expect("shape");
        self.push(value, &[x], move |bk| {
            let g = bk.grad.data();
            let mut gx = Tensor::zeros(&s);
            let gd = gx.data_mut();
            for o in 0..outer {
                for (j, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
                    let src_g = &g[(o * len + j) * inner..(o * len + j + 1) * inner];
                    for (k, &v) in src_g.iter().enumerate() {
                        gd[(o * src + i0) * inner + k] += w0 * v;
                        gd[(o * src + i1) * inner + k] += w1 * v;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Spatial 2x bilinear upsampling of the last two axes.
    pub fn upsample2x(&self, x: Var) -> Var {
        let s = self.shape(x);
        let r = s.len();
        let y = self.resize_axis(x, r - 2, s[r - 2] * 2);
        self.resize_axis(y, r - 1, s[r - 1] * 2)
    }

    /// Bilinear sampling of `image [N, C, H, W]` at absolute pixel
    /// coordinates `coords [N, 2, Ho, Wo]` with border clamping.
    pub fn grid_sample(&self, image: Var, coords: Var) -> Var {
        let (vi, vc) = (self.value(image), self.value(coords));
        let (is, cs) = (vi.shape().to_vec(), vc.shape().to_vec());
        assert_eq!(is.len(), 4, "grid_sample image must be [N, C, H, W]");
        assert_eq!(cs.len(), 4, "grid_sample coords must be [N, 2, H, W]");
        assert!(cs[0] == is[0] && cs[1] == 2, "grid_sample shapes {is:?} {cs:?}");
        let d = SampleDims {
            n: is[0],
            c: is[1],
            h: is[2],
            w: is[3],
            ho: cs[2],
            wo: cs[3],
        };
        let mut out = vec![F::zero(); d.n * d.c * d.ho * d.wo];
        sample_forward(vi.data(), vc.data(), d, &mut out);
        let value = Tensor::from_vec(&[d.n, d.c, d.ho, d.wo], out).expect("shape");
        self.push(value, &[image, coords], move |b| {
            let (vi, vc) = (&b.inputs[0], &b.inputs[1]);
            let mut gi = b.needs[0].then(|| vec![F::zero(); vi.numel()]);
            let mut gc = b.needs[1].then(|| vec![F::zero(); vc.numel()]);
            sample_backward(
                vi.data(),
                vc.data(),
                d,
                b.grad.data(),
                gi.as_deref_mut(),
                gc.as_deref_mut(),
            );
            vec![
                gi.map(|v| Tensor::from_vec(vi.shape(), v).expect("shape")),
                gc.map(|v| Tensor::from_vec(vc.shape(), v).expect("shape")),
            ]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::max_rel_error;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn maxpool_picks_maximum() {
        let g = Graph::<f32>::new();
        let x = g.constant(
            Tensor::from_vec(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]).unwrap(),
        );
        assert_eq!(g.value(g.maxpool2d(x)).data(), &[5.0, 9.0]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 2, 3, 3], 0.7));
        let up = g.upsample2x(x);
        assert_eq!(g.shape(up), vec![1, 2, 6, 6]);
        assert!(g.value(up).data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        assert_eq!(g.resize_axis(x, 2, 3), x);
    }

    #[test]
    fn pool_and_resize_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(&[1, 2, 2, 4, 4], |_| rng.random_range(-1.0..1.0));
        let err = max_rel_error(&[x], 1e-6, |g, v| {
            let t = g.resize_axis(v[0], 2, 4);
            let u = g.upsample2x(t);
            let flat = g.reshape(u, &[1, 8, 8, 8]);
            g.sum(g.square(g.maxpool2d(flat)))
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grid_sample_gradients_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = Tensor::from_fn(&[2, 3, 6, 6], |_| rng.random_range(0.0..1.0));
        let coords = Tensor::from_fn(&[2, 2, 4, 4], |_| {
            let base = rng.random_range(0..5) as f64;
            base + rng.random_range(0.1..0.9)
        });
        let err = max_rel_error(&[img, coords], 1e-4, |g, v| {
            g.sum(g.square(g.grid_sample(v[0], v[1])))
        });
        assert!(err < 1e-6, "{err}");
    }
}
