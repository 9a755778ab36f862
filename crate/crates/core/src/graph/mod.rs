//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! a closure that maps the output gradient to input gradients. Graphs are
//! built per forward pass and dropped afterwards.

mod conv;
mod resample;

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Inputs available to a backward closure.
pub(crate) struct Back<'a, F: Real> {
    pub grad: &'a Tensor<F>,
    pub inputs: &'a [Rc<Tensor<F>>],
    pub output: &'a Tensor<F>,
    pub needs: &'a [bool],
}

type BackwardFn<F> = Box<dyn Fn(&Back<'_, F>) -> Vec<Option<Tensor<F>>>>;

struct Node<F: Real> {
    value: Rc<Tensor<F>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
    is_leaf: bool,
}

#[derive(Default)]
pub struct Graph<F: Real = f32> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, value: Tensor<F>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
            is_leaf: true,
        });
        Var(nodes.len() - 1)
    }

    /// Input that does not receive gradients.
    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.insert(value, false)
    }

    /// Input whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&self, value: Tensor<F>) -> Var {
        self.insert(value, true)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub(crate) fn push(
        &self,
        value: Tensor<F>,
        parents: &[Var],
        backward: impl Fn(&Back<'_, F>) -> Vec<Option<Tensor<F>>> + 'static,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
            is_leaf: false,
        });
        Var(nodes.len() - 1)
    }

    /// Gradients of `root` (summed if it is not a scalar) with respect to
    /// every leaf created with [`Graph::leaf`].
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::ones(nodes[root.0].value.shape()));
        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<Rc<Tensor<F>>> = node
                .parents
                .iter()
                .map(|&p| Rc::clone(&nodes[p].value))
                .collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&Back {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            });
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape());
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads[p] = Some(g),
                }
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if !node.is_leaf {
                grads[id] = None;
            }
        }
        Gradients { grads }
    }

    // ---- elementwise ------------------------------------------------------

    fn unary(
        &self,
        x: Var,
        f: impl Fn(F) -> F,
        df: impl Fn(F, F) -> F + 'static,
    ) -> Var {
        let value = self.value(x).map(f);
        self.push(value, &[x], move |b| {
            let g = b
                .grad
                .data()
                .iter()
                .zip(b.inputs[0].data())
                .zip(b.output.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_vec(b.grad.shape(), g).expect("same shape"))]
        })
    }

    pub fn relu(&self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let s = F::lit(slope);
        self.unary(
            x,
            move |v| if v > F::zero() { v } else { v * s },
            move |v, _| if v > F::zero() { F::one() } else { s },
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| F::one() / (F::one() + (-v).exp()),
            |_, y| y * (F::one() - y),
        )
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.abs(),
            |v, _| {
                if v > F::zero() {
                    F::one()
                } else if v < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                }
            },
        )
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, |v, _| v + v)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (F::lit(lo), F::lit(hi));
        self.unary(
            x,
            move |v| v.max(lo).min(hi),
            move |v, _| {
                if v >= lo && v <= hi {
                    F::one()
                } else {
                    F::zero()
                }
            },
        )
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        let s = F::lit(s);
        self.unary(x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, x: Var, s: f64) -> Var {
        let s = F::lit(s);
        self.unary(x, move |v| v + s, |_, _| F::one())
    }

    fn binary_same(&self, a: Var, b: Var, op: Binary) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{op:?}: shape mismatch");
        let value = match op {
            Binary::Add => va.zip_map(&vb, |x, y| x + y),
            Binary::Sub => va.zip_map(&vb, |x, y| x - y),
            Binary::Mul => va.zip_map(&vb, |x, y| x * y),
        };
        self.push(value, &[a, b], move |bk| {
            let g = bk.grad;
            match op {
                Binary::Add => vec![
                    bk.needs[0].then(|| g.clone()),
                    bk.needs[1].then(|| g.clone()),
                ],
                Binary::Sub => vec![
                    bk.needs[0].then(|| g.clone()),
                    bk.needs[1].then(|| g.map(|v| -v)),
                ],
                Binary::Mul => vec![
                    bk.needs[0].then(|| g.zip_map(&bk.inputs[1], |x, y| x * y)),
                    bk.needs[1].then(|| g.zip_map(&bk.inputs[0], |x, y| x * y)),
                ],
            }
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, Binary::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, Binary::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, Binary::Mul)
    }

    /// `x * m` where `m` has size 1 along axis 1 and matches `x` elsewhere.
    pub fn mul_channels(&self, x: Var, m: Var) -> Var {
        let (vx, vm) = (self.value(x), self.value(m));
        let s = vx.shape().to_vec();
        let mut expect = s.clone();
        expect[1] = 1;
        assert_eq!(vm.shape(), &expect[..], "mul_channels: mask shape");
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let mut out = vec![F::zero(); vx.numel()];
        for i in 0..n {
            let mrow = &vm.data()[i * inner..(i + 1) * inner];
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for (o, (&xv, &mv)) in out[base..base + inner]
                    .iter_mut()
                    .zip(vx.data()[base..base + inner].iter().zip(mrow))
                {
                    *o = xv * mv;
                }
            }
        }
        let value = Tensor::from_vec(&s, out).expect("shape");
        self.push(value, &[x, m], move |b| {
            let (vx, vm, g) = (&b.inputs[0], &b.inputs[1], b.grad);
            let gx = b.needs[0].then(|| {
                let mut gx = vec![F::zero(); vx.numel()];
                for i in 0..n {
                    let mrow = &vm.data()[i * inner..(i + 1) * inner];
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        for k in 0..inner {
                            gx[base + k] = g.data()[base + k] * mrow[k];
                        }
                    }
                }
                Tensor::from_vec(vx.shape(), gx).expect("shape")
            });
            let gm = b.needs[1].then(|| {
                let mut gm = vec![F::zero(); vm.numel()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        for k in 0..inner {
                            gm[i * inner + k] += g.data()[base + k] * vx.data()[base + k];
                        }
                    }
                }
                Tensor::from_vec(vm.shape(), gm).expect("shape")
            });
            vec![gx, gm]
        })
    }

    /// Sum over axis 1, keeping it with size 1.
    pub fn sum_channels(&self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let mut out = vec![F::zero(); n * inner];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for k in 0..inner {
                    out[i * inner + k] += vx.data()[base + k];
                }
            }
        }
        let mut os = s.clone();
        os[1] = 1;
        let value = Tensor::from_vec(&os, out).expect("shape");
        self.push(value, &[x], move |b| {
            let g = b.grad.data();
            let gx = Tensor::from_fn(&s, |idx| {
                let i = idx / (c * inner);
                g[i * inner + idx % inner]
            });
            vec![Some(gx)]
        })
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        self.push(Tensor::scalar(vx.sum()), &[x], move |b| {
            vec![Some(Tensor::full(&shape, b.grad.item()))]
        })
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let vx = self.value(x);
        let old = vx.shape().to_vec();
        let value = (*vx).clone().reshape(shape).expect("reshape size");
        self.push(value, &[x], move |b| {
            vec![Some(b.grad.clone().reshape(&old).expect("reshape"))]
        })
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Var {
        let values: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let refs: Vec<&Tensor<F>> = values.iter().map(|v| v.as_ref()).collect();
        let value = Tensor::concat(&refs, axis).expect("concat shapes");
        let sizes: Vec<usize> = values.iter().map(|v| v.dim(axis)).collect();
        self.push(value, xs, move |b| {
            let mut start = 0;
            sizes
                .iter()
                .zip(b.needs)
                .map(|(&len, &need)| {
                    let g = need.then(|| b.grad.narrow(axis, start, len));
                    start += len;
                    g
                })
                .collect()
        })
    }

    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let value = vx.narrow(axis, start, len);
        let full = vx.shape().to_vec();
        self.push(value, &[x], move |b| {
            let (outer, size, inner) = (
                full[..axis].iter().product::<usize>(),
                full[axis],
                full[axis + 1..].iter().product::<usize>(),
            );
            let mut g = Tensor::zeros(&full);
            let gd = g.data_mut();
            for o in 0..outer {
                let dst = (o * size + start) * inner;
                let src = o * len * inner;
                gd[dst..dst + len * inner]
                    .copy_from_slice(&b.grad.data()[src..src + len * inner]);
            }
            vec![Some(g)]
        })
    }

    pub fn swap_axes12(&self, x: Var) -> Var {
        let value = self.value(x).swap_axes12();
        self.push(value, &[x], |b| vec![Some(b.grad.swap_axes12())])
    }

    /// `[N, C, H, W] -> [N, C, times, H, W]` by replication.
    pub fn repeat_time(&self, x: Var, times: usize) -> Var {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        assert_eq!(s.len(), 4);
        let (nc, plane) = (s[0] * s[1], s[2] * s[3]);
        let mut data = Vec::with_capacity(vx.numel() * times);
        for i in 0..nc {
            let row = &vx.data()[i * plane..(i + 1) * plane];
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        let value =
            Tensor::from_vec(&[s[0], s[1], times, s[2], s[3]], data).expect("shape");
        self.push(value, &[x], move |b| {
            let g = b.grad.data();
            let mut gx = Tensor::zeros(&s);
            for i in 0..nc {
                let dst = &mut gx.data_mut()[i * plane..(i + 1) * plane];
                for t in 0..times {
                    let src = &g[(i * times + t) * plane..(i * times + t + 1) * plane];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    // ---- dense ------------------------------------------------------------

    /// `x [N, I] * w[O, I]^T + b[O]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, i) = (vx.dim(0), vx.dim(1));
        let o = vw.dim(0);
        assert_eq!(vw.dim(1), i, "linear: weight shape");
        let mut out = vec![F::zero(); n * o];
        F::gemm(n, i, o, F::one(), vx.data(), false, vw.data(), true, F::zero(), &mut out);
        if let Some(b) = b {
            let vb = self.value(b);
            for row in out.chunks_mut(o) {
                for (y, &bias) in row.iter_mut().zip(vb.data()) {
                    *y += bias;
                }
            }
        }
        let value = Tensor::from_vec(&[n, o], out).expect("shape");
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(value, &parents, move |bk| {
            let (vx, vw, g) = (&bk.inputs[0], &bk.inputs[1], bk.grad.data());
            let gx = bk.needs[0].then(|| {
                let mut gx = vec![F::zero(); n * i];
                F::gemm(n, o, i, F::one(), g, false, vw.data(), false, F::zero(), &mut gx);
                Tensor::from_vec(&[n, i], gx).expect("shape")
            });
            let gw = bk.needs[1].then(|| {
                let mut gw = vec![F::zero(); o * i];
                F::gemm(o, n, i, F::one(), g, true, vx.data(), false, F::zero(), &mut gw);
                Tensor::from_vec(&[o, i], gw).expect("shape")
            });
            let mut grads = vec![gx, gw];
            if bk.inputs.len() == 3 {
                grads.push(bk.needs[2].then(|| {
                    let mut gb = vec![F::zero(); o];
                    for row in g.chunks(o) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Tensor::from_vec(&[o], gb).expect("shape")
                }));
            }
            grads
        })
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}


#[cfg(test)]
mod tests {
    use super::gradcheck::max_rel_error;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[2, 3, 4]);
        let err = max_rel_error(&[a, b], 1e-5, |g, v| {
            let x = g.mul(v[0], v[1]);
            let y = g.sigmoid(g.sub(x, v[1]));
            let z = g.leaky_relu(g.add(y, g.exp(v[0])), 0.1);
            g.mean(g.square(g.add_scalar(g.scale(z, 1.5), -0.3)))
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn shape_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        let m = rand_tensor(&mut rng, &[2, 1, 2, 2]);
        let err = max_rel_error(&[a, m], 1e-5, |g, v| {
            let r = g.repeat_time(v[0], 3);
            let s = g.swap_axes12(r);
            let n = g.narrow(s, 1, 1, 2);
            let flat = g.reshape(n, &[2, 2, 3, 2, 2]);
            let c = g.concat(&[flat, flat], 1);
            let masked = g.mul_channels(v[0], v[1]);
            let summed = g.sum_channels(masked);
            let lhs = g.sum(g.square(c));
            let rhs = g.sum(g.square(summed));
            g.add(lhs, rhs)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[3, 5]);
        let w = rand_tensor(&mut rng, &[4, 5]);
        let b = rand_tensor(&mut rng, &[4]);
        let err = max_rel_error(&[x, w, b], 1e-5, |g, v| {
            g.sum(g.square(g.linear(v[0], v[1], Some(v[2]))))
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::<f32>::new();
        let c = g.constant(Tensor::ones(&[2]));
        let l = g.leaf(Tensor::ones(&[2]));
        let y = g.sum(g.mul(c, l));
        let grads = g.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(l).unwrap().data(), &[1.0, 1.0]);
    }
}
