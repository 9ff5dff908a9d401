//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order, so [`Graph::backward`] is a single reverse
//! sweep. Nodes that cannot reach a gradient-requiring leaf are never visited
//! on the way back.

use std::ops::Index;

use crate::conv;
use crate::tensor::{Element, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Tanh,
    LeakyRelu(f64),
    Relu,
    Square,
    Softplus,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    /// `x * scale + shift`
    Affine(Var, T),
    Unary(Var, Unary),
    Mean(Var),
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    /// Per-sample, per-channel normalization; keeps `1/std` per plane.
    InstanceNorm(Var, Vec<T>),
    UpsampleNearest(Var),
    ConcatChannels(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Leaves created for every tensor of a [`ParamStore`](crate::nn::ParamStore).
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<crate::nn::ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: crate::nn::ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of each bound parameter, zero-filled where no path exists.
    pub fn of_bound(&self, bound: &Bound, graph: &Graph<T>) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .map(|&v| {
                self.get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
            })
            .collect()
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers every tensor of `store` as a leaf. Frozen bindings take part
    /// in the forward pass but never receive gradients.
    pub fn bind(&mut self, store: &crate::nn::ParamStore<T>, trainable: bool) -> Bound {
        let vars = store
            .tensors()
            .iter()
            .map(|t| self.push(t.clone(), Op::Leaf, trainable))
            .collect();
        Bound { vars }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| v * scale + shift);
        let rg = self.rg(x);
        self.push(value, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: Box<dyn Fn(T) -> T> = match kind {
            Unary::Tanh => Box::new(|v: T| v.tanh()),
            Unary::LeakyRelu(slope) => {
                let s = T::of(slope);
                Box::new(move |v: T| if v > T::zero() { v } else { v * s })
            }
            Unary::Relu => Box::new(|v: T| v.max(T::zero())),
            Unary::Square => Box::new(|v: T| v * v),
            Unary::Softplus => Box::new(softplus::<T>),
        };
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, Op::Unary(x, kind), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// `mean((a - b)^2)`
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.unary(d, Unary::Square);
        self.mean(sq)
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = conv::conv2d_forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        );
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            value,
            Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        )
    }

    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let count = T::of(plane as f64);
        let mut out = Tensor::zeros(xv.shape());
        let mut inv_std = Vec::with_capacity(n * c);
        for (src, dst) in xv.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
            let mean = src.iter().copied().sum::<T>() / count;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv = T::one() / (var + T::of(eps)).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        self.push(out, Op::InstanceNorm(x, inv_std), rg)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let src = xv.data();
        let dst = out.data_mut();
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::UpsampleNearest(x), rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            assert!(
                pn == n && ph == h && pw == w,
                "concat_channels: incompatible shapes {:?} and {:?}",
                self.value(parts[0]).shape(),
                self.value(p).shape()
            );
            total_c += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let per = v.shape()[1] * plane;
                data.extend_from_slice(&v.data()[b * per..(b + 1) * per]);
            }
        }
        let value = Tensor::from_vec(&[n, total_c, h, w], data).expect("concat size");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatChannels(parts.to_vec()), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, || gy.clone());
                    self.accumulate(&mut grads, *b, || gy.clone());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, || gy.clone());
                    self.accumulate(&mut grads, *b, || gy.map(|v| -v));
                }
                Op::Affine(x, s) => {
                    let s = *s;
                    self.accumulate(&mut grads, *x, || gy.map(|v| v * s));
                }
                Op::Unary(x, kind) => {
                    let xv = self.value(*x);
                    let yv = &node.value;
                    let g = match *kind {
                        Unary::Tanh => Tensor::from_fn(gy.shape(), |i| {
                            let y = yv.data()[i];
                            gy.data()[i] * (T::one() - y * y)
                        }),
                        Unary::LeakyRelu(slope) => {
                            let s = T::of(slope);
                            gy.zip_map(xv, |g, x| if x > T::zero() { g } else { g * s })
                        }
                        Unary::Relu => gy.zip_map(xv, |g, x| if x > T::zero() { g } else { T::zero() }),
                        Unary::Square => gy.zip_map(xv, |g, x| g * (x + x)),
                        Unary::Softplus => gy.zip_map(xv, |g, x| g * sigmoid(x)),
                    };
                    self.accumulate(&mut grads, *x, || g);
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let g = gy.item() / T::of(xv.numel() as f64);
                    self.accumulate(&mut grads, *x, || Tensor::full(xv.shape(), g));
                }
                Op::Conv2d {
                    x,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let cg = conv::conv2d_backward(
                        self.value(*x),
                        self.value(*weight),
                        &gy,
                        *stride,
                        *pad,
                        self.rg(*x),
                        self.rg(*weight),
                        bias.is_some_and(|b| self.rg(b)),
                    );
                    if let Some(dx) = cg.dx {
                        self.accumulate(&mut grads, *x, || dx);
                    }
                    if let Some(dw) = cg.dw {
                        self.accumulate(&mut grads, *weight, || dw);
                    }
                    if let (Some(db), Some(b)) = (cg.db, bias) {
                        self.accumulate(&mut grads, *b, || db);
                    }
                }
                Op::InstanceNorm(x, inv_std) => {
                    let yv = &node.value;
                    let (_, _, h, w) = yv.dims4();
                    let plane = h * w;
                    let count = T::of(plane as f64);
                    let mut dx = Tensor::zeros(yv.shape());
                    for (p, ((dst, g), y)) in dx
                        .data_mut()
                        .chunks_mut(plane)
                        .zip(gy.data().chunks(plane))
                        .zip(yv.data().chunks(plane))
                        .enumerate()
                    {
                        let mean_g = g.iter().copied().sum::<T>() / count;
                        let mean_gy = g.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / count;
                        let inv = inv_std[p];
                        for ((d, &gi), &yi) in dst.iter_mut().zip(g).zip(y) {
                            *d = inv * (gi - mean_g - yi * mean_gy);
                        }
                    }
                    self.accumulate(&mut grads, *x, || dx);
                }
                Op::UpsampleNearest(x) => {
                    let xv = self.value(*x);
                    let (n, c, h, w) = xv.dims4();
                    let mut dx = Tensor::zeros(xv.shape());
                    let src = gy.data();
                    let dst = dx.data_mut();
                    for p in 0..n * c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(p * h + y / 2) * w + xx / 2] += src[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, || dx);
                }
                Op::ConcatChannels(parts) => {
                    let (n, total_c, h, w) = node.value.dims4();
                    let plane = h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).shape()[1];
                        if self.rg(p) {
                            let mut data = Vec::with_capacity(n * pc * plane);
                            for b in 0..n {
                                let start = (b * total_c + offset) * plane;
                                data.extend_from_slice(&gy.data()[start..start + pc * plane]);
                            }
                            let g = Tensor::from_vec(&[n, pc, h, w], data).expect("split size");
                            self.accumulate(&mut grads, p, || g);
                        }
                        offset += pc;
                    }
                }
            }
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: impl FnOnce() -> Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match grads[v.0].as_mut() {
            Some(acc) => acc.add_assign(&g()),
            None => grads[v.0] = Some(g()),
        }
    }
}

pub(crate) fn softplus<T: Element>(v: T) -> T {
    // log(1 + e^v) without overflow
    if v > T::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid<T: Element>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks d(sum(w * f(x)))/dx against central differences.
    fn check_unary_op(build: impl Fn(&mut Graph<f64>, Var) -> Var, x: Tensor<f64>) {
        let out_shape = {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let y = build(&mut g, v);
            g.value(y).shape().to_vec()
        };
        let probe = random(&out_shape, 99);
        let eval = |x: &Tensor<f64>| -> f64 {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let y = build(&mut g, v);
            g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let y = build(&mut g, v);
        let w = g.constant(probe.clone());
        let prod = {
            // sum(w * y) = mean(...) * n, via (a+b)^2 - (a-b)^2 = 4ab
            let s = g.add(y, w);
            let d = g.sub(y, w);
            let s2 = g.unary(s, Unary::Square);
            let d2 = g.unary(d, Unary::Square);
            let diff = g.sub(s2, d2);
            let m = g.mean(diff);
            g.scale(m, g.value(y).numel() as f64 / 4.0)
        };
        let grads = g.backward(prod);
        let analytic = grads.get(v).unwrap();
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((fd - a).abs() <= 1e-6 * (1.0 + fd.abs()), "index {i}: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn elementwise_gradients() {
        let x = random(&[1, 2, 3, 3], 1);
        check_unary_op(|g, v| g.tanh(v), x.clone());
        check_unary_op(|g, v| g.leaky_relu(v, 0.2), x.clone());
        check_unary_op(|g, v| g.unary(v, Unary::Softplus), x.clone());
        check_unary_op(|g, v| g.unary(v, Unary::Square), x.clone());
        check_unary_op(|g, v| g.affine(v, 3.0, 1.0), x);
    }

    #[test]
    fn structural_gradients() {
        let x = random(&[2, 3, 4, 3], 2);
        check_unary_op(|g, v| g.instance_norm(v, 1e-5), x.clone());
        check_unary_op(|g, v| g.upsample_nearest2x(v), x.clone());
        let other = random(&[2, 2, 4, 3], 3);
        check_unary_op(
            move |g, v| {
                let o = g.constant(other.clone());
                let c = g.concat_channels(&[o, v, o]);
                g.tanh(c)
            },
            x.clone(),
        );
        let w = random(&[4, 3, 3, 3], 4);
        let b = random(&[4], 5);
        check_unary_op(
            move |g, v| {
                let wv = g.constant(w.clone());
                let bv = g.constant(b.clone());
                g.conv2d(v, wv, Some(bv), 2, 1)
            },
            x,
        );
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.leaf(Tensor::scalar(3.0));
        let c = g.add(a, b);
        let l = g.unary(c, Unary::Square);
        let grads = g.backward(l);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().item(), 10.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(1000.0f64) - 1000.0).abs() < 1e-9);
        assert!(softplus(-1000.0f64) >= 0.0);
    }
}
