//! Reverse-mode tape.
//!
//! Operations append nodes in execution order, so node indices are already a
//! topological order and the backward sweep is a single reverse pass.

use rand::Rng;

use super::ops::{self, Activation, BatchNormMode, BatchNormSaved, ConvSpec};
use super::{Element, Tensor};
use crate::error::{domain_err, shape_err, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    Conv {
        x: Var,
        k: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    ConvTransposed {
        x: Var,
        k: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<T>,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Slice {
        x: Var,
        start: usize,
    },
    StackBatch(Vec<Var>),
    SliceBatch {
        x: Var,
        start: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// (1 − gate)·y + gate·prev with a one-channel gate broadcast over channels.
    GatedMix {
        y: Var,
        prev: Var,
        gate: Var,
    },
    Sum(Var),
    Scale(Var, T),
    Bce {
        pred: Var,
        target: Tensor<T>,
        scale: T,
    },
    Mse {
        pred: Var,
        target: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation tape. Single-owner: record and replay on one logical thread.
#[derive(Debug, Default)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

/// Lower clamp applied to probabilities inside the BCE loss.
pub const BCE_CLAMP: f64 = 1e-7;

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Sign pattern of every LeakyReLU input on the tape. Two evaluations
    /// with equal patterns lie on the same linear piece of every kink.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Act {
                x,
                kind: Activation::LeakyRelu,
            } = &n.op
            {
                out.extend(self.value(*x).data().iter().map(|v| *v >= T::zero()));
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(k), b.map(|b| self.value(b)), &spec)?;
        let ng = self.needs(x) || self.needs(k) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv { x, k, b, spec }, ng))
    }

    pub fn conv2d_transposed(&mut self, x: Var, k: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = ops::conv2d_transposed(self.value(x), self.value(k), b.map(|b| self.value(b)), &spec)?;
        let ng = self.needs(x) || self.needs(k) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::ConvTransposed { x, k, b, spec }, ng))
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_, T>) -> Result<Var> {
        let (out, saved) = ops::batch_norm(self.value(x), self.value(gamma), self.value(beta), mode)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            },
            ng,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = ops::activation(self.value(x), kind);
        let ng = self.needs(x);
        self.push(out, Op::Act { x, kind }, ng)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::LeakyRelu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        let (out, mask) = ops::dropout(self.value(x), rate, train, rng)?;
        match mask {
            None => Ok(x),
            Some(mask) => {
                let ng = self.needs(x);
                Ok(self.push(out, Op::Dropout { x, mask }, ng))
            }
        }
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat { a, b }, ng))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_channels(self.value(x), start, len)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Slice { x, start }, ng))
    }

    /// Concatenates tensors along the leading (batch) axis.
    pub fn stack_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("stack_batch of nothing");
        };
        let inner = &self.value(first).dims()[1..];
        let mut n = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.dims().is_empty() || &v.dims()[1..] != inner {
                return shape_err(format!(
                    "stack_batch dims {:?} vs {:?}",
                    v.dims(),
                    self.value(first).dims()
                ));
            }
            n += v.dims()[0];
            data.extend_from_slice(v.data());
        }
        let mut dims = vec![n];
        dims.extend_from_slice(inner);
        let out = Tensor::new(&dims, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::StackBatch(parts.to_vec()), ng))
    }

    /// Samples `start..start+len` along the leading axis.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let Some(&n) = v.dims().first() else {
            return shape_err("slice_batch of a scalar");
        };
        if start + len > n {
            return shape_err(format!("batch slice {}..{} out of {}", start, start + len, n));
        }
        let per = v.len() / n.max(1);
        let mut dims = v.dims().to_vec();
        dims[0] = len;
        let out = Tensor::new(&dims, v.data()[start * per..(start + len) * per].to_vec())?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceBatch { x, start }, ng))
    }

    /// Splits the leading axis into `parts` equal pieces.
    pub fn unstack_batch(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let n = self.value(x).dims().first().copied().unwrap_or(0);
        if parts == 0 || n % parts != 0 {
            return shape_err(format!("cannot split batch {n} into {parts} parts"));
        }
        let len = n / parts;
        (0..parts).map(|i| self.slice_batch(x, i * len, len)).collect()
    }

    pub fn split_channels(&mut self, x: Var, at: usize) -> Result<(Var, Var)> {
        let c = self.value(x).nchw()?.1;
        if at > c {
            return shape_err(format!("split point {} beyond {} channels", at, c));
        }
        Ok((
            self.slice_channels(x, 0, at)?,
            self.slice_channels(x, at, c - at)?,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), f)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `(1 − gate) ⊙ y + gate ⊙ prev`, where `gate` is N×1×H×W and is
    /// broadcast across the channels of `y` and `prev`.
    pub fn gated_mix(&mut self, y: Var, prev: Var, gate: Var) -> Result<Var> {
        let (yv, pv, gv) = (self.value(y), self.value(prev), self.value(gate));
        if yv.dims() != pv.dims() {
            return shape_err(format!(
                "residual inputs differ: {:?} vs {:?}",
                yv.dims(),
                pv.dims()
            ));
        }
        let (n, c, h, w) = yv.nchw()?;
        if gv.dims() != [n, 1, h, w] {
            return shape_err(format!("gate {:?} must be {:?}", gv.dims(), [n, 1, h, w]));
        }
        let plane = h * w;
        let mut out = vec![T::zero(); yv.len()];
        for s in 0..n {
            let gs = &gv.data()[s * plane..(s + 1) * plane];
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                for (i, &g) in gs.iter().enumerate() {
                    let j = off + i;
                    let (a, b) = (yv.data()[j], pv.data()[j]);
                    // clamp absorbs rounding so the mix never leaves [min, max]
                    out[j] = ((T::one() - g) * a + g * b).max(a.min(b)).min(a.max(b));
                }
            }
        }
        let out = Tensor::new(yv.dims(), out)?;
        let ng = self.needs(y) || self.needs(prev) || self.needs(gate);
        Ok(self.push(out, Op::GatedMix { y, prev, gate }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::Sum(x), ng)
    }

    /// `factor · x`.
    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, factor), ng)
    }

    fn bce(&mut self, pred: Var, target: &Tensor<T>, mean: bool) -> Result<Var> {
        let p = self.value(pred);
        if p.dims() != target.dims() {
            return shape_err(format!(
                "bce shapes differ: {:?} vs {:?}",
                p.dims(),
                target.dims()
            ));
        }
        if target.data().iter().any(|&t| !(t >= T::zero() && t <= T::one())) {
            return domain_err("bce target outside [0, 1]");
        }
        let lo = T::from_f64(BCE_CLAMP);
        let hi = T::one() - lo;
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.max(lo).min(hi).as_f64();
                let t = t.as_f64();
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let scale = if mean { 1.0 / p.len() as f64 } else { 1.0 };
        let out = Tensor::scalar(T::from_f64(total * scale));
        let ng = self.needs(pred);
        Ok(self.push(
            out,
            Op::Bce {
                pred,
                target: target.clone(),
                scale: T::from_f64(scale),
            },
            ng,
        ))
    }

    /// Binary cross-entropy averaged over all elements.
    pub fn bce_mean(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        self.bce(pred, target, true)
    }

    /// Binary cross-entropy summed over all elements.
    pub fn bce_sum(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        self.bce(pred, target, false)
    }

    pub fn mse_mean(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.dims() != target.dims() {
            return shape_err(format!(
                "mse shapes differ: {:?} vs {:?}",
                p.dims(),
                target.dims()
            ));
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).as_f64().powi(2))
            .sum();
        let out = Tensor::scalar(T::from_f64(total / p.len() as f64));
        let ng = self.needs(pred);
        Ok(self.push(
            out,
            Op::Mse {
                pred,
                target: target.clone(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Nodes that do not depend on any
    /// parameter are skipped; parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).dims()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).dims(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let mut acc = |v: Var, t: Tensor<T>| -> Result<()> {
                if !self.needs(v) {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, k, b, spec } => {
                    let (dx, dk, db) =
                        ops::conv2d_backward(self.value(*x), self.value(*k), spec, &g, self.needs(*x))?;
                    if let Some(dx) = dx {
                        acc(*x, dx)?;
                    }
                    acc(*k, dk)?;
                    if let Some(b) = b {
                        acc(*b, db)?;
                    }
                }
                Op::ConvTransposed { x, k, b, spec } => {
                    let (dx, dk, db) = ops::conv2d_transposed_backward(
                        self.value(*x),
                        self.value(*k),
                        spec,
                        &g,
                        self.needs(*x),
                    )?;
                    if let Some(dx) = dx {
                        acc(*x, dx)?;
                    }
                    acc(*k, dk)?;
                    if let Some(b) = b {
                        acc(*b, db)?;
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    saved,
                } => {
                    let (dx, dg, db) = ops::batch_norm_backward(saved, self.value(*gamma), &g)?;
                    acc(*x, dx)?;
                    acc(*gamma, dg)?;
                    acc(*beta, db)?;
                }
                Op::Act { x, kind } => {
                    let dx = ops::activation_backward(self.value(*x), &node.value, &g, *kind)?;
                    acc(*x, dx)?;
                }
                Op::Dropout { x, mask } => {
                    let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    acc(*x, Tensor::new(g.dims(), data)?)?;
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).nchw()?.1;
                    let (ga, gb) = ops::split_channels(&g, ca)?;
                    acc(*a, ga)?;
                    acc(*b, gb)?;
                }
                Op::Slice { x, start } => {
                    let xv = self.value(*x);
                    let (n, c, h, w) = xv.nchw()?;
                    let len = g.nchw()?.1;
                    let plane = h * w;
                    let mut dx = vec![T::zero(); xv.len()];
                    for s in 0..n {
                        let dst = (s * c + start) * plane;
                        let src = s * len * plane;
                        dx[dst..dst + len * plane].copy_from_slice(&g.data()[src..src + len * plane]);
                    }
                    acc(*x, Tensor::new(xv.dims(), dx)?)?;
                }
                Op::StackBatch(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let v = self.value(p);
                        let piece = g.data()[off..off + v.len()].to_vec();
                        off += v.len();
                        acc(p, Tensor::new(v.dims(), piece)?)?;
                    }
                }
                Op::SliceBatch { x, start } => {
                    let xv = self.value(*x);
                    let per = xv.len() / xv.dims()[0].max(1);
                    let mut dx = vec![T::zero(); xv.len()];
                    dx[start * per..start * per + g.len()].copy_from_slice(g.data());
                    acc(*x, Tensor::new(xv.dims(), dx)?)?;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g)?;
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v))?;
                    acc(*a, g)?;
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |d, v| d * v)?;
                    let db = g.zip_map(self.value(*a), |d, v| d * v)?;
                    acc(*a, da)?;
                    acc(*b, db)?;
                }
                Op::GatedMix { y, prev, gate } => {
                    let (yv, pv, gv) = (self.value(*y), self.value(*prev), self.value(*gate));
                    let (n, c, h, w) = yv.nchw()?;
                    let plane = h * w;
                    let mut dy = vec![T::zero(); yv.len()];
                    let mut dp = vec![T::zero(); yv.len()];
                    let mut dgate = vec![T::zero(); gv.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * plane;
                            for i in 0..plane {
                                let j = off + i;
                                let gt = gv.data()[s * plane + i];
                                let d = g.data()[j];
                                dy[j] = (T::one() - gt) * d;
                                dp[j] = gt * d;
                                dgate[s * plane + i] =
                                    dgate[s * plane + i] + (pv.data()[j] - yv.data()[j]) * d;
                            }
                        }
                    }
                    acc(*y, Tensor::new(yv.dims(), dy)?)?;
                    acc(*prev, Tensor::new(yv.dims(), dp)?)?;
                    acc(*gate, Tensor::new(gv.dims(), dgate)?)?;
                }
                Op::Sum(x) => {
                    let d = g.data()[0];
                    acc(*x, Tensor::full(self.value(*x).dims(), d))?;
                }
                Op::Scale(x, factor) => {
                    acc(*x, g.map(|v| v * *factor))?;
                }
                Op::Bce { pred, target, scale } => {
                    let lo = T::from_f64(BCE_CLAMP);
                    let hi = T::one() - lo;
                    let up = g.data()[0] * *scale;
                    let dp = self.value(*pred).zip_map(target, |p, t| {
                        if p < lo || p > hi {
                            // clamped region is flat
                            T::zero()
                        } else {
                            up * (p - t) / (p * (T::one() - p))
                        }
                    })?;
                    acc(*pred, dp)?;
                }
                Op::Mse { pred, target } => {
                    let pv = self.value(*pred);
                    let k = g.data()[0] * T::from_f64(2.0 / pv.len() as f64);
                    let dp = pv.zip_map(target, |p, t| k * (p - t))?;
                    acc(*pred, dp)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf. `None` when the leaf is not upstream of the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled when the loss does not reach it.
    pub fn get_or_zeros(&self, v: Var, dims: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(dims))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!((grads.get(x).unwrap().data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn disconnected_param_gets_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::scalar(2.0));
        let b = g.param(Tensor::full(&[3], 1.0));
        let y = g.tanh(a);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get_or_zeros(b, &[3]).data(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::full(&[2], 1.0));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx (x*x) = 2x
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data()[0], 6.0);
    }

    #[test]
    fn gated_mix_feeds_both_branches() {
        let mut g = Graph::<f64>::new();
        let y = g.param(Tensor::full(&[1, 2, 2, 2], 1.0));
        let z = g.param(Tensor::full(&[1, 2, 2, 2], -1.0));
        let w = g.param(Tensor::full(&[1, 1, 2, 2], 0.3));
        let gate = g.sigmoid(w);
        let out = g.gated_mix(y, z, gate).unwrap();
        let s = g.sum(out);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(y).unwrap().data().iter().all(|&v| v > 0.0));
        assert!(grads.get(z).unwrap().data().iter().all(|&v| v > 0.0));
        assert!(grads.get(w).unwrap().data().iter().all(|&v| v != 0.0));
    }

    #[test]
    fn scale_multiplies_value_and_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[3], 2.0));
        let y = g.scale(x, 0.25);
        let s = g.sum(y);
        assert_eq!(g.value(s).data()[0], 1.5);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25; 3]);
    }

    #[test]
    fn batch_stack_and_slice_round_trip() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = g.param(Tensor::from_fn(&[1, 3], |i| 10.0 + i as f64));
        let s = g.stack_batch(&[a, b]).unwrap();
        assert_eq!(g.value(s).dims(), &[3, 3]);
        let parts = g.unstack_batch(s, 3).unwrap();
        assert_eq!(g.value(parts[2]).data(), g.value(b).data());
        // weight each slice differently so the routing shows in the gradient
        let w0 = g.scale(parts[0], 1.0);
        let w1 = g.scale(parts[1], 2.0);
        let w2 = g.scale(parts[2], 3.0);
        let t = g.add(w0, w1).unwrap();
        let t = g.add(t, w2).unwrap();
        let l = g.sum(t);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[3.0; 3]);
        assert!(g.unstack_batch(s, 2).is_err());
        assert!(g.slice_batch(s, 2, 2).is_err());
    }

    #[test]
    fn bce_rejects_out_of_range_target() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::full(&[2], 0.5));
        let t = Tensor::new(&[2], vec![0.0, 1.5]).unwrap();
        assert!(matches!(g.bce_mean(p, &t), Err(crate::TensorError::Domain(_))));
    }
}
