//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! Nodes are appended in evaluation order, so a node's inputs always have
//! smaller ids and the reverse pass is a single backwards sweep.

use crate::error::{invalid, Result};
use crate::neuron::{NeuronKind, NeuronParams};
use crate::scalar::Scalar;

use super::kernels::{self, ConvGeom, Padding};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Conv2d { x: NodeId, k: NodeId, geom: ConvGeom },
    ConvTranspose { x: NodeId, k: NodeId, geom: ConvGeom },
    AvgPool { x: NodeId, dims: (usize, usize, usize), window: usize },
    Dense { x: NodeId, w: NodeId, batch: usize, n: usize, m: usize },
    AddBias { x: NodeId, b: NodeId, outer: usize, channels: usize, inner: usize },
    Reshape { x: NodeId },
    Activation { x: NodeId, kind: NeuronKind, params: NeuronParams<S> },
    StraightThrough { x: NodeId, deriv: Tensor<S> },
    Scale { x: NodeId, c: S },
    Shift { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Square { x: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    MeanOuter { x: NodeId, outer: usize },
    Mse { pred: NodeId, target: Tensor<S> },
    BceDice { logits: NodeId, mask: Tensor<S>, w_bce: S, w_dice: S, samples: usize },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recorded computation. Single owner; build, call [`Tape::backward`], drop.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Dice smoothing term.
pub const DICE_EPS: f64 = 1.0;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (parameter or probed input).
    pub fn var(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, padding: Padding) -> Result<NodeId> {
        let (geom, batched) = kernels::conv_geom(self.value(x).shape(), self.value(k).shape(), stride, padding)?;
        let data = kernels::conv_forward(self.value(x).data(), self.value(k).data(), &geom);
        let shape = out_shape(batched, geom.batch, geom.c_out, geom.ho, geom.wo);
        let rg = self.rg(&[x, k]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Conv2d { x, k, geom }, rg))
    }

    pub fn conv2d_transpose(&mut self, x: NodeId, k: NodeId, stride: usize) -> Result<NodeId> {
        let (geom, batched) = kernels::transpose_geom(self.value(x).shape(), self.value(k).shape(), stride)?;
        let data = kernels::conv_backward_input(self.value(x).data(), self.value(k).data(), &geom);
        let shape = out_shape(batched, geom.batch, geom.c_in, geom.h, geom.w);
        let rg = self.rg(&[x, k]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::ConvTranspose { x, k, geom }, rg))
    }

    pub fn avg_pool2d(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let (batch, (c, h, w), batched) = kernels::pool_dims(self.value(x).shape(), window)?;
        let dims = (batch * c, h, w);
        let data = kernels::pool_forward(self.value(x).data(), dims, window);
        let shape = out_shape(batched, batch, c, h / window, w / window);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AvgPool { x, dims, window }, rg))
    }

    /// `W x` for `x` of shape `[N]` or `[B, N]`, `W` of shape `[M, N]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (batch, n, batched) = match *self.value(x).shape() {
            [n] => (1, n, false),
            [b, n] => (b, n, true),
            ref s => return invalid(format!("dense input must be [N] or [B,N], got {s:?}")),
        };
        let m = match *self.value(w).shape() {
            [m, wn] if wn == n => m,
            ref s => return invalid(format!("dense weights {s:?} incompatible with input width {n}")),
        };
        let data = kernels::dense_forward(self.value(x).data(), self.value(w).data(), batch, n, m);
        let shape = if batched { vec![batch, m] } else { vec![m] };
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Dense { x, w, batch, n, m }, rg))
    }

    /// Adds `b[c]` along axis `axis` of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || self.value(b).shape() != [shape[axis]] {
            return invalid(format!("bias {:?} does not fit axis {axis} of {shape:?}", self.value(b).shape()));
        }
        let outer: usize = shape[..axis].iter().product();
        let channels = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bc = bias[i % channels];
            chunk.iter_mut().for_each(|v| *v = *v + bc);
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddBias { x, b, outer, channels, inner }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Elementwise neuron activity (see [`NeuronKind::activity`]).
    pub fn activation(&mut self, x: NodeId, kind: NeuronKind, params: NeuronParams<S>) -> NodeId {
        let value = self.value(x).map(|j| kind.activity(j, &params));
        let rg = self.rg(&[x]);
        self.push(value, Op::Activation { x, kind, params }, rg)
    }

    /// Node whose forward value is `value` and whose local derivative with
    /// respect to `x` is the elementwise `deriv`.
    pub fn straight_through(&mut self, x: NodeId, value: Tensor<S>, deriv: Tensor<S>) -> Result<NodeId> {
        let xs = self.value(x).shape();
        if value.shape() != xs || deriv.shape() != xs {
            return invalid(format!(
                "straight-through shapes {:?}/{:?} must equal input {xs:?}",
                value.shape(),
                deriv.shape()
            ));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::StraightThrough { x, deriv }, rg))
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, c }, rg)
    }

    /// `x + c`.
    pub fn shift(&mut self, x: NodeId, c: S) -> NodeId {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Shift { x }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v * v);
        let rg = self.rg(&[x]);
        self.push(value, Op::Square { x }, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean { x }, rg)
    }

    /// Mean over the leading axis.
    pub fn mean_outer(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return invalid(format!("mean_outer needs rank >= 2, got {:?}", xv.shape()));
        }
        let outer = xv.shape()[0];
        let inner = xv.len() / outer;
        let mut acc = vec![0f64; inner];
        for row in xv.data().chunks(inner) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v.to_acc();
            }
        }
        let data = acc.into_iter().map(|a| S::from_acc(a / outer as f64)).collect();
        let value = Tensor::from_parts(xv.shape()[1..].to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MeanOuter { x, outer }, rg))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor<S>) -> Result<NodeId> {
        let value = Tensor::scalar(mse_value(self.value(pred), target)?);
        let rg = self.rg(&[pred]);
        Ok(self.push(value, Op::Mse { pred, target: target.clone() }, rg))
    }

    /// `w_bce * BCE(sigmoid(logits), mask) + w_dice * (1 - soft Dice)`.
    ///
    /// Rank-4 inputs are a batch: the Dice term is computed per sample and
    /// averaged. Any other rank is one sample.
    pub fn bce_dice(&mut self, logits: NodeId, mask: &Tensor<S>, w_bce: S, w_dice: S) -> Result<NodeId> {
        let lv = self.value(logits);
        lv.expect_same_shape(mask)?;
        let samples = if lv.rank() == 4 { lv.shape()[0] } else { 1 };
        let value = Tensor::scalar(bce_dice_value(lv, mask, w_bce, w_dice, samples));
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::BceDice { logits, mask: mask.clone(), w_bce, w_dice, samples }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return invalid(format!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], id: NodeId, g: Tensor<S>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, geom } => {
                if self.wants(*x) {
                    let dx = kernels::conv_backward_input(g.data(), self.value(*k).data(), geom);
                    self.accumulate(grads, *x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx));
                }
                if self.wants(*k) {
                    let dk = kernels::conv_backward_kernel(self.value(*x).data(), g.data(), geom);
                    self.accumulate(grads, *k, Tensor::from_parts(self.value(*k).shape().to_vec(), dk));
                }
            }
            Op::ConvTranspose { x, k, geom } => {
                // forward is conv_backward_input(x, k); x plays the conv output role
                if self.wants(*x) {
                    let dx = kernels::conv_forward(g.data(), self.value(*k).data(), geom);
                    self.accumulate(grads, *x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx));
                }
                if self.wants(*k) {
                    let dk = kernels::conv_backward_kernel(g.data(), self.value(*x).data(), geom);
                    self.accumulate(grads, *k, Tensor::from_parts(self.value(*k).shape().to_vec(), dk));
                }
            }
            Op::AvgPool { x, dims, window } => {
                let dx = kernels::pool_backward(g.data(), *dims, *window);
                self.accumulate(grads, *x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx));
            }
            Op::Dense { x, w, batch, n, m } => {
                if self.wants(*x) {
                    let dx = kernels::dense_backward_input(g.data(), self.value(*w).data(), *batch, *n, *m);
                    self.accumulate(grads, *x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx));
                }
                if self.wants(*w) {
                    let dw = kernels::dense_backward_weight(self.value(*x).data(), g.data(), *batch, *n, *m);
                    self.accumulate(grads, *w, Tensor::from_parts(self.value(*w).shape().to_vec(), dw));
                }
            }
            Op::AddBias { x, b, outer, channels, inner } => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let mut acc = vec![0f64; *channels];
                    for o in 0..*outer {
                        for (c, a) in acc.iter_mut().enumerate() {
                            let start = (o * channels + c) * inner;
                            *a += g.data()[start..start + inner].iter().map(|v| v.to_acc()).sum::<f64>();
                        }
                    }
                    let db = acc.into_iter().map(S::from_acc).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(vec![*channels], db));
                }
            }
            Op::Reshape { x } => {
                let dx = g.clone().reshape(self.value(*x).shape())?;
                self.accumulate(grads, *x, dx);
            }
            Op::Activation { x, kind, params } => {
                let xv = self.value(*x);
                let mut dx = Vec::with_capacity(xv.len());
                for (&j, &gv) in xv.data().iter().zip(g.data()) {
                    dx.push(gv * kind.activity_gradient(j, params)?);
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::StraightThrough { x, deriv } => {
                let dx = g.zip_map(deriv, |a, b| a * b)?;
                self.accumulate(grads, *x, dx);
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Shift { x } => self.accumulate(grads, *x, g.clone()),
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Square { x } => {
                let dx = self.value(*x).zip_map(g, |v, gv| S::lit(2.0) * v * gv)?;
                self.accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Mean { x } => {
                let xv = self.value(*x);
                let gv = g.data()[0] / S::lit(xv.len() as f64);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), gv));
            }
            Op::MeanOuter { x, outer } => {
                let inv = S::lit(1.0 / *outer as f64);
                let row: Vec<S> = g.data().iter().map(|&v| v * inv).collect();
                let mut dx = Vec::with_capacity(row.len() * outer);
                for _ in 0..*outer {
                    dx.extend_from_slice(&row);
                }
                self.accumulate(grads, *x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx));
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let c = g.data()[0] * S::lit(2.0 / pv.len() as f64);
                let dx = pv.zip_map(target, |p, t| c * (p - t))?;
                self.accumulate(grads, *pred, dx);
            }
            Op::BceDice { logits, mask, w_bce, w_dice, samples } => {
                let lv = self.value(*logits);
                let dx = bce_dice_grad(lv, mask, *w_bce, *w_dice, *samples);
                let gv = g.data()[0];
                self.accumulate(grads, *logits, dx.map(|v| v * gv));
            }
        }
        Ok(())
    }
}

fn out_shape(batched: bool, b: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if batched {
        vec![b, c, h, w]
    } else {
        vec![c, h, w]
    }
}

pub(crate) fn mse_value<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    pred.expect_same_shape(target)?;
    let acc: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p.to_acc() - t.to_acc();
            d * d
        })
        .sum();
    Ok(S::from_acc(acc / pred.len() as f64))
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn bce_dice_value<S: Scalar>(logits: &Tensor<S>, mask: &Tensor<S>, w_bce: S, w_dice: S, samples: usize) -> S {
    let n = logits.len();
    let per = n / samples;
    let mut bce = 0f64;
    let mut dice = 0f64;
    for s in 0..samples {
        let (mut inter, mut psum, mut msum) = (0f64, 0f64, 0f64);
        for i in s * per..(s + 1) * per {
            let z = logits.data()[i].to_acc();
            let m = mask.data()[i].to_acc();
            bce += softplus(z) - z * m;
            let p = sigmoid(z);
            inter += p * m;
            psum += p;
            msum += m;
        }
        dice += 1.0 - (2.0 * inter + DICE_EPS) / (psum + msum + DICE_EPS);
    }
    S::from_acc(w_bce.to_acc() * bce / n as f64 + w_dice.to_acc() * dice / samples as f64)
}

fn bce_dice_grad<S: Scalar>(logits: &Tensor<S>, mask: &Tensor<S>, w_bce: S, w_dice: S, samples: usize) -> Tensor<S> {
    let n = logits.len();
    let per = n / samples;
    let (wb, wd) = (w_bce.to_acc(), w_dice.to_acc());
    let mut out = Vec::with_capacity(n);
    for s in 0..samples {
        let range = s * per..(s + 1) * per;
        let (mut inter, mut psum, mut msum) = (0f64, 0f64, 0f64);
        for i in range.clone() {
            let p = sigmoid(logits.data()[i].to_acc());
            let m = mask.data()[i].to_acc();
            inter += p * m;
            psum += p;
            msum += m;
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = psum + msum + DICE_EPS;
        for i in range {
            let p = sigmoid(logits.data()[i].to_acc());
            let m = mask.data()[i].to_acc();
            let d_bce = (p - m) / n as f64;
            let d_dice_dp = -(2.0 * m * den - num) / (den * den);
            let d = wb * d_bce + wd * d_dice_dp * p * (1.0 - p) / samples as f64;
            out.push(S::from_acc(d));
        }
    }
    Tensor::from_parts(logits.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(Tensor::ones(&[3]));
        let y = tape.square(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[3]));
        let w = tape.var(Tensor::ones(&[2, 3]));
        let y = tape.dense(x, w).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn dense_input_gradient_is_column_sums() {
        let mut tape = Tape::<f64>::new();
        let wv = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 0.5]).unwrap();
        let x = tape.var(Tensor::vector(vec![0.1, 0.2, 0.3]));
        let w = tape.constant(wv);
        let y = tape.dense(x, w).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        let got = g.get(x).unwrap().data().to_vec();
        for (a, b) in got.iter().zip([-3.0, 7.0, 3.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_hand_value() {
        let p = Tensor::<f64>::vector(vec![0.0, 0.0]);
        let t = Tensor::<f64>::vector(vec![1.0, 1.0]);
        assert_eq!(mse_value(&p, &t).unwrap(), 1.0);
        assert_eq!(mse_value(&t, &t).unwrap(), 0.0);
        assert!(mse_value(&p, &Tensor::vector(vec![1.0])).is_err());
    }
}
