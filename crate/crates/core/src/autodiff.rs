//! Arena-backed reverse-mode autodiff.
//!
//! A [`Tape`] owns every value produced during a forward pass. Nodes are
//! appended in evaluation order, so reverse index order is a valid reverse
//! topological order and the graph is acyclic by construction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::{self, Activation, BnSaved, ConvSpec, RunningStats};
use crate::real::Real;
use crate::tensor::{BinaryKind, Broadcast, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-norm call obtains its statistics.
pub enum BnMode<'a, T> {
    /// Batch statistics; running stats (if given) get the EMA update.
    Train(Option<&'a mut RunningStats<T>>),
    Infer(&'a RunningStats<T>),
}

/// The operations model code is written against. Implemented by [`Tape`]
/// (values + gradients) and by the shape tracer in [`crate::zoo`].
pub trait Graph {
    type Elem: Real;
    type V: Copy;

    fn shape(&self, v: Self::V) -> Shape;
    fn parameter(&mut self, t: &Tensor<Self::Elem>) -> Self::V;
    fn conv2d(&mut self, x: Self::V, spec: &ConvSpec, weight: Self::V, bias: Option<Self::V>) -> Result<Self::V>;
    fn batchnorm2d(&mut self, x: Self::V, gamma: Self::V, beta: Self::V, mode: BnMode<'_, Self::Elem>) -> Result<Self::V>;
    fn activation(&mut self, x: Self::V, kind: Activation) -> Self::V;
    fn softmax_channels(&mut self, x: Self::V) -> Self::V;
    fn maxpool2(&mut self, x: Self::V) -> Result<Self::V>;
    fn avgpool2(&mut self, x: Self::V) -> Result<Self::V>;
    fn upsample_bilinear2(&mut self, x: Self::V) -> Self::V;
    fn elementwise(&mut self, a: Self::V, b: Self::V, kind: BinaryKind) -> Result<Self::V>;
    /// `scale * x + shift` with constant coefficients.
    fn affine(&mut self, x: Self::V, scale: f64, shift: f64) -> Self::V;
    fn concat_channels(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn slice_channels(&mut self, x: Self::V, start: usize, len: usize) -> Result<Self::V>;
    fn channel_mean(&mut self, x: Self::V) -> Self::V;
    fn channel_shuffle(&mut self, x: Self::V, groups: usize) -> Result<Self::V>;

    /// Labels subsequent ops for accounting; ignored by the tape.
    fn scope(&mut self, _name: &str) {}

    fn add(&mut self, a: Self::V, b: Self::V) -> Result<Self::V> {
        self.elementwise(a, b, BinaryKind::Add)
    }
    fn mul(&mut self, a: Self::V, b: Self::V) -> Result<Self::V> {
        self.elementwise(a, b, BinaryKind::Mul)
    }
    fn split_channels(&mut self, x: Self::V, k: usize) -> Result<Vec<Self::V>> {
        let c = self.shape(x).c;
        if k == 0 || c % k != 0 {
            return Err(Error::Divisibility { op: "split_channels", channels: c, parts: k });
        }
        let w = c / k;
        (0..k).map(|j| self.slice_channels(x, j * w, w)).collect()
    }
}

enum Op<T> {
    Leaf,
    Binary { a: usize, b: usize, kind: BinaryKind, bcast: Broadcast },
    Affine { x: usize, scale: T },
    Conv { x: usize, w: usize, b: Option<usize>, spec: ConvSpec },
    BatchNorm { x: usize, gamma: usize, beta: usize, saved: BnSaved<T>, train: bool },
    Act { x: usize, kind: Activation },
    Softmax { x: usize },
    MaxPool { x: usize, argmax: Vec<u32> },
    AvgPool { x: usize },
    Upsample { x: usize },
    Concat { parts: Vec<usize> },
    Slice { x: usize, start: usize },
    ChannelMean { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    Sum { x: usize },
    Mean { x: usize },
    BceLogits { x: usize, target: Tensor<T> },
    SoftDice { x: usize, target: Tensor<T>, smooth: T },
    Mse { x: usize, target: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    recording: bool,
    params_require_grad: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// Recording tape: parameters require gradients.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recording: true, params_require_grad: true }
    }

    /// Forward-only tape: nothing is recorded for backward.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), recording: false, params_require_grad: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad: requires_grad && self.recording, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        core::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[usize], op: impl FnOnce() -> Op<T>) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op() } else { Op::Leaf };
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(T::from_f64(self.value(x).sum_f64()));
        self.push(v, &[x.0], || Op::Sum { x: x.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(T::from_f64(t.sum_f64() / t.len() as f64));
        self.push(v, &[x.0], || Op::Mean { x: x.0 })
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`,
    /// evaluated in the overflow-free log-sum-exp form.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(Error::Shape { op: "bce_with_logits", left: z.shape(), right: target.shape() });
        }
        let mut acc = 0.0f64;
        for (&zi, &ti) in z.data().iter().zip(target.data()) {
            let zf = zi.as_f64();
            let tf = ti.as_f64();
            acc += zf.max(0.0) - zf * tf + (-zf.abs()).exp().ln_1p();
        }
        let v = Tensor::scalar(T::from_f64(acc / z.len() as f64));
        Ok(self.push(v, &[logits.0], || Op::BceLogits { x: logits.0, target: target.clone() }))
    }

    /// `1 - (2·Σp·t + s) / (Σp + Σt + s)` with `p = sigmoid(logits)`.
    pub fn soft_dice_loss(&mut self, logits: Var, target: &Tensor<T>, smooth: f64) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(Error::Shape { op: "soft_dice_loss", left: z.shape(), right: target.shape() });
        }
        let (mut inter, mut total) = (0.0f64, 0.0f64);
        for (&zi, &ti) in z.data().iter().zip(target.data()) {
            let p = nn::sigmoid(zi.as_f64());
            inter += p * ti.as_f64();
            total += p + ti.as_f64();
        }
        let dice = (2.0 * inter + smooth) / (total + smooth);
        let v = Tensor::scalar(T::from_f64(1.0 - dice));
        Ok(self.push(v, &[logits.0], || Op::SoftDice { x: logits.0, target: target.clone(), smooth: T::from_f64(smooth) }))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(Error::Shape { op: "mse", left: xv.shape(), right: target.shape() });
        }
        let acc: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum();
        let v = Tensor::scalar(T::from_f64(acc / xv.len() as f64));
        Ok(self.push(v, &[x.0], || Op::Mse { x: x.0, target: target.clone() }))
    }

    /// Accumulates `d root / d v` into the gradient slot of every reachable
    /// node that requires grad. Calling it again adds to existing gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.value(root).shape();
        if rs != Shape::scalar() {
            return Err(Error::Contract(format!("backward root must be (1,1,1,1), got {rs}")));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            match node.grad.as_mut() {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut send = |i: usize, t: Tensor<T>| {
            if !self.nodes[i].requires_grad {
                return;
            }
            match grads[i].as_mut() {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                None => grads[i] = Some(t),
            }
        };
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Binary { a, b, kind, bcast } => {
                let (a, b) = (*a, *b);
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                let ashape = av.shape();
                if self.needs(a) {
                    let ga = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.clone(),
                        BinaryKind::Mul => g.elementwise(bv, BinaryKind::Mul).expect("broadcast checked"),
                    };
                    send(a, ga);
                }
                if self.needs(b) {
                    let mut gb = Tensor::zeros(bv.shape());
                    let sign = if *kind == BinaryKind::Sub { -T::one() } else { T::one() };
                    let gd = g.data();
                    let out = gb.data_mut();
                    for i in 0..gd.len() {
                        let j = bcast.source_index(ashape, i);
                        let term = match kind {
                            BinaryKind::Mul => gd[i] * av.data()[i],
                            _ => gd[i] * sign,
                        };
                        out[j] += term;
                    }
                    send(b, gb);
                }
            }
            Op::Affine { x, scale } => send(*x, g.map(|v| v * *scale)),
            Op::Conv { x, w, b, spec } => {
                let need = (self.needs(*x), self.needs(*w), b.map(|b| self.needs(b)).unwrap_or(false));
                let grads_c = nn::conv2d_backward(&self.nodes[*x].value, spec, &self.nodes[*w].value, g, need);
                if let Some(dx) = grads_c.input {
                    send(*x, dx);
                }
                if let Some(dw) = grads_c.weight {
                    send(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, grads_c.bias) {
                    send(*b, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, saved, train } => {
                let (dx, dg, db) = nn::batchnorm_backward(saved, &self.nodes[*gamma].value, g, *train);
                send(*x, dx);
                send(*gamma, dg);
                send(*beta, db);
            }
            Op::Act { x, kind } => {
                send(*x, nn::activation_backward(&self.nodes[*x].value, &node.value, g, *kind));
            }
            Op::Softmax { x } => send(*x, nn::softmax_channels_backward(&node.value, g)),
            Op::MaxPool { x, argmax } => send(*x, nn::maxpool2_backward(self.nodes[*x].value.shape(), argmax, g)),
            Op::AvgPool { x } => send(*x, nn::avgpool2_backward(self.nodes[*x].value.shape(), g)),
            Op::Upsample { x } => send(*x, nn::upsample_bilinear2_backward(self.nodes[*x].value.shape(), g)),
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.shape().c;
                    if self.needs(p) {
                        send(p, g.slice_channels(offset, c).expect("in range"));
                    }
                    offset += c;
                }
            }
            Op::Slice { x, start } => {
                let xs = self.nodes[*x].value.shape();
                let gs = g.shape();
                let mut dx = Tensor::zeros(xs);
                for n in 0..xs.n {
                    for c in 0..gs.c {
                        dx.plane_mut(n, start + c).copy_from_slice(g.plane(n, c));
                    }
                }
                send(*x, dx);
            }
            Op::ChannelMean { x } => {
                let xs = self.nodes[*x].value.shape();
                let inv = T::one() / T::from_f64(xs.c as f64);
                let mut dx = Tensor::zeros(xs);
                for n in 0..xs.n {
                    let src = g.plane(n, 0);
                    for c in 0..xs.c {
                        for (d, &v) in dx.plane_mut(n, c).iter_mut().zip(src) {
                            *d = v * inv;
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Permute { x, perm } => send(*x, nn::unpermute_channels(g, perm)),
            Op::Sum { x } => {
                let s = self.nodes[*x].value.shape();
                send(*x, Tensor::full(s, g.data()[0]));
            }
            Op::Mean { x } => {
                let s = self.nodes[*x].value.shape();
                send(*x, Tensor::full(s, g.data()[0] / T::from_f64(s.len() as f64)));
            }
            Op::BceLogits { x, target } => {
                let z = &self.nodes[*x].value;
                let scale = g.data()[0] / T::from_f64(z.len() as f64);
                let data = z.data().iter().zip(target.data()).map(|(&zi, &ti)| (nn::sigmoid(zi) - ti) * scale).collect();
                send(*x, Tensor::from_vec(z.shape(), data).expect("shape"));
            }
            Op::SoftDice { x, target, smooth } => {
                let z = &self.nodes[*x].value;
                let (mut inter, mut total) = (0.0f64, 0.0f64);
                for (&zi, &ti) in z.data().iter().zip(target.data()) {
                    let p = nn::sigmoid(zi.as_f64());
                    inter += p * ti.as_f64();
                    total += p + ti.as_f64();
                }
                let s = smooth.as_f64();
                let num = 2.0 * inter + s;
                let den = total + s;
                let up = g.data()[0].as_f64();
                let data = z
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&zi, &ti)| {
                        let p = nn::sigmoid(zi.as_f64());
                        // d(1 - num/den)/dp, chained through sigmoid.
                        let dp = -(2.0 * ti.as_f64() * den - num) / (den * den);
                        T::from_f64(up * dp * p * (1.0 - p))
                    })
                    .collect();
                send(*x, Tensor::from_vec(z.shape(), data).expect("shape"));
            }
            Op::Mse { x, target } => {
                let xv = &self.nodes[*x].value;
                let scale = T::from_f64(2.0) * g.data()[0] / T::from_f64(xv.len() as f64);
                let data = xv.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * scale).collect();
                send(*x, Tensor::from_vec(xv.shape(), data).expect("shape"));
            }
        }
    }
}

impl<T: Real> Graph for Tape<T> {
    type Elem = T;
    type V = Var;

    fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    fn parameter(&mut self, t: &Tensor<T>) -> Var {
        let rg = self.params_require_grad;
        self.leaf(t.clone(), rg)
    }

    fn conv2d(&mut self, x: Var, spec: &ConvSpec, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = nn::conv2d_forward(self.value(x), spec, self.value(weight), bias.map(|b| self.value(b)))?;
        let mut inputs = vec![x.0, weight.0];
        inputs.extend(bias.map(|b| b.0));
        let spec = *spec;
        Ok(self.push(out, &inputs, || Op::Conv { x: x.0, w: weight.0, b: bias.map(|b| b.0), spec }))
    }

    fn batchnorm2d(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>) -> Result<Var> {
        let (out, saved, train) = match mode {
            BnMode::Train(running) => {
                let (out, saved) = nn::batchnorm_forward(self.value(x), self.value(gamma), self.value(beta), None)?;
                if let Some(r) = running {
                    let s = self.value(x).shape();
                    r.update(&saved.batch_mean, &saved.batch_var, s.n * s.plane());
                }
                (out, saved, true)
            }
            BnMode::Infer(r) if !self.recording || ![x, gamma, beta].iter().any(|v| self.needs(v.0)) => {
                let out = nn::batchnorm_infer(self.value(x), self.value(gamma), self.value(beta), r)?;
                return Ok(self.push(out, &[], || Op::Leaf));
            }
            BnMode::Infer(r) => {
                let (out, saved) = nn::batchnorm_forward(self.value(x), self.value(gamma), self.value(beta), Some(r))?;
                (out, saved, false)
            }
        };
        Ok(self.push(out, &[x.0, gamma.0, beta.0], || Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, saved, train }))
    }

    fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = nn::activation_forward(self.value(x), kind);
        self.push(out, &[x.0], || Op::Act { x: x.0, kind })
    }

    fn softmax_channels(&mut self, x: Var) -> Var {
        let out = nn::softmax_channels(self.value(x));
        self.push(out, &[x.0], || Op::Softmax { x: x.0 })
    }

    fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = nn::maxpool2_forward(self.value(x))?;
        Ok(self.push(out, &[x.0], || Op::MaxPool { x: x.0, argmax }))
    }

    fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let out = nn::avgpool2_forward(self.value(x))?;
        Ok(self.push(out, &[x.0], || Op::AvgPool { x: x.0 }))
    }

    fn upsample_bilinear2(&mut self, x: Var) -> Var {
        let out = nn::upsample_bilinear2_forward(self.value(x));
        self.push(out, &[x.0], || Op::Upsample { x: x.0 })
    }

    fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let bcast = Broadcast::resolve("elementwise", self.shape(a), self.shape(b))?;
        let out = self.value(a).elementwise(self.value(b), kind)?;
        Ok(self.push(out, &[a.0, b.0], || Op::Binary { a: a.0, b: b.0, kind, bcast }))
    }

    fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::from_f64(scale), T::from_f64(shift));
        let out = self.value(x).map(|v| v * s + t);
        self.push(out, &[x.0], || Op::Affine { x: x.0, scale: s })
    }

    fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_channels(&refs)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out, &idx, || Op::Concat { parts: idx.clone() }))
    }

    fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_channels(start, len)?;
        Ok(self.push(out, &[x.0], || Op::Slice { x: x.0, start }))
    }

    fn channel_mean(&mut self, x: Var) -> Var {
        let out = self.value(x).channel_mean();
        self.push(out, &[x.0], || Op::ChannelMean { x: x.0 })
    }

    fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let perm = nn::shuffle_permutation(self.shape(x).c, groups)?;
        let out = nn::permute_channels(self.value(x), &perm);
        Ok(self.push(out, &[x.0], || Op::Permute { x: x.0, perm }))
    }
}

/// A scalar-valued function that can be evaluated on tapes of either
/// precision, so the same definition serves the analytic pass and the
/// 64-bit numeric shadow.
pub trait ScalarFn {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

/// Fraction of a tensor's largest gradient below which `grad_check` compares
/// absolute rather than relative error.
pub const GRAD_FLOOR: f64 = 1e-3;

/// Central-difference gradient check.
///
/// The analytic gradient is taken from a backward pass in `T`; the numeric
/// reference `(f(x+eps·e) - f(x-eps·e)) / (2·eps)` is always evaluated on the
/// 64-bit instantiation of `f` at the same (exactly widened) inputs. Returns
/// the maximum over all input coordinates of `|a - n| / max(|a|, |n|, floor)`
/// where `floor = max(1e-8, GRAD_FLOOR · max|n|)` over the same input tensor.
/// Coordinates far below the tensor's gradient scale are thus judged on
/// absolute error, which keeps rounding noise on near-zero entries from
/// dominating.
pub fn grad_check<T: Real, F: ScalarFn>(f: &F, inputs: &[Tensor<T>], eps: f64) -> Result<f64> {
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::Parameter(format!("grad_check eps {eps} outside [1e-6, 1e-2]")));
    }
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = f.eval(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| t.zeros_like()))
        .collect();
    drop(tape);

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::inference();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f.eval(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };
    let mut probe: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let mut worst = 0.0f64;
    for (k, grads) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grads.len());
        for i in 0..grads.len() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
        let floor = numeric.iter().fold(0.0f64, |m, n| m.max(n.abs())) * GRAD_FLOOR;
        for (a, &n) in grads.data().iter().zip(&numeric) {
            let a = a.as_f64();
            let err = (a - n).abs() / a.abs().max(n.abs()).max(floor).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
