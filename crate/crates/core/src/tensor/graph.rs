//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every primitive pushes a new
//! node whose parents already exist, so insertion order is a topological
//! order and [`Graph::backward`] simply walks the tape in reverse. The graph
//! is rebuilt for every training step; node values are never mutated after
//! they are pushed.

use super::kernels::{self, ConvDims};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive that produced a node, with its ordered inputs.
#[derive(Debug, Clone)]
pub enum Op<F: Scalar> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, F),
    Clamp { input: Var, lo: F, hi: F },
    GlobalAvgPool(Var),
    Dense { input: Var, weight: Var, bias: Var },
    ConcatChannels(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    /// Masked binary cross-entropy on logits, divided by `denom`.
    BceWithLogits {
        logits: Var,
        labels: Tensor<F>,
        mask: Tensor<F>,
        denom: f64,
    },
}

impl<F: Scalar> Op<F> {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Add(..) => "add",
            Op::Mul(..) => "multiply",
            Op::Div(..) => "divide",
            Op::AddScalar(_) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Clamp { .. } => "clamp",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Dense { .. } => "dense",
            Op::ConcatChannels(_) => "concat_channels",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => vec![*input, *kernel, *bias],
            Op::Dense {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::AddScalar(a)
            | Op::Scale(a, _)
            | Op::GlobalAvgPool(a)
            | Op::Reshape(a)
            | Op::Sum(a) => vec![*a],
            Op::Clamp { input, .. } => vec![*input],
            Op::BceWithLogits { logits, .. } => vec![*logits],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::ConcatChannels(v) => v.clone(),
        }
    }
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Numerically stable logistic function.
#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// How the second operand of a binary op lines up with the first.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Second operand is 1×C×1×1 against N×C×H×W.
    Channel { n: usize, c: usize, hw: usize },
}

fn broadcast_kind<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    if let (Ok([n, c, h, w]), Ok([1, bc, 1, 1])) = (a.dims4(), b.dims4()) {
        if bc == c {
            return Ok(Broadcast::Channel { n, c, hw: h * w });
        }
    }
    Err(Error::shape(format!(
        "cannot broadcast {:?} against {:?}",
        b.shape(),
        a.shape()
    )))
}

/// An autodiff tape.
pub struct Graph<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op<F> {
        &self.nodes[v.0].op
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        let [o, kc, kh, kw] = self.value(kernel).dims4()?;
        if kc != c {
            return Err(Error::shape(format!(
                "conv2d: input has {c} channels, kernel expects {kc}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!(
                "conv2d: kernel must be square with odd size, got {kh}x{kw}"
            )));
        }
        if self.value(bias).shape() != [o] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?} does not match {o} output channels",
                self.value(bias).shape()
            )));
        }
        let dims = ConvDims { n, c, o, h, w, k: kh };
        let mut out = Tensor::zeros(&[n, o, h, w])?;
        kernels::conv2d_forward(
            &dims,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            out.data_mut(),
        );
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(F::zero()));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(ta, tb)?;
        let mut out = ta.clone();
        match kind {
            Broadcast::Same => {
                for (o, &y) in out.data_mut().iter_mut().zip(tb.data()) {
                    *o = f(*o, y);
                }
            }
            Broadcast::Channel { n, c, hw } => {
                for ni in 0..n {
                    for ci in 0..c {
                        let s = tb.data()[ci];
                        for o in &mut out.data_mut()[(ni * c + ci) * hw..][..hw] {
                            *o = f(*o, s);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Elementwise sum. `b` may be a 1×C×1×1 channel vector.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product. `b` may be a 1×C×1×1 channel vector.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Elementwise quotient of equal-shaped tensors.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "div: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out = self.binary(a, b, |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b)))
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { input: x, lo, hi })
    }

    /// Mean over each H×W plane, giving N×C×1×1.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.dims4()?;
        let hw = h * w;
        let data = t
            .data()
            .chunks_exact(hw)
            .map(|p| F::from_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64))
            .collect();
        let out = Tensor::new(&[n, c, 1, 1], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(x)))
    }

    /// Affine map `input · weightᵀ + bias` for input N×C, weight D×C, bias D.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (ti, tw, tb) = (self.value(input), self.value(weight), self.value(bias));
        let (&[n, c], &[d, wc]) = (ti.shape(), tw.shape()) else {
            return Err(Error::shape(format!(
                "dense: expected N×C input and D×C weight, got {:?} and {:?}",
                ti.shape(),
                tw.shape()
            )));
        };
        if wc != c || tb.shape() != [d] {
            return Err(Error::shape(format!(
                "dense: input {:?}, weight {:?}, bias {:?} do not agree",
                ti.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        let mut out = Vec::with_capacity(n * d);
        for row in ti.data().chunks_exact(c) {
            for (wrow, &b) in tw.data().chunks_exact(c).zip(tb.data()) {
                let acc: f64 = row
                    .iter()
                    .zip(wrow)
                    .map(|(x, w)| x.as_f64() * w.as_f64())
                    .sum();
                out.push(F::from_f64(acc) + b);
            }
        }
        let out = Tensor::new(&[n, d], out)?;
        Ok(self.push(
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::shape("concat_channels: no inputs"));
        };
        let [n, _, h, w] = self.value(first).dims4()?;
        let mut total = 0;
        for &v in inputs {
            let [vn, vc, vh, vw] = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(format!(
                    "concat_channels: {:?} does not match N={n}, H={h}, W={w}",
                    self.value(v).shape()
                )));
            }
            total += vc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total * hw);
        for ni in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[ni * c * hw..][..c * hw]);
            }
        }
        let out = Tensor::new(&[n, total, h, w], data)?;
        Ok(self.push(out, Op::ConcatChannels(inputs.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(F::from_f64(self.value(x).sum_f64()));
        self.push(out, Op::Sum(x))
    }

    /// `Σ_{mask=1} [softplus(a) − y·a] / denom` for logits `a`, computed in the
    /// log-sum-exp form and accumulated in 64-bit.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        labels: &Tensor<F>,
        mask: &Tensor<F>,
        denom: f64,
    ) -> Result<Var> {
        let a = self.value(logits);
        if a.shape() != labels.shape() || a.shape() != mask.shape() {
            return Err(Error::shape(format!(
                "bce: logits {:?}, labels {:?}, mask {:?} differ",
                a.shape(),
                labels.shape(),
                mask.shape()
            )));
        }
        if !(denom > 0.0) {
            return Err(Error::contract("bce: normalizer must be positive"));
        }
        let mut acc = 0.0f64;
        for ((&z, &y), &m) in a.data().iter().zip(labels.data()).zip(mask.data()) {
            if m != F::zero() {
                let z = z.as_f64();
                acc += softplus(z) - y.as_f64() * z;
            }
        }
        let out = Tensor::scalar(F::from_f64(acc / denom));
        Ok(self.push(
            out,
            Op::BceWithLogits {
                logits,
                labels: labels.clone(),
                mask: mask.clone(),
                denom,
            },
        ))
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        if !self.value(root).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        let mut seed = Tensor::zeros_like(self.value(root));
        seed.data_mut()[0] = F::one();
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, f: impl FnOnce(&mut Tensor<F>)) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros_like(&node.value));
        f(slot);
    }

    fn propagate(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let [n, c, h, w] = self.value(*input).dims4().expect("checked in forward");
                let [o, _, k, _] = self.value(*kernel).dims4().expect("checked in forward");
                let dims = ConvDims { n, c, o, h, w, k };
                self.accumulate(grads, *input, |gi| {
                    kernels::conv2d_backward_input(
                        &dims,
                        self.value(*kernel).data(),
                        gd,
                        gi.data_mut(),
                    )
                });
                let want_k = self.nodes[kernel.0].requires_grad;
                let want_b = self.nodes[bias.0].requires_grad;
                let mut gk = want_k.then(|| {
                    grads[kernel.0]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros_like(self.value(*kernel)))
                });
                let mut gb = want_b.then(|| {
                    grads[bias.0]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros_like(self.value(*bias)))
                });
                kernels::conv2d_backward_params(
                    &dims,
                    self.value(*input).data(),
                    gd,
                    gk.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = gk {
                    grads[kernel.0] = Some(t);
                }
                if let Some(t) = gb {
                    grads[bias.0] = Some(t);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &v) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                        if v > F::zero() {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let s = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &sv) in gx.data_mut().iter_mut().zip(gd).zip(s) {
                        *o += gi * sv * (F::one() - sv);
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &v) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                        *o += gi * sigmoid(v);
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| {
                    for (o, &gi) in ga.data_mut().iter_mut().zip(gd) {
                        *o += gi;
                    }
                });
                let kind = broadcast_kind(self.value(*a), self.value(*b)).expect("checked");
                self.accumulate(grads, *b, |gb| match kind {
                    Broadcast::Same => {
                        for (o, &gi) in gb.data_mut().iter_mut().zip(gd) {
                            *o += gi;
                        }
                    }
                    Broadcast::Channel { n, c, hw } => {
                        for ci in 0..c {
                            let mut acc = 0.0f64;
                            for ni in 0..n {
                                acc += gd[(ni * c + ci) * hw..][..hw]
                                    .iter()
                                    .map(|v| v.as_f64())
                                    .sum::<f64>();
                            }
                            gb.data_mut()[ci] += F::from_f64(acc);
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let kind = broadcast_kind(ta, tb).expect("checked");
                self.accumulate(grads, *a, |ga| match kind {
                    Broadcast::Same => {
                        for ((o, &gi), &y) in ga.data_mut().iter_mut().zip(gd).zip(tb.data()) {
                            *o += gi * y;
                        }
                    }
                    Broadcast::Channel { n, c, hw } => {
                        for ni in 0..n {
                            for ci in 0..c {
                                let s = tb.data()[ci];
                                let off = (ni * c + ci) * hw;
                                for (o, &gi) in ga.data_mut()[off..off + hw]
                                    .iter_mut()
                                    .zip(&gd[off..off + hw])
                                {
                                    *o += gi * s;
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| match kind {
                    Broadcast::Same => {
                        for ((o, &gi), &x) in gb.data_mut().iter_mut().zip(gd).zip(ta.data()) {
                            *o += gi * x;
                        }
                    }
                    Broadcast::Channel { n, c, hw } => {
                        for ci in 0..c {
                            let mut acc = 0.0f64;
                            for ni in 0..n {
                                let off = (ni * c + ci) * hw;
                                acc += gd[off..off + hw]
                                    .iter()
                                    .zip(&ta.data()[off..off + hw])
                                    .map(|(g, x)| g.as_f64() * x.as_f64())
                                    .sum::<f64>();
                            }
                            gb.data_mut()[ci] += F::from_f64(acc);
                        }
                    }
                });
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &y) in ga.data_mut().iter_mut().zip(gd).zip(tb) {
                        *o += gi / y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (((o, &gi), &x), &y) in gb.data_mut().iter_mut().zip(gd).zip(ta).zip(tb) {
                        *o -= gi * x / (y * y);
                    }
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| {
                    for (o, &gi) in gx.data_mut().iter_mut().zip(gd) {
                        *o += gi;
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |gx| {
                    for (o, &gi) in gx.data_mut().iter_mut().zip(gd) {
                        *o += gi * *c;
                    }
                });
            }
            Op::Clamp { input, lo, hi } => {
                let xv = self.value(*input).data();
                self.accumulate(grads, *input, |gx| {
                    for ((o, &gi), &v) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                        if v > *lo && v < *hi {
                            *o += gi;
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.value(*x).dims4().expect("checked");
                let hw = h * w;
                let inv = F::from_f64(1.0 / hw as f64);
                self.accumulate(grads, *x, |gx| {
                    for (plane, &gi) in gx.data_mut().chunks_exact_mut(hw).zip(gd) {
                        let v = gi * inv;
                        for o in plane {
                            *o += v;
                        }
                    }
                });
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (ti, tw) = (self.value(*input), self.value(*weight));
                let c = ti.shape()[1];
                let d = tw.shape()[0];
                self.accumulate(grads, *input, |gi| {
                    for (grow, orow) in gd.chunks_exact(d).zip(gi.data_mut().chunks_exact_mut(c)) {
                        for ci in 0..c {
                            let acc: f64 = (0..d)
                                .map(|di| grow[di].as_f64() * tw.data()[di * c + ci].as_f64())
                                .sum();
                            orow[ci] += F::from_f64(acc);
                        }
                    }
                });
                self.accumulate(grads, *weight, |gw| {
                    for di in 0..d {
                        for ci in 0..c {
                            let acc: f64 = gd
                                .chunks_exact(d)
                                .zip(ti.data().chunks_exact(c))
                                .map(|(grow, irow)| grow[di].as_f64() * irow[ci].as_f64())
                                .sum();
                            gw.data_mut()[di * c + ci] += F::from_f64(acc);
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for di in 0..d {
                        let acc: f64 = gd.chunks_exact(d).map(|r| r[di].as_f64()).sum();
                        gb.data_mut()[di] += F::from_f64(acc);
                    }
                });
            }
            Op::ConcatChannels(inputs) => {
                let [n, total, h, w] = node.value.dims4().expect("checked");
                let hw = h * w;
                let mut c_off = 0;
                for &v in inputs {
                    let c = self.value(v).shape()[1];
                    self.accumulate(grads, v, |gv| {
                        for ni in 0..n {
                            let src = &gd[(ni * total + c_off) * hw..][..c * hw];
                            for (o, &gi) in gv.data_mut()[ni * c * hw..][..c * hw].iter_mut().zip(src) {
                                *o += gi;
                            }
                        }
                    });
                    c_off += c;
                }
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.accumulate(grads, *x, |gx| {
                    for o in gx.data_mut() {
                        *o += s;
                    }
                });
            }
            Op::BceWithLogits {
                logits,
                labels,
                mask,
                denom,
            } => {
                let scale = gd[0].as_f64() / denom;
                let a = self.value(*logits).data();
                self.accumulate(grads, *logits, |gl| {
                    for (((o, &z), &y), &m) in gl
                        .data_mut()
                        .iter_mut()
                        .zip(a)
                        .zip(labels.data())
                        .zip(mask.data())
                    {
                        if m != F::zero() {
                            let d = sigmoid(z.as_f64()) - y.as_f64();
                            *o += F::from_f64(d * scale);
                        }
                    }
                });
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F: Scalar = f32> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// require a gradient or is unreachable from the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_all_ones_counts_neighbours() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
        let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
        let b = g.constant(Tensor::zeros(&[1]).unwrap());
        let y = g.conv2d(x, k, b).unwrap();
        let out = g.value(y).data();
        assert_eq!(out[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(out[corner], 4.0);
        }
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn conv_identity_kernel_is_bit_exact() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = vec![1.5, -0.0, 3.25e-20, -7.0, 0.0, 1e30, -2.0, 0.1, 5.0, 6.0, -1e-38, 8.0];
        let x = g.constant(t(&[1, 1, 3, 4], &data));
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = g.constant(t(&[1, 1, 3, 3], &kd));
        let b = g.constant(Tensor::zeros(&[1]).unwrap());
        let y = g.conv2d(x, k, b).unwrap();
        let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(g.value(y).data()), bits(&data));
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]).unwrap());
        let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]).unwrap());
        assert!(matches!(g.conv2d(x, k, b), Err(Error::Shape(_))));
        let k2 = g.constant(Tensor::zeros(&[1, 2, 2, 2]).unwrap());
        assert!(g.conv2d(x, k2, b).is_err());
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[3], vec![0.0, -2.5, 2.0]).unwrap());
        let s = g.sigmoid(x);
        let sp = g.softplus(x);
        let r = g.relu(x);
        assert_eq!(g.value(s).data()[0], 0.5);
        assert!((g.value(sp).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g.value(sp).data()[0] - 0.693147).abs() < 1e-6);
        assert_eq!(g.value(r).data()[1], 0.0);
        assert_eq!(g.value(r).data()[2], 2.0);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!(sigmoid(-100.0f32) > 0.0);
        assert!(softplus(1000.0f64).is_finite());
        assert_eq!(softplus(-1000.0f64), 0.0);
    }

    #[test]
    fn binary_broadcast_rules() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full(&[2, 3, 2, 2], 1.0).unwrap());
        let b = g.constant(t(&[1, 3, 1, 1], &[1.0, 2.0, 3.0]));
        let y = g.mul(a, b).unwrap();
        assert_eq!(g.value(y).data()[4], 2.0);
        assert_eq!(g.value(y).data()[12 + 8], 3.0);
        let bad = g.constant(Tensor::zeros(&[1, 2, 1, 1]).unwrap());
        assert!(matches!(g.add(a, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn pool_and_dense() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
        let c = g.constant(Tensor::full(&[1, 2, 3, 3], 7.25).unwrap());
        let pc = g.global_avg_pool(c).unwrap();
        assert_eq!(g.value(pc).data(), &[7.25, 7.25]);

        let inp = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let eye = g.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let zb = g.constant(Tensor::zeros(&[3]).unwrap());
        let y = g.dense(inp, eye, zb).unwrap();
        assert_eq!(g.value(y), g.value(inp));
        let zw = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let bb = g.constant(t(&[2], &[0.5, -1.0]));
        let y2 = g.dense(inp, zw, bb).unwrap();
        assert_eq!(g.value(y2).data(), &[0.5, -1.0, 0.5, -1.0]);
        let badw = g.constant(Tensor::zeros(&[2, 4]).unwrap());
        assert!(g.dense(inp, badw, bb).is_err());
    }

    #[test]
    fn concat_layout_and_adjoint() {
        let mut g = Graph::<f32>::new();
        let a = g.param(t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.param(t(&[1, 2, 1, 2], &[5.0, 6.0, 7.0, 8.0]));
        let single = g.concat_channels(&[a]).unwrap();
        assert_eq!(g.value(single), g.value(a));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 4, 1, 2]);
        assert_eq!(&g.value(c).data()[..4], g.value(a).data());
        let w = g.constant(t(&[1, 4, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let prod = g.mul(c, w).unwrap();
        let s = g.sum(prod);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[5.0, 6.0, 7.0, 8.0]);
        let bad = g.constant(Tensor::zeros(&[1, 1, 2, 2]).unwrap());
        assert!(g.concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(0.0));
        let grads = g.backward(x).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 1.0);
        let s = g.sigmoid(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn backward_sums_fan_out() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(1.5));
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 2.0 * 1.5 + 1.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(&[2]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f32>::new();
        let c = g.constant(Tensor::scalar(2.0));
        let p = g.param(Tensor::scalar(3.0));
        let y = g.mul(c, p).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().item(), 2.0);
    }

    #[test]
    fn bce_single_pixel_at_zero_is_ln2() {
        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::scalar(0.0));
        let y = Tensor::scalar(1.0);
        let m = Tensor::scalar(1.0);
        let l = g.bce_with_logits(z, &y, &m, 1.0).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(z).unwrap().item(), -0.5);
    }
}
