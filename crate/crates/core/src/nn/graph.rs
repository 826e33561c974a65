//! Tape-based reverse-mode differentiation over batched tensors.
//!
//! Every method on [`Graph`] evaluates eagerly and records the op; [`Graph::backward`]
//! walks the tape in reverse and returns parameter gradients.

use super::kernels::{self, ConvGeom, PoolGeom};
use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Variable,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<u32> },
    LeakyRelu { x: Var, slope: f64 },
    Relu { x: Var },
    Dense { x: Var, w: Var, b: Var },
    Softmax { x: Var },
    Grl { x: Var, lambda: f64 },
    Reshape { x: Var },
    Rows { x: Var, start: usize },
    Concat { a: Var, b: Var },
    CrossEntropy { probs: Var, labels: Vec<usize> },
    WeightedSum { terms: Vec<(Var, f64)> },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new() }
    }

    fn push(&mut self, value: Option<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("every non-parameter node stores its value"),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if it reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Constant input: no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Some(t), Op::Input, false)
    }

    /// Leaf whose gradient is retained after `backward`.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Some(t), Op::Variable, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(None, Op::Param(id), true)
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))?;
        Ok(self.param(id))
    }

    /// Valid cross-correlation; `x: [N, Cin, H, W]`, `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::Shape(format!("conv2d input {xs:?}, kernel {ws:?}, bias {bs:?}")));
        }
        if xs[2] < ws[2] || xs[3] < ws[3] || stride == 0 {
            return Err(Error::Shape(format!("conv2d kernel {ws:?} larger than input {xs:?}")));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        let shape = [geom.batch, geom.out_channels, geom.out_height(), geom.out_width()];
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Some(Tensor::new(&shape, out)?), Op::Conv2d { x, w, b, geom }, needs))
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] < window || xs[3] < window || window == 0 || stride == 0 {
            return Err(Error::Shape(format!("maxpool {window}x{window} on {xs:?}")));
        }
        let geom = PoolGeom { planes: xs[0] * xs[1], height: xs[2], width: xs[3], window, stride };
        let (out, argmax) = kernels::maxpool2d_forward(self.value(x).data(), &geom);
        let shape = [xs[0], xs[1], geom.out_height(), geom.out_width()];
        let needs = self.needs(x);
        Ok(self.push(Some(Tensor::new(&shape, out)?), Op::MaxPool2d { x, argmax }, needs))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| kernels::leaky_relu(v, slope)).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(Some(out), Op::LeakyRelu { x, slope }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| v.max(0.0)).collect()).expect("same shape");
        let needs = self.needs(x);
        self.push(Some(out), Op::Relu { x }, needs)
    }

    /// `x: [N, in]`, `w: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::Shape(format!("dense input {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        let (n, inputs, outputs) = (xs[0], xs[1], ws[1]);
        let y = kernels::dense_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), n, inputs);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Some(Tensor::new(&[n, outputs], y)?), Op::Dense { x, w, b }, needs))
    }

    /// Softmax over the last axis of a `[N, C]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!("softmax expects [N, C], got {:?}", t.shape())));
        }
        let y = kernels::softmax_rows(t.data(), t.shape()[1]);
        let out = Tensor::new(t.shape(), y)?;
        let needs = self.needs(x);
        Ok(self.push(Some(out), Op::Softmax { x }, needs))
    }

    /// Gradient reversal: identity forward, upstream gradient times `-lambda` backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Var {
        let out = self.value(x).clone();
        let needs = self.needs(x);
        self.push(Some(out), Op::Grl { x, lambda }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(Some(out), Op::Reshape { x }, needs))
    }

    /// `[N, ...]` to `[N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Batch rows `start..start + len`.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).rows(start, len)?;
        let needs = self.needs(x);
        Ok(self.push(Some(out), Op::Rows { x, start }, needs))
    }

    /// Feature-axis concatenation of `[N, A]` and `[N, B]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Shape(format!("concat {sa:?} with {sb:?}")));
        }
        let (n, fa, fb) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(n * (fa + fb));
        for i in 0..n {
            data.extend_from_slice(&ta.data()[i * fa..(i + 1) * fa]);
            data.extend_from_slice(&tb.data()[i * fb..(i + 1) * fb]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Some(Tensor::new(&[n, fa + fb], data)?), Op::Concat { a, b }, needs))
    }

    /// Mean `-ln p[label]` over the batch of `[N, C]` probabilities.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(probs);
        let s = t.shape();
        if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
            return Err(Error::Shape(format!("cross-entropy on {s:?} with {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
            return Err(Error::LabelOutOfRange { label: bad, classes: s[1] });
        }
        let loss = kernels::cross_entropy(t.data(), labels, s[1]);
        let needs = self.needs(probs);
        Ok(self.push(Some(Tensor::scalar(loss)), Op::CrossEntropy { probs, labels: labels.to_vec() }, needs))
    }

    /// `Σ cᵢ·sᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::Shape(format!("weighted_sum term has shape {:?}", t.shape())));
            }
            total += c * t.item();
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Some(Tensor::scalar(total)), Op::WeightedSum { terms: terms.to_vec() }, needs))
    }

    fn add_grad(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Backpropagate from the scalar `loss`; returns gradients of every parameter reached.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        self.backward_from(loss, vec![1.0])
    }

    /// Backpropagate an arbitrary upstream gradient `seed` from node `out`.
    pub fn backward_from(&mut self, out: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.value(out).len() {
            return Err(Error::Shape("seed gradient size differs from output".into()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let mut grads = Gradients::for_store(self.store);
        self.nodes[out.0].grad = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Input);
            self.backprop_node(i, &op, &g, &mut grads);
            self.nodes[i].op = op;
            if matches!(self.nodes[i].op, Op::Variable | Op::Input) || i == out.0 {
                self.nodes[i].grad = Some(g);
            }
        }
        Ok(grads)
    }

    fn backprop_node(&mut self, i: usize, op: &Op, g: &[f64], grads: &mut Gradients) {
        match op {
            Op::Input | Op::Variable => {}
            Op::Param(id) => grads.accumulate(*id, g),
            Op::Conv2d { x, w, b, geom } => {
                let need_dx = self.needs(*x);
                let cg = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    need_dx,
                );
                if let Some(dx) = cg.input {
                    self.add_grad(*x, dx);
                }
                self.route_param(*w, cg.kernel, grads);
                self.route_param(*b, cg.bias, grads);
            }
            Op::MaxPool2d { x, argmax } => {
                let n = self.value(*x).len();
                let dx = kernels::maxpool2d_backward(g, argmax, n);
                self.add_grad(*x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { slope * gv })
                    .collect();
                self.add_grad(*x, dx);
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.add_grad(*x, dx);
            }
            Op::Dense { x, w, b } => {
                let xs = self.value(*x).shape();
                let (n, inputs) = (xs[0], xs[1]);
                let outputs = self.value(*b).len();
                let dg = kernels::dense_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    n,
                    inputs,
                    outputs,
                    self.needs(*x),
                );
                if let Some(dx) = dg.input {
                    self.add_grad(*x, dx);
                }
                self.route_param(*w, dg.weight, grads);
                self.route_param(*b, dg.bias, grads);
            }
            Op::Softmax { x } => {
                let y = self.nodes[i].value.as_ref().expect("softmax output");
                let dx = kernels::softmax_rows_backward(y.data(), g, y.shape()[1]);
                self.add_grad(*x, dx);
            }
            Op::Grl { x, lambda } => {
                let dx = g.iter().map(|v| -lambda * v).collect();
                self.add_grad(*x, dx);
            }
            Op::Reshape { x } => self.add_grad(*x, g.to_vec()),
            Op::Rows { x, start } => {
                let t = self.value(*x);
                let stride = t.len() / t.shape()[0];
                let mut dx = vec![0.0; t.len()];
                dx[start * stride..start * stride + g.len()].copy_from_slice(g);
                self.add_grad(*x, dx);
            }
            Op::Concat { a, b } => {
                let fa = self.value(*a).shape()[1];
                let fb = self.value(*b).shape()[1];
                let n = self.value(*a).shape()[0];
                let mut da = Vec::with_capacity(n * fa);
                let mut db = Vec::with_capacity(n * fb);
                for row in g.chunks(fa + fb) {
                    da.extend_from_slice(&row[..fa]);
                    db.extend_from_slice(&row[fa..]);
                }
                self.add_grad(*a, da);
                self.add_grad(*b, db);
            }
            Op::CrossEntropy { probs, labels } => {
                let t = self.value(*probs);
                let dx = kernels::cross_entropy_backward(t.data(), labels, t.shape()[1], g[0]);
                self.add_grad(*probs, dx);
            }
            Op::WeightedSum { terms } => {
                for &(v, c) in terms {
                    self.add_grad(v, vec![c * g[0]]);
                }
            }
        }
    }

    fn route_param(&mut self, v: Var, g: Vec<f64>, grads: &mut Gradients) {
        match self.nodes[v.0].op {
            // Parameters are leaves; deliver straight to the gradient set.
            Op::Param(id) => grads.accumulate_owned(id, g),
            _ => self.add_grad(v, g),
        }
    }
}
