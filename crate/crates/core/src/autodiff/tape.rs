//! Define-by-run tape.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to the
//! owning [`Tape`]. Node ids equal creation order, so reverse creation order
//! is a valid topological order for the backward sweep.

use std::cell::RefCell;
use std::rc::Rc;

use crate::autodiff::kernels::{self, ConvDims};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Backward rule for an operation defined outside this module.
pub trait CustomBackward {
    fn name(&self) -> &str;

    /// Gradient with respect to each input, given the upstream gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Rc<Vec<f64>>),
    AddConst(usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Reshape(usize),
    Transpose(usize),
    Expand(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    Embedding { table: usize, ids: Rc<Vec<usize>> },
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    Bce {
        probs: usize,
        targets: Rc<Vec<f64>>,
    },
    BceLogits {
        logits: usize,
        targets: Rc<Vec<f64>>,
        weights: Rc<Vec<f64>>,
        pos_weight: f64,
        norm: f64,
    },
    CrossEntropy {
        logits: usize,
        labels: Rc<Vec<usize>>,
        weights: Rc<Vec<f64>>,
        norm: f64,
    },
    Conv1d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        groups: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Rc<Vec<f64>>,
        inv_std: Rc<Vec<f64>>,
        // Some(mask) when statistics come from this batch; None for frozen statistics.
        batch_stats: Option<Rc<Vec<f64>>>,
    },
    GradReverse(usize, f64),
    GradClamp(usize, f64),
    Custom {
        inputs: Vec<usize>,
        rule: Box<dyn CustomBackward>,
    },
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    // Accumulated gradients of leaves, indexed by node id.
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Broadcast relation between two shapes: equal, or one is a trailing suffix of the other.
fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() >= b.len() && a.ends_with(b) {
        Ok(a.to_vec())
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok(b.to_vec())
    } else {
        Err(Error::shape(op, a, b))
    }
}

/// Sums a full-size gradient down to a broadcast operand of `n` elements.
fn reduce_to(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        inner.leaf_grads.push(None);
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Op::Leaf)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Op::Leaf)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[var.id];
        inner.leaf_grads[var.id]
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Records an operation whose backward rule is supplied by the caller.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], value: Tensor, rule: Box<dyn CustomBackward>) -> Var<'t> {
        let requires = inputs.iter().any(|v| v.requires_grad());
        let ids = inputs.iter().map(|v| v.id).collect();
        self.push(value, requires, Op::Custom { inputs: ids, rule })
    }

    pub fn concat<'t>(&'t self, inputs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?
            .value();
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let values: Vec<Rc<Tensor>> = inputs.iter().map(|v| v.value()).collect();
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let requires = inputs.iter().any(|v| v.requires_grad());
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(Tensor::from_parts(shape, data), requires, Op::Concat { inputs: ids, axis }))
    }

    /// Row gather: `table[V, D]` at `ids` → `shape ++ [D]`.
    pub fn embedding<'t>(&'t self, table: Var<'t>, ids: &[usize], shape: &[usize]) -> Result<Var<'t>> {
        let tv = table.value();
        if tv.ndim() != 2 {
            return Err(Error::shape("embedding_lookup", tv.shape(), &[]));
        }
        if shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding_lookup", shape, &[ids.len()]));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Lookup(format!("embedding id {id} out of range for table of {v} rows")));
            }
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(d);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            table.requires_grad(),
            Op::Embedding {
                table: table.id,
                ids: Rc::new(ids.to_vec()),
            },
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse_loss<'t>(&'t self, pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
        let (p, t) = (pred.value(), target.value());
        if p.shape() != t.shape() {
            return Err(Error::shape("mse_loss", p.shape(), t.shape()));
        }
        let n = p.len().max(1) as f64;
        let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let requires = pred.requires_grad() || target.requires_grad();
        Ok(self.push(Tensor::scalar(s / n), requires, Op::Mse(pred.id, target.id)))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    pub fn binary_cross_entropy<'t>(&'t self, probs: Var<'t>, targets: &[f64]) -> Result<Var<'t>> {
        let p = probs.value();
        if p.len() != targets.len() {
            return Err(Error::shape("binary_cross_entropy", p.shape(), &[targets.len()]));
        }
        let mut s = 0.0;
        for (&pv, &y) in p.data().iter().zip(targets) {
            if !(0.0..=1.0).contains(&pv) {
                return Err(Error::Domain {
                    op: "binary_cross_entropy",
                    msg: format!("probability {pv} outside [0, 1]"),
                });
            }
            let term = if y > 0.0 { y * pv.ln() } else { 0.0 } + if y < 1.0 { (1.0 - y) * (1.0 - pv).ln() } else { 0.0 };
            if !term.is_finite() {
                return Err(Error::Domain {
                    op: "binary_cross_entropy",
                    msg: format!("log of zero at probability {pv} with target {y}"),
                });
            }
            s -= term;
        }
        let n = p.len().max(1) as f64;
        Ok(self.push(
            Tensor::scalar(s / n),
            probs.requires_grad(),
            Op::Bce {
                probs: probs.id,
                targets: Rc::new(targets.to_vec()),
            },
        ))
    }

    /// Weighted mean of `pos_weight·y·softplus(−x) + (1−y)·softplus(x)`.
    ///
    /// The mean divides by the sum of `weights`; zero total weight gives 0.
    pub fn binary_cross_entropy_with_logits<'t>(
        &'t self,
        logits: Var<'t>,
        targets: &[f64],
        weights: &[f64],
        pos_weight: f64,
    ) -> Result<Var<'t>> {
        let x = logits.value();
        if x.len() != targets.len() || x.len() != weights.len() {
            return Err(Error::shape("binary_cross_entropy_with_logits", x.shape(), &[targets.len(), weights.len()]));
        }
        let norm: f64 = weights.iter().sum();
        let mut s = 0.0;
        for ((&xv, &y), &w) in x.data().iter().zip(targets).zip(weights) {
            if w != 0.0 {
                s += w * (pos_weight * y * kernels::softplus(-xv) + (1.0 - y) * kernels::softplus(xv));
            }
        }
        let value = if norm > 0.0 { s / norm } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(value),
            logits.requires_grad(),
            Op::BceLogits {
                logits: logits.id,
                targets: Rc::new(targets.to_vec()),
                weights: Rc::new(weights.to_vec()),
                pos_weight,
                norm,
            },
        ))
    }

    /// Weighted mean softmax cross-entropy of `logits[M, S]` against class labels.
    pub fn cross_entropy_with_logits<'t>(&'t self, logits: Var<'t>, labels: &[usize], weights: &[f64]) -> Result<Var<'t>> {
        let x = logits.value();
        if x.ndim() != 2 || x.shape()[0] != labels.len() || labels.len() != weights.len() {
            return Err(Error::shape("cross_entropy_with_logits", x.shape(), &[labels.len(), weights.len()]));
        }
        let s = x.shape()[1];
        let norm: f64 = weights.iter().sum();
        let mut total = 0.0;
        for (m, (&label, &w)) in labels.iter().zip(weights).enumerate() {
            if label >= s {
                return Err(Error::Lookup(format!("class label {label} out of range for {s} classes")));
            }
            if w == 0.0 {
                continue;
            }
            let row = &x.data()[m * s..(m + 1) * s];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += w * (lse - row[label]);
        }
        let value = if norm > 0.0 { total / norm } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(value),
            logits.requires_grad(),
            Op::CrossEntropy {
                logits: logits.id,
                labels: Rc::new(labels.to_vec()),
                weights: Rc::new(weights.to_vec()),
                norm,
            },
        ))
    }

    /// Same-padded grouped 1-D cross-correlation: `[B, C_in, T] ⊛ [C_out, C_in/G, k] → [B, C_out, T]`.
    pub fn conv1d<'t>(&'t self, input: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>, groups: usize) -> Result<Var<'t>> {
        let (x, w) = (input.value(), weight.value());
        if x.ndim() != 3 || w.ndim() != 3 {
            return Err(Error::shape("conv1d_grouped", x.shape(), w.shape()));
        }
        let (batch, c_in, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, cig, kernel) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Config(format!(
                "conv1d_grouped: channels in={c_in} out={c_out} not divisible by groups={groups}"
            )));
        }
        if cig != c_in / groups {
            return Err(Error::shape("conv1d_grouped", x.shape(), w.shape()));
        }
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("conv1d_grouped: kernel size {kernel} must be odd")));
        }
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            if b.shape() != [c_out] {
                return Err(Error::shape("conv1d_grouped", b.shape(), &[c_out]));
            }
        }
        let dims = ConvDims {
            batch,
            c_in,
            c_out,
            len,
            kernel,
            groups,
        };
        let out = kernels::conv1d_forward(x.data(), w.data(), bv.as_deref().map(|b| b.data()), &dims);
        let requires = input.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        Ok(self.push(
            Tensor::from_parts(vec![batch, c_out, len], out),
            requires,
            Op::Conv1d {
                input: input.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                groups,
            },
        ))
    }

    /// Per-channel normalization of `[B, C, T]` followed by `gamma·x̂ + beta`.
    ///
    /// With `stats = None` the mean and variance come from the positions where
    /// `mask` (shape `[B, T]` or `[B, C, T]`, all ones when absent) is non-zero; the batch
    /// moments are returned for the caller's running-average update. With
    /// `stats = Some((mean, var))` those values are used as constants.
    pub fn batch_norm<'t>(
        &'t self,
        input: Var<'t>,
        gamma: Var<'t>,
        beta: Var<'t>,
        mask: Option<&[f64]>,
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        let x = input.value();
        if x.ndim() != 3 {
            return Err(Error::shape("batch_norm_1d", x.shape(), &[]));
        }
        let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("batch_norm_1d", x.shape(), &gamma.shape()));
        }
        // Expand the mask to one weight per element.
        let mask: Vec<f64> = match mask {
            Some(m) if m.len() == b * c * t => m.to_vec(),
            Some(m) if m.len() == b * t => (0..b * c * t)
                .map(|i| m[(i / (c * t)) * t + i % t])
                .collect(),
            Some(m) => return Err(Error::shape("batch_norm_1d", &[b, c, t], &[m.len()])),
            None => vec![1.0; b * c * t],
        };
        let xd = x.data();
        let (mean, var) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch_norm_1d", &[c], &[m.len(), v.len()]));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let counts = channel_counts(&mask, b, c, t);
                if let Some(low) = counts.iter().find(|&&n| n < 2.0) {
                    return Err(Error::Contract(format!(
                        "batch_norm_1d needs at least 2 positions per channel in training mode, got {low}"
                    )));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * t;
                        mean[ci] += (off..off + t).map(|i| xd[i] * mask[i]).sum::<f64>();
                    }
                }
                mean.iter_mut().zip(&counts).for_each(|(m, n)| *m /= n);
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * t;
                        var[ci] += (off..off + t)
                            .map(|i| mask[i] * (xd[i] - mean[ci]) * (xd[i] - mean[ci]))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().zip(&counts).for_each(|(v, n)| *v /= n);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (gamma.value(), beta.value());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * t;
                for ti in 0..t {
                    let h = (xd[off + ti] - mean[ci]) * inv_std[ci];
                    xhat[off + ti] = h;
                    out[off + ti] = gv.data()[ci] * h + bv.data()[ci];
                }
            }
        }
        let requires = input.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let batch_stats = stats.is_none().then(|| Rc::new(mask));
        let var_node = self.push(
            Tensor::from_parts(vec![b, c, t], out),
            requires,
            Op::BatchNorm {
                input: input.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat: Rc::new(xhat),
                inv_std: Rc::new(inv_std),
                batch_stats,
            },
        );
        Ok((var_node, mean, var))
    }

    /// Propagates gradients from the scalar `loss` to every reachable leaf.
    /// Repeated calls add onto previously accumulated leaf gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        let inner = &mut *inner;
        let root = &inner.nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut inner.leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            let mut send = |target: usize, contrib: Vec<f64>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, v)| *a += v),
                    slot @ None => *slot = Some(contrib),
                }
            };
            backward_node(nodes, node, &g, &mut send);
        }
        Ok(())
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &[f64], send: &mut dyn FnMut(usize, Vec<f64>)) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let req = |id: usize| nodes[id].requires_grad;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            send(*a, reduce_to(g, val(*a).len()));
            send(*b, reduce_to(g, val(*b).len()));
        }
        Op::Sub(a, b) => {
            send(*a, reduce_to(g, val(*a).len()));
            let mut gb = reduce_to(g, val(*b).len());
            gb.iter_mut().for_each(|v| *v = -*v);
            send(*b, gb);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if req(*a) {
                let full: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * bv[i % bv.len()]).collect();
                send(*a, reduce_to(&full, av.len()));
            }
            if req(*b) {
                let full: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * av[i % av.len()]).collect();
                send(*b, reduce_to(&full, bv.len()));
            }
        }
        Op::MulConst(a, c) => {
            let full: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * c[i % c.len()]).collect();
            send(*a, reduce_to(&full, val(*a).len()));
        }
        Op::AddConst(a) => send(*a, reduce_to(g, val(*a).len())),
        Op::Scale(a, s) => send(*a, g.iter().map(|v| v * s).collect()),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if req(*a) {
                let mut ga = vec![0.0; m * k];
                kernels::matmul_a_bt_acc(g, bv.data(), &mut ga, m, k, n);
                send(*a, ga);
            }
            if req(*b) {
                let mut gb = vec![0.0; k * n];
                kernels::matmul_at_b_acc(av.data(), g, &mut gb, m, k, n);
                send(*b, gb);
            }
        }
        Op::BatchMatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
            if req(*a) {
                let mut ga = vec![0.0; bs * m * k];
                for i in 0..bs {
                    kernels::matmul_a_bt_acc(
                        &g[i * m * n..(i + 1) * m * n],
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        &mut ga[i * m * k..(i + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
                send(*a, ga);
            }
            if req(*b) {
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    kernels::matmul_at_b_acc(
                        &av.data()[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut gb[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                send(*b, gb);
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, inner) = outer_inner(out.shape(), *axis);
            let total = out.shape()[*axis] * inner;
            let mut offset = 0;
            for &id in inputs {
                let chunk = val(id).shape()[*axis] * inner;
                if req(id) {
                    let mut gi = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        gi.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                    }
                    send(id, gi);
                }
                offset += chunk;
            }
        }
        Op::Slice { input, axis, start } => {
            let iv = val(*input);
            let (outer, inner) = outer_inner(iv.shape(), *axis);
            let full = iv.shape()[*axis] * inner;
            let chunk = out.shape()[*axis] * inner;
            let mut gi = vec![0.0; iv.len()];
            for o in 0..outer {
                let dst = o * full + start * inner;
                gi[dst..dst + chunk].copy_from_slice(&g[o * chunk..(o + 1) * chunk]);
            }
            send(*input, gi);
        }
        Op::Reshape(a) => send(*a, g.to_vec()),
        Op::Transpose(a) => {
            let s = out.shape();
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            send(*a, transpose_last2(g, r, c));
        }
        Op::Expand(a) => {
            let s = out.shape();
            let (n, d) = (s[s.len() - 2], s[s.len() - 1]);
            let outer = val(*a).len() / d;
            let mut ga = vec![0.0; outer * d];
            for o in 0..outer {
                for r in 0..n {
                    let src = &g[(o * n + r) * d..(o * n + r + 1) * d];
                    for (acc, v) in ga[o * d..(o + 1) * d].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
            send(*a, ga);
        }
        Op::Sigmoid(a) => send(*a, g.iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect()),
        Op::Tanh(a) => send(*a, g.iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect()),
        Op::Relu(a) => send(
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                .collect(),
        ),
        Op::Exp(a) => send(*a, g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect()),
        Op::Log(a) => send(*a, g.iter().zip(val(*a).data()).map(|(gv, x)| gv / x).collect()),
        Op::Softmax(a) => {
            let n = *out.shape().last().unwrap();
            let mut ga = vec![0.0; g.len()];
            for ((gr, yr), dst) in g.chunks_exact(n).zip(out.data().chunks_exact(n)).zip(ga.chunks_exact_mut(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, gv), y) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = y * (gv - dot);
                }
            }
            send(*a, ga);
        }
        Op::Embedding { table, ids } => {
            let tv = val(*table);
            let d = tv.shape()[1];
            let mut gt = vec![0.0; tv.len()];
            for (i, &id) in ids.iter().enumerate() {
                for (acc, v) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                    *acc += v;
                }
            }
            send(*table, gt);
        }
        Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
        Op::Mean(a) => {
            let n = val(*a).len();
            send(*a, vec![g[0] / n as f64; n]);
        }
        Op::Mse(p, t) => {
            let (pv, tv) = (val(*p).data(), val(*t).data());
            let scale = 2.0 * g[0] / pv.len().max(1) as f64;
            let diff: Vec<f64> = pv.iter().zip(tv).map(|(a, b)| scale * (a - b)).collect();
            if req(*t) {
                send(*t, diff.iter().map(|v| -v).collect());
            }
            send(*p, diff);
        }
        Op::Bce { probs, targets } => {
            let pv = val(*probs).data();
            let n = pv.len().max(1) as f64;
            send(
                *probs,
                pv.iter()
                    .zip(targets.iter())
                    .map(|(p, y)| g[0] * (p - y) / (p * (1.0 - p)) / n)
                    .collect(),
            );
        }
        Op::BceLogits {
            logits,
            targets,
            weights,
            pos_weight,
            norm,
        } => {
            let xv = val(*logits).data();
            let gl = if *norm > 0.0 {
                xv.iter()
                    .zip(targets.iter())
                    .zip(weights.iter())
                    .map(|((x, y), w)| {
                        let s = kernels::sigmoid(*x);
                        g[0] * w * (pos_weight * y * (s - 1.0) + (1.0 - y) * s) / norm
                    })
                    .collect()
            } else {
                vec![0.0; xv.len()]
            };
            send(*logits, gl);
        }
        Op::CrossEntropy {
            logits,
            labels,
            weights,
            norm,
        } => {
            let xv = val(*logits);
            let s = xv.shape()[1];
            let mut gl = vec![0.0; xv.len()];
            if *norm > 0.0 {
                for (m, (&label, &w)) in labels.iter().zip(weights.iter()).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let row = &xv.data()[m * s..(m + 1) * s];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    let scale = g[0] * w / norm;
                    for (j, v) in row.iter().enumerate() {
                        let p = (v - max).exp() / z;
                        gl[m * s + j] = scale * (p - if j == label { 1.0 } else { 0.0 });
                    }
                }
            }
            send(*logits, gl);
        }
        Op::Conv1d {
            input,
            weight,
            bias,
            groups,
        } => {
            let (x, w) = (val(*input), val(*weight));
            let dims = ConvDims {
                batch: x.shape()[0],
                c_in: x.shape()[1],
                c_out: w.shape()[0],
                len: x.shape()[2],
                kernel: w.shape()[2],
                groups: *groups,
            };
            let mut gx = req(*input).then(|| vec![0.0; x.len()]);
            let mut gw = req(*weight).then(|| vec![0.0; w.len()]);
            let mut gb = bias.filter(|b| req(*b)).map(|_| vec![0.0; dims.c_out]);
            kernels::conv1d_backward(
                x.data(),
                w.data(),
                g,
                &dims,
                gx.as_deref_mut(),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
            if let Some(gx) = gx {
                send(*input, gx);
            }
            if let Some(gw) = gw {
                send(*weight, gw);
            }
            if let (Some(b), Some(gb)) = (bias, gb) {
                send(*b, gb);
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let s = out.shape();
            let (b, c, t) = (s[0], s[1], s[2]);
            let gv = val(*gamma).data();
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            // Per-channel Σ d and Σ d·x̂ where d = g·gamma.
            let mut sum_d = vec![0.0; c];
            let mut sum_dx = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * t;
                    for ti in 0..t {
                        let gi = g[off + ti];
                        ggamma[ci] += gi * xhat[off + ti];
                        gbeta[ci] += gi;
                        sum_d[ci] += gi * gv[ci];
                        sum_dx[ci] += gi * gv[ci] * xhat[off + ti];
                    }
                }
            }
            if req(*input) {
                let counts = batch_stats.as_ref().map(|m| channel_counts(m, b, c, t));
                let mut gx = vec![0.0; g.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * t;
                        for ti in 0..t {
                            let d = g[off + ti] * gv[ci];
                            let mut v = inv_std[ci] * d;
                            if let (Some(mask), Some(counts)) = (batch_stats, &counts) {
                                let m = mask[off + ti];
                                v -= m * inv_std[ci] / counts[ci] * (sum_d[ci] + xhat[off + ti] * sum_dx[ci]);
                            }
                            gx[off + ti] = v;
                        }
                    }
                }
                send(*input, gx);
            }
            send(*gamma, ggamma);
            send(*beta, gbeta);
        }
        Op::GradReverse(a, lambda) => send(*a, g.iter().map(|v| -lambda * v).collect()),
        Op::GradClamp(a, bound) => send(*a, g.iter().map(|v| v.clamp(-bound, *bound)).collect()),
        Op::Custom { inputs, rule } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            let grads = rule.backward(&ins, out, g);
            for (&id, gi) in inputs.iter().zip(grads) {
                send(id, gi);
            }
        }
    }
}

fn transpose_last2(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let block = rows * cols;
    for (src, dst) in data.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, self.requires_grad(), op)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value();
        Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
    }

    fn binary(&self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast(name, a.shape(), b.shape())?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let data = (0..n).map(|i| f(ad[i % ad.len()], bd[i % bd.len()])).collect();
        Ok(Tensor::from_parts(shape, data))
    }

    /// Elementwise sum; one operand may broadcast over leading axes.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.binary(other, "add", |a, b| a + b)?;
        let requires = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(v, requires, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.binary(other, "sub", |a, b| a - b)?;
        let requires = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(v, requires, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.binary(other, "mul", |a, b| a * b)?;
        let requires = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(v, requires, Op::Mul(self.id, other.id)))
    }

    /// Multiplies by a constant tensor whose length divides this one's (trailing broadcast).
    pub fn mul_const(&self, c: &[f64]) -> Result<Var<'t>> {
        let v = self.value();
        if c.is_empty() || !v.len().is_multiple_of(c.len()) {
            return Err(Error::shape("mul_const", v.shape(), &[c.len()]));
        }
        let data = v.data().iter().enumerate().map(|(i, x)| x * c[i % c.len()]).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.unary(out, Op::MulConst(self.id, Rc::new(c.to_vec()))))
    }

    /// Adds a constant tensor whose length divides this one's (trailing broadcast).
    pub fn add_const(&self, c: &[f64]) -> Result<Var<'t>> {
        let v = self.value();
        if c.is_empty() || !v.len().is_multiple_of(c.len()) {
            return Err(Error::shape("add_const", v.shape(), &[c.len()]));
        }
        let data = v.data().iter().enumerate().map(|(i, x)| x + c[i % c.len()]).collect();
        Ok(self.unary(Tensor::from_parts(v.shape().to_vec(), data), Op::AddConst(self.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let out = self.map(|x| x * s);
        self.unary(out, Op::Scale(self.id, s))
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(a.data(), b.data(), &mut out, m, k, n);
        let requires = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape
            .push(Tensor::from_parts(vec![m, n], out), requires, Op::MatMul(self.id, other.id)))
    }

    /// `[B, m, k] × [B, k, n] → [B, m, n]`.
    pub fn bmm(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
            return Err(Error::shape("bmm", a.shape(), b.shape()));
        }
        let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            kernels::matmul_acc(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let requires = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(vec![bs, m, n], out),
            requires,
            Op::BatchMatMul(self.id, other.id),
        ))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.ndim() || start + len > v.shape()[axis] {
            return Err(Error::shape("slice", v.shape(), &[axis, start, len]));
        }
        let (outer, inner) = outer_inner(v.shape(), axis);
        let full = v.shape()[axis] * inner;
        let chunk = len * inner;
        let mut data = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            let src = o * full + start * inner;
            data.extend_from_slice(&v.data()[src..src + chunk]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        Ok(self.unary(
            Tensor::from_parts(shape, data),
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::shape("reshape", v.shape(), shape));
        }
        Ok(self.unary(Tensor::from_parts(shape.to_vec(), v.data().to_vec()), Op::Reshape(self.id)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() < 2 {
            return Err(Error::shape("transpose", v.shape(), &[]));
        }
        let mut shape = v.shape().to_vec();
        let nd = shape.len();
        let (r, c) = (shape[nd - 2], shape[nd - 1]);
        shape.swap(nd - 2, nd - 1);
        Ok(self.unary(Tensor::from_parts(shape, transpose_last2(v.data(), r, c)), Op::Transpose(self.id)))
    }

    /// Repeats the last axis `n` times along a new second-to-last axis: `[.., D] → [.., n, D]`.
    pub fn expand(&self, n: usize) -> Result<Var<'t>> {
        let v = self.value();
        let Some(&d) = v.shape().last() else {
            return Err(Error::shape("expand", v.shape(), &[n]));
        };
        let outer = v.len() / d.max(1);
        let mut data = Vec::with_capacity(v.len() * n);
        for o in 0..outer {
            for _ in 0..n {
                data.extend_from_slice(&v.data()[o * d..(o + 1) * d]);
            }
        }
        let mut shape = v.shape().to_vec();
        shape.insert(shape.len() - 1, n);
        Ok(self.unary(Tensor::from_parts(shape, data), Op::Expand(self.id)))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let out = self.map(kernels::sigmoid);
        self.unary(out, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        let out = self.map(f64::tanh);
        self.unary(out, Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        let out = self.map(|x| x.max(0.0));
        self.unary(out, Op::Relu(self.id))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        let out = self.map(f64::exp);
        if !out.is_finite() {
            return Err(Error::Domain {
                op: "exp",
                msg: "overflow".into(),
            });
        }
        Ok(self.unary(out, Op::Exp(self.id)))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        if let Some(x) = self.value().data().iter().find(|&&x| x <= 0.0 || !x.is_finite()) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("argument {x} outside (0, inf)"),
            });
        }
        let out = self.map(f64::ln);
        Ok(self.unary(out, Op::Log(self.id)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        self.masked_softmax(None)
    }

    /// Softmax over the last axis restricted to positions where `mask` is non-zero;
    /// masked positions get exactly 0. A row with no unmasked position is an error.
    pub fn masked_softmax(&self, mask: Option<&[f64]>) -> Result<Var<'t>> {
        let v = self.value();
        let Some(&n) = v.shape().last() else {
            return Err(Error::shape("softmax", v.shape(), &[]));
        };
        if let Some(m) = mask {
            if m.len() != v.len() {
                return Err(Error::shape("softmax", v.shape(), &[m.len()]));
            }
        }
        let mut data = vec![0.0; v.len()];
        for (r, (row, dst)) in v.data().chunks_exact(n).zip(data.chunks_exact_mut(n)).enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m[r * n + j] != 0.0);
            let max = (0..n).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract("softmax over a row with every position masked".into()));
            }
            let mut z = 0.0;
            for j in 0..n {
                if keep(j) {
                    dst[j] = (row[j] - max).exp();
                    z += dst[j];
                }
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        Ok(self.unary(Tensor::from_parts(v.shape().to_vec(), data), Op::Softmax(self.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Identity forward; backward multiplies the upstream gradient by `-lambda`.
    pub fn gradient_reverse(&self, lambda: f64) -> Var<'t> {
        let v = self.value();
        self.unary((*v).clone(), Op::GradReverse(self.id, lambda))
    }

    /// Identity forward; backward clamps the upstream gradient elementwise to `[-bound, bound]`.
    pub fn grad_clamp(&self, bound: f64) -> Var<'t> {
        let v = self.value();
        self.unary((*v).clone(), Op::GradClamp(self.id, bound.abs()))
    }
}

fn channel_counts(mask: &[f64], b: usize, c: usize, t: usize) -> Vec<f64> {
    let mut counts = vec![0.0; c];
    for bi in 0..b {
        for (ci, n) in counts.iter_mut().enumerate() {
            let off = (bi * c + ci) * t;
            *n += mask[off..off + t].iter().sum::<f64>();
        }
    }
    counts
}
