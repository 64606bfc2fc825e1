//! Reverse-mode differentiation over a recorded tape.
//!
//! Every operation on a [`Tape`] computes its value eagerly and appends a node
//! holding the op kind, its input handles and the output value. Inputs always
//! precede their consumers, so [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use stb_core::autodiff::Tape;
//! use stb_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::sparsemax_row;

use std::cell::Cell;

use crate::tensor::Tensor;
use crate::{Error, Result};
use kernels::{
    broadcast_offsets, broadcast_shapes, check_finite, gemm_nn, gemm_nt, gemm_tn,
    inverse_permutation, permute, softmax_row,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kernel kinds recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kernel {
    Leaf,
    Matmul,
    Add,
    Mul,
    Scale,
    Relu,
    Tanh,
    Softmax,
    Sparsemax,
    LayerNorm,
    Concat,
    Mean,
    Permute,
    Reshape,
    Sum,
    CrossEntropy,
    L2Normalize,
}

impl Kernel {
    pub const DIFFERENTIABLE: [Kernel; 16] = [
        Kernel::Matmul,
        Kernel::Add,
        Kernel::Mul,
        Kernel::Scale,
        Kernel::Relu,
        Kernel::Tanh,
        Kernel::Softmax,
        Kernel::Sparsemax,
        Kernel::LayerNorm,
        Kernel::Concat,
        Kernel::Mean,
        Kernel::Permute,
        Kernel::Reshape,
        Kernel::Sum,
        Kernel::CrossEntropy,
        Kernel::L2Normalize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Leaf => "leaf",
            Kernel::Matmul => "matmul",
            Kernel::Add => "add",
            Kernel::Mul => "mul",
            Kernel::Scale => "scale",
            Kernel::Relu => "relu",
            Kernel::Tanh => "tanh",
            Kernel::Softmax => "softmax",
            Kernel::Sparsemax => "sparsemax",
            Kernel::LayerNorm => "layer_norm",
            Kernel::Concat => "concat",
            Kernel::Mean => "mean",
            Kernel::Permute => "permute",
            Kernel::Reshape => "reshape",
            Kernel::Sum => "sum",
            Kernel::CrossEntropy => "cross_entropy",
            Kernel::L2Normalize => "l2_normalize",
        }
    }

    pub fn from_name(name: &str) -> Option<Kernel> {
        Self::DIFFERENTIABLE.into_iter().find(|k| k.name() == name)
    }
}

thread_local! {
    static FLIPPED_RULE: Cell<Option<Kernel>> = const { Cell::new(None) };
}

/// Runs `f` with the gradient rule of `kernel` sign-flipped on this thread.
///
/// Mutation hook for the verification suite: a correct checker must catch it.
#[doc(hidden)]
pub fn with_flipped_gradient<T>(kernel: Kernel, f: impl FnOnce() -> T) -> T {
    struct Reset(Option<Kernel>);
    impl Drop for Reset {
        fn drop(&mut self) {
            FLIPPED_RULE.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(FLIPPED_RULE.with(|c| c.replace(Some(kernel))));
    f()
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    Sparsemax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Concat(Vec<Var>),
    Mean {
        x: Var,
        axis: usize,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape {
        x: Var,
        shape: Vec<usize>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    L2Normalize(Var),
}

impl Op {
    fn kernel(&self) -> Kernel {
        match self {
            Op::Leaf => Kernel::Leaf,
            Op::Matmul(..) => Kernel::Matmul,
            Op::Add(..) => Kernel::Add,
            Op::Mul(..) => Kernel::Mul,
            Op::Scale(..) => Kernel::Scale,
            Op::Relu(_) => Kernel::Relu,
            Op::Tanh(_) => Kernel::Tanh,
            Op::Softmax(_) => Kernel::Softmax,
            Op::Sparsemax(_) => Kernel::Sparsemax,
            Op::LayerNorm { .. } => Kernel::LayerNorm,
            Op::Concat(_) => Kernel::Concat,
            Op::Mean { .. } => Kernel::Mean,
            Op::Permute { .. } => Kernel::Permute,
            Op::Reshape { .. } => Kernel::Reshape,
            Op::Sum(_) => Kernel::Sum,
            Op::CrossEntropy { .. } => Kernel::CrossEntropy,
            Op::L2Normalize(_) => Kernel::L2Normalize,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Softmax(x)
            | Op::Sparsemax(x)
            | Op::Sum(x)
            | Op::L2Normalize(x)
            | Op::Mean { x, .. }
            | Op::Permute { x, .. }
            | Op::Reshape { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat(xs) => xs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of `shape` if it did not influence the loss.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

fn last_dim(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape().last() {
        Some(&n) => Ok(n),
        None => Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{op} needs rank >= 1"),
        }),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf without a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn kernel(&self, var: Var) -> Kernel {
        self.nodes[var.0].op.kernel()
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = compute(&op, &self.nodes)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Batched matrix product `[.., M, K] x [.., K, P]` with broadcast batch extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Matmul(a, b))
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    /// Elementwise product with right-aligned broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Tanh(x))
    }

    /// Softmax over the last axis, computed with per-row max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Softmax(x))
    }

    /// Sparsemax (simplex projection) over the last axis.
    pub fn sparsemax(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sparsemax(x))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of shape `[N]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { x, gamma, beta, eps })
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        self.push(Op::Concat(xs.to_vec()))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::Mean { x, axis })
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.push(Op::Permute {
            x,
            axes: axes.to_vec(),
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape {
            x,
            shape: shape.to_vec(),
        })
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    /// Mean over the batch of `-log softmax(logits)[label]` for `logits: [B, S]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.push(Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
        })
    }

    /// Divides each last-axis row by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.push(Op::L2Normalize(x))
    }

    /// Recomputes every node from its recorded inputs and compares bitwise.
    pub fn replay(&self) -> Result<bool> {
        let mut fresh: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                _ => compute(&node.op, &fresh)?,
            };
            let same = value.shape() == node.value.shape()
                && value
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(false);
            }
            fresh.push(Node {
                op: node.op.clone(),
                value,
                requires_grad: node.requires_grad,
            });
        }
        Ok(true)
    }

    /// Smallest distance of any ReLU input or sparsemax entry to its
    /// non-differentiable boundary. Infinite if the tape has no such kernel.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => {
                    for v in self.nodes[x.0].value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::Sparsemax(x) => {
                    let z = &self.nodes[x.0].value;
                    let k = *z.shape().last().unwrap_or(&1);
                    let mut scratch = vec![0.0; k];
                    for row in z.data().chunks(k.max(1)) {
                        let tau = sparsemax_row(row, &mut scratch);
                        for v in row {
                            margin = margin.min((v - tau).abs());
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape().to_vec()));
        let flipped = FLIPPED_RULE.with(Cell::get);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contributions = self.input_grads(node, &g)?;
            if flipped == Some(node.op.kernel()) {
                for (_, t) in contributions.iter_mut() {
                    for v in t.data_mut() {
                        *v = -*v;
                    }
                }
            }
            for (var, contribution) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let y = &node.value;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Matmul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (ra, rb) = (ta.rank(), tb.rank());
                let (m, k, p) = (ta.shape()[ra - 2], ta.shape()[ra - 1], tb.shape()[rb - 1]);
                let batch_out = &y.shape()[..y.rank() - 2];
                let offsets = broadcast_offsets(&ta.shape()[..ra - 2], &tb.shape()[..rb - 2], batch_out);
                let mut ga = Tensor::zeros(ta.shape().to_vec());
                let mut gb = Tensor::zeros(tb.shape().to_vec());
                for (n, &(oa, ob)) in offsets.iter().enumerate() {
                    let gy = &g.data()[n * m * p..(n + 1) * m * p];
                    if wants(*a) {
                        let bs = &tb.data()[ob * k * p..(ob + 1) * k * p];
                        gemm_nt(gy, bs, &mut ga.data_mut()[oa * m * k..(oa + 1) * m * k], m, p, k);
                    }
                    if wants(*b) {
                        let as_ = &ta.data()[oa * m * k..(oa + 1) * m * k];
                        gemm_tn(as_, gy, &mut gb.data_mut()[ob * k * p..(ob + 1) * k * p], m, k, p);
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if ta.shape() == tb.shape() {
                    vec![(*a, g.clone()), (*b, g.clone())]
                } else {
                    let mut ga = Tensor::zeros(ta.shape().to_vec());
                    let mut gb = Tensor::zeros(tb.shape().to_vec());
                    for (n, (oa, ob)) in broadcast_offsets(ta.shape(), tb.shape(), y.shape())
                        .into_iter()
                        .enumerate()
                    {
                        ga.data_mut()[oa] += g.data()[n];
                        gb.data_mut()[ob] += g.data()[n];
                    }
                    vec![(*a, ga), (*b, gb)]
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(ta.shape().to_vec());
                let mut gb = Tensor::zeros(tb.shape().to_vec());
                for (n, (oa, ob)) in broadcast_offsets(ta.shape(), tb.shape(), y.shape())
                    .into_iter()
                    .enumerate()
                {
                    ga.data_mut()[oa] += g.data()[n] * tb.data()[ob];
                    gb.data_mut()[ob] += g.data()[n] * ta.data()[oa];
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, s) => vec![(*x, g.map(|v| v * s))],
            Op::Relu(x) => {
                let tx = val(*x);
                let data = tx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                vec![(*x, Tensor::new(tx.shape().to_vec(), data)?)]
            }
            Op::Tanh(x) => {
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yi, &gi)| gi * (1.0 - yi * yi))
                    .collect();
                vec![(*x, Tensor::new(y.shape().to_vec(), data)?)]
            }
            Op::Softmax(x) => {
                let k = last_dim("softmax", y)?;
                let mut gx = Tensor::zeros(y.shape().to_vec());
                for ((gr, yr), out) in g
                    .data()
                    .chunks(k)
                    .zip(y.data().chunks(k))
                    .zip(gx.data_mut().chunks_mut(k))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sparsemax(x) => {
                let k = last_dim("sparsemax", y)?;
                let mut gx = Tensor::zeros(y.shape().to_vec());
                for ((gr, yr), out) in g
                    .data()
                    .chunks(k)
                    .zip(y.data().chunks(k))
                    .zip(gx.data_mut().chunks_mut(k))
                {
                    let (mut total, mut count) = (0.0, 0usize);
                    for (&gi, &yi) in gr.iter().zip(yr) {
                        if yi > 0.0 {
                            total += gi;
                            count += 1;
                        }
                    }
                    let mean = total / count.max(1) as f64;
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = if yi > 0.0 { gi - mean } else { 0.0 };
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let tx = val(*x);
                let tg = val(*gamma);
                let n = last_dim("layer_norm", tx)?;
                let mut gx = Tensor::zeros(tx.shape().to_vec());
                let mut ggamma = Tensor::zeros([n]);
                let mut gbeta = Tensor::zeros([n]);
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for ((xr, gr), out) in tx
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(gx.data_mut().chunks_mut(n))
                {
                    let (mean, inv_std) = row_moments(xr, *eps);
                    for j in 0..n {
                        xhat[j] = (xr[j] - mean) * inv_std;
                        dxhat[j] = gr[j] * tg.data()[j];
                        ggamma.data_mut()[j] += gr[j] * xhat[j];
                        gbeta.data_mut()[j] += gr[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        out[j] = inv_std * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                vec![(*x, gx), (*gamma, ggamma), (*beta, gbeta)]
            }
            Op::Concat(xs) => {
                let total = last_dim("concat", y)?;
                let rows = y.numel() / total.max(1);
                let mut out = Vec::with_capacity(xs.len());
                let mut start = 0;
                for &x in xs {
                    let tx = val(x);
                    let w = last_dim("concat", tx)?;
                    let mut data = Vec::with_capacity(tx.numel());
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                    }
                    out.push((x, Tensor::new(tx.shape().to_vec(), data)?));
                    start += w;
                }
                out
            }
            Op::Mean { x, axis } => {
                let tx = val(*x);
                let extent = tx.shape()[*axis];
                let outer: usize = tx.shape()[..*axis].iter().product();
                let inner: usize = tx.shape()[*axis + 1..].iter().product();
                let mut gx = Tensor::zeros(tx.shape().to_vec());
                let inv = 1.0 / extent as f64;
                for o in 0..outer {
                    for a in 0..extent {
                        for i in 0..inner {
                            gx.data_mut()[(o * extent + a) * inner + i] = g.data()[o * inner + i] * inv;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Permute { x, axes } => {
                let (shape, data) = permute(g.data(), g.shape(), &inverse_permutation(axes));
                vec![(*x, Tensor::new(shape, data)?)]
            }
            Op::Reshape { x, .. } => vec![(*x, g.reshape(val(*x).shape().to_vec())?)],
            Op::Sum(x) => {
                let gv = g.item()?;
                vec![(*x, Tensor::full(val(*x).shape().to_vec(), gv))]
            }
            Op::CrossEntropy { logits, labels } => {
                let tl = val(*logits);
                let s = tl.shape()[1];
                let b = labels.len();
                let scale = g.item()? / b as f64;
                let mut gl = Tensor::zeros(tl.shape().to_vec());
                for ((row, out), &label) in tl.data().chunks(s).zip(gl.data_mut().chunks_mut(s)).zip(labels) {
                    softmax_row(row, out);
                    out[label] -= 1.0;
                    for o in out.iter_mut() {
                        *o *= scale;
                    }
                }
                vec![(*logits, gl)]
            }
            Op::L2Normalize(x) => {
                let tx = val(*x);
                let n = last_dim("l2_normalize", tx)?;
                let mut gx = Tensor::zeros(tx.shape().to_vec());
                for (((xr, yr), gr), out) in tx
                    .data()
                    .chunks(n)
                    .zip(y.data().chunks(n))
                    .zip(g.data().chunks(n))
                    .zip(gx.data_mut().chunks_mut(n))
                {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in out.iter_mut().zip(yr).zip(gr) {
                        *o = (gi - yi * dot) / norm;
                    }
                }
                vec![(*x, gx)]
            }
        };
        Ok(out)
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn compute(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let val = |v: &Var| &nodes[v.0].value;
    match op {
        Op::Leaf => Err(Error::Contract("leaf nodes have no forward rule".into())),
        Op::Matmul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let (ra, rb) = (ta.rank(), tb.rank());
            if ra < 2 || rb < 2 || ta.shape()[ra - 1] != tb.shape()[rb - 2] {
                return Err(Error::shape("matmul", ta.shape(), tb.shape()));
            }
            let (m, k, p) = (ta.shape()[ra - 2], ta.shape()[ra - 1], tb.shape()[rb - 1]);
            let batch_a = &ta.shape()[..ra - 2];
            let batch_b = &tb.shape()[..rb - 2];
            let mut batch = broadcast_shapes("matmul", batch_a, batch_b)
                .map_err(|_| Error::shape("matmul", ta.shape(), tb.shape()))?;
            let offsets = broadcast_offsets(batch_a, batch_b, &batch);
            let mut out = vec![0.0; offsets.len() * m * p];
            for (n, &(oa, ob)) in offsets.iter().enumerate() {
                gemm_nn(
                    &ta.data()[oa * m * k..(oa + 1) * m * k],
                    &tb.data()[ob * k * p..(ob + 1) * k * p],
                    &mut out[n * m * p..(n + 1) * m * p],
                    m,
                    k,
                    p,
                );
            }
            batch.extend([m, p]);
            Tensor::new(batch, out)
        }
        Op::Add(a, b) | Op::Mul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let name = if matches!(op, Op::Add(..)) { "add" } else { "mul" };
            let combine = |x: f64, y: f64| if matches!(op, Op::Add(..)) { x + y } else { x * y };
            if ta.shape() == tb.shape() {
                let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| combine(x, y)).collect();
                return Tensor::new(ta.shape().to_vec(), data);
            }
            let shape = broadcast_shapes(name, ta.shape(), tb.shape())?;
            let data = broadcast_offsets(ta.shape(), tb.shape(), &shape)
                .into_iter()
                .map(|(oa, ob)| combine(ta.data()[oa], tb.data()[ob]))
                .collect();
            Tensor::new(shape, data)
        }
        Op::Scale(x, s) => Ok(val(x).map(|v| v * s)),
        Op::Relu(x) => Ok(val(x).map(|v| v.max(0.0))),
        Op::Tanh(x) => Ok(val(x).map(f64::tanh)),
        Op::Softmax(x) | Op::Sparsemax(x) => {
            let tx = val(x);
            let sparse = matches!(op, Op::Sparsemax(_));
            let name = if sparse { "sparsemax" } else { "softmax" };
            let k = last_dim(name, tx)?;
            if k == 0 {
                return Err(Error::EmptyAxis { op: name });
            }
            check_finite(name, tx.data())?;
            let mut out = vec![0.0; tx.numel()];
            for (row, o) in tx.data().chunks(k).zip(out.chunks_mut(k)) {
                if sparse {
                    sparsemax_row(row, o);
                } else {
                    softmax_row(row, o);
                }
            }
            Tensor::new(tx.shape().to_vec(), out)
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (tx, tg, tb) = (val(x), val(gamma), val(beta));
            let n = last_dim("layer_norm", tx)?;
            if n == 0 {
                return Err(Error::EmptyAxis { op: "layer_norm" });
            }
            if tg.shape() != [n] || tb.shape() != [n] {
                return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
            }
            if !(*eps > 0.0) {
                return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
            }
            let mut out = vec![0.0; tx.numel()];
            for (row, o) in tx.data().chunks(n).zip(out.chunks_mut(n)) {
                let (mean, inv_std) = row_moments(row, *eps);
                for j in 0..n {
                    o[j] = tg.data()[j] * (row[j] - mean) * inv_std + tb.data()[j];
                }
            }
            Tensor::new(tx.shape().to_vec(), out)
        }
        Op::Concat(xs) => {
            let first = xs
                .first()
                .map(val)
                .ok_or(Error::EmptyAxis { op: "concat" })?;
            let lead = &first.shape()[..first.rank().saturating_sub(1)];
            let mut widths = Vec::with_capacity(xs.len());
            for x in xs {
                let t = val(x);
                if t.rank() == 0 || &t.shape()[..t.rank() - 1] != lead {
                    return Err(Error::shape("concat", first.shape(), t.shape()));
                }
                widths.push(t.shape()[t.rank() - 1]);
            }
            let rows: usize = lead.iter().product();
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (x, &w) in xs.iter().zip(&widths) {
                    out.extend_from_slice(&val(x).data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::new(shape, out)
        }
        Op::Mean { x, axis } => {
            let tx = val(x);
            if *axis >= tx.rank() {
                return Err(Error::InvalidShape {
                    shape: tx.shape().to_vec(),
                    reason: format!("mean over axis {axis}"),
                });
            }
            let extent = tx.shape()[*axis];
            if extent == 0 {
                return Err(Error::EmptyAxis { op: "mean" });
            }
            let outer: usize = tx.shape()[..*axis].iter().product();
            let inner: usize = tx.shape()[*axis + 1..].iter().product();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for a in 0..extent {
                    let src = &tx.data()[(o * extent + a) * inner..(o * extent + a + 1) * inner];
                    for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            for v in out.iter_mut() {
                *v /= extent as f64;
            }
            let mut shape = tx.shape().to_vec();
            shape.remove(*axis);
            Tensor::new(shape, out)
        }
        Op::Permute { x, axes } => {
            let tx = val(x);
            let mut seen = vec![false; tx.rank()];
            let valid = axes.len() == tx.rank()
                && axes.iter().all(|&a| a < seen.len() && !std::mem::replace(&mut seen[a], true));
            if !valid {
                return Err(Error::InvalidShape {
                    shape: tx.shape().to_vec(),
                    reason: format!("invalid permutation {axes:?}"),
                });
            }
            let (shape, data) = permute(tx.data(), tx.shape(), axes);
            Tensor::new(shape, data)
        }
        Op::Reshape { x, shape } => val(x).reshape(shape.clone()),
        Op::Sum(x) => Ok(Tensor::scalar(val(x).sum())),
        Op::CrossEntropy { logits, labels } => {
            let tl = val(logits);
            if tl.rank() != 2 || tl.shape()[0] != labels.len() || labels.is_empty() {
                return Err(Error::shape("cross_entropy", tl.shape(), &[labels.len()]));
            }
            let s = tl.shape()[1];
            check_finite("cross_entropy", tl.data())?;
            let mut total = 0.0;
            for (row, &label) in tl.data().chunks(s).zip(labels) {
                if label >= s {
                    return Err(Error::Index {
                        index: label,
                        extent: s,
                        context: "cross_entropy label",
                    });
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[label];
            }
            Ok(Tensor::scalar(total / labels.len() as f64))
        }
        Op::L2Normalize(x) => {
            let tx = val(x);
            let n = last_dim("l2_normalize", tx)?;
            let mut out = vec![0.0; tx.numel()];
            for (row, o) in tx.data().chunks(n.max(1)).zip(out.chunks_mut(n.max(1))) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(norm > 0.0) || !norm.is_finite() {
                    return Err(Error::Numeric {
                        op: "l2_normalize",
                        reason: format!("row norm {norm}"),
                    });
                }
                for (d, s) in o.iter_mut().zip(row) {
                    *d = s / norm;
                }
            }
            Tensor::new(tx.shape().to_vec(), out)
        }
    }
}
