//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Tape`] records operations as they execute (define-by-run) and replays
//! them in reverse on [`Tape::backward`], accumulating gradients into every
//! trainable [`Tensor`] that entered via [`Tape::leaf`]. Training loops build
//! a fresh tape per step. A tape and its tensors are confined to one thread.
//!
//! Forward evaluation is deterministic and every operation checks its output
//! for NaN/Inf, so numerical faults surface at the op that produced them.

use std::collections::HashMap;

use crate::error::{Result, UniregError};
use crate::tensor::Tensor;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Tanh,
    Sigmoid,
    Log,
    /// `ln(max(x, eps))`; gradient is zero in the clamped region.
    LogClamped,
    Exp,
    Neg,
    Square,
    /// Multiplication by a compile-time constant factor.
    Scale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ReduceKind {
    Mean,
    Sum,
    Max,
}

enum Op {
    Leaf,
    Constant,
    Matmul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Unary { kind: UnaryKind, x: Var, c: f64 },
    Binary { kind: BinaryKind, a: Var, b: Var },
    Reduce { kind: ReduceKind, x: Var, axis: Option<usize>, argmax: Vec<usize> },
    ConcatRows { a: Var, b: Var },
    GroupMean { x: Var, groups: Vec<usize>, counts: Vec<usize> },
    PairwiseSqdist { q: Var, p: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    ContrastiveLoss { z: Var, labels: Vec<usize>, margin: f64 },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
}

/// Recorded computation graph with reverse replay.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    bindings: Vec<(usize, Tensor)>,
    leaf_map: HashMap<usize, Var>,
}

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        other => Err(UniregError::Dimension(format!("expected a matrix, got shape {other:?}"))),
    }
}

/// `out += a (m x k) . b (k x n)`, row-major. Shared by the tape and the
/// no-tape inference path so both produce bit-identical results.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &a_ik) in arow.iter().enumerate() {
            if a_ik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += a_ik * brow[j];
            }
        }
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, name: &str) -> Result<Var> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(UniregError::Domain(format!("{name} produced non-finite value {v}")));
        }
        self.nodes.push(Node { shape, values, op });
        self.grads.push(Vec::new());
        Ok(Var(self.nodes.len() - 1))
    }

    /// Enter a tensor as a leaf. Trainable tensors are deduplicated and bound:
    /// `backward` accumulates into their `grad` buffers.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        if t.requires_grad() {
            if let Some(&v) = self.leaf_map.get(&t.storage_id()) {
                return v;
            }
        }
        let var = self
            .push(t.shape(), t.values(), Op::Leaf, "leaf")
            .expect("tensor values are finite by construction");
        if t.requires_grad() {
            self.leaf_map.insert(t.storage_id(), var);
            self.bindings.push((var.0, t.clone()));
        }
        var
    }

    /// Enter a tensor's values as an untracked constant: gradients never
    /// reach it even if the tensor is trainable elsewhere.
    pub fn constant_from(&mut self, t: &Tensor) -> Var {
        self.push(t.shape(), t.values(), Op::Constant, "constant")
            .expect("tensor values are finite by construction")
    }

    /// Untracked constant from raw parts.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(UniregError::Dimension(format!(
                "shape {shape:?} holds {len} values, got {}",
                values.len()
            )));
        }
        self.push(shape, values, Op::Constant, "constant")
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a scalar node.
    pub fn item(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        if node.values.len() != 1 {
            return Err(UniregError::Contract(format!(
                "item() needs a scalar, shape is {:?}",
                node.shape
            )));
        }
        Ok(node.values[0])
    }

    /// Gradient buffer of a node after `backward` (empty before).
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a))?;
        let (k2, n) = dims2(self.shape(b))?;
        if k != k2 {
            return Err(UniregError::Dimension(format!(
                "matmul inner dims {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), m, k, n, &mut out);
        self.push(vec![m, n], out, Op::Matmul { a, b }, "matmul")
    }

    /// Add a length-`n` bias row to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x))?;
        let blen = self.value(bias).len();
        if blen != n {
            return Err(UniregError::Dimension(format!("bias length {blen} vs {n} columns")));
        }
        let xv = self.value(x);
        let bv = self.value(bias);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = xv[i * n + j] + bv[j];
            }
        }
        self.push(vec![m, n], out, Op::AddBias { x, bias }, "add_bias")
    }

    fn unary(&mut self, kind: UnaryKind, x: Var, c: f64) -> Result<Var> {
        let name = match kind {
            UnaryKind::Relu => "relu",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Log => "log",
            UnaryKind::LogClamped => "log_clamped",
            UnaryKind::Exp => "exp",
            UnaryKind::Neg => "neg",
            UnaryKind::Square => "square",
            UnaryKind::Scale => "scale",
        };
        let xv = self.value(x);
        if kind == UnaryKind::Log {
            if let Some(bad) = xv.iter().find(|v| **v <= 0.0) {
                return Err(UniregError::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let values: Vec<f64> = xv
            .iter()
            .map(|&v| match kind {
                UnaryKind::Relu => {
                    if v > 0.0 {
                        v
                    } else {
                        0.0
                    }
                }
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Sigmoid => {
                    if v >= 0.0 {
                        1.0 / (1.0 + (-v).exp())
                    } else {
                        let e = v.exp();
                        e / (1.0 + e)
                    }
                }
                UnaryKind::Log => v.ln(),
                UnaryKind::LogClamped => v.max(c).ln(),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Neg => -v,
                UnaryKind::Square => v * v,
                UnaryKind::Scale => c * v,
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, values, Op::Unary { kind, x, c }, name)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x, 0.0)
    }

    /// Natural log; rejects non-positive inputs.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x, 0.0)
    }

    /// `ln(max(x, eps))` with zero gradient where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.unary(UnaryKind::LogClamped, x, eps)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x, 0.0)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, x, 0.0)
    }

    /// Multiply by a fixed scalar factor.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale, x, factor)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let (alen, blen) = (self.value(a).len(), self.value(b).len());
        if alen != blen && alen != 1 && blen != 1 {
            return Err(UniregError::Dimension(format!(
                "{name}: shapes {:?} vs {:?} (equal shapes or scalar broadcast only)",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out_len = alen.max(blen);
        let shape = if alen >= blen { self.shape(a).to_vec() } else { self.shape(b).to_vec() };
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; out_len];
        for (i, o) in out.iter_mut().enumerate() {
            let x = av[if alen == 1 { 0 } else { i }];
            let y = bv[if blen == 1 { 0 } else { i }];
            *o = match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            };
        }
        self.push(shape, out, Op::Binary { kind, a, b }, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn reduce(&mut self, kind: ReduceKind, x: Var, axis: Option<usize>) -> Result<Var> {
        let name = match kind {
            ReduceKind::Mean => "mean",
            ReduceKind::Sum => "sum",
            ReduceKind::Max => "max",
        };
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(UniregError::Domain(format!("{name} of an empty tensor")));
        }
        let shape = self.shape(x).to_vec();
        if let Some(ax) = axis {
            if ax >= shape.len() {
                return Err(UniregError::Dimension(format!(
                    "axis {ax} out of range for rank {}",
                    shape.len()
                )));
            }
        }
        let (out_shape, groups): (Vec<usize>, Vec<(usize, usize, usize)>) = match (axis, shape.as_slice()) {
            // (out element count, start, stride) per output element
            (None, _) => (vec![], vec![(xv.len(), 0, 1)]),
            (Some(0), [m, n]) => (vec![*n], (0..*n).map(|j| (*m, j, *n)).collect()),
            (Some(1), [m, n]) => (vec![*m], (0..*m).map(|i| (*n, i * n, 1)).collect()),
            (Some(0), [_m]) => (vec![], vec![(xv.len(), 0, 1)]),
            _ => {
                return Err(UniregError::Dimension(format!(
                    "axis reduce supports rank 1 and 2, got shape {shape:?}"
                )))
            }
        };
        let mut out = Vec::with_capacity(groups.len());
        let mut argmax = Vec::new();
        for &(count, start, stride) in &groups {
            match kind {
                ReduceKind::Mean | ReduceKind::Sum => {
                    let mut s = 0.0;
                    for t in 0..count {
                        s += xv[start + t * stride];
                    }
                    out.push(if kind == ReduceKind::Mean { s / count as f64 } else { s });
                }
                ReduceKind::Max => {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = start;
                    for t in 0..count {
                        let v = xv[start + t * stride];
                        if v > best {
                            best = v;
                            best_idx = start + t * stride;
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        self.push(out_shape, out, Op::Reduce { kind, x, axis, argmax }, name)
    }

    /// Mean over all elements (`axis: None`) or along an axis of a matrix.
    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axis)
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axis)
    }

    /// Max reduction; the gradient routes to the first maximizer.
    pub fn max(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Max, x, axis)
    }

    /// Stack two matrices with equal column counts, `a` on top.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = dims2(self.shape(a))?;
        let (mb, nb) = dims2(self.shape(b))?;
        if na != nb {
            return Err(UniregError::Dimension(format!("concat_rows columns {na} vs {nb}")));
        }
        let mut values = Vec::with_capacity((ma + mb) * na);
        values.extend_from_slice(self.value(a));
        values.extend_from_slice(self.value(b));
        self.push(vec![ma + mb, na], values, Op::ConcatRows { a, b }, "concat_rows")
    }

    /// Per-group row means: rows of `x` sharing a group index are averaged.
    /// Every group in `[0, n_groups)` must be non-empty.
    pub fn group_mean(&mut self, x: Var, groups: &[usize], n_groups: usize) -> Result<Var> {
        let (m, d) = dims2(self.shape(x))?;
        if groups.len() != m {
            return Err(UniregError::Dimension(format!(
                "group list length {} vs {m} rows",
                groups.len()
            )));
        }
        let mut counts = vec![0usize; n_groups];
        for &g in groups {
            if g >= n_groups {
                return Err(UniregError::Contract(format!("group index {g} out of {n_groups}")));
            }
            counts[g] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(UniregError::Contract(format!("group {empty} has no rows")));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; n_groups * d];
        for (i, &g) in groups.iter().enumerate() {
            for j in 0..d {
                out[g * d + j] += xv[i * d + j] / counts[g] as f64;
            }
        }
        self.push(
            vec![n_groups, d],
            out,
            Op::GroupMean { x, groups: groups.to_vec(), counts },
            "group_mean",
        )
    }

    /// Squared Euclidean distances between every row of `q` and every row of `p`.
    pub fn pairwise_sqdist(&mut self, q: Var, p: Var) -> Result<Var> {
        let (m, d) = dims2(self.shape(q))?;
        let (c, d2) = dims2(self.shape(p))?;
        if d != d2 {
            return Err(UniregError::Dimension(format!("pairwise_sqdist dims {d} vs {d2}")));
        }
        let qv = self.value(q);
        let pv = self.value(p);
        let mut out = vec![0.0; m * c];
        for i in 0..m {
            let qi = &qv[i * d..(i + 1) * d];
            for j in 0..c {
                let pj = &pv[j * d..(j + 1) * d];
                let mut s = 0.0;
                for t in 0..d {
                    let diff = qi[t] - pj[t];
                    s += diff * diff;
                }
                out[i * c + j] = s;
            }
        }
        self.push(vec![m, c], out, Op::PairwiseSqdist { q, p }, "pairwise_sqdist")
    }

    /// Mean softmax cross-entropy over rows, stabilized by max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = dims2(self.shape(logits))?;
        if labels.len() != b {
            return Err(UniregError::Dimension(format!(
                "label count {} vs {b} rows",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(UniregError::Contract(format!("label {bad} out of {c} classes")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                probs[i * c + j] /= z;
            }
            loss -= row[labels[i]] - mx - z.ln();
        }
        loss /= b as f64;
        self.push(
            vec![],
            vec![loss],
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            "softmax_cross_entropy",
        )
    }

    /// Contrastive pair loss over a labeled batch: same-label pairs pull with
    /// squared distance, different-label pairs push with a squared hinge at
    /// `margin`; mean over all unordered pairs. Coincident negatives and
    /// pairs exactly at the hinge take subgradient zero.
    pub fn contrastive_loss(&mut self, z: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let (b, d) = dims2(self.shape(z))?;
        if labels.len() != b {
            return Err(UniregError::Dimension(format!(
                "label count {} vs {b} rows",
                labels.len()
            )));
        }
        if b < 2 {
            return Err(UniregError::Contract("contrastive loss needs at least 2 rows".into()));
        }
        let zv = self.value(z);
        let pairs = (b * (b - 1) / 2) as f64;
        let mut loss = 0.0;
        for i in 0..b {
            for j in (i + 1)..b {
                let mut sq = 0.0;
                for t in 0..d {
                    let diff = zv[i * d + t] - zv[j * d + t];
                    sq += diff * diff;
                }
                if labels[i] == labels[j] {
                    loss += sq;
                } else {
                    let gap = margin - sq.sqrt();
                    if gap > 0.0 {
                        loss += gap * gap;
                    }
                }
            }
        }
        loss /= pairs;
        self.push(
            vec![],
            vec![loss],
            Op::ContrastiveLoss { z, labels: labels.to_vec(), margin },
            "contrastive_loss",
        )
    }

    /// Reverse pass from a scalar loss. Gradients of trainable leaves
    /// accumulate into their tensors; repeated calls without `zero_grad`
    /// keep accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(UniregError::Contract(format!(
                "backward needs a scalar loss, shape is {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            self.grads[i].clear();
            self.grads[i].resize(node.values.len(), 0.0);
        }
        self.grads[loss.0][0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            self.apply_backward(i, &g);
            self.grads[i] = g;
        }
        for (node, tensor) in &self.bindings {
            tensor.accumulate_grad(&self.grads[*node]);
        }
        Ok(())
    }

    fn apply_backward(&mut self, node: usize, g: &[f64]) {
        // Safety of the borrow dance: `g` is the (detached) output gradient,
        // input values are read immutably, input gradients are disjoint
        // entries of `self.grads`.
        let values_of = |tape: &Tape, v: Var| tape.nodes[v.0].values.clone();
        match &self.nodes[node].op {
            Op::Leaf | Op::Constant => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let av = values_of(self, a);
                let bv = values_of(self, b);
                {
                    let ga = &mut self.grads[a.0];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let garow = &mut ga[i * k..(i + 1) * k];
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            garow[kk] += s;
                        }
                    }
                }
                {
                    let gb = &mut self.grads[b.0];
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        let grow = &g[i * n..(i + 1) * n];
                        for (kk, &a_ik) in arow.iter().enumerate() {
                            if a_ik == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                gbrow[j] += a_ik * grow[j];
                            }
                        }
                    }
                }
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let n = self.nodes[bias.0].values.len();
                let m = g.len() / n;
                {
                    let gx = &mut self.grads[x.0];
                    for (gx, gv) in gx.iter_mut().zip(g) {
                        *gx += gv;
                    }
                }
                {
                    let gb = &mut self.grads[bias.0];
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Unary { kind, x, c } => {
                let (kind, x, c) = (*kind, *x, *c);
                let xv = values_of(self, x);
                let yv = values_of(self, Var(node));
                let gx = &mut self.grads[x.0];
                for i in 0..g.len() {
                    let dydx = match kind {
                        UnaryKind::Relu => {
                            if xv[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Tanh => 1.0 - yv[i] * yv[i],
                        UnaryKind::Sigmoid => yv[i] * (1.0 - yv[i]),
                        UnaryKind::Log => 1.0 / xv[i],
                        UnaryKind::LogClamped => {
                            if xv[i] > c {
                                1.0 / xv[i]
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Exp => yv[i],
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Square => 2.0 * xv[i],
                        UnaryKind::Scale => c,
                    };
                    gx[i] += dydx * g[i];
                }
            }
            Op::Binary { kind, a, b } => {
                let (kind, a, b) = (*kind, *a, *b);
                let alen = self.nodes[a.0].values.len();
                let blen = self.nodes[b.0].values.len();
                let av = values_of(self, a);
                let bv = values_of(self, b);
                {
                    let ga = &mut self.grads[a.0];
                    for (i, &gv) in g.iter().enumerate() {
                        let ia = if alen == 1 { 0 } else { i };
                        ga[ia] += match kind {
                            BinaryKind::Add => gv,
                            BinaryKind::Sub => gv,
                            BinaryKind::Mul => gv * bv[if blen == 1 { 0 } else { i }],
                        };
                    }
                }
                {
                    let gb = &mut self.grads[b.0];
                    for (i, &gv) in g.iter().enumerate() {
                        let ib = if blen == 1 { 0 } else { i };
                        gb[ib] += match kind {
                            BinaryKind::Add => gv,
                            BinaryKind::Sub => -gv,
                            BinaryKind::Mul => gv * av[if alen == 1 { 0 } else { i }],
                        };
                    }
                }
            }
            Op::Reduce { kind, x, axis, argmax } => {
                let (kind, x, axis) = (*kind, *x, *axis);
                let argmax = argmax.clone();
                let shape = self.nodes[x.0].shape.clone();
                let gx = &mut self.grads[x.0];
                match kind {
                    ReduceKind::Max => {
                        for (o, &idx) in argmax.iter().enumerate() {
                            gx[idx] += g[o];
                        }
                    }
                    ReduceKind::Mean | ReduceKind::Sum => {
                        let spread = |count: f64| if kind == ReduceKind::Mean { 1.0 / count } else { 1.0 };
                        match (axis, shape.as_slice()) {
                            (None, _) | (Some(0), [_]) => {
                                let w = spread(gx.len() as f64) * g[0];
                                for gxi in gx.iter_mut() {
                                    *gxi += w;
                                }
                            }
                            (Some(0), [m, n]) => {
                                let w = spread(*m as f64);
                                for i in 0..*m {
                                    for j in 0..*n {
                                        gx[i * n + j] += w * g[j];
                                    }
                                }
                            }
                            (Some(1), [m, n]) => {
                                let w = spread(*n as f64);
                                for i in 0..*m {
                                    for j in 0..*n {
                                        gx[i * n + j] += w * g[i];
                                    }
                                }
                            }
                            _ => unreachable!("validated at forward"),
                        }
                    }
                }
            }
            Op::ConcatRows { a, b } => {
                let (a, b) = (*a, *b);
                let alen = self.nodes[a.0].values.len();
                {
                    let ga = &mut self.grads[a.0];
                    for i in 0..alen {
                        ga[i] += g[i];
                    }
                }
                {
                    let gb = &mut self.grads[b.0];
                    for (i, gb) in gb.iter_mut().enumerate() {
                        *gb += g[alen + i];
                    }
                }
            }
            Op::GroupMean { x, groups, counts } => {
                let x = *x;
                let groups = groups.clone();
                let counts = counts.clone();
                let d = self.nodes[x.0].shape[1];
                let gx = &mut self.grads[x.0];
                for (i, &grp) in groups.iter().enumerate() {
                    let w = 1.0 / counts[grp] as f64;
                    for j in 0..d {
                        gx[i * d + j] += w * g[grp * d + j];
                    }
                }
            }
            Op::PairwiseSqdist { q, p } => {
                let (q, p) = (*q, *p);
                let (m, d) = (self.nodes[q.0].shape[0], self.nodes[q.0].shape[1]);
                let c = self.nodes[p.0].shape[0];
                let qv = values_of(self, q);
                let pv = values_of(self, p);
                {
                    let gq = &mut self.grads[q.0];
                    for i in 0..m {
                        for j in 0..c {
                            let gij = g[i * c + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                gq[i * d + t] += gij * 2.0 * (qv[i * d + t] - pv[j * d + t]);
                            }
                        }
                    }
                }
                {
                    let gp = &mut self.grads[p.0];
                    for i in 0..m {
                        for j in 0..c {
                            let gij = g[i * c + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                gp[j * d + t] -= gij * 2.0 * (qv[i * d + t] - pv[j * d + t]);
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let logits = *logits;
                let labels = labels.clone();
                let probs = probs.clone();
                let b = labels.len();
                let c = probs.len() / b;
                let gl = &mut self.grads[logits.0];
                let w = g[0] / b as f64;
                for i in 0..b {
                    for j in 0..c {
                        let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                        gl[i * c + j] += w * (probs[i * c + j] - onehot);
                    }
                }
            }
            Op::ContrastiveLoss { z, labels, margin } => {
                let z = *z;
                let labels = labels.clone();
                let margin = *margin;
                let zv = values_of(self, z);
                let b = labels.len();
                let d = zv.len() / b;
                let pairs = (b * (b - 1) / 2) as f64;
                let w = g[0] / pairs;
                let gz = &mut self.grads[z.0];
                for i in 0..b {
                    for j in (i + 1)..b {
                        let mut sq = 0.0;
                        for t in 0..d {
                            let diff = zv[i * d + t] - zv[j * d + t];
                            sq += diff * diff;
                        }
                        let coef = if labels[i] == labels[j] {
                            2.0
                        } else {
                            let dist = sq.sqrt();
                            let gap = margin - dist;
                            if gap > 0.0 && dist > 0.0 {
                                -2.0 * gap / dist
                            } else {
                                0.0
                            }
                        };
                        if coef == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = zv[i * d + t] - zv[j * d + t];
                            gz[i * d + t] += w * coef * diff;
                            gz[j * d + t] -= w * coef * diff;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        Tensor::param(shape, values).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_zero_row_annihilates() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = tape.constant(vec![2, 1], vec![0.0, 5.0]).unwrap();
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(UniregError::Dimension(_))));
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1], vec![0.0]).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y), &[0.5]);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![-3.0, 3.0]).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 3.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1], vec![0.0]).unwrap();
        assert!(matches!(tape.log(x), Err(UniregError::Domain(_))));
    }

    #[test]
    fn mean_value_and_gradient() {
        for n in [1usize, 4, 100] {
            let t = tensor(vec![n], vec![1.0; n]);
            let mut tape = Tape::new();
            let x = tape.leaf(&t);
            let m = tape.mean(x, None).unwrap();
            tape.backward(m).unwrap();
            let g = t.grad().unwrap();
            assert!(g.iter().all(|&gi| (gi - 1.0 / n as f64).abs() < 1e-15));
        }
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let m = tape.mean(x, None).unwrap();
        assert_eq!(tape.item(m).unwrap(), 2.0);
    }

    #[test]
    fn sum_of_zeros_has_zero_gradient() {
        let t = tensor(vec![3], vec![0.0; 3]);
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let s = tape.sum(x, None).unwrap();
        assert_eq!(tape.item(s).unwrap(), 0.0);
        tape.backward(s).unwrap();
        assert_eq!(t.grad().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn axis_reductions() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m0 = tape.mean(x, Some(0)).unwrap();
        assert_eq!(tape.value(m0), &[2.5, 3.5, 4.5]);
        let s1 = tape.sum(x, Some(1)).unwrap();
        assert_eq!(tape.value(s1), &[6.0, 15.0]);
        let mx = tape.max(x, Some(1)).unwrap();
        assert_eq!(tape.value(mx), &[3.0, 6.0]);
    }

    #[test]
    fn max_routes_gradient_to_first_argmax() {
        let t = tensor(vec![3], vec![2.0, 5.0, 5.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let m = tape.max(x, None).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(t.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_of_leaf_is_one() {
        let t = tensor(vec![], vec![3.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        tape.backward(x).unwrap();
        assert_eq!(t.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn backward_zero_input_kills_product_rule() {
        // loss = sigmoid(w . x) with x = 0: grad wrt w is sigmoid'(0) * x = 0
        let w = tensor(vec![1, 3], vec![0.3, -0.7, 0.2]);
        let mut tape = Tape::new();
        let wv = tape.leaf(&w);
        let x = tape.constant(vec![3, 1], vec![0.0; 3]).unwrap();
        let dot = tape.matmul(wv, x).unwrap();
        let y = tape.sigmoid(dot).unwrap();
        let loss = tape.mean(y, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(tape.backward(x), Err(UniregError::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates_into_tensor() {
        let t = tensor(vec![], vec![2.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(t.grad().unwrap(), vec![8.0]);
        t.zero_grad();
        tape.backward(y).unwrap();
        assert_eq!(t.grad().unwrap(), vec![4.0]);
    }

    #[test]
    fn leaf_dedup_single_binding() {
        let t = tensor(vec![], vec![3.0]);
        let mut tape = Tape::new();
        let a = tape.leaf(&t);
        let b = tape.leaf(&t);
        assert_eq!(a, b);
        let prod = tape.mul(a, b).unwrap();
        tape.backward(prod).unwrap();
        assert_eq!(t.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn constant_from_blocks_gradients() {
        let t = tensor(vec![], vec![3.0]);
        let mut tape = Tape::new();
        let c = tape.constant_from(&t);
        let y = tape.square(c).unwrap();
        tape.backward(y).unwrap();
        assert!(t.grad().is_none());
    }

    #[test]
    fn scalar_broadcast_binary() {
        let mut tape = Tape::new();
        let v = tape.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = tape.constant(vec![], vec![2.0]).unwrap();
        let prod = tape.mul(v, s).unwrap();
        assert_eq!(tape.value(prod), &[2.0, 4.0, 6.0]);
        let diff = tape.sub(s, v).unwrap();
        assert_eq!(tape.value(diff), &[1.0, 0.0, -1.0]);
        let bad = tape.constant(vec![2], vec![0.0; 2]).unwrap();
        assert!(tape.add(v, bad).is_err());
    }

    #[test]
    fn scalar_broadcast_gradients() {
        let s = tensor(vec![], vec![2.0]);
        let v = tensor(vec![3], vec![1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let sv = tape.leaf(&s);
        let vv = tape.leaf(&v);
        let prod = tape.mul(vv, sv).unwrap();
        let loss = tape.sum(prod, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(s.grad().unwrap(), vec![6.0]);
        assert_eq!(v.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_rows_splits_gradient() {
        let a = tensor(vec![1, 2], vec![1.0, 2.0]);
        let b = tensor(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let mut tape = Tape::new();
        let av = tape.leaf(&a);
        let bv = tape.leaf(&b);
        let cat = tape.concat_rows(av, bv).unwrap();
        assert_eq!(tape.shape(cat), &[3, 2]);
        let sq = tape.square(cat).unwrap();
        let loss = tape.sum(sq, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 4.0]);
        assert_eq!(b.grad().unwrap(), vec![6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn group_mean_values() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![4, 2], vec![0.0, 0.0, 2.0, 2.0, 4.0, 0.0, 0.0, 4.0]).unwrap();
        let gm = tape.group_mean(x, &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(tape.value(gm), &[1.0, 1.0, 2.0, 2.0]);
        assert!(tape.group_mean(x, &[0, 0, 0, 0], 2).is_err());
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let mut tape = Tape::new();
        for c in [2usize, 5, 10] {
            let logits = tape.constant(vec![3, c], vec![0.7; 3 * c]).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &[0, c - 1, c / 2]).unwrap();
            assert!((tape.item(loss).unwrap() - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ce_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[3]),
            Err(UniregError::Contract(_))
        ));
    }

    #[test]
    fn contrastive_trivial_cases() {
        let mut tape = Tape::new();
        let same = tape.constant(vec![3, 2], vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let l = tape.contrastive_loss(same, &[4, 4, 4], 1.0).unwrap();
        assert_eq!(tape.item(l).unwrap(), 0.0);

        let apart = tape.constant(vec![2, 1], vec![0.0, 5.0]).unwrap();
        let l2 = tape.contrastive_loss(apart, &[0, 1], 1.0).unwrap();
        assert_eq!(tape.item(l2).unwrap(), 0.0);

        let single = tape.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            tape.contrastive_loss(single, &[0], 1.0),
            Err(UniregError::Contract(_))
        ));
    }

    #[test]
    fn pairwise_sqdist_values() {
        let mut tape = Tape::new();
        let q = tape.constant(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let p = tape.constant(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let dmat = tape.pairwise_sqdist(q, p).unwrap();
        assert_eq!(tape.value(dmat), &[0.0, 25.0, 2.0, 13.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(vec![2, 2], vec![0.3, -0.7, 0.11, 0.9]).unwrap();
            let y = tape.tanh(x).unwrap();
            let s = tape.sigmoid(y).unwrap();
            let m = tape.mean(s, None).unwrap();
            tape.item(m).unwrap().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn replayed_backward_matches() {
        let t = tensor(vec![2, 2], vec![0.4, -0.2, 0.9, -1.3]);
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let h = tape.tanh(x).unwrap();
        let sq = tape.square(h).unwrap();
        let loss = tape.mean(sq, None).unwrap();
        tape.backward(loss).unwrap();
        let g1 = t.grad().unwrap();
        t.zero_grad();
        tape.backward(loss).unwrap();
        let g2 = t.grad().unwrap();
        assert_eq!(g1, g2);
    }
}
