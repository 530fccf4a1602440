//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so a single reverse sweep over the node list
//! is a valid topological traversal for [`Tape::backward`]. Parameters live in
//! a [`ParamStore`] and enter a tape through [`Tape::param`]; frozen
//! parameters enter as constants and are skipped by the backward sweep.

use std::collections::{BTreeMap, HashMap};

use crate::tensor::Mat;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Mat,
    pub trainable: bool,
}

/// Named, ordered collection of model parameters.
///
/// Registration order is the iteration order and therefore the order used by
/// optimizers and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Panics when the name is already taken.
    pub fn register(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter {name} registered twice"
        );
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable: true,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    Exp(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Mat,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropyRows {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Mat,
        count: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<Option<f64>>,
        count: usize,
    },
    SmoothL1Rows {
        x: Var,
        target: Mat,
        mask: Vec<bool>,
        delta: f64,
        count: usize,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Anything that can supply per-parameter gradients to an optimizer.
pub trait GradSource {
    fn param_grad(&self, id: ParamId) -> Option<&Mat>;
}

impl GradSource for Gradients {
    fn param_grad(&self, id: ParamId) -> Option<&Mat> {
        self.param(id)
    }
}

/// Parameter gradients detached from their tape, summable across tapes.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Mat>>,
}

impl ParamGrads {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the parameter gradients of one backward sweep.
    pub fn accumulate(&mut self, g: &Gradients) {
        for (id, v) in &g.param_vars {
            if let Some(m) = g.get(*v) {
                self.add(*id, m);
            }
        }
    }

    pub fn add(&mut self, id: ParamId, m: &Mat) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(m),
            slot => *slot = Some(m.clone()),
        }
    }

    /// Sums `other` into `self`.
    pub fn merge(&mut self, other: &ParamGrads) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.all_finite())
    }
}

impl GradSource for ParamGrads {
    fn param_grad(&self, id: ParamId) -> Option<&Mat> {
        self.get(id)
    }
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.param_vars.get(&id).and_then(|v| self.get(*v))
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input that is not a stored parameter (used by gradient checks).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Loads a parameter once per tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let trainable = store.is_trainable(id);
        let v = self.push(store.get(id).clone(), Op::Param, trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds a 1×C row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let mut value = self.value(a).clone();
        let rv = self.value(row).as_slice().to_vec();
        for i in 0..r {
            for (x, b) in value.row_mut(i).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Multiplies every element of `a` by the 1×1 value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let value = self.value(a).map(|x| x * sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(value, Op::ScaleBy(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(value, Op::Softplus(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(value, Op::Square(a), ng)
    }

    /// Row-wise softmax with row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..x.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalization with affine 1×C `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let g = self.value(gamma).as_slice().to_vec();
        let b = self.value(beta).as_slice().to_vec();
        assert_eq!(g.len(), c);
        assert_eq!(b.len(), c);
        let mut normalized = Mat::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Mat::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let n = (row[j] - mean) * is;
                normalized[(i, j)] = n;
                out[(i, j)] = n * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            ng,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.as_slice());
            rows += v.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Mat::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
            }
            off += v.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.rows(), "slice_rows out of range");
        let c = v.cols();
        let value = Mat::from_vec(len, c, v.as_slice()[start * c..(start + len) * c].to_vec());
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.cols(), "slice_cols out of range");
        let mut out = Mat::zeros(v.rows(), len);
        for i in 0..v.rows() {
            out.row_mut(i).copy_from_slice(&v.row(i)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select_rows(idx);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// One output row per group: the column-wise maximum over the rows of `a`
    /// listed in the group. Groups must be non-empty. Ties go to the first
    /// listed row.
    pub fn group_max(&mut self, a: Var, groups: &[Vec<usize>]) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut out = Mat::zeros(groups.len(), c);
        let mut argmax = vec![0usize; groups.len() * c];
        for (g, members) in groups.iter().enumerate() {
            assert!(!members.is_empty(), "group_max with empty group {g}");
            for j in 0..c {
                let mut best = members[0];
                let mut best_v = x[(best, j)];
                for &m in &members[1..] {
                    let v = x[(m, j)];
                    if v > best_v {
                        best_v = v;
                        best = m;
                    }
                }
                out[(g, j)] = best_v;
                argmax[g * c + j] = best;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::GroupMax { x: a, argmax }, ng)
    }

    /// Column means → 1×C.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut out = Mat::zeros(1, c);
        for i in 0..r {
            for (o, v) in out.as_mut_slice().iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / r as f64);
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Mat::scalar(x.sum() / x.len() as f64);
        let ng = self.ng(a);
        self.push(value, Op::MeanAll(a), ng)
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            norms.push(n);
            for v in out.row_mut(i) {
                *v /= n;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::L2NormalizeRows { x: a, norms }, ng)
    }

    /// Mean over rows with a target of `-log softmax(row)[target]`.
    /// Rows whose target is `None` are ignored; with no targets the result is 0.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows(), targets.len(), "one target per row");
        let mut probs = x.clone();
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            let row = x.row(i);
            let lse = log_sum_exp(row);
            softmax_in_place(probs.row_mut(i));
            if let Some(t) = *t {
                assert!(t < row.len(), "target {t} out of range");
                total += lse - row[t];
                count += 1;
            }
        }
        let value = Mat::scalar(if count > 0 { total / count as f64 } else { 0.0 });
        let ng = self.ng(logits);
        self.push(
            value,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        )
    }

    /// Mean binary cross-entropy with logits over the entries that carry a
    /// target (row-major order). With no targets the result is 0.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[Option<f64>]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.len(), targets.len(), "one target per logit");
        let mut total = 0.0;
        let mut count = 0;
        for (&z, t) in x.as_slice().iter().zip(targets) {
            if let Some(y) = *t {
                // max(z,0) - z*y + log(1 + exp(-|z|))
                total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
                count += 1;
            }
        }
        let value = Mat::scalar(if count > 0 { total / count as f64 } else { 0.0 });
        let ng = self.ng(logits);
        self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                count,
            },
            ng,
        )
    }

    /// Smooth-L1 (Huber with threshold `delta`) summed over columns and
    /// averaged over rows with `mask[row]`. With no masked rows the result is 0.
    pub fn smooth_l1_rows(&mut self, x: Var, target: &Mat, mask: &[bool], delta: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape());
        assert_eq!(mask.len(), xv.rows());
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..xv.rows() {
            if !mask[i] {
                continue;
            }
            count += 1;
            for (a, b) in xv.row(i).iter().zip(target.row(i)) {
                total += huber(a - b, delta);
            }
        }
        let value = Mat::scalar(if count > 0 { total / count as f64 } else { 0.0 });
        let ng = self.ng(x);
        self.push(
            value,
            Op::SmoothL1Rows {
                x,
                target: target.clone(),
                mask: mask.to_vec(),
                delta,
                count,
            },
            ng,
        )
    }

    /// Reverse sweep from the 1×1 node `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward from non-scalar");
        self.backward_seeded(&[(output, Mat::scalar(1.0))])
    }

    /// Reverse sweep with explicit output gradients, for losses whose outer
    /// part is evaluated on another tape.
    pub fn backward_seeded(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.shape(), "seed gradient shape mismatch");
            acc(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        if seeds.is_empty() {
            return Gradients {
                grads,
                param_vars: self.params.clone(),
            };
        }
        for i in (0..=last).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            param_vars: self.params.clone(),
        }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.ng(*row) {
                    let mut s = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in s.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(grads, *row, s);
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|v| v * s)),
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).item();
                if self.ng(*a) {
                    acc(grads, *a, g.map(|v| v * sv));
                }
                if self.ng(*s) {
                    let d: f64 = g
                        .as_slice()
                        .iter()
                        .zip(self.value(*a).as_slice())
                        .map(|(x, y)| x * y)
                        .sum();
                    acc(grads, *s, Mat::scalar(d));
                }
            }
            Op::Relu(a) => acc(
                grads,
                *a,
                g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }),
            ),
            Op::Gelu(a) => acc(grads, *a, g.zip_map(self.value(*a), |gv, x| gv * gelu_grad(x))),
            Op::Softplus(a) => acc(grads, *a, g.zip_map(self.value(*a), |gv, x| gv * sigmoid(x))),
            Op::Exp(a) => acc(grads, *a, g.zip_map(out, |gv, y| gv * y)),
            Op::Square(a) => acc(grads, *a, g.zip_map(self.value(*a), |gv, x| 2.0 * gv * x)),
            Op::SoftmaxRows(a) => {
                let mut d = Mat::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = y[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (r, c) = normalized.shape();
                let gam = self.value(*gamma).as_slice();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = Mat::zeros(1, c);
                    let mut db = Mat::zeros(1, c);
                    for i in 0..r {
                        for j in 0..c {
                            dg.as_mut_slice()[j] += g[(i, j)] * normalized[(i, j)];
                            db.as_mut_slice()[j] += g[(i, j)];
                        }
                    }
                    if self.ng(*gamma) {
                        acc(grads, *gamma, dg);
                    }
                    if self.ng(*beta) {
                        acc(grads, *beta, db);
                    }
                }
                if self.ng(*x) {
                    let mut dx = Mat::zeros(r, c);
                    for i in 0..r {
                        let gn: Vec<f64> = (0..c).map(|j| g[(i, j)] * gam[j]).collect();
                        let mean_gn = gn.iter().sum::<f64>() / c as f64;
                        let mean_gn_n = gn
                            .iter()
                            .zip(normalized.row(i))
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / c as f64;
                        for j in 0..c {
                            dx[(i, j)] =
                                inv_std[i] * (gn[j] - mean_gn - normalized[(i, j)] * mean_gn_n);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let slice = g.as_slice()[off * c..(off + r) * c].to_vec();
                        acc(grads, p, Mat::from_vec(r, c, slice));
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let mut d = Mat::zeros(r, c);
                        for i in 0..r {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        acc(grads, p, d);
                    }
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros(r, c);
                d.as_mut_slice()[start * c..start * c + g.len()].copy_from_slice(g.as_slice());
                acc(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(grads, *a, d);
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros(r, c);
                for (k, &src) in idx.iter().enumerate() {
                    for (o, v) in d.row_mut(src).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(grads, *a, d);
            }
            Op::GroupMax { x, argmax } => {
                let (r, c) = self.shape(*x);
                let mut d = Mat::zeros(r, c);
                for gi in 0..g.rows() {
                    for j in 0..c {
                        d[(argmax[gi * c + j], j)] += g[(gi, j)];
                    }
                }
                acc(grads, *x, d);
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros(r, c);
                for i in 0..r {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.as_slice()) {
                        *o = v / r as f64;
                    }
                }
                acc(grads, *a, d);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                acc(grads, *a, Mat::filled(r, c, g.item()));
            }
            Op::MeanAll(a) => {
                let (r, c) = self.shape(*a);
                acc(grads, *a, Mat::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::L2NormalizeRows { x, norms } => {
                let (r, c) = out.shape();
                let mut d = Mat::zeros(r, c);
                for i in 0..r {
                    let y = out.row(i);
                    let gr = g.row(i);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let raw_norm = self.value(*x).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    // Below eps the map is a plain scaling by 1/eps.
                    let clamped = raw_norm < norms[i];
                    for j in 0..c {
                        d[(i, j)] = if clamped {
                            gr[j] / norms[i]
                        } else {
                            (gr[j] - y[j] * dot) / norms[i]
                        };
                    }
                }
                acc(grads, *x, d);
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
                count,
            } => {
                let (r, c) = probs.shape();
                let mut d = Mat::zeros(r, c);
                if *count > 0 {
                    let s = g.item() / *count as f64;
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..c {
                                let ind = if j == t { 1.0 } else { 0.0 };
                                d[(i, j)] = s * (probs[(i, j)] - ind);
                            }
                        }
                    }
                }
                acc(grads, *logits, d);
            }
            Op::BceWithLogits {
                logits,
                targets,
                count,
            } => {
                let x = self.value(*logits);
                let mut d = Mat::zeros(x.rows(), x.cols());
                if *count > 0 {
                    let s = g.item() / *count as f64;
                    for (k, t) in targets.iter().enumerate() {
                        if let Some(y) = *t {
                            d.as_mut_slice()[k] = s * (sigmoid(x.as_slice()[k]) - y);
                        }
                    }
                }
                acc(grads, *logits, d);
            }
            Op::SmoothL1Rows {
                x,
                target,
                mask,
                delta,
                count,
            } => {
                let xv = self.value(*x);
                let mut d = Mat::zeros(xv.rows(), xv.cols());
                if *count > 0 {
                    let s = g.item() / *count as f64;
                    for i in 0..xv.rows() {
                        if !mask[i] {
                            continue;
                        }
                        for j in 0..xv.cols() {
                            d[(i, j)] = s * huber_grad(xv[(i, j)] - target[(i, j)], *delta);
                        }
                    }
                }
                acc(grads, *x, d);
            }
        }
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn huber(d: f64, delta: f64) -> f64 {
    let a = d.abs();
    if a < delta {
        0.5 * d * d / delta
    } else {
        a - 0.5 * delta
    }
}

fn huber_grad(d: f64, delta: f64) -> f64 {
    if d.abs() < delta {
        d / delta
    } else {
        d.signum()
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
