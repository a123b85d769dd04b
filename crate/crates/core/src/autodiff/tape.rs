//! The tape arena: node storage, op constructors, and the backward sweep.

use ndarray::{s, Array2, Axis};

use super::{EngineError, ParamSet};
use crate::Scalar;

/// Smallest norm the cosine ops will divide by.
const MIN_NORM: f64 = 1e-12;

/// Handle to a node on a [`Tape`].  Carries its shape so model code can
/// sanity-check wiring without touching the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
    pub rows: usize,
    pub cols: usize,
}

/// How cosine similarity treats columns whose norm underflows [`MIN_NORM`]:
/// clamp the denominator (training default) or reject the op (test mode).
///
/// Clamping also zeroes the backward pass through any score whose key or
/// memory column was clamped.  For an exactly-zero column that is the true
/// derivative with respect to the *other* argument (the score is constant
/// zero in it), while the derivative with respect to the zero column itself
/// is a `1/MIN_NORM`-scale artifact of the clamp — propagating it would
/// flood training with junk whenever a degenerate column appears, so an
/// uninformative column contributes no gradient at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormGuard {
    #[default]
    Clamp,
    Strict,
}

/// Uniform dispatch tag for [`Tape::tensor_op`].  Composite model code calls
/// the named constructors directly; this enum exists for table-driven checks
/// that sweep every op kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    AddBias,
    MatMul,
    Tanh,
    Sigmoid,
    Relu,
    ConcatRows,
    ConcatCols,
    SoftmaxCols,
    SumAll,
    MeanAll,
}

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Matrix plus a column vector broadcast across columns.
    AddBias(usize, usize),
    MatMul(usize, usize),
    /// `a * x + b` elementwise with constant scalars.
    Affine(usize, T, T),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    /// Columnwise softmax over the first `visible` rows; remaining rows zero.
    SoftmaxCols(usize, usize),
    /// Cosine similarity of key columns against a stacked memory.
    CosineCols { key: usize, mem: usize, batch: usize },
    /// Convex read from a stacked memory: `out[:,i] = sum_t w[t,i] * mem[:,t*n+i]`.
    Deref { mem: usize, weights: usize },
    /// Slotwise sum of a stacked memory.
    MemColSum { mem: usize, batch: usize },
    /// Stacked matrix plus a per-sequence matrix broadcast across slots.
    AddPerSlot { big: usize, small: usize },
    /// Per-column dot products against a single vector: `(d,s*n) x (d,1) -> (s,n)`.
    DotCols { mat: usize, vec: usize, batch: usize },
    /// Embedding lookup: output column `j` is `table[:, ids[j]]`.
    GatherCols { table: usize, ids: Vec<usize> },
    /// Summed softmax cross-entropy over the active columns; `None` masks a column.
    CrossEntropyCols { logits: usize, targets: Vec<Option<usize>> },
    /// Summed mean-over-rows sigmoid cross-entropy against a constant multi-hot
    /// target; `active` masks columns.
    BceMultihotCols {
        logits: usize,
        targets: Array2<T>,
        active: Vec<bool>,
    },
    SumAll(usize),
    MeanAll(usize),
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Array2<T>,
    grad: Option<Array2<T>>,
    /// Saved forward intermediates: softmax probabilities for cross-entropy,
    /// sigmoids for the multi-hot loss.
    aux: Option<Array2<T>>,
    requires_grad: bool,
}

/// Append-only reverse-mode tape.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(String, usize)>,
    norm_guard: NormGuard,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            norm_guard: NormGuard::default(),
        }
    }

    pub fn with_norm_guard(guard: NormGuard) -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            norm_guard: guard,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all nodes and bindings but keep the allocation.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.bindings.clear();
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.id].value
    }

    /// Gradient of a node after [`Tape::backward`], if it participates.
    pub fn grad(&self, v: Var) -> Option<&Array2<T>> {
        self.nodes[v.id].grad.as_ref()
    }

    fn push(&mut self, op: Op<T>, value: Array2<T>, requires_grad: bool) -> Var {
        let (rows, cols) = value.dim();
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            aux: None,
            requires_grad,
        });
        Var { id, rows, cols }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Input the backward pass will not differentiate through.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Differentiable leaf (an activation carried across sub-graphs, or a
    /// parameter bound outside [`Tape::bind`]).
    pub fn leaf(&mut self, value: Array2<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Bind a named parameter as a differentiable leaf.  [`Tape::harvest`]
    /// later routes its gradient back into the set.
    pub fn bind(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var, EngineError> {
        let value = params.value(name)?.clone();
        let var = self.push(Op::Leaf, value, true);
        self.bindings.push((name.to_string(), var.id));
        Ok(var)
    }

    /// Accumulate the gradients of every bound parameter into `params`.
    pub fn harvest(&self, params: &mut ParamSet<T>) -> Result<(), EngineError> {
        for (name, id) in &self.bindings {
            if let Some(g) = self.nodes[*id].grad.as_ref() {
                params.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    // ── elementwise and linear ops ──────────────────────────────────────

    fn check_same(
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(), EngineError> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(EngineError::ShapeMismatch {
                op,
                lhs: (a.rows, a.cols),
                rhs: (b.rows, b.cols),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        Self::check_same("add", a, b)?;
        let value = &self.nodes[a.id].value + &self.nodes[b.id].value;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add(a.id, b.id), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        Self::check_same("sub", a, b)?;
        let value = &self.nodes[a.id].value - &self.nodes[b.id].value;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Sub(a.id, b.id), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        Self::check_same("mul", a, b)?;
        let value = &self.nodes[a.id].value * &self.nodes[b.id].value;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul(a.id, b.id), value, rg))
    }

    /// `mat + bias` where `bias` is a column vector broadcast across columns.
    pub fn add_bias(&mut self, mat: Var, bias: Var) -> Result<Var, EngineError> {
        if bias.cols != 1 || bias.rows != mat.rows {
            return Err(EngineError::ShapeMismatch {
                op: "add_bias",
                lhs: (mat.rows, mat.cols),
                rhs: (bias.rows, bias.cols),
            });
        }
        let b = self.nodes[bias.id].value.column(0).to_owned();
        let mut value = self.nodes[mat.id].value.clone();
        for mut col in value.columns_mut() {
            col += &b;
        }
        let rg = self.requires(mat) || self.requires(bias);
        Ok(self.push(Op::AddBias(mat.id, bias.id), value, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        if a.cols != b.rows {
            return Err(EngineError::ShapeMismatch {
                op: "matmul",
                lhs: (a.rows, a.cols),
                rhs: (b.rows, b.cols),
            });
        }
        let value = self.nodes[a.id].value.dot(&self.nodes[b.id].value);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::MatMul(a.id, b.id), value, rg))
    }

    /// `alpha * x + beta` with constant scalars.
    pub fn affine(&mut self, x: Var, alpha: T, beta: T) -> Var {
        let value = self.nodes[x.id].value.mapv(|v| alpha * v + beta);
        let rg = self.requires(x);
        self.push(Op::Affine(x.id, alpha, beta), value, rg)
    }

    /// `alpha * x`.
    pub fn scale(&mut self, x: Var, alpha: T) -> Var {
        self.affine(x, alpha, T::zero())
    }

    /// `1 - x`, the gate complement.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.nodes[x.id].value.mapv(|v| v.tanh());
        let rg = self.requires(x);
        self.push(Op::Tanh(x.id), value, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.nodes[x.id].value.mapv(sigmoid_scalar);
        let rg = self.requires(x);
        self.push(Op::Sigmoid(x.id), value, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.id].value.mapv(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.requires(x);
        self.push(Op::Relu(x.id), value, rg)
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, EngineError> {
        let first = parts.first().ok_or(EngineError::BadRange {
            op: "concat_rows",
            start: 0,
            end: 0,
            extent: 0,
        })?;
        let cols = first.cols;
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(EngineError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: (first.rows, cols),
                    rhs: (p.rows, p.cols),
                });
            }
            rows += p.rows;
        }
        let mut value = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            value
                .slice_mut(s![at..at + p.rows, ..])
                .assign(&self.nodes[p.id].value);
            at += p.rows;
        }
        let rg = parts.iter().any(|p| self.requires(*p));
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Op::ConcatRows(ids), value, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, EngineError> {
        let first = parts.first().ok_or(EngineError::BadRange {
            op: "concat_cols",
            start: 0,
            end: 0,
            extent: 0,
        })?;
        let rows = first.rows;
        let mut cols = 0;
        for p in parts {
            if p.rows != rows {
                return Err(EngineError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: (rows, first.cols),
                    rhs: (p.rows, p.cols),
                });
            }
            cols += p.cols;
        }
        let mut value = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            value
                .slice_mut(s![.., at..at + p.cols])
                .assign(&self.nodes[p.id].value);
            at += p.cols;
        }
        let rg = parts.iter().any(|p| self.requires(*p));
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Op::ConcatCols(ids), value, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, EngineError> {
        if start >= end || end > x.rows {
            return Err(EngineError::BadRange {
                op: "slice_rows",
                start,
                end,
                extent: x.rows,
            });
        }
        let value = self.nodes[x.id].value.slice(s![start..end, ..]).to_owned();
        let rg = self.requires(x);
        Ok(self.push(Op::SliceRows(x.id, start), value, rg))
    }

    // ── attention and memory ops ────────────────────────────────────────

    /// Columnwise softmax over the first `visible` rows.  Rows at and beyond
    /// `visible` get weight zero, which is how causal masking enters: hidden
    /// slots simply do not exist for the normalisation.
    pub fn softmax_cols(&mut self, x: Var, visible: usize) -> Result<Var, EngineError> {
        if visible == 0 || visible > x.rows {
            return Err(EngineError::BadRange {
                op: "softmax_cols",
                start: 0,
                end: visible,
                extent: x.rows,
            });
        }
        let input = &self.nodes[x.id].value;
        let mut value = Array2::zeros((x.rows, x.cols));
        for j in 0..x.cols {
            let col = input.column(j);
            let mut mx = col[0];
            for t in 1..visible {
                if col[t] > mx {
                    mx = col[t];
                }
            }
            let mut z = T::zero();
            for t in 0..visible {
                let e = (col[t] - mx).exp();
                value[(t, j)] = e;
                z = z + e;
            }
            for t in 0..visible {
                value[(t, j)] = value[(t, j)] / z;
            }
        }
        let rg = self.requires(x);
        Ok(self.push(Op::SoftmaxCols(x.id, visible), value, rg))
    }

    /// Cosine similarity of each key column against every slot of a stacked
    /// memory: `key (d,n)`, `mem (d,s*n)` -> `(s,n)`.
    pub fn cosine_cols(&mut self, key: Var, mem: Var, batch: usize) -> Result<Var, EngineError> {
        if key.rows != mem.rows {
            return Err(EngineError::ShapeMismatch {
                op: "cosine_cols",
                lhs: (key.rows, key.cols),
                rhs: (mem.rows, mem.cols),
            });
        }
        if key.cols != batch || batch == 0 || mem.cols % batch != 0 {
            return Err(EngineError::BadStack {
                op: "cosine_cols",
                cols: mem.cols,
                batch,
            });
        }
        let slots = mem.cols / batch;
        let k = &self.nodes[key.id].value;
        let m = &self.nodes[mem.id].value;
        let eps = T::from_f64(MIN_NORM);
        let strict = self.norm_guard == NormGuard::Strict;

        let mut knorm = vec![T::zero(); batch];
        for (i, kn) in knorm.iter_mut().enumerate() {
            let n = norm_col(k, i);
            if strict && n < eps {
                return Err(EngineError::ZeroNorm { op: "cosine_cols", column: i });
            }
            *kn = if n < eps { eps } else { n };
        }
        let mut value = Array2::zeros((slots, batch));
        for t in 0..slots {
            for i in 0..batch {
                let c = t * batch + i;
                let mn = norm_col(m, c);
                if strict && mn < eps {
                    return Err(EngineError::ZeroNorm { op: "cosine_cols", column: c });
                }
                let mn = if mn < eps { eps } else { mn };
                let dot = dot_cols_at(k, i, m, c);
                value[(t, i)] = dot / (knorm[i] * mn);
            }
        }
        let rg = self.requires(key) || self.requires(mem);
        Ok(self.push(Op::CosineCols { key: key.id, mem: mem.id, batch }, value, rg))
    }

    /// Weighted read from a stacked memory: `mem (d,s*n)`, `weights (s,n)` ->
    /// `(d,n)` with `out[:,i] = sum_t w[t,i] * mem[:,t*n+i]`.
    pub fn deref(&mut self, mem: Var, weights: Var) -> Result<Var, EngineError> {
        let batch = weights.cols;
        if batch == 0 || mem.cols != weights.rows * batch {
            return Err(EngineError::BadStack {
                op: "deref",
                cols: mem.cols,
                batch,
            });
        }
        let m = &self.nodes[mem.id].value;
        let w = &self.nodes[weights.id].value;
        let mut value = Array2::zeros((mem.rows, batch));
        for t in 0..weights.rows {
            let block = m.slice(s![.., t * batch..(t + 1) * batch]);
            let wrow = w.row(t);
            for r in 0..mem.rows {
                for i in 0..batch {
                    value[(r, i)] = value[(r, i)] + block[(r, i)] * wrow[i];
                }
            }
        }
        let rg = self.requires(mem) || self.requires(weights);
        Ok(self.push(Op::Deref { mem: mem.id, weights: weights.id }, value, rg))
    }

    /// Sum of the slots of a stacked memory: `(d,s*n)` -> `(d,n)`.
    pub fn mem_colsum(&mut self, mem: Var, batch: usize) -> Result<Var, EngineError> {
        if batch == 0 || mem.cols % batch != 0 {
            return Err(EngineError::BadStack {
                op: "mem_colsum",
                cols: mem.cols,
                batch,
            });
        }
        let slots = mem.cols / batch;
        let m = &self.nodes[mem.id].value;
        let mut value = Array2::zeros((mem.rows, batch));
        for t in 0..slots {
            value += &m.slice(s![.., t * batch..(t + 1) * batch]);
        }
        let rg = self.requires(mem);
        Ok(self.push(Op::MemColSum { mem: mem.id, batch }, value, rg))
    }

    /// Broadcast-add a per-sequence matrix onto every slot of a stacked one:
    /// `big (d,s*n) + small (d,n)`.
    pub fn add_per_slot(&mut self, big: Var, small: Var) -> Result<Var, EngineError> {
        let batch = small.cols;
        if big.rows != small.rows || batch == 0 || big.cols % batch != 0 {
            return Err(EngineError::ShapeMismatch {
                op: "add_per_slot",
                lhs: (big.rows, big.cols),
                rhs: (small.rows, small.cols),
            });
        }
        let slots = big.cols / batch;
        let sm = &self.nodes[small.id].value;
        let mut value = self.nodes[big.id].value.clone();
        for t in 0..slots {
            let mut block = value.slice_mut(s![.., t * batch..(t + 1) * batch]);
            block += sm;
        }
        let rg = self.requires(big) || self.requires(small);
        Ok(self.push(Op::AddPerSlot { big: big.id, small: small.id }, value, rg))
    }

    /// Per-column dots against one vector: `mat (d,s*n)`, `vec (d,1)` -> `(s,n)`.
    pub fn dot_cols(&mut self, mat: Var, vec: Var, batch: usize) -> Result<Var, EngineError> {
        if vec.cols != 1 || vec.rows != mat.rows {
            return Err(EngineError::ShapeMismatch {
                op: "dot_cols",
                lhs: (mat.rows, mat.cols),
                rhs: (vec.rows, vec.cols),
            });
        }
        if batch == 0 || mat.cols % batch != 0 {
            return Err(EngineError::BadStack {
                op: "dot_cols",
                cols: mat.cols,
                batch,
            });
        }
        let slots = mat.cols / batch;
        let m = &self.nodes[mat.id].value;
        let v = &self.nodes[vec.id].value;
        let mut value = Array2::zeros((slots, batch));
        for t in 0..slots {
            for i in 0..batch {
                value[(t, i)] = dot_cols_at(v, 0, m, t * batch + i);
            }
        }
        let rg = self.requires(mat) || self.requires(vec);
        Ok(self.push(Op::DotCols { mat: mat.id, vec: vec.id, batch }, value, rg))
    }

    /// Embedding lookup by column index.
    pub fn gather_cols(&mut self, table: Var, ids: &[usize]) -> Result<Var, EngineError> {
        for &ix in ids {
            if ix >= table.cols {
                return Err(EngineError::ClassOutOfRange {
                    op: "gather_cols",
                    column: ix,
                    class: ix,
                    classes: table.cols,
                });
            }
        }
        let tb = &self.nodes[table.id].value;
        let mut value = Array2::zeros((table.rows, ids.len()));
        for (j, &ix) in ids.iter().enumerate() {
            value.column_mut(j).assign(&tb.column(ix));
        }
        let rg = self.requires(table);
        Ok(self.push(Op::GatherCols { table: table.id, ids: ids.to_vec() }, value, rg))
    }

    // ── losses and reductions ───────────────────────────────────────────

    /// Softmax cross-entropy summed over the active columns.  `targets[j] =
    /// None` drops column `j` from the loss (a sequence already past its EOS).
    pub fn cross_entropy_cols(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var, EngineError> {
        if targets.len() != logits.cols {
            return Err(EngineError::ShapeMismatch {
                op: "cross_entropy_cols",
                lhs: (logits.rows, logits.cols),
                rhs: (targets.len(), 1),
            });
        }
        for (j, t) in targets.iter().enumerate() {
            if let Some(c) = t {
                if *c >= logits.rows {
                    return Err(EngineError::ClassOutOfRange {
                        op: "cross_entropy_cols",
                        column: j,
                        class: *c,
                        classes: logits.rows,
                    });
                }
            }
        }
        let x = &self.nodes[logits.id].value;
        let mut probs = Array2::zeros((logits.rows, logits.cols));
        let mut loss = T::zero();
        for (j, t) in targets.iter().enumerate() {
            let Some(c) = t else { continue };
            let col = x.column(j);
            let mx = col.iter().cloned().fold(col[0], |a, b| if b > a { b } else { a });
            let mut z = T::zero();
            for r in 0..logits.rows {
                let e = (col[r] - mx).exp();
                probs[(r, j)] = e;
                z = z + e;
            }
            for r in 0..logits.rows {
                probs[(r, j)] = probs[(r, j)] / z;
            }
            loss = loss - probs[(*c, j)].ln();
        }
        let rg = self.requires(logits);
        let var = self.push(
            Op::CrossEntropyCols { logits: logits.id, targets: targets.to_vec() },
            Array2::from_elem((1, 1), loss),
            rg,
        );
        self.nodes[var.id].aux = Some(probs);
        Ok(var)
    }

    /// Sigmoid cross-entropy against a constant multi-hot target, averaged
    /// over rows and summed over active columns.
    pub fn bce_multihot_cols(
        &mut self,
        logits: Var,
        targets: Array2<T>,
        active: &[bool],
    ) -> Result<Var, EngineError> {
        if targets.dim() != (logits.rows, logits.cols) || active.len() != logits.cols {
            return Err(EngineError::ShapeMismatch {
                op: "bce_multihot_cols",
                lhs: (logits.rows, logits.cols),
                rhs: targets.dim(),
            });
        }
        let x = &self.nodes[logits.id].value;
        let mut sig = Array2::zeros((logits.rows, logits.cols));
        let mut loss = T::zero();
        let krecip = T::one() / T::from_f64(logits.rows as f64);
        for j in 0..logits.cols {
            if !active[j] {
                continue;
            }
            for r in 0..logits.rows {
                let v = x[(r, j)];
                sig[(r, j)] = sigmoid_scalar(v);
                // max(v,0) - t*v + ln(1 + exp(-|v|)) is the overflow-safe form.
                let pos = if v > T::zero() { v } else { T::zero() };
                let term = pos - targets[(r, j)] * v + (T::one() + (-v.abs()).exp()).ln();
                loss = loss + term * krecip;
            }
        }
        let rg = self.requires(logits);
        let var = self.push(
            Op::BceMultihotCols { logits: logits.id, targets, active: active.to_vec() },
            Array2::from_elem((1, 1), loss),
            rg,
        );
        self.nodes[var.id].aux = Some(sig);
        Ok(var)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.nodes[x.id].value.sum();
        let rg = self.requires(x);
        self.push(Op::SumAll(x.id), Array2::from_elem((1, 1), total), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from_f64((x.rows * x.cols) as f64);
        let total = self.nodes[x.id].value.sum() / n;
        let rg = self.requires(x);
        self.push(Op::MeanAll(x.id), Array2::from_elem((1, 1), total), rg)
    }

    /// Table-driven dispatch over the ops whose arity fits a plain input list.
    pub fn tensor_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, EngineError> {
        let need = |n: usize| -> Result<(), EngineError> {
            if inputs.len() != n {
                return Err(EngineError::BadRange {
                    op: "tensor_op",
                    start: inputs.len(),
                    end: n,
                    extent: n,
                });
            }
            Ok(())
        };
        match kind {
            OpKind::Add => {
                need(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                need(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                need(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::AddBias => {
                need(2)?;
                self.add_bias(inputs[0], inputs[1])
            }
            OpKind::MatMul => {
                need(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Tanh => {
                need(1)?;
                Ok(self.tanh(inputs[0]))
            }
            OpKind::Sigmoid => {
                need(1)?;
                Ok(self.sigmoid(inputs[0]))
            }
            OpKind::Relu => {
                need(1)?;
                Ok(self.relu(inputs[0]))
            }
            OpKind::ConcatRows => self.concat_rows(inputs),
            OpKind::ConcatCols => self.concat_cols(inputs),
            OpKind::SoftmaxCols => {
                need(1)?;
                self.softmax_cols(inputs[0], inputs[0].rows)
            }
            OpKind::SumAll => {
                need(1)?;
                Ok(self.sum_all(inputs[0]))
            }
            OpKind::MeanAll => {
                need(1)?;
                Ok(self.mean_all(inputs[0]))
            }
        }
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss.  Gradients accumulate additively at
    /// fan-out; leaves that do not require gradients are skipped.
    pub fn backward(&mut self, loss: Var) -> Result<(), EngineError> {
        if loss.rows != 1 || loss.cols != 1 {
            return Err(EngineError::NotScalar {
                op: "backward",
                shape: (loss.rows, loss.cols),
            });
        }
        if !self.nodes[loss.id].value[(0, 0)].is_finite() {
            return Err(EngineError::NonFinite { context: "backward seed".to_string() });
        }
        self.nodes[loss.id].grad = Some(Array2::ones((1, 1)));

        for i in (0..=loss.id).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_ref() else { continue };
            let g = g.clone();
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(before, *a, || g.clone());
                    accumulate(before, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(before, *a, || g.clone());
                    accumulate(before, *b, || g.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if before[a].requires_grad {
                        let d = &g * &before[b].value;
                        accumulate(before, a, || d);
                    }
                    if before[b].requires_grad {
                        let d = &g * &before[a].value;
                        accumulate(before, b, || d);
                    }
                }
                Op::AddBias(mat, bias) => {
                    accumulate(before, *mat, || g.clone());
                    let bias = *bias;
                    accumulate(before, bias, || {
                        let col = g.sum_axis(Axis(1));
                        col.insert_axis(Axis(1))
                    });
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if before[a].requires_grad {
                        let d = g.dot(&before[b].value.t());
                        accumulate(before, a, || d);
                    }
                    if before[b].requires_grad {
                        let d = before[a].value.t().dot(&g);
                        accumulate(before, b, || d);
                    }
                }
                Op::Affine(x, alpha, _) => {
                    let alpha = *alpha;
                    accumulate(before, *x, || g.mapv(|v| v * alpha));
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let d = azip_mul(&g, y, |gv, yv| gv * (T::one() - yv * yv));
                    accumulate(before, *x, || d);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let d = azip_mul(&g, y, |gv, yv| gv * yv * (T::one() - yv));
                    accumulate(before, *x, || d);
                }
                Op::Relu(x) => {
                    let y = &node.value;
                    let d = azip_mul(&g, y, |gv, yv| if yv > T::zero() { gv } else { T::zero() });
                    accumulate(before, *x, || d);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let rows = before[p].value.nrows();
                        let d = g.slice(s![at..at + rows, ..]).to_owned();
                        accumulate(before, p, || d);
                        at += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let cols = before[p].value.ncols();
                        let d = g.slice(s![.., at..at + cols]).to_owned();
                        accumulate(before, p, || d);
                        at += cols;
                    }
                }
                Op::SliceRows(x, start) => {
                    let (x, start) = (*x, *start);
                    let (rows, cols) = before[x].value.dim();
                    accumulate(before, x, || {
                        let mut d = Array2::zeros((rows, cols));
                        d.slice_mut(s![start..start + g.nrows(), ..]).assign(&g);
                        d
                    });
                }
                Op::SoftmaxCols(x, visible) => {
                    let (x, visible) = (*x, *visible);
                    let y = &node.value;
                    let (rows, cols) = y.dim();
                    let mut d = Array2::zeros((rows, cols));
                    for j in 0..cols {
                        let mut inner = T::zero();
                        for t in 0..visible {
                            inner = inner + g[(t, j)] * y[(t, j)];
                        }
                        for t in 0..visible {
                            d[(t, j)] = y[(t, j)] * (g[(t, j)] - inner);
                        }
                    }
                    accumulate(before, x, || d);
                }
                Op::CosineCols { key, mem, batch } => {
                    let (key, mem, batch) = (*key, *mem, *batch);
                    let slots = node.value.nrows();
                    let eps = T::from_f64(MIN_NORM);
                    let k = &before[key].value;
                    let m = &before[mem].value;
                    let y = &node.value;
                    let d = k.nrows();
                    let mut dk = Array2::zeros(k.dim());
                    let mut dm = Array2::zeros(m.dim());
                    for i in 0..batch {
                        let kn_raw = norm_col(k, i);
                        let kn = if kn_raw < eps { eps } else { kn_raw };
                        let k_free = kn_raw >= eps;
                        for t in 0..slots {
                            let gw = g[(t, i)];
                            if gw == T::zero() {
                                continue;
                            }
                            let c = t * batch + i;
                            let mn_raw = norm_col(m, c);
                            let mn = if mn_raw < eps { eps } else { mn_raw };
                            // Dead zone: a clamped column contributes no
                            // gradient on either side (see NormGuard docs).
                            if !k_free || mn_raw < eps {
                                continue;
                            }
                            let cosv = y[(t, i)];
                            let denom = kn * mn;
                            for r in 0..d {
                                let kv = k[(r, i)];
                                let mv = m[(r, c)];
                                let dkv = mv / denom - cosv * kv / (kn * kn);
                                dk[(r, i)] = dk[(r, i)] + gw * dkv;
                                let dmv = kv / denom - cosv * mv / (mn * mn);
                                dm[(r, c)] = dm[(r, c)] + gw * dmv;
                            }
                        }
                    }
                    accumulate(before, key, || dk);
                    accumulate(before, mem, || dm);
                }
                Op::Deref { mem, weights } => {
                    let (mem, weights) = (*mem, *weights);
                    let batch = node.value.ncols();
                    let mut dm_out = None;
                    let mut dw_out = None;
                    {
                        let m = &before[mem].value;
                        let w = &before[weights].value;
                        let slots = w.nrows();
                        let rows = m.nrows();
                        if before[mem].requires_grad {
                            let mut dm = Array2::zeros(m.dim());
                            for t in 0..slots {
                                for r in 0..rows {
                                    for i in 0..batch {
                                        dm[(r, t * batch + i)] = g[(r, i)] * w[(t, i)];
                                    }
                                }
                            }
                            dm_out = Some(dm);
                        }
                        if before[weights].requires_grad {
                            let mut dw = Array2::zeros((slots, batch));
                            for t in 0..slots {
                                for i in 0..batch {
                                    let mut acc = T::zero();
                                    for r in 0..rows {
                                        acc = acc + g[(r, i)] * m[(r, t * batch + i)];
                                    }
                                    dw[(t, i)] = acc;
                                }
                            }
                            dw_out = Some(dw);
                        }
                    }
                    if let Some(dm) = dm_out {
                        accumulate(before, mem, || dm);
                    }
                    if let Some(dw) = dw_out {
                        accumulate(before, weights, || dw);
                    }
                }
                Op::MemColSum { mem, batch } => {
                    let (mem, batch) = (*mem, *batch);
                    let cols = before[mem].value.ncols();
                    let slots = cols / batch;
                    let mut dm = Array2::zeros(before[mem].value.dim());
                    for t in 0..slots {
                        dm.slice_mut(s![.., t * batch..(t + 1) * batch]).assign(&g);
                    }
                    accumulate(before, mem, || dm);
                }
                Op::AddPerSlot { big, small } => {
                    let (big, small) = (*big, *small);
                    accumulate(before, big, || g.clone());
                    let batch = before[small].value.ncols();
                    let slots = g.ncols() / batch;
                    let rows = g.nrows();
                    let mut ds = Array2::zeros((rows, batch));
                    for t in 0..slots {
                        ds += &g.slice(s![.., t * batch..(t + 1) * batch]);
                    }
                    accumulate(before, small, || ds);
                }
                Op::DotCols { mat, vec, batch } => {
                    let (mat, vec, batch) = (*mat, *vec, *batch);
                    let slots = node.value.nrows();
                    let mut dm_out = None;
                    let mut dv_out = None;
                    {
                        let m = &before[mat].value;
                        let v = &before[vec].value;
                        let rows = m.nrows();
                        if before[mat].requires_grad {
                            let mut dm = Array2::zeros(m.dim());
                            for t in 0..slots {
                                for i in 0..batch {
                                    let gw = g[(t, i)];
                                    for r in 0..rows {
                                        dm[(r, t * batch + i)] = gw * v[(r, 0)];
                                    }
                                }
                            }
                            dm_out = Some(dm);
                        }
                        if before[vec].requires_grad {
                            let mut dv = Array2::zeros((rows, 1));
                            for t in 0..slots {
                                for i in 0..batch {
                                    let gw = g[(t, i)];
                                    for r in 0..rows {
                                        dv[(r, 0)] = dv[(r, 0)] + gw * m[(r, t * batch + i)];
                                    }
                                }
                            }
                            dv_out = Some(dv);
                        }
                    }
                    if let Some(dm) = dm_out {
                        accumulate(before, mat, || dm);
                    }
                    if let Some(dv) = dv_out {
                        accumulate(before, vec, || dv);
                    }
                }
                Op::GatherCols { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let dim = before[table].value.dim();
                    accumulate(before, table, || {
                        let mut d = Array2::zeros(dim);
                        for (j, ix) in ids.iter().enumerate() {
                            let mut col = d.column_mut(*ix);
                            col += &g.column(j);
                        }
                        d
                    });
                }
                Op::CrossEntropyCols { logits, targets } => {
                    let logits = *logits;
                    let targets = targets.clone();
                    let probs = node.aux.as_ref().expect("cross-entropy saved probabilities");
                    let gscalar = g[(0, 0)];
                    let mut d = probs.clone();
                    for (j, t) in targets.iter().enumerate() {
                        match t {
                            Some(c) => {
                                d[(*c, j)] = d[(*c, j)] - T::one();
                            }
                            None => {
                                for r in 0..d.nrows() {
                                    d[(r, j)] = T::zero();
                                }
                            }
                        }
                    }
                    d.mapv_inplace(|v| v * gscalar);
                    accumulate(before, logits, || d);
                }
                Op::BceMultihotCols { logits, targets, active } => {
                    let logits = *logits;
                    let sig = node.aux.as_ref().expect("bce saved sigmoids");
                    let gscalar = g[(0, 0)];
                    let krecip = T::one() / T::from_f64(sig.nrows() as f64);
                    let mut d = Array2::zeros(sig.dim());
                    for j in 0..sig.ncols() {
                        if !active[j] {
                            continue;
                        }
                        for r in 0..sig.nrows() {
                            d[(r, j)] = gscalar * krecip * (sig[(r, j)] - targets[(r, j)]);
                        }
                    }
                    accumulate(before, logits, || d);
                }
                Op::SumAll(x) => {
                    let x = *x;
                    let dim = before[x].value.dim();
                    let gscalar = g[(0, 0)];
                    accumulate(before, x, || Array2::from_elem(dim, gscalar));
                }
                Op::MeanAll(x) => {
                    let x = *x;
                    let dim = before[x].value.dim();
                    let n = T::from_f64((dim.0 * dim.1) as f64);
                    let gscalar = g[(0, 0)] / n;
                    accumulate(before, x, || Array2::from_elem(dim, gscalar));
                }
            }
        }
        Ok(())
    }
}

/// Accumulate `delta()` into the gradient slot of node `j`, skipping nodes
/// that opted out of gradients.
fn accumulate<T: Scalar>(
    nodes: &mut [Node<T>],
    j: usize,
    delta: impl FnOnce() -> Array2<T>,
) {
    if !nodes[j].requires_grad {
        return;
    }
    let d = delta();
    match nodes[j].grad.as_mut() {
        Some(g) => *g += &d,
        None => nodes[j].grad = Some(d),
    }
}

fn azip_mul<T: Scalar>(
    g: &Array2<T>,
    y: &Array2<T>,
    f: impl Fn(T, T) -> T,
) -> Array2<T> {
    let mut out = g.clone();
    out.zip_mut_with(y, |gv, yv| *gv = f(*gv, *yv));
    out
}

fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Guard both tails so exp never overflows.
    if v >= T::zero() {
        let e = (-v).exp();
        T::one() / (T::one() + e)
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn norm_col<T: Scalar>(m: &Array2<T>, c: usize) -> T {
    let mut acc = T::zero();
    for r in 0..m.nrows() {
        let v = m[(r, c)];
        acc = acc + v * v;
    }
    acc.sqrt()
}

fn dot_cols_at<T: Scalar>(a: &Array2<T>, ca: usize, b: &Array2<T>, cb: usize) -> T {
    let mut acc = T::zero();
    for r in 0..a.nrows() {
        acc = acc + a[(r, ca)] * b[(r, cb)];
    }
    acc
}
