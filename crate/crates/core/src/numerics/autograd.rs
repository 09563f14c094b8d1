//! A small reverse-mode gradient tape over dense matrices.
//!
//! Every operation records its output value and the ids of its inputs. After
//! a scalar loss has been built, [`Tape::backward`] walks the records in
//! reverse and accumulates exact gradients into the trainable entries of a
//! [`ParamStore`]. Only the primitives the recommender needs are provided;
//! anything more specialised can be plugged in through [`TapeFunction`].

use std::rc::Rc;

use super::dense::DenseMatrix;
use super::sparse::CsrMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: DenseMatrix,
    pub grad: DenseMatrix,
    pub trainable: bool,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Owns every model parameter; the tape only ever borrows values from here.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseMatrix, trainable: bool) -> ParamId {
        let (r, c) = value.shape();
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: DenseMatrix::zeros(r, c),
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &DenseMatrix {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(Parameter::numel)
            .sum()
    }
}

/// A sparse linear map together with its adjoint, for use on the tape.
#[derive(Debug)]
pub struct SparseOperator {
    forward: CsrMatrix,
    adjoint: CsrMatrix,
}

impl SparseOperator {
    pub fn new(matrix: CsrMatrix) -> Self {
        let adjoint = matrix.transpose();
        Self {
            forward: matrix,
            adjoint,
        }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.forward
    }
}

/// User-defined differentiable operation.
pub trait TapeFunction {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the upstream gradient of
    /// the output. `None` means the input receives no gradient.
    fn backward(
        &self,
        inputs: &[&DenseMatrix],
        output: &DenseMatrix,
        grad: &DenseMatrix,
    ) -> Vec<Option<DenseMatrix>>;
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    loss: f64,
    per_param: Vec<(ParamId, DenseMatrix)>,
}

impl Gradients {
    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// Adds every gradient into the matching `Parameter::grad`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.per_param {
            store.get_mut(*id).grad.axpy(1.0, g);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<DenseMatrix> {
        let mut hits = self
            .per_param
            .iter()
            .filter(|(p, _)| *p == id)
            .map(|(_, g)| g);
        let first = hits.next()?.clone();
        Some(hits.fold(first, |mut acc, g| {
            acc.axpy(1.0, g);
            acc
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatMulTn(Var, Var),
    Exp(Var),
    LeakyRelu(Var, f64),
    Spmm(Rc<SparseOperator>, Var),
    GatherRows(Var, Rc<Vec<usize>>),
    SliceRows(Var, usize),
    ConcatRows(Var, Var),
    RowL2Normalize(Var),
    RowSqNorm(Var),
    AddColumn(Var, Var),
    DivRows(Var, Var),
    ColumnSums(Var),
    Sum(Var),
    MaskedLogSumExp(Var, Rc<Vec<Vec<usize>>>),
    GatherEntries(Var, Rc<Vec<(usize, usize)>>),
    Custom(Box<dyn TapeFunction>, Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::MatMulTn(..) => "matmul_tn",
            Op::Exp(_) => "exp",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Spmm(..) => "spmm",
            Op::GatherRows(..) => "gather_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::RowL2Normalize(_) => "row_l2_normalize",
            Op::RowSqNorm(_) => "row_sq_norm",
            Op::AddColumn(..) => "add_column",
            Op::DivRows(..) => "div_rows",
            Op::ColumnSums(_) => "column_sums",
            Op::Sum(_) => "sum",
            Op::MaskedLogSumExp(..) => "masked_log_sum_exp",
            Op::GatherEntries(..) => "gather_entries",
            Op::Custom(f, _) => f.name(),
        }
    }
}

struct Node {
    value: DenseMatrix,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass. Build a fresh tape per training step.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param(id) => self.store.get(*id).trainable,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::MatMulTn(a, b)
            | Op::ConcatRows(a, b)
            | Op::AddColumn(a, b)
            | Op::DivRows(a, b) => self.rg(*a) || self.rg(*b),
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::LeakyRelu(a, _)
            | Op::Spmm(_, a)
            | Op::GatherRows(a, _)
            | Op::SliceRows(a, _)
            | Op::RowL2Normalize(a)
            | Op::RowSqNorm(a)
            | Op::ColumnSums(a)
            | Op::Sum(a)
            | Op::MaskedLogSumExp(a, _)
            | Op::GatherEntries(a, _) => self.rg(*a),
            Op::Custom(_, ins) => ins.iter().any(|v| self.rg(*v)),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Result<Var> {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let value = self.store.value(id).clone();
        self.push(value, Op::Param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Result<Var> {
        let v = self.value(a).scale(alpha);
        self.push(v, Op::Scale(a, alpha))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNt(a, b))
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_tn(self.value(b));
        self.push(v, Op::MatMulTn(a, b))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    /// Sparse constant times a dense tape value.
    pub fn spmm(&mut self, op: &Rc<SparseOperator>, x: Var) -> Result<Var> {
        let v = op.forward.spmm(self.value(x));
        self.push(v, Op::Spmm(Rc::clone(op), x))
    }

    pub fn gather_rows(&mut self, a: Var, indices: Rc<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).select_rows(&indices);
        self.push(v, Op::GatherRows(a, indices))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(start, len);
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn concat_rows(&mut self, top: Var, bottom: Var) -> Result<Var> {
        let v = DenseMatrix::vstack(self.value(top), self.value(bottom));
        self.push(v, Op::ConcatRows(top, bottom))
    }

    /// Divides every row by its Euclidean norm. A zero row is an error that
    /// names the offending row.
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let n = super::dense::norm2(x.row(r));
            if n == 0.0 {
                return Err(Error::ZeroNorm { node: r });
            }
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        self.push(out, Op::RowL2Normalize(a))
    }

    /// Squared Euclidean norm of each row, as a column.
    pub fn row_sq_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let v = DenseMatrix::from_fn(x.rows(), 1, |r, _| super::dense::dot(x.row(r), x.row(r)));
        self.push(v, Op::RowSqNorm(a))
    }

    /// Adds the column vector `col` (rows x 1) to every column of `a`.
    pub fn add_column(&mut self, a: Var, col: Var) -> Result<Var> {
        let x = self.value(a);
        let c = self.value(col);
        assert_eq!(c.shape(), (x.rows(), 1), "add_column: shape mismatch");
        let v = DenseMatrix::from_fn(x.rows(), x.cols(), |r, j| x.get(r, j) + c.get(r, 0));
        self.push(v, Op::AddColumn(a, col))
    }

    /// Divides row `r` of `a` by `denom[r]` (denom is rows x 1).
    pub fn div_rows(&mut self, a: Var, denom: Var) -> Result<Var> {
        let x = self.value(a);
        let c = self.value(denom);
        assert_eq!(c.shape(), (x.rows(), 1), "div_rows: shape mismatch");
        let v = DenseMatrix::from_fn(x.rows(), x.cols(), |r, j| x.get(r, j) / c.get(r, 0));
        self.push(v, Op::DivRows(a, denom))
    }

    pub fn column_sums(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).column_sums();
        self.push(v, Op::ColumnSums(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(DenseMatrix::from_vec(1, 1, vec![s]), Op::Sum(a))
    }

    /// Row-wise log-sum-exp restricted to the listed columns of each row.
    /// Rows with an empty column list are rejected.
    pub fn masked_log_sum_exp(&mut self, a: Var, columns: Rc<Vec<Vec<usize>>>) -> Result<Var> {
        let x = self.value(a);
        assert_eq!(
            columns.len(),
            x.rows(),
            "masked_log_sum_exp: one column list per row"
        );
        let mut out = DenseMatrix::zeros(x.rows(), 1);
        for (r, cols) in columns.iter().enumerate() {
            if cols.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "masked_log_sum_exp: row {r} has no columns"
                )));
            }
            out.set(r, 0, log_sum_exp(cols.iter().map(|&c| x.get(r, c))));
        }
        self.push(out, Op::MaskedLogSumExp(a, columns))
    }

    /// Picks single entries `(row, col)` into a column vector.
    pub fn gather_entries(&mut self, a: Var, entries: Rc<Vec<(usize, usize)>>) -> Result<Var> {
        let x = self.value(a);
        let v = DenseMatrix::from_vec(
            entries.len(),
            1,
            entries.iter().map(|&(r, c)| x.get(r, c)).collect(),
        );
        self.push(v, Op::GatherEntries(a, entries))
    }

    /// Records the result of a user-defined operation whose forward value
    /// has already been computed by the caller.
    pub fn custom(
        &mut self,
        function: Box<dyn TapeFunction>,
        inputs: Vec<Var>,
        output: DenseMatrix,
    ) -> Result<Var> {
        self.push(output, Op::Custom(function, inputs))
    }

    /// Back-propagates from a 1x1 `loss`. The result is detached from the
    /// tape so it can be applied to the store the tape borrowed.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        let loss_value = self.nodes[loss.0].value.get(0, 0);
        let mut per_param: Vec<(ParamId, DenseMatrix)> = Vec::new();
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                if self.store.get(*id).trainable {
                    per_param.push((*id, g));
                }
            }
        }
        Ok(Gradients {
            loss: loss_value,
            per_param,
        })
    }

    /// Gradient of `loss` with respect to every recorded node (`None` where
    /// no gradient flows).
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<DenseMatrix>>> {
        assert_eq!(
            self.value(loss).shape(),
            (1, 1),
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<DenseMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseMatrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut contributions: Vec<(Var, DenseMatrix)> = Vec::new();
            self.node_backward(node, &g, &mut contributions);
            for (v, contrib) in contributions {
                if !self.rg(v) {
                    continue;
                }
                if !contrib.is_finite() {
                    return Err(Error::NonFinite { op: node.op.name() });
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.axpy(1.0, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn node_backward(&self, node: &Node, g: &DenseMatrix, out: &mut Vec<(Var, DenseMatrix)>) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.scale(-1.0)));
            }
            Op::Scale(a, alpha) => out.push((*a, g.scale(*alpha))),
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.zip_map(val(*b), |x, y| x * y)));
                }
                if self.rg(*b) {
                    out.push((*b, g.zip_map(val(*a), |x, y| x * y)));
                }
            }
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.matmul_nt(val(*b))));
                }
                if self.rg(*b) {
                    out.push((*b, val(*a).matmul_tn(g)));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.matmul(val(*b))));
                }
                if self.rg(*b) {
                    out.push((*b, g.matmul_tn(val(*a))));
                }
            }
            Op::MatMulTn(a, b) => {
                if self.rg(*a) {
                    out.push((*a, val(*b).matmul_nt(g)));
                }
                if self.rg(*b) {
                    out.push((*b, val(*a).matmul(g)));
                }
            }
            Op::Exp(a) => out.push((*a, g.zip_map(&node.value, |x, y| x * y))),
            Op::LeakyRelu(a, slope) => {
                out.push((
                    *a,
                    g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { slope * gv }),
                ));
            }
            Op::Spmm(op, x) => out.push((*x, op.adjoint.spmm(g))),
            Op::GatherRows(a, idx) => {
                let src = val(*a);
                let mut ga = DenseMatrix::zeros(src.rows(), src.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                out.push((*a, ga));
            }
            Op::SliceRows(a, start) => {
                let src = val(*a);
                let mut ga = DenseMatrix::zeros(src.rows(), src.cols());
                for k in 0..g.rows() {
                    ga.row_mut(start + k).copy_from_slice(g.row(k));
                }
                out.push((*a, ga));
            }
            Op::ConcatRows(top, bottom) => {
                let n_top = val(*top).rows();
                out.push((*top, g.slice_rows(0, n_top)));
                out.push((*bottom, g.slice_rows(n_top, g.rows() - n_top)));
            }
            Op::RowL2Normalize(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut ga = DenseMatrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = super::dense::norm2(x.row(r));
                    let yg = super::dense::dot(y.row(r), g.row(r));
                    for ((o, &gv), &yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = (gv - yv * yg) / n;
                    }
                }
                out.push((*a, ga));
            }
            Op::RowSqNorm(a) => {
                let x = val(*a);
                let ga = DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| {
                    2.0 * x.get(r, c) * g.get(r, 0)
                });
                out.push((*a, ga));
            }
            Op::AddColumn(a, col) => {
                if self.rg(*a) {
                    out.push((*a, g.clone()));
                }
                if self.rg(*col) {
                    let gc = DenseMatrix::from_fn(g.rows(), 1, |r, _| g.row(r).iter().sum());
                    out.push((*col, gc));
                }
            }
            Op::DivRows(a, denom) => {
                let x = val(*a);
                let c = val(*denom);
                if self.rg(*a) {
                    out.push((
                        *a,
                        DenseMatrix::from_fn(x.rows(), x.cols(), |r, j| g.get(r, j) / c.get(r, 0)),
                    ));
                }
                if self.rg(*denom) {
                    let gc = DenseMatrix::from_fn(x.rows(), 1, |r, _| {
                        let cr = c.get(r, 0);
                        -super::dense::dot(g.row(r), x.row(r)) / (cr * cr)
                    });
                    out.push((*denom, gc));
                }
            }
            Op::ColumnSums(a) => {
                let x = val(*a);
                let ga = DenseMatrix::from_fn(x.rows(), x.cols(), |_, c| g.get(0, c));
                out.push((*a, ga));
            }
            Op::Sum(a) => {
                let x = val(*a);
                out.push((*a, DenseMatrix::filled(x.rows(), x.cols(), g.get(0, 0))));
            }
            Op::MaskedLogSumExp(a, columns) => {
                let x = val(*a);
                let mut ga = DenseMatrix::zeros(x.rows(), x.cols());
                for (r, cols) in columns.iter().enumerate() {
                    let lse = node.value.get(r, 0);
                    let gr = g.get(r, 0);
                    for &c in cols {
                        let w = (x.get(r, c) - lse).exp();
                        ga.set(r, c, ga.get(r, c) + gr * w);
                    }
                }
                out.push((*a, ga));
            }
            Op::GatherEntries(a, entries) => {
                let x = val(*a);
                let mut ga = DenseMatrix::zeros(x.rows(), x.cols());
                for (k, &(r, c)) in entries.iter().enumerate() {
                    ga.set(r, c, ga.get(r, c) + g.get(k, 0));
                }
                out.push((*a, ga));
            }
            Op::Custom(f, inputs) => {
                let ins: Vec<&DenseMatrix> = inputs.iter().map(|v| val(*v)).collect();
                for (v, gi) in inputs.iter().zip(f.backward(&ins, &node.value, g)) {
                    if let Some(gi) = gi {
                        out.push((*v, gi));
                    }
                }
            }
        }
    }
}

/// Numerically stable `log Σ exp(x)`. Returns `-inf` for an empty input.
pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}
