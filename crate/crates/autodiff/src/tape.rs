//! The computation record: forward primitives executed eagerly and replayed
//! in reverse to accumulate gradients.

use std::collections::HashMap;

use crate::error::{AutodiffError, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary elementwise op is broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `1×n` repeated down the rows.
    Row,
    /// `m×1` repeated across the columns.
    Col,
    /// `1×1`.
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Affine(Var, f64),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    SumRows(Var),
    Mean(Var),
    MeanRows(Var),
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    StraightThrough(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Concat(_) => "concat",
            Op::SliceCols(..) => "slice",
            Op::Sum(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
            Op::Elu(_) => "elu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterAddRows(..) => "scatter_add_rows",
            Op::StraightThrough(_) => "straight_through",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Tensor<F>,
    op: Op,
    requires_grad: bool,
}

/// Records every executed primitive in topological (execution) order.
///
/// A tape is single-threaded; independent tapes may be driven from different
/// threads at the same time.
#[derive(Debug, Clone, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, a: [usize; 2], b: [usize; 2]) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, lhs: a, rhs: b }
}

fn broadcast_kind(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Result<Bcast> {
    if a == b {
        Ok(Bcast::Same)
    } else if b == [1, 1] {
        Ok(Bcast::Scalar)
    } else if b[0] == 1 && b[1] == a[1] {
        Ok(Bcast::Row)
    } else if b[1] == 1 && b[0] == a[0] {
        Ok(Bcast::Col)
    } else {
        Err(shape_err(op, a, b))
    }
}

/// Calls `f(i, j)` for every flat index `i` of an output with `cols`
/// columns and the index `j` it reads from the broadcast operand.
#[inline]
fn for_each_bcast(kind: Bcast, len: usize, cols: usize, mut f: impl FnMut(usize, usize)) {
    match kind {
        Bcast::Same => (0..len).for_each(|i| f(i, i)),
        Bcast::Scalar => (0..len).for_each(|i| f(i, 0)),
        Bcast::Row | Bcast::Col => {
            let cols = cols.max(1);
            for r in 0..len / cols {
                for c in 0..cols {
                    let j = if kind == Bcast::Row { c } else { r };
                    f(r * cols + c, j);
                }
            }
        }
    }
}

#[inline]
fn elu<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softmax_rows<F: Scalar>(x: &Tensor<F>, log: bool) -> Tensor<F> {
    let cols = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols.max(1)) {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut total = F::zero();
        for v in row.iter_mut() {
            *v = *v - max;
            total = total + v.exp();
        }
        if log {
            let lse = total.ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        } else {
            row.iter_mut().for_each(|v| *v = v.exp() / total);
        }
    }
    out
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
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

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a `1×1` variable.
    pub fn item(&self, v: Var) -> Result<F> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor<F>, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            Op::MatMul(a, b) | Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) => {
                self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
            }
            Op::Concat(vs) => vs.iter().any(|v| self.nodes[v.0].requires_grad),
            Op::Affine(a, _)
            | Op::SliceCols(a, _)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::Elu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _)
            | Op::StraightThrough(a) => self.nodes[a.0].requires_grad,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant. Gradients never flow into constants.
    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    /// Records a constant from an `f64` value.
    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(F::lit(value)))
    }

    /// Records a registered parameter. Repeated calls with the same id return
    /// the same variable so gradients accumulate on one node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.get(id).clone(), Op::Param)?;
        self.params.insert(id, v);
        Ok(v)
    }

    /// Copy of `a` that is cut off from the gradient computation.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let mut out = Tensor::zeros(m, n);
        F::gemm(
            m,
            k,
            n,
            ta.data(),
            (k as isize, 1),
            tb.data(),
            (n as isize, 1),
            out.data_mut(),
            false,
        );
        self.push(out, Op::MatMul(a, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        make: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(name, ta.shape(), tb.shape())?;
        let cols = ta.cols();
        let mut out = ta.clone();
        let bd = tb.data();
        if kind == Bcast::Same {
            for (x, &y) in out.data_mut().iter_mut().zip(bd) {
                *x = f(*x, y);
            }
        } else {
            let od = out.data_mut();
            for_each_bcast(kind, od.len(), cols, |i, j| od[i] = f(od[i], bd[j]));
        }
        self.push(out, make(a, b, kind))
    }

    /// Elementwise sum. `b` may be the same shape as `a`, a `1×n` row, an
    /// `m×1` column or a `1×1` scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    /// Elementwise difference with the same broadcasting as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product with the same broadcasting as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `alpha · a + beta`.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Result<Var> {
        let (al, be) = (F::lit(alpha), F::lit(beta));
        let out = self.value(a).map(|x| al * x + be);
        self.push(out, Op::Affine(a, alpha))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.affine(a, alpha, 0.0)
    }

    /// Concatenates along columns; all inputs need the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::InvalidArgument {
                op: "concat",
                detail: "no inputs".into(),
            })?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(shape_err("concat", self.shape(*first), s));
            }
            cols += s[1];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(
            Tensor::from_vec(rows, cols, data)?,
            Op::Concat(parts.to_vec()),
        )
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols() {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                detail: format!(
                    "columns {start}..{} out of range for shape {:?}",
                    start + len,
                    t.shape()
                ),
            });
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::from_vec(t.rows(), len, data)?;
        self.push(out, Op::SliceCols(a, start))
    }

    /// Sum of every entry, as `1×1`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Column sums over all rows, as `1×n`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for (o, &x) in out.data_mut().iter_mut().zip(t.row(r)) {
                *o = *o + x;
            }
        }
        self.push(out, Op::SumRows(a))
    }

    /// Mean of every entry, as `1×1`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let s: F = t.data().iter().copied().sum();
        let out = Tensor::scalar(s / F::lit(t.len() as f64));
        self.push(out, Op::Mean(a))
    }

    /// Column means over rows, as `1×n`. An empty input yields zeros.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for (o, &x) in out.data_mut().iter_mut().zip(t.row(r)) {
                *o = *o + x;
            }
        }
        if t.rows() > 0 {
            let inv = F::one() / F::lit(t.rows() as f64);
            out.data_mut().iter_mut().for_each(|x| *x = *x * inv);
        }
        self.push(out, Op::MeanRows(a))
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(elu);
        self.push(out, Op::Elu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a))
    }

    /// Natural log; every input entry must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.data().iter().find(|&&x| !(x > F::zero())) {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!("non-positive value {bad}"),
            });
        }
        let out = t.map(|x| x.ln());
        self.push(out, Op::Log(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a), false);
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a), true);
        self.push(out, Op::LogSoftmax(a))
    }

    /// Row `r` of the output is row `index[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.rows()) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                detail: format!("row {bad} out of range for shape {:?}", t.shape()),
            });
        }
        let out = t.select_rows(index);
        self.push(out, Op::GatherRows(a, index.to_vec()))
    }

    /// `out[index[e]] += a[e]` into an `n_out`-row zero matrix, accumulated in
    /// ascending `e` so results are bit-reproducible.
    pub fn scatter_add_rows(&mut self, a: Var, index: &[usize], n_out: usize) -> Result<Var> {
        let t = self.value(a);
        if index.len() != t.rows() {
            return Err(shape_err("scatter_add_rows", t.shape(), [index.len(), 1]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n_out) {
            return Err(AutodiffError::InvalidArgument {
                op: "scatter_add_rows",
                detail: format!("target row {bad} out of range for {n_out} rows"),
            });
        }
        let cols = t.cols();
        let mut out = Tensor::zeros(n_out, cols);
        for (e, &dst) in index.iter().enumerate() {
            let src = t.row(e);
            let row = &mut out.data_mut()[dst * cols..(dst + 1) * cols];
            for (o, &x) in row.iter_mut().zip(src) {
                *o = *o + x;
            }
        }
        self.push(out, Op::ScatterAddRows(a, index.to_vec()))
    }

    /// Forward value is `value`; the backward pass treats the op as the
    /// identity on `surrogate`.
    pub fn straight_through(&mut self, surrogate: Var, value: Tensor<F>) -> Result<Var> {
        let s = self.shape(surrogate);
        if s != value.shape() {
            return Err(shape_err("straight_through", s, value.shape()));
        }
        self.push(value, Op::StraightThrough(surrogate))
    }

    /// Reverse sweep from a scalar `loss`. Returns one gradient per parameter
    /// in `store`; parameters that do not reach the loss get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore<F>) -> Result<ParamGrads<F>> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(AutodiffError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }

        let mut out = ParamGrads::zeros_like(store);
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get_mut(v.0).and_then(Option::take) {
                let t = out.get_mut(id);
                if t.len() != g.len() {
                    return Err(shape_err("backward", t.shape(), self.shape(v)));
                }
                t.data_mut().copy_from_slice(&g);
            }
        }
        Ok(out)
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
    }

    fn backward_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let out = &node.value;
        let cols = out.cols();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.accumulate(grads, *a) {
                    // dA = dC · Bᵀ
                    F::gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        tb.data(),
                        (1, n as isize),
                        ga,
                        true,
                    );
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    // dB = Aᵀ · dC
                    F::gemm(
                        k,
                        m,
                        n,
                        ta.data(),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        gb,
                        true,
                    );
                }
            }
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -F::one()
                } else {
                    F::one()
                };
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (x, &d) in ga.iter_mut().zip(g) {
                        *x = *x + d;
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    for_each_bcast(*kind, g.len(), cols, |i, j| gb[j] = gb[j] + sign * g[i]);
                }
            }
            Op::Mul(a, b, kind) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.accumulate(grads, *a) {
                    let bd = tb.data();
                    for_each_bcast(*kind, g.len(), cols, |i, j| ga[i] = ga[i] + g[i] * bd[j]);
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    let ad = ta.data();
                    for_each_bcast(*kind, g.len(), cols, |i, j| gb[j] = gb[j] + g[i] * ad[i]);
                }
            }
            Op::Affine(a, alpha) => {
                let al = F::lit(*alpha);
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (x, &d) in ga.iter_mut().zip(g) {
                        *x = *x + al * d;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if let Some(gp) = self.accumulate(grads, p) {
                        for r in 0..out.rows() {
                            let src = &g[r * cols + offset..r * cols + offset + pc];
                            for (x, &d) in gp[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                *x = *x + d;
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = self.shape(*a)[1];
                if let Some(ga) = self.accumulate(grads, *a) {
                    for r in 0..out.rows() {
                        let dst = &mut ga[r * ac + start..r * ac + start + cols];
                        for (x, &d) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *x = *x + d;
                        }
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = self.value(*a).len();
                let d = if matches!(node.op, Op::Mean(_)) {
                    g[0] / F::lit(n as f64)
                } else {
                    g[0]
                };
                if let Some(ga) = self.accumulate(grads, *a) {
                    ga.iter_mut().for_each(|x| *x = *x + d);
                }
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                let rows = self.value(*a).rows();
                let scale = if matches!(node.op, Op::MeanRows(_)) && rows > 0 {
                    F::one() / F::lit(rows as f64)
                } else {
                    F::one()
                };
                if let Some(ga) = self.accumulate(grads, *a) {
                    for row in ga.chunks_mut(cols.max(1)) {
                        for (x, &d) in row.iter_mut().zip(g) {
                            *x = *x + scale * d;
                        }
                    }
                }
            }
            Op::Elu(a) => {
                let x = self.value(*a).data();
                let y = out.data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for i in 0..ga.len() {
                        let dy = if x[i] > F::zero() {
                            F::one()
                        } else {
                            y[i] + F::one()
                        };
                        ga[i] = ga[i] + g[i] * dy;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * y[i] * (F::one() - y[i]);
                    }
                }
            }
            Op::Tanh(a) => {
                let y = out.data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * (F::one() - y[i] * y[i]);
                    }
                }
            }
            Op::Exp(a) => {
                let y = out.data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * y[i];
                    }
                }
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] / x[i];
                    }
                }
            }
            Op::Softmax(a) => {
                let y = out.data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for r in 0..out.rows() {
                        let span = r * cols..(r + 1) * cols;
                        let dot: F = y[span.clone()]
                            .iter()
                            .zip(&g[span.clone()])
                            .map(|(&p, &d)| p * d)
                            .sum();
                        for i in span {
                            ga[i] = ga[i] + y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = out.data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for r in 0..out.rows() {
                        let span = r * cols..(r + 1) * cols;
                        let total: F = g[span.clone()].iter().copied().sum();
                        for i in span {
                            ga[i] = ga[i] + g[i] - y[i].exp() * total;
                        }
                    }
                }
            }
            Op::GatherRows(a, index) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (r, &src) in index.iter().enumerate() {
                        let dst = &mut ga[src * cols..(src + 1) * cols];
                        for (x, &d) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *x = *x + d;
                        }
                    }
                }
            }
            Op::ScatterAddRows(a, index) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (e, &dst) in index.iter().enumerate() {
                        let src = &g[dst * cols..(dst + 1) * cols];
                        for (x, &d) in ga[e * cols..(e + 1) * cols].iter_mut().zip(src) {
                            *x = *x + d;
                        }
                    }
                }
            }
            Op::StraightThrough(a) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (x, &d) in ga.iter_mut().zip(g) {
                        *x = *x + d;
                    }
                }
            }
        }
    }
}
