//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every op appends a node whose inputs already exist on the tape, so node
//! order is a topological order and the backward sweep is a single reverse
//! pass. [`Tape::linear`] additionally remembers its input rows and output
//! node so that, after a backward pass, each linear layer can report the
//! per-row pairs `(u, δ)` whose outer products sum to its weight gradient.

use super::linalg::SpdFactor;
use super::matrix::dot;
use super::{LayerId, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    MulCol { a: Var, col: Var },
    Scale { a: Var, factor: f64 },
    ScaleBy { a: Var, s: Var },
    Gelu(Var),
    Exp(Var),
    SliceCols { a: Var, start: usize },
    ConcatCols(Var, Var),
    GatherRows { table: Var, idx: Vec<usize> },
    MeanPool { a: Var, groups: Vec<Vec<usize>> },
    RowSum(Var),
    Sum(Var),
    SquaredNorm(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Matrix },
    KlDiv { logits: Var, reference: Matrix, weights: Vec<f64>, probs: Matrix },
    RidgeSolve { rhs: Var, log_lambda: Var, factor: SpdFactor },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    param: bool,
    requires_grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, .. }
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow { a, row: b }
            | Op::MulRow { a, row: b }
            | Op::MulCol { a, col: b }
            | Op::ScaleBy { a, s: b }
            | Op::ConcatCols(a, b)
            | Op::RidgeSolve { rhs: a, log_lambda: b, .. } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::Gelu(a)
            | Op::Exp(a)
            | Op::SliceCols { a, .. }
            | Op::GatherRows { table: a, .. }
            | Op::MeanPool { a, .. }
            | Op::RowSum(a)
            | Op::Sum(a)
            | Op::SquaredNorm(a)
            | Op::CrossEntropy { logits: a, .. }
            | Op::KlDiv { logits: a, .. } => vec![*a],
        }
    }
}

/// A linear-layer application recorded on the tape.
#[derive(Clone, Debug)]
pub struct LinearRecord {
    pub layer_id: LayerId,
    pub input: Var,
    pub weight: Var,
    pub output: Var,
}

/// Per-row activation/preactivation-gradient pairs captured for one linear layer.
///
/// Row `k` of `u` is the layer input at position `k`; row `k` of `delta` is the
/// loss gradient with respect to the layer's output preactivation there, so
/// `Σ_k delta_k u_kᵀ` is the weight gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub layer_id: LayerId,
    pub u: Matrix,
    pub delta: Matrix,
}

impl LayerTrace {
    pub fn positions(&self) -> usize {
        self.u.rows()
    }

    /// `Σ_k δ_k u_kᵀ`, shaped like the layer weight (d′ × d).
    pub fn weight_gradient(&self) -> Matrix {
        Matrix::matmul_t(&self.delta, true, &self.u, false).expect("trace rows align")
    }

    pub fn select_rows(&self, rows: &[usize]) -> LayerTrace {
        LayerTrace {
            layer_id: self.layer_id.clone(),
            u: self.u.select_rows(rows),
            delta: self.delta.select_rows(rows),
        }
    }
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `var`, or zeros if the node does not influence the loss.
    pub fn wrt(&self, var: Var) -> Matrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads[var.0].as_ref()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    linears: Vec<LinearRecord>,
}

fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    let t = (K * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * 0.044_715 * x * x)
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            param: false,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        let v = self.push(Op::Leaf, value);
        self.nodes[v.0].param = true;
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn is_param(&self, var: Var) -> bool {
        self.nodes[var.0].param
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0]
    }

    pub fn linear_records(&self) -> &[LinearRecord] {
        &self.linears
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let value = Matrix::matmul_t(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(Op::MatMul { a, b, ta, tb }, value))
    }

    /// `input · weightᵀ` for `input` (positions × d) and `weight` (d′ × d), recorded as a layer.
    pub fn linear(&mut self, input: Var, weight: Var, layer_id: &LayerId) -> Result<Var> {
        if self.value(input).cols() != self.value(weight).cols() {
            return Err(Error::shape(format!(
                "linear {layer_id}: input has {} columns, weight expects {}",
                self.value(input).cols(),
                self.value(weight).cols()
            )));
        }
        let output = self.matmul(input, weight, false, true)?;
        self.linears.push(LinearRecord {
            layer_id: layer_id.clone(),
            input,
            weight,
            output,
        });
        Ok(output)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("elementwise mul operands differ"));
        }
        let value = va.zip_map(vb, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), value))
    }

    fn check_row(&self, a: Var, row: Var, what: &str) -> Result<()> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::shape(format!(
                "{what}: row operand {}x{} does not broadcast over {}x{}",
                vr.rows(),
                vr.cols(),
                va.rows(),
                va.cols()
            )));
        }
        Ok(())
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "add_row")?;
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        Ok(self.push(Op::AddRow { a, row }, value))
    }

    /// Multiplies every row of `a` elementwise by a 1×n row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "mul_row")?;
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v *= b;
            }
        }
        Ok(self.push(Op::MulRow { a, row }, value))
    }

    /// Scales row `i` of `a` by `col[i]` for an m×1 column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (va, vc) = (self.value(a), self.value(col));
        if vc.cols() != 1 || vc.rows() != va.rows() {
            return Err(Error::shape("mul_col: column operand does not match rows"));
        }
        let mut value = va.clone();
        let c = vc.data().to_vec();
        for (i, s) in c.iter().enumerate() {
            for v in value.row_mut(i) {
                *v *= s;
            }
        }
        Ok(self.push(Op::MulCol { a, col }, value))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(Op::Scale { a, factor }, value)
    }

    /// Multiplies `a` by the 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(Error::shape("scale_by expects a 1x1 scalar node"));
        }
        let value = self.value(a).scale(self.scalar(s));
        Ok(self.push(Op::ScaleBy { a, s }, value))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(Op::Gelu(a), value)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), value)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start > end || end > va.cols() {
            return Err(Error::shape(format!(
                "slice {start}..{end} out of {} columns",
                va.cols()
            )));
        }
        let mut value = Matrix::zeros(va.rows(), end - start);
        for i in 0..va.rows() {
            value.row_mut(i).copy_from_slice(&va.row(i)[start..end]);
        }
        Ok(self.push(Op::SliceCols { a, start }, value))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::shape("concat_cols: row counts differ"));
        }
        let (ca, cb) = (va.cols(), vb.cols());
        let mut value = Matrix::zeros(va.rows(), ca + cb);
        for i in 0..va.rows() {
            value.row_mut(i)[..ca].copy_from_slice(va.row(i));
            value.row_mut(i)[ca..].copy_from_slice(vb.row(i));
        }
        Ok(self.push(Op::ConcatCols(a, b), value))
    }

    /// Row lookup (embedding gather).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= vt.rows()) {
            return Err(Error::Input(format!(
                "row index {bad} out of range for table with {} rows",
                vt.rows()
            )));
        }
        let value = vt.select_rows(idx);
        Ok(self.push(
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            value,
        ))
    }

    /// Output row `i` is the mean of the rows of `a` listed in `groups[i]`.
    pub fn mean_pool(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let va = self.value(a);
        let mut value = Matrix::zeros(groups.len(), va.cols());
        for (i, g) in groups.iter().enumerate() {
            if g.is_empty() || g.iter().any(|&j| j >= va.rows()) {
                return Err(Error::contract("mean_pool group empty or out of range"));
            }
            let w = 1.0 / g.len() as f64;
            let out = value.row_mut(i);
            for &j in g {
                for (o, v) in out.iter_mut().zip(va.row(j)) {
                    *o += w * v;
                }
            }
        }
        Ok(self.push(Op::MeanPool { a, groups }, value))
    }

    /// m×n → m×1 row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows()).map(|i| va.row(i).iter().sum()).collect();
        let value = Matrix::from_vec(va.rows(), 1, data).expect("sized");
        self.push(Op::RowSum(a), value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    pub fn squared_norm(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).squared_norm());
        self.push(Op::SquaredNorm(a), value)
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[targets_i])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let vl = self.value(logits);
        if targets.len() != vl.rows() || weights.len() != vl.rows() {
            return Err(Error::shape("cross_entropy: targets/weights must match logit rows"));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= vl.cols()) {
            return Err(Error::Input(format!("target {t} outside vocabulary of {}", vl.cols())));
        }
        let logp = log_softmax_rows(vl);
        let loss: f64 = targets
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (&t, &w))| -w * logp.get(i, t))
            .sum();
        let probs = logp.map(f64::exp);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            Matrix::scalar(loss),
        ))
    }

    /// `Σ_i w_i · KL(p_i ‖ softmax(logits_i))` for a constant reference given as
    /// log-probabilities `log p`.
    pub fn kl_div(&mut self, logits: Var, reference_logp: &Matrix, weights: &[f64]) -> Result<Var> {
        let vl = self.value(logits);
        if reference_logp.shape() != vl.shape() || weights.len() != vl.rows() {
            return Err(Error::shape("kl_div: reference/weights must match logits"));
        }
        let logq = log_softmax_rows(vl);
        let reference = reference_logp.map(f64::exp);
        let mut loss = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            let mut row = 0.0;
            for ((p, lp), lq) in reference.row(i).iter().zip(reference_logp.row(i)).zip(logq.row(i)) {
                if *p > 0.0 {
                    row += p * (lp - lq);
                }
            }
            loss += w * row;
        }
        let probs = logq.map(f64::exp);
        Ok(self.push(
            Op::KlDiv {
                logits,
                reference,
                weights: weights.to_vec(),
                probs,
            },
            Matrix::scalar(loss),
        ))
    }

    /// `rhs · (gram + exp(log_lambda)·I)⁻¹` through a Cholesky factorization.
    pub fn ridge_solve(&mut self, rhs: Var, log_lambda: Var, gram: &Matrix) -> Result<Var> {
        if self.value(log_lambda).shape() != (1, 1) {
            return Err(Error::shape("ridge_solve: log_lambda must be 1x1"));
        }
        if gram.rows() != gram.cols() || gram.cols() != self.value(rhs).cols() {
            return Err(Error::shape("ridge_solve: gram must be square and match rhs columns"));
        }
        let lambda = self.scalar(log_lambda).exp();
        let factor = SpdFactor::ridge(gram, lambda)?;
        let value = factor.solve_right(self.value(rhs))?;
        Ok(self.push(
            Op::RidgeSolve {
                rhs,
                log_lambda,
                factor,
            },
            value,
        ))
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got a {r}x{c} node"
            )));
        }
        self.backward_seeded(&[(loss, Matrix::scalar(1.0))])
    }

    /// Reverse sweep seeded with arbitrary output cotangents (a vector-Jacobian product).
    pub fn backward_seeded(&self, seeds: &[(Var, Matrix)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (var, seed) in seeds {
            if seed.shape() != self.value(*var).shape() {
                return Err(Error::shape("backward seed shape differs from its node"));
            }
            accumulate(&mut grads, *var, seed.clone());
            top = top.max(var.0 + 1);
        }
        for idx in (0..top).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            op if !op.inputs().iter().any(|v| self.needs(*v)) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = if *ta {
                        Matrix::matmul_t(vb, *tb, g, true)?
                    } else {
                        Matrix::matmul_t(g, false, vb, !*tb)?
                    };
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = if *tb {
                        Matrix::matmul_t(g, true, va, *ta)?
                    } else {
                        Matrix::matmul_t(va, !*ta, g, false)?
                    };
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::AddRow { a, row } => {
                accumulate(grads, *row, column_sums(g));
                accumulate(grads, *a, g.clone());
            }
            Op::MulRow { a, row } => {
                let r = self.value(*row);
                let va = self.value(*a);
                let mut da = g.clone();
                for i in 0..da.rows() {
                    for (v, s) in da.row_mut(i).iter_mut().zip(r.data()) {
                        *v *= s;
                    }
                }
                accumulate(grads, *row, column_sums(&g.zip_map(va, |x, y| x * y)));
                accumulate(grads, *a, da);
            }
            Op::MulCol { a, col } => {
                let c = self.value(*col);
                let va = self.value(*a);
                let mut da = g.clone();
                let mut dc = Matrix::zeros(c.rows(), 1);
                for i in 0..da.rows() {
                    dc.set(i, 0, dot(g.row(i), va.row(i)));
                    let s = c.get(i, 0);
                    for v in da.row_mut(i) {
                        *v *= s;
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *col, dc);
            }
            Op::Scale { a, factor } => accumulate(grads, *a, g.scale(*factor)),
            Op::ScaleBy { a, s } => {
                let ds = dot(g.data(), self.value(*a).data());
                accumulate(grads, *a, g.scale(self.scalar(*s)));
                accumulate(grads, *s, Matrix::scalar(ds));
            }
            Op::Gelu(a) => {
                accumulate(grads, *a, g.zip_map(self.value(*a), |x, y| x * gelu_grad(y)));
            }
            Op::Exp(a) => {
                accumulate(grads, *a, g.zip_map(&node.value, |x, y| x * y));
            }
            Op::SliceCols { a, start } => {
                let va = self.value(*a);
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for i in 0..g.rows() {
                    da.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, da);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let mut da = Matrix::zeros(g.rows(), ca);
                let mut db = Matrix::zeros(g.rows(), cb);
                for i in 0..g.rows() {
                    da.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                    db.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::GatherRows { table, idx } if self.needs(*table) => {
                let vt = self.value(*table);
                let mut dt = Matrix::zeros(vt.rows(), vt.cols());
                for (i, &r) in idx.iter().enumerate() {
                    for (d, v) in dt.row_mut(r).iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::MeanPool { a, groups } => {
                let va = self.value(*a);
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for (i, grp) in groups.iter().enumerate() {
                    let w = 1.0 / grp.len() as f64;
                    for &j in grp {
                        for (d, v) in da.row_mut(j).iter_mut().zip(g.row(i)) {
                            *d += w * v;
                        }
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::RowSum(a) => {
                let va = self.value(*a);
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for i in 0..va.rows() {
                    let gi = g.get(i, 0);
                    da.row_mut(i).fill(gi);
                }
                accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                accumulate(grads, *a, Matrix::filled(va.rows(), va.cols(), g.data()[0]));
            }
            Op::SquaredNorm(a) => {
                accumulate(grads, *a, self.value(*a).scale(2.0 * g.data()[0]));
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let gs = g.data()[0];
                let mut dl = probs.clone();
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = dl.row_mut(i);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= gs * w;
                    }
                }
                accumulate(grads, *logits, dl);
            }
            Op::KlDiv {
                logits,
                reference,
                weights,
                probs,
            } => {
                let gs = g.data()[0];
                let mut dl = probs.sub(reference)?;
                for (i, &w) in weights.iter().enumerate() {
                    for v in dl.row_mut(i) {
                        *v *= gs * w;
                    }
                }
                accumulate(grads, *logits, dl);
            }
            Op::GatherRows { .. } => {}
            Op::RidgeSolve {
                rhs,
                log_lambda,
                factor,
            } => {
                let g_ainv = factor.solve_right(g)?;
                let lambda = self.scalar(*log_lambda).exp();
                let dlambda = -dot(g_ainv.data(), node.value.data());
                accumulate(grads, *log_lambda, Matrix::scalar(lambda * dlambda));
                accumulate(grads, *rhs, g_ainv);
            }
        }
        Ok(())
    }

    /// Per-layer `(u, δ)` rows for every recorded linear application, in recording order.
    pub fn layer_traces(&self, grads: &Gradients) -> Vec<LayerTrace> {
        self.linears
            .iter()
            .map(|rec| LayerTrace {
                layer_id: rec.layer_id.clone(),
                u: self.value(rec.input).clone(),
                delta: grads.wrt(rec.output),
            })
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g).expect("gradient shapes agree"),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}
