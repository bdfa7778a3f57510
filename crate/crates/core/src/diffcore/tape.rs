//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`]s during a forward
//! pass. [`Tape::gradients`] then walks the record backwards once and returns
//! the gradient of a 1x1 target with respect to any set of recorded variables.
//!
//! Tapes are cheap and single-use: build one per forward pass and drop it.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;

use super::matrix::{column_sums, sigmoid, Matrix};
use crate::error::{invalid, Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Sign,
    Clamp(usize, f64, f64),
    AddRow(usize, usize),
    Sum(usize),
    NormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    NormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Aggregate {
        adjs: Vec<usize>,
        h: usize,
        offsets: Vec<usize>,
        self_weight: f64,
    },
    SegmentMean {
        h: usize,
        offsets: Vec<usize>,
    },
    Bce {
        logits: usize,
        targets: Matrix,
        weights: Matrix,
        count: f64,
    },
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
}

/// Batch statistics observed by a training-mode normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: RefCell::new(Vec::new()) }
    }

    /// A differentiable input.
    pub fn param(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var { tape: self, index: nodes.len() - 1 }
    }

    fn value_of(&self, index: usize) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[index].value)
    }

    fn needs_grad(&self, index: usize) -> bool {
        self.nodes.borrow()[index].needs_grad
    }

    fn check(&self, var: &Var<'_>) -> Result<()> {
        if var.tape.id != self.id {
            return Err(Error::ForeignVar);
        }
        Ok(())
    }

    /// Gradients of the 1x1 `target` with respect to each of `wrt`.
    ///
    /// Variables that do not influence the target get a zero matrix of their
    /// own shape.
    pub fn gradients(&self, target: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Matrix>> {
        self.check(&target)?;
        for v in wrt {
            self.check(v)?;
        }
        let nodes = self.nodes.borrow();
        let shape = nodes[target.index].value.shape();
        if shape != (1, 1) {
            return Err(Error::NonScalarTarget(shape.0, shape.1));
        }

        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; target.index + 1];
        grads[target.index] = Some(DMatrix::from_element(1, 1, 1.0));

        for i in (0..=target.index).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward(&nodes, node, &g, &mut grads);
            // keep it for the caller if requested
            grads[i] = Some(g);
        }

        wrt.iter()
            .map(|v| {
                let value = &nodes[v.index].value;
                let g = grads
                    .get(v.index)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| DMatrix::zeros(value.rows(), value.cols()));
                Matrix::checked(g, "backward")
            })
            .collect()
    }
}

fn accumulate(grads: &mut [Option<DMatrix<f64>>], nodes: &[Node], index: usize, delta: DMatrix<f64>) {
    if !nodes[index].needs_grad {
        return;
    }
    match &mut grads[index] {
        Some(g) => *g += delta,
        slot @ None => *slot = Some(delta),
    }
}

fn backward(nodes: &[Node], node: &Node, g: &DMatrix<f64>, grads: &mut [Option<DMatrix<f64>>]) {
    let val = |i: usize| nodes[i].value.as_dmatrix();
    let wants = |i: usize| nodes[i].needs_grad;
    match &node.op {
        Op::Leaf | Op::Sign => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, -g);
        }
        Op::Hadamard(a, b) => {
            if wants(*a) {
                accumulate(grads, nodes, *a, g.component_mul(val(*b)));
            }
            if wants(*b) {
                accumulate(grads, nodes, *b, g.component_mul(val(*a)));
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g * *s),
        Op::MatMul(a, b) => {
            if wants(*a) {
                accumulate(grads, nodes, *a, g * val(*b).transpose());
            }
            if wants(*b) {
                accumulate(grads, nodes, *b, val(*a).transpose() * g);
            }
        }
        Op::Relu(a) => {
            let input = val(*a);
            let d = g.zip_map(input, |gi, x| if x > 0.0 { gi } else { 0.0 });
            accumulate(grads, nodes, *a, d);
        }
        Op::Sigmoid(a) => {
            let y = node.value.as_dmatrix();
            accumulate(grads, nodes, *a, g.zip_map(y, |gi, s| gi * s * (1.0 - s)));
        }
        Op::Clamp(a, lo, hi) => {
            let input = val(*a);
            let d = g.zip_map(input, |gi, x| if x >= *lo && x <= *hi { gi } else { 0.0 });
            accumulate(grads, nodes, *a, d);
        }
        Op::AddRow(a, row) => {
            accumulate(grads, nodes, *a, g.clone());
            if wants(*row) {
                accumulate(grads, nodes, *row, column_sums(g));
            }
        }
        Op::Sum(a) => {
            let shape = val(*a).shape();
            accumulate(grads, nodes, *a, DMatrix::from_element(shape.0, shape.1, g[(0, 0)]));
        }
        Op::NormTrain { x, gamma, beta, normalized, inv_std } => {
            let xhat = normalized.as_dmatrix();
            let gam = val(*gamma);
            if wants(*beta) {
                accumulate(grads, nodes, *beta, column_sums(g));
            }
            if wants(*gamma) {
                accumulate(grads, nodes, *gamma, column_sums(&g.component_mul(xhat)));
            }
            if wants(*x) {
                let n = xhat.nrows() as f64;
                let mut dx = DMatrix::zeros(xhat.nrows(), xhat.ncols());
                for c in 0..xhat.ncols() {
                    let dxhat: Vec<f64> = g.column(c).iter().map(|v| v * gam[(0, c)]).collect();
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(xhat.column(c).iter()).map(|(d, x)| d * x).sum();
                    for r in 0..xhat.nrows() {
                        dx[(r, c)] = inv_std[c] / n * (n * dxhat[r] - sum_d - xhat[(r, c)] * sum_dx);
                    }
                }
                accumulate(grads, nodes, *x, dx);
            }
        }
        Op::NormEval { x, gamma, beta, mean, inv_std } => {
            let gam = val(*gamma);
            if wants(*beta) {
                accumulate(grads, nodes, *beta, column_sums(g));
            }
            if wants(*gamma) {
                let input = val(*x);
                let centered = DMatrix::from_fn(input.nrows(), input.ncols(), |r, c| {
                    (input[(r, c)] - mean[c]) * inv_std[c]
                });
                accumulate(grads, nodes, *gamma, column_sums(&g.component_mul(&centered)));
            }
            if wants(*x) {
                let dx = DMatrix::from_fn(g.nrows(), g.ncols(), |r, c| g[(r, c)] * gam[(0, c)] * inv_std[c]);
                accumulate(grads, nodes, *x, dx);
            }
        }
        Op::Aggregate { adjs, h, offsets, self_weight } => {
            let hv = val(*h);
            let mut dh = if wants(*h) { Some(DMatrix::zeros(hv.nrows(), hv.ncols())) } else { None };
            for (b, &adj) in adjs.iter().enumerate() {
                let (start, len) = (offsets[b], offsets[b + 1] - offsets[b]);
                let gb = g.rows(start, len);
                let hb = hv.rows(start, len);
                if wants(adj) {
                    accumulate(grads, nodes, adj, &gb * hb.transpose());
                }
                if let Some(dh) = dh.as_mut() {
                    let aug = augmented(val(adj), *self_weight);
                    let contrib = aug.transpose() * gb;
                    let mut slot = dh.rows_mut(start, len);
                    slot += contrib;
                }
            }
            if let Some(dh) = dh {
                accumulate(grads, nodes, *h, dh);
            }
        }
        Op::SegmentMean { h, offsets } => {
            let hv = val(*h);
            let mut dh = DMatrix::zeros(hv.nrows(), hv.ncols());
            for b in 0..offsets.len() - 1 {
                let (start, end) = (offsets[b], offsets[b + 1]);
                let scale = 1.0 / (end - start) as f64;
                for r in start..end {
                    for c in 0..hv.ncols() {
                        dh[(r, c)] = g[(b, c)] * scale;
                    }
                }
            }
            accumulate(grads, nodes, *h, dh);
        }
        Op::Bce { logits, targets, weights, count } => {
            let z = val(*logits);
            let t = targets.as_dmatrix();
            let w = weights.as_dmatrix();
            let scale = g[(0, 0)] / count;
            let d = DMatrix::from_fn(z.nrows(), z.ncols(), |r, c| {
                w[(r, c)] * (sigmoid(z[(r, c)]) - t[(r, c)]) * scale
            });
            accumulate(grads, nodes, *logits, d);
        }
    }
}

fn augmented(adj: &DMatrix<f64>, self_weight: f64) -> DMatrix<f64> {
    let mut aug = adj.clone();
    for i in 0..aug.nrows() {
        aug[(i, i)] += self_weight;
    }
    aug
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value_of(self.index)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    /// The 1x1 value as a scalar.
    pub fn scalar(&self) -> Result<f64> {
        let v = self.value();
        if v.shape() != (1, 1) {
            return Err(Error::NonScalarTarget(v.rows(), v.cols()));
        }
        Ok(v.get(0, 0))
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if self.tape.id != other.tape.id {
            return Err(Error::ForeignVar);
        }
        Ok(())
    }

    fn unary(&self, value: Matrix, op: Op) -> Var<'t> {
        let needs = self.tape.needs_grad(self.index);
        self.tape.push(value, op, needs)
    }

    fn binary(&self, other: &Var<'_>, value: Matrix, op: Op) -> Var<'t> {
        let needs = self.tape.needs_grad(self.index) || self.tape.needs_grad(other.index);
        self.tape.push(value, op, needs)
    }

    pub fn add(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let v = self.value().add(&other.value())?;
        Ok(self.binary(other, v, Op::Add(self.index, other.index)))
    }

    pub fn sub(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let v = self.value().sub(&other.value())?;
        Ok(self.binary(other, v, Op::Sub(self.index, other.index)))
    }

    pub fn hadamard(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let v = self.value().hadamard(&other.value())?;
        Ok(self.binary(other, v, Op::Hadamard(self.index, other.index)))
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        let v = self.value().scale(factor)?;
        Ok(self.unary(v, Op::Scale(self.index, factor)))
    }

    pub fn matmul(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.index, other.index)))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().relu();
        self.unary(v, Op::Relu(self.index))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let v = self.value().sigmoid();
        self.unary(v, Op::Sigmoid(self.index))
    }

    /// Entrywise sign; its derivative is zero almost everywhere and taken
    /// to be zero everywhere.
    pub fn sign(&self) -> Var<'t> {
        let v = self.value().sign();
        self.unary(v, Op::Sign)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'t>> {
        let v = self.value().clamp(lo, hi)?;
        Ok(self.unary(v, Op::Clamp(self.index, lo, hi)))
    }

    /// Adds the 1 x cols `row` to every row of `self`.
    pub fn add_row(&self, row: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(row)?;
        let v = self.value().add_row(&row.value())?;
        Ok(self.binary(row, v, Op::AddRow(self.index, row.index)))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let v = Matrix::scalar(self.value().sum())?;
        Ok(self.unary(v, Op::Sum(self.index)))
    }

    /// Column-wise batch normalization using the statistics of this batch.
    ///
    /// `gamma` and `beta` are 1 x cols. Returns the normalized output together
    /// with the observed statistics so callers can update running averages.
    pub fn batch_norm_train(&self, gamma: &Var<'_>, beta: &Var<'_>, eps: f64) -> Result<(Var<'t>, BatchStats)> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let x = self.value();
        let (n, f) = x.shape();
        check_affine(f, &gamma.value(), &beta.value())?;
        if n == 0 {
            return Err(invalid("batch norm over an empty batch"));
        }
        let xd = x.as_dmatrix();
        let mean: Vec<f64> = (0..f).map(|c| xd.column(c).sum() / n as f64).collect();
        let var: Vec<f64> = (0..f)
            .map(|c| xd.column(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / n as f64)
            .collect();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let normalized = Matrix::checked(
            DMatrix::from_fn(n, f, |r, c| (xd[(r, c)] - mean[c]) * inv_std[c]),
            "batch_norm",
        )?;
        let g = gamma.value();
        let b = beta.value();
        let out = Matrix::checked(
            DMatrix::from_fn(n, f, |r, c| normalized.get(r, c) * g.get(0, c) + b.get(0, c)),
            "batch_norm",
        )?;
        let needs = [self.index, gamma.index, beta.index].iter().any(|&i| self.tape.needs_grad(i));
        let stats = BatchStats { mean, var, count: n };
        let op = Op::NormTrain { x: self.index, gamma: gamma.index, beta: beta.index, normalized, inv_std };
        Ok((self.tape.push(out, op, needs), stats))
    }

    /// Column-wise normalization with fixed statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Var<'_>,
        beta: &Var<'_>,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var<'t>> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let x = self.value();
        let (n, f) = x.shape();
        check_affine(f, &gamma.value(), &beta.value())?;
        if mean.len() != f || var.len() != f {
            return Err(invalid(format!("running statistics have {} features, input has {f}", mean.len())));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = gamma.value();
        let b = beta.value();
        let out = Matrix::checked(
            DMatrix::from_fn(n, f, |r, c| (x.get(r, c) - mean[c]) * inv_std[c] * g.get(0, c) + b.get(0, c)),
            "batch_norm",
        )?;
        let needs = [self.index, gamma.index, beta.index].iter().any(|&i| self.tape.needs_grad(i));
        let op = Op::NormEval { x: self.index, gamma: gamma.index, beta: beta.index, mean: mean.to_vec(), inv_std };
        Ok(self.tape.push(out, op, needs))
    }

    /// Block-diagonal neighborhood aggregation.
    ///
    /// `self` stacks the node rows of several graphs; rows
    /// `offsets[b]..offsets[b+1]` belong to graph `b`, whose adjacency is
    /// `adjs[b]`. Each block is multiplied by `adjs[b] + self_weight * I`.
    pub fn aggregate(&self, adjs: &[Var<'_>], offsets: &[usize], self_weight: f64) -> Result<Var<'t>> {
        let h = self.value();
        if offsets.len() != adjs.len() + 1 || offsets.first() != Some(&0) || offsets.last() != Some(&h.rows()) {
            return Err(invalid("aggregate offsets do not cover the stacked rows"));
        }
        let hd = h.as_dmatrix();
        let mut out = DMatrix::zeros(h.rows(), h.cols());
        let mut needs = self.tape.needs_grad(self.index);
        for (b, adj) in adjs.iter().enumerate() {
            self.same_tape(adj)?;
            let len = offsets[b + 1] - offsets[b];
            let a = adj.value();
            if a.shape() != (len, len) {
                return Err(Error::Shape { op: "aggregate", left: (len, len), right: a.shape() });
            }
            let aug = augmented(a.as_dmatrix(), self_weight);
            out.rows_mut(offsets[b], len).copy_from(&(aug * hd.rows(offsets[b], len)));
            needs |= self.tape.needs_grad(adj.index);
        }
        let out = Matrix::checked(out, "aggregate")?;
        let op = Op::Aggregate {
            adjs: adjs.iter().map(|a| a.index).collect(),
            h: self.index,
            offsets: offsets.to_vec(),
            self_weight,
        };
        Ok(self.tape.push(out, op, needs))
    }

    /// Mean of each row block given by `offsets`; one output row per block.
    pub fn segment_mean(&self, offsets: &[usize]) -> Result<Var<'t>> {
        let h = self.value();
        if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != h.rows() {
            return Err(invalid("segment offsets do not cover the rows"));
        }
        if offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("empty segment"));
        }
        let out = Matrix::from_fn(offsets.len() - 1, h.cols(), |b, c| {
            let (s, e) = (offsets[b], offsets[b + 1]);
            (s..e).map(|r| h.get(r, c)).sum::<f64>() / (e - s) as f64
        });
        Ok(self.unary(out, Op::SegmentMean { h: self.index, offsets: offsets.to_vec() }))
    }

    /// Mean binary cross-entropy with logits over entries where `weights` is
    /// nonzero. `targets` may be soft probabilities.
    pub fn bce_with_logits(&self, targets: &Matrix, weights: &Matrix) -> Result<Var<'t>> {
        let z = self.value();
        if targets.shape() != z.shape() || weights.shape() != z.shape() {
            return Err(Error::Shape { op: "bce_with_logits", left: z.shape(), right: targets.shape() });
        }
        let count: f64 = weights.iter().sum();
        if count <= 0.0 {
            return Err(Error::AllLabelsMissing);
        }
        let mut total = 0.0;
        for r in 0..z.rows() {
            for c in 0..z.cols() {
                let w = weights.get(r, c);
                if w != 0.0 {
                    let (zi, t) = (z.get(r, c), targets.get(r, c));
                    total += w * (zi.max(0.0) - zi * t + (-zi.abs()).exp().ln_1p());
                }
            }
        }
        let out = Matrix::scalar(total / count)?;
        let op = Op::Bce { logits: self.index, targets: targets.clone(), weights: weights.clone(), count };
        Ok(self.unary(out, op))
    }
}

fn check_affine(features: usize, gamma: &Matrix, beta: &Matrix) -> Result<()> {
    if gamma.shape() != (1, features) || beta.shape() != (1, features) {
        return Err(Error::Shape { op: "batch_norm", left: (1, features), right: gamma.shape() });
    }
    Ok(())
}

/// Builds an expression over fresh differentiable leaves and returns its
/// scalar value and the gradient with respect to every leaf.
pub fn evaluate_with_gradients<F>(leaves: &[Matrix], build: F) -> Result<(f64, Vec<Matrix>)>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = leaves.iter().map(|m| tape.param(m.clone())).collect();
    let target = build(&tape, &vars)?;
    let grads = tape.gradients(target, &vars)?;
    Ok((target.scalar()?, grads))
}
