//! Define-by-run reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation in execution order; [`Tensor`] is a
//! cheap handle into it. Leaves created with [`Tape::leaf`] collect
//! gradients, which accumulate across [`Tape::backward`] calls until
//! [`Tape::zero_grad`].
//!
//! Propagation over a graph is split in two recorded steps so the edge
//! weights stay differentiable: [`Tape::normalize`] turns per-edge weights
//! into the per-slot values of `D⁻¹A`, and [`Tape::spmm`] applies those
//! values to a dense operand.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{normalize_values, spmm_kernel, spmm_transpose_kernel, SparseGraph};
use crate::matrix::{CsrMatrix, Matrix};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    SparseMatMul {
        lhs: Arc<CsrMatrix>,
        rhs: Tensor,
    },
    Normalize {
        graph: Arc<SparseGraph>,
        weights: Tensor,
    },
    Spmm {
        graph: Arc<SparseGraph>,
        values: Tensor,
        x: Tensor,
    },
    Relu(Tensor),
    Softplus(Tensor),
    Sigmoid(Tensor),
    Add(Tensor, Tensor),
    Scale(Tensor, f64),
    Sum(Tensor),
    SquaredNorm(Tensor),
    MulConst(Tensor, Matrix),
    ResetRows {
        x: Tensor,
        rows: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Tensor,
        targets: Vec<(usize, usize)>,
        probs: Matrix,
    },
    NormalizedNll {
        y: Tensor,
        targets: Vec<(usize, usize)>,
        eps: f64,
    },
    EdgeBilinear {
        features: Arc<CsrMatrix>,
        graph: Arc<SparseGraph>,
        kernel: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    requires_grad: bool,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Matrix>>,
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverted dropout on the stored entries of a sparse matrix. Zeros stay
/// zero, so this matches elementwise dropout on the dense form.
pub fn dropout_csr(x: &CsrMatrix, rate: f64, rng: &mut impl Rng) -> Result<CsrMatrix> {
    check_rate(rate)?;
    if rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - rate);
    let values = x
        .values()
        .iter()
        .map(|&v| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                v * keep
            }
        })
        .collect();
    Ok(x.with_values(values))
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    Ok(())
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

    fn push(&mut self, value: Matrix, requires_grad: bool, op: Op) -> Tensor {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Tensor(self.nodes.len() - 1)
    }

    fn needs(&self, ts: &[Tensor]) -> bool {
        ts.iter().any(|t| self.nodes[t.0].requires_grad)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Matrix) -> Tensor {
        self.push(value, true, Op::Leaf)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Tensor {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, t: Tensor) -> &Matrix {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        self.nodes[t.0].value.shape()
    }

    /// Value of a 1×1 tensor.
    pub fn scalar(&self, t: Tensor) -> f64 {
        self.nodes[t.0].value.data()[0]
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, t: Tensor) -> Option<&Matrix> {
        self.leaf_grads[t.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    /// `lhs · rhs` with a constant sparse left factor.
    pub fn sparse_matmul(&mut self, lhs: Arc<CsrMatrix>, rhs: Tensor) -> Result<Tensor> {
        let value = lhs.matmul_dense(self.value(rhs))?;
        let rg = self.needs(&[rhs]);
        Ok(self.push(value, rg, Op::SparseMatMul { lhs, rhs }))
    }

    /// Per-slot values of `D⁻¹A` (an `nnz × 1` column) from per-edge weights
    /// (an `n_undirected_edges × 1` column). Weights must be positive.
    pub fn normalize(&mut self, graph: &Arc<SparseGraph>, weights: Tensor) -> Result<Tensor> {
        let w = self.value(weights);
        if w.shape() != (graph.n_undirected_edges(), 1) {
            return Err(Error::Shape {
                op: "normalize",
                lhs: (graph.n_undirected_edges(), 1),
                rhs: w.shape(),
            });
        }
        if let Some(bad) = w.data().iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!(
                "edge weight must be positive and finite, got {bad}"
            )));
        }
        let values = normalize_values(graph, w.data());
        let value = Matrix::from_vec(values.len(), 1, values)?;
        let rg = self.needs(&[weights]);
        Ok(self.push(
            value,
            rg,
            Op::Normalize {
                graph: Arc::clone(graph),
                weights,
            },
        ))
    }

    /// `T · x` where `values` holds the per-slot entries of `T`.
    pub fn spmm(&mut self, graph: &Arc<SparseGraph>, values: Tensor, x: Tensor) -> Result<Tensor> {
        let (v, xv) = (self.value(values), self.value(x));
        if v.shape() != (graph.nnz(), 1) {
            return Err(Error::Shape {
                op: "spmm",
                lhs: (graph.nnz(), 1),
                rhs: v.shape(),
            });
        }
        if xv.rows() != graph.n_nodes() {
            return Err(Error::Shape {
                op: "spmm",
                lhs: (graph.n_nodes(), graph.n_nodes()),
                rhs: xv.shape(),
            });
        }
        let value = spmm_kernel(graph, v.data(), xv);
        let rg = self.needs(&[values, x]);
        Ok(self.push(
            value,
            rg,
            Op::Spmm {
                graph: Arc::clone(graph),
                values,
                x,
            },
        ))
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.needs(&[a]);
        self.push(value, rg, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Tensor) -> Tensor {
        let value = self.value(a).map(softplus);
        let rg = self.needs(&[a]);
        self.push(value, rg, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        let value = self.value(a).map(sigmoid);
        let rg = self.needs(&[a]);
        self.push(value, rg, Op::Sigmoid(a))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", x, y));
        }
        let mut value = x.clone();
        value.add_assign(y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Tensor, s: f64) -> Tensor {
        let value = self.value(a).scale(s);
        let rg = self.needs(&[a]);
        self.push(value, rg, Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(value, rg, Op::Sum(a))
    }

    /// `‖a‖²_F` as a scalar.
    pub fn squared_norm(&mut self, a: Tensor) -> Tensor {
        let value = Matrix::filled(1, 1, self.value(a).frobenius_sq());
        let rg = self.needs(&[a]);
        self.push(value, rg, Op::SquaredNorm(a))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Tensor, m: Matrix) -> Result<Tensor> {
        let x = self.value(a);
        if x.shape() != m.shape() {
            return Err(shape_err("mul_const", x, &m));
        }
        let data = x.data().iter().zip(m.data()).map(|(p, q)| p * q).collect();
        let value = Matrix::from_vec(x.rows(), x.cols(), data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, rg, Op::MulConst(a, m)))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout(
        &mut self,
        x: Tensor,
        rate: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        check_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let (r, c) = self.shape(x);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(x, Matrix::from_vec(r, c, mask)?)
    }

    /// Copy of `x` with the listed rows overwritten by the same rows of
    /// `source`. No gradient flows into the overwritten rows.
    pub fn reset_rows(&mut self, x: Tensor, rows: &[usize], source: &Matrix) -> Result<Tensor> {
        let xv = self.value(x);
        if xv.shape() != source.shape() {
            return Err(shape_err("reset_rows", xv, source));
        }
        let mut value = xv.clone();
        for &r in rows {
            value.row_mut(r).copy_from_slice(source.row(r));
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            value,
            rg,
            Op::ResetRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Mean over `mask` rows of `−log softmax(logits[i])[labels[i]]`.
    pub fn masked_softmax_cross_entropy(
        &mut self,
        logits: Tensor,
        labels: &[Option<usize>],
        mask: &[bool],
    ) -> Result<Tensor> {
        let z = self.value(logits);
        let targets = masked_targets(z, labels, mask)?;
        let mut probs = Matrix::zeros(targets.len(), z.cols());
        let mut total = 0.0;
        for (k, &(i, y)) in targets.iter().enumerate() {
            let row = z.row(i);
            let top = argmax(row);
            let max = row[top];
            // log-sum-exp as max + ln(1 + rest) keeps tiny losses accurate
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != top)
                .map(|(_, v)| (v - max).exp())
                .sum();
            let denom = 1.0 + rest;
            total += rest.ln_1p() - (row[y] - max);
            for (p, v) in probs.row_mut(k).iter_mut().zip(row) {
                *p = (v - max).exp() / denom;
            }
        }
        let value = Matrix::filled(1, 1, total / targets.len() as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            value,
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            },
        ))
    }

    /// Mean over `mask` rows of `−ln p[label]` where `p` is the row of `y`
    /// rescaled to sum 1. `y` must be nonnegative. A smoothing `eps` is added
    /// to every entry before rescaling, so an all-zero row reads as uniform.
    pub fn normalized_nll(
        &mut self,
        y: Tensor,
        labels: &[Option<usize>],
        mask: &[bool],
        eps: f64,
    ) -> Result<Tensor> {
        let yv = self.value(y);
        let targets = masked_targets(yv, labels, mask)?;
        let c = yv.cols() as f64;
        let mut total = 0.0;
        for &(i, l) in &targets {
            let row = yv.row(i);
            let s: f64 = row.iter().sum();
            total += (s + c * eps).ln() - (row[l] + eps).ln();
        }
        let value = Matrix::filled(1, 1, total / targets.len() as f64);
        let rg = self.needs(&[y]);
        Ok(self.push(value, rg, Op::NormalizedNll { y, targets, eps }))
    }

    /// `x_iᵀ H x_j` for each undirected edge `(i, j)`, as an
    /// `n_undirected_edges × 1` column.
    pub fn edge_bilinear(
        &mut self,
        features: Arc<CsrMatrix>,
        graph: &Arc<SparseGraph>,
        kernel: Tensor,
    ) -> Result<Tensor> {
        let h = self.value(kernel);
        if h.shape() != (features.cols(), features.cols()) || features.rows() != graph.n_nodes() {
            return Err(Error::Shape {
                op: "edge_bilinear",
                lhs: (features.rows(), features.cols()),
                rhs: h.shape(),
            });
        }
        let data: Vec<f64> = (0..graph.n_undirected_edges())
            .map(|u| {
                let (i, j) = graph.endpoints(u);
                features.bilinear(i, h, j)
            })
            .collect();
        let value = Matrix::from_vec(data.len(), 1, data)?;
        let rg = self.needs(&[kernel]);
        Ok(self.push(
            value,
            rg,
            Op::EdgeBilinear {
                features,
                graph: Arc::clone(graph),
                kernel,
            },
        ))
    }

    /// Reverse pass from a scalar. Leaf gradients are added to whatever
    /// earlier passes left there.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                lhs: (1, 1),
                rhs: shape,
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[idx] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (t, contrib) in self.local_grads(idx, &g) {
                if !self.nodes[t.0].requires_grad {
                    continue;
                }
                match &mut grads[t.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    // Gradient contributions of node `idx` to its inputs, given its output
    // gradient `g`. Inputs that need no gradient may be skipped.
    fn local_grads(&self, idx: usize, g: &Matrix) -> Vec<(Tensor, Matrix)> {
        let node = &self.nodes[idx];
        let needs = |t: &Tensor| self.nodes[t.0].requires_grad;
        let val = |t: &Tensor| &self.nodes[t.0].value;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    out.push((*a, g.matmul_t(val(b)).expect("shapes checked forward")));
                }
                if needs(b) {
                    out.push((*b, val(a).t_matmul(g).expect("shapes checked forward")));
                }
            }
            Op::SparseMatMul { lhs, rhs } => {
                out.push((*rhs, lhs.t_matmul_dense(g).expect("shapes checked forward")));
            }
            Op::Normalize { graph, weights } => {
                let t = &node.value;
                let w = val(weights);
                let mut gw = vec![0.0; graph.n_undirected_edges()];
                for i in 0..graph.n_nodes() {
                    let range = graph.row_range(i);
                    let uids = &graph.edge_uid()[range.clone()];
                    let degree: f64 = uids.iter().map(|&u| w.data()[u]).sum();
                    let mean: f64 = range.clone().map(|e| g.data()[e] * t.data()[e]).sum();
                    for (e, &u) in range.zip(uids) {
                        gw[u] += (g.data()[e] - mean) / degree;
                    }
                }
                out.push((*weights, Matrix::column(&gw)));
            }
            Op::Spmm { graph, values, x } => {
                let xv = val(x);
                if needs(values) {
                    let mut gv = vec![0.0; graph.nnz()];
                    for i in 0..graph.n_nodes() {
                        let gi = g.row(i);
                        for e in graph.row_range(i) {
                            let xj = xv.row(graph.col_idx()[e]);
                            gv[e] = gi.iter().zip(xj).map(|(p, q)| p * q).sum();
                        }
                    }
                    out.push((*values, Matrix::column(&gv)));
                }
                if needs(x) {
                    out.push((*x, spmm_transpose_kernel(graph, val(values).data(), g)));
                }
            }
            Op::Relu(a) => {
                let x = val(a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                out.push((
                    *a,
                    Matrix::from_vec(x.rows(), x.cols(), data).expect("same shape"),
                ));
            }
            Op::Softplus(a) => {
                let x = val(a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gi, xi)| gi * sigmoid(*xi))
                    .collect();
                out.push((
                    *a,
                    Matrix::from_vec(x.rows(), x.cols(), data).expect("same shape"),
                ));
            }
            Op::Sigmoid(a) => {
                let x = val(a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gi, xi)| {
                        let s = sigmoid(*xi);
                        gi * s * (1.0 - s)
                    })
                    .collect();
                out.push((
                    *a,
                    Matrix::from_vec(x.rows(), x.cols(), data).expect("same shape"),
                ));
            }
            Op::Add(a, b) => {
                if needs(a) {
                    out.push((*a, g.clone()));
                }
                if needs(b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.scale(*s))),
            Op::Sum(a) => {
                let (r, c) = val(a).shape();
                out.push((*a, Matrix::filled(r, c, g.data()[0])));
            }
            Op::SquaredNorm(a) => out.push((*a, val(a).scale(2.0 * g.data()[0]))),
            Op::MulConst(a, m) => {
                let data = g.data().iter().zip(m.data()).map(|(p, q)| p * q).collect();
                out.push((
                    *a,
                    Matrix::from_vec(m.rows(), m.cols(), data).expect("same shape"),
                ));
            }
            Op::ResetRows { x, rows } => {
                let mut gx = g.clone();
                for &r in rows {
                    gx.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                }
                out.push((*x, gx));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let z = val(logits);
                let scale = g.data()[0] / targets.len() as f64;
                let mut gz = Matrix::zeros(z.rows(), z.cols());
                for (k, &(i, y)) in targets.iter().enumerate() {
                    let row = gz.row_mut(i);
                    for (o, p) in row.iter_mut().zip(probs.row(k)) {
                        *o += scale * p;
                    }
                    row[y] -= scale;
                }
                out.push((*logits, gz));
            }
            Op::NormalizedNll { y, targets, eps } => {
                let yv = val(y);
                let c = yv.cols() as f64;
                let scale = g.data()[0] / targets.len() as f64;
                let mut gy = Matrix::zeros(yv.rows(), yv.cols());
                for &(i, l) in targets {
                    let s: f64 = yv.row(i).iter().sum();
                    let inv = scale / (s + c * eps);
                    let target = scale / (yv.get(i, l) + eps);
                    let row = gy.row_mut(i);
                    row.iter_mut().for_each(|v| *v += inv);
                    row[l] -= target;
                }
                out.push((*y, gy));
            }
            Op::EdgeBilinear {
                features,
                graph,
                kernel,
            } => {
                let d = features.cols();
                let mut gh = Matrix::zeros(d, d);
                for u in 0..graph.n_undirected_edges() {
                    let gu = g.data()[u];
                    if gu == 0.0 {
                        continue;
                    }
                    let (i, j) = graph.endpoints(u);
                    for (p, xp) in features.row(i) {
                        let row = gh.row_mut(p);
                        for (q, xq) in features.row(j) {
                            row[q] += gu * xp * xq;
                        }
                    }
                }
                out.push((*kernel, gh));
            }
        }
        out
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn masked_targets(
    m: &Matrix,
    labels: &[Option<usize>],
    mask: &[bool],
) -> Result<Vec<(usize, usize)>> {
    if labels.len() != m.rows() || mask.len() != m.rows() {
        return Err(Error::Shape {
            op: "masked_loss",
            lhs: m.shape(),
            rhs: (labels.len(), mask.len()),
        });
    }
    let mut targets = Vec::new();
    for (i, &on) in mask.iter().enumerate() {
        if !on {
            continue;
        }
        let y = labels[i].ok_or_else(|| Error::invalid(format!("masked node {i} has no label")))?;
        if y >= m.cols() {
            return Err(Error::OutOfBounds {
                what: "class",
                index: y,
                limit: m.cols(),
            });
        }
        targets.push((i, y));
    }
    if targets.is_empty() {
        return Err(Error::invalid("loss mask selects no nodes"));
    }
    Ok(targets)
}

/// Central finite-difference check helpers shared by unit and integration
/// tests.
pub mod gradcheck {
    use crate::matrix::Matrix;

    /// Numerical gradient of `f` at `x` with step `h`.
    pub fn numerical(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
        let mut grad = Matrix::zeros(x.rows(), x.cols());
        let mut probe = x.clone();
        for k in 0..x.len() {
            let orig = probe.data()[k];
            probe.data_mut()[k] = orig + h;
            let up = f(&probe);
            probe.data_mut()[k] = orig - h;
            let down = f(&probe);
            probe.data_mut()[k] = orig;
            grad.data_mut()[k] = (up - down) / (2.0 * h);
        }
        grad
    }

    /// `max |a − b| / max(1, max |b|)`: relative to the gradient scale, with
    /// an absolute floor so tiny gradients are not judged relatively.
    pub fn rel_err(analytic: &Matrix, numeric: &Matrix) -> f64 {
        let scale = numeric.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        analytic.max_abs_diff(numeric) / scale
    }
}
