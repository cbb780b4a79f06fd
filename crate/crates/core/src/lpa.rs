//! Label propagation: plain inference with clamping, and the unrolled
//! propagation loss used to learn edge weights.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{normalize_values, spmm_kernel, SparseGraph};
use crate::matrix::Matrix;

/// Iteration count for plain inference.
pub const DEFAULT_INFER_ITERS: usize = 20;

/// Smoothing added to each soft-label entry before the loss renormalizes a
/// row; keeps unreached rows finite (they read as uniform).
pub const LPA_LOSS_EPS: f64 = 1e-12;

/// Soft label matrix after propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabels {
    pub y: Matrix,
    /// Rows that never received any label mass.
    pub unreached: Vec<bool>,
}

impl SoftLabels {
    /// Row argmax, lowest class on ties; unreached rows predict class 0.
    pub fn predict(&self) -> Vec<usize> {
        self.y.argmax_rows()
    }
}

/// One-hot rows for the clamped nodes, zero elsewhere.
pub fn initial_labels(
    labels: &[Option<usize>],
    n_classes: usize,
    clamp: &[bool],
) -> Result<Matrix> {
    if clamp.len() != labels.len() {
        return Err(Error::Shape {
            op: "initial_labels",
            lhs: (labels.len(), 1),
            rhs: (clamp.len(), 1),
        });
    }
    let mut y0 = Matrix::zeros(labels.len(), n_classes);
    for (i, _) in clamp.iter().enumerate().filter(|(_, c)| **c) {
        let l =
            labels[i].ok_or_else(|| Error::invalid(format!("clamped node {i} has no label")))?;
        if l >= n_classes {
            return Err(Error::OutOfBounds {
                what: "class",
                index: l,
                limit: n_classes,
            });
        }
        y0.set(i, l, 1.0);
    }
    Ok(y0)
}

fn clamp_rows(clamp: &[bool]) -> Vec<usize> {
    clamp
        .iter()
        .enumerate()
        .filter(|(_, c)| **c)
        .map(|(i, _)| i)
        .collect()
}

/// Runs `iters` rounds of `Y ← D⁻¹A·Y` with the clamped rows reset to their
/// one-hot labels after every round.
pub fn lpa_infer(
    graph: &SparseGraph,
    labels: &[Option<usize>],
    n_classes: usize,
    clamp: &[bool],
    edge_weights: &[f64],
    iters: usize,
) -> Result<SoftLabels> {
    if iters == 0 {
        return Err(Error::invalid("lpa needs at least one iteration"));
    }
    if labels.len() != graph.n_nodes() || edge_weights.len() != graph.n_undirected_edges() {
        return Err(Error::Shape {
            op: "lpa_infer",
            lhs: (graph.n_nodes(), graph.n_undirected_edges()),
            rhs: (labels.len(), edge_weights.len()),
        });
    }
    let rows = clamp_rows(clamp);
    if rows.is_empty() {
        return Err(Error::invalid("clamp mask is empty"));
    }
    if let Some(w) = edge_weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::invalid(format!(
            "edge weight must be positive and finite, got {w}"
        )));
    }
    let y0 = initial_labels(labels, n_classes, clamp)?;
    let values = normalize_values(graph, edge_weights);
    let mut y = y0.clone();
    for _ in 0..iters {
        y = spmm_kernel(graph, &values, &y);
        for &r in &rows {
            y.row_mut(r).copy_from_slice(y0.row(r));
        }
    }
    let unreached = (0..y.rows())
        .map(|i| y.row(i).iter().all(|&v| v == 0.0))
        .collect();
    Ok(SoftLabels { y, unreached })
}

/// Unrolled propagation loss from per-slot operator values already on the
/// tape. Predictions for `loss_mask` nodes are read after the last
/// propagation and before its reset, so clamped nodes do not trivially score
/// zero loss.
#[allow(clippy::too_many_arguments)]
pub fn propagation_loss(
    tape: &mut Tape,
    graph: &Arc<SparseGraph>,
    values: Tensor,
    labels: &[Option<usize>],
    n_classes: usize,
    clamp: &[bool],
    loss_mask: &[bool],
    iters: usize,
) -> Result<Tensor> {
    if iters == 0 {
        return Err(Error::invalid("lpa needs at least one iteration"));
    }
    if !loss_mask.iter().any(|&m| m) {
        return Err(Error::invalid("lpa loss mask is empty"));
    }
    let y0 = initial_labels(labels, n_classes, clamp)?;
    let rows = clamp_rows(clamp);
    let mut y = tape.constant(y0.clone());
    for k in 0..iters {
        y = tape.spmm(graph, values, y)?;
        if k + 1 < iters {
            y = tape.reset_rows(y, &rows, &y0)?;
        }
    }
    tape.normalized_nll(y, labels, loss_mask, LPA_LOSS_EPS)
}

/// [`propagation_loss`] starting from per-edge weights.
#[allow(clippy::too_many_arguments)]
pub fn lpa_loss(
    tape: &mut Tape,
    graph: &Arc<SparseGraph>,
    edge_weights: Tensor,
    labels: &[Option<usize>],
    n_classes: usize,
    clamp: &[bool],
    loss_mask: &[bool],
    iters: usize,
) -> Result<Tensor> {
    let values = tape.normalize(graph, edge_weights)?;
    propagation_loss(
        tape, graph, values, labels, n_classes, clamp, loss_mask, iters,
    )
}

/// Uniformly picks `⌊ratio · |train|⌋` training nodes as propagation sources.
pub fn lpa_clamp_subset(train_mask: &[bool], ratio: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!(
            "label ratio must be in [0, 1], got {ratio}"
        )));
    }
    let mut train: Vec<usize> = clamp_rows(train_mask);
    let k = (ratio * train.len() as f64 + 1e-9).floor() as usize;
    let k = k.min(train.len());
    if k == train.len() {
        return Ok(train_mask.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    train.shuffle(&mut rng);
    let mut out = vec![false; train_mask.len()];
    for &i in &train[..k] {
        out[i] = true;
    }
    Ok(out)
}
