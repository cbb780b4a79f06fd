//! Brute-force and closed-form checks of the influence analysis on small
//! graphs.
//!
//! Every quantity is computed two independent ways: one by differentiating
//! the actual propagation on a tape, the other by walking paths or powering
//! the operator. The sweeps at the bottom draw seeded random instances and
//! report the worst disagreement.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{softplus, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{normalized_adjacency, spmm_kernel, RowStochasticOperator, SparseGraph};
use crate::lpa::lpa_infer;
use crate::matrix::Matrix;

fn check_node(graph: &SparseGraph, v: usize) -> Result<()> {
    if v >= graph.n_nodes() {
        return Err(Error::OutOfBounds {
            what: "node",
            index: v,
            limit: graph.n_nodes(),
        });
    }
    Ok(())
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("influence horizon k must be >= 1"));
    }
    Ok(())
}

fn operator_values(graph: &Arc<SparseGraph>, weights: &[f64]) -> Result<Vec<f64>> {
    Ok(normalized_adjacency(graph, weights)?.values().to_vec())
}

fn record_operator(tape: &mut Tape, graph: &Arc<SparseGraph>, weights: &[f64]) -> Result<Tensor> {
    let w = tape.constant(Matrix::column(weights));
    tape.normalize(graph, w)
}

/// Normalized feature influence of every node on node `a` after `k` linear
/// propagation steps: the L1 norm of `∂x_a⁽ᵏ⁾/∂x_b`, divided by its sum
/// over `b`. Obtained by differentiating `x ↦ Tᵏx` on a tape.
pub fn feature_influence_row(
    graph: &Arc<SparseGraph>,
    weights: &[f64],
    k: usize,
    a: usize,
) -> Result<Vec<f64>> {
    check_k(k)?;
    check_node(graph, a)?;
    const DIM: usize = 2;
    let n = graph.n_nodes();
    let mut tape = Tape::new();
    let values = record_operator(&mut tape, graph, weights)?;
    let x = tape.leaf(Matrix::zeros(n, DIM));
    let mut y = x;
    for _ in 0..k {
        y = tape.spmm(graph, values, y)?;
    }
    let mut raw = vec![0.0; n];
    for p in 0..DIM {
        let mut pick = Matrix::zeros(n, DIM);
        pick.set(a, p, 1.0);
        let sel = tape.mul_const(y, pick)?;
        let s = tape.sum(sel);
        tape.zero_grad();
        tape.backward(s)?;
        let g = tape.grad(x).expect("x feeds the output");
        for (b, r) in raw.iter_mut().enumerate() {
            *r += g.row(b).iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// One entry of [`feature_influence_row`].
pub fn feature_influence_jacobian(
    graph: &Arc<SparseGraph>,
    weights: &[f64],
    k: usize,
    a: usize,
    b: usize,
) -> Result<f64> {
    check_node(graph, b)?;
    Ok(feature_influence_row(graph, weights, k, a)?[b])
}

/// `(Tᵏ)[a, b]` by summing `Π T` over every length-`k` walk from `a` to `b`.
pub fn walk_probability_enumerated(
    graph: &Arc<SparseGraph>,
    weights: &[f64],
    k: usize,
    a: usize,
    b: usize,
) -> Result<f64> {
    check_k(k)?;
    check_node(graph, a)?;
    check_node(graph, b)?;
    let values = operator_values(graph, weights)?;
    fn walk(g: &SparseGraph, t: &[f64], at: usize, left: usize, b: usize, prod: f64) -> f64 {
        if left == 0 {
            return if at == b { prod } else { 0.0 };
        }
        g.row_range(at)
            .map(|e| walk(g, t, g.col_idx()[e], left - 1, b, prod * t[e]))
            .sum()
    }
    Ok(walk(graph, &values, a, k, b, 1.0))
}

/// `(Tᵏ)[a, b]` by repeated sparse products on the unit vector at `b`.
pub fn walk_probability_power(
    graph: &Arc<SparseGraph>,
    weights: &[f64],
    k: usize,
    a: usize,
    b: usize,
) -> Result<f64> {
    check_k(k)?;
    check_node(graph, a)?;
    check_node(graph, b)?;
    let values = operator_values(graph, weights)?;
    let mut v = Matrix::zeros(graph.n_nodes(), 1);
    v.set(b, 0, 1.0);
    for _ in 0..k {
        v = spmm_kernel(graph, &values, &v);
    }
    Ok(v.get(a, 0))
}

/// Probability that a `k`-step random walk from `a` with transition matrix
/// `D⁻¹A` ends at `b`. Enumerates walks for `n ≤ 10`, powers the operator
/// otherwise.
pub fn walk_probability(
    graph: &Arc<SparseGraph>,
    weights: &[f64],
    k: usize,
    a: usize,
    b: usize,
) -> Result<f64> {
    if graph.n_nodes() <= 10 {
        walk_probability_enumerated(graph, weights, k, a, b)
    } else {
        walk_probability_power(graph, weights, k, a, b)
    }
}

fn check_label_query(graph: &SparseGraph, a: usize, b: usize, labeled: &[bool]) -> Result<()> {
    check_node(graph, a)?;
    check_node(graph, b)?;
    if labeled.len() != graph.n_nodes() {
        return Err(Error::Shape {
            op: "labeled_mask",
            lhs: (graph.n_nodes(), 1),
            rhs: (labeled.len(), 1),
        });
    }
    if labeled[a] {
        return Err(Error::invalid(format!("target node {a} must be unlabeled")));
    }
    if !labeled[b] {
        return Err(Error::invalid(format!("source node {b} must be labeled")));
    }
    Ok(())
}

/// `∂y_a⁽ᵏ⁾/∂y_b⁽⁰⁾` for scalar labels under `k` rounds of propagation with
/// the labeled nodes reset to their initial value after each round. The
/// reset reads from the differentiable initial labels, so gradient reaches
/// `y_b` through every round.
pub fn label_influence_gradient(
    graph: &Arc<SparseGraph>,
    weights: &[f64],
    k: usize,
    a: usize,
    b: usize,
    labeled: &[bool],
) -> Result<f64> {
    check_k(k)?;
    check_label_query(graph, a, b, labeled)?;
    let n = graph.n_nodes();
    let keep: Vec<f64> = labeled.iter().map(|&l| if l { 0.0 } else { 1.0 }).collect();
    let reset: Vec<f64> = labeled.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let mut tape = Tape::new();
    let values = record_operator(&mut tape, graph, weights)?;
    let y0 = tape.leaf(Matrix::column(&reset));
    let pinned = tape.mul_const(y0, Matrix::column(&reset))?;
    let mut y = pinned;
    for _ in 0..k {
        let moved = tape.spmm(graph, values, y)?;
        let free = tape.mul_const(moved, Matrix::column(&keep))?;
        y = tape.add(free, pinned)?;
    }
    let mut pick = Matrix::zeros(n, 1);
    pick.set(a, 0, 1.0);
    let sel = tape.mul_const(y, pick)?;
    let s = tape.sum(sel);
    tape.backward(s)?;
    Ok(tape.grad(y0).expect("y0 feeds the output").get(b, 0))
}

// f_j(i): weight of length-j walks from i to b whose nodes other than the
// final b are all unlabeled. Returns Σ_{j=1..k} f_j.
fn path_dp(graph: &SparseGraph, t: &[f64], k: usize, b: usize, labeled: &[bool]) -> Vec<f64> {
    let n = graph.n_nodes();
    let mut f: Vec<f64> = (0..n)
        .map(|i| {
            if labeled[i] {
                0.0
            } else {
                graph.position(i, b).map_or(0.0, |e| t[e])
            }
        })
        .collect();
    let mut acc = f.clone();
    for _ in 1..k {
        let next: Vec<f64> = (0..n)
            .map(|i| {
                if labeled[i] {
                    return 0.0;
                }
                graph
                    .row_range(i)
                    .filter(|&e| !labeled[graph.col_idx()[e]])
                    .map(|e| t[e] * f[graph.col_idx()[e]])
                    .sum()
            })
            .collect();
        f = next;
        acc.iter_mut().zip(&f).for_each(|(s, v)| *s += v);
    }
    acc
}

/// Sum over `j = 1..k` of the weight of length-`j` walks from `a` to `b`
/// that touch only unlabeled nodes before arriving at `b`. Dynamic
/// programming over the operator restricted to unlabeled nodes.
pub fn unlabeled_path_sum(
    graph: &Arc<SparseGraph>,
    weights: &[f64],
    k: usize,
    a: usize,
    b: usize,
    labeled: &[bool],
) -> Result<f64> {
    check_k(k)?;
    check_label_query(graph, a, b, labeled)?;
    let t = operator_values(graph, weights)?;
    Ok(path_dp(graph, &t, k, b, labeled)[a])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Theorem2Check {
    /// Monte-Carlo mean of the label influence.
    pub lhs: f64,
    /// `Σ_{j ≤ k} βʲ · Ĩ_f(a, b; j)`.
    pub rhs: f64,
    pub abs_err: f64,
    pub std_err: f64,
    /// The expectation the Monte-Carlo mean estimates, by enumerating walks
    /// and counting the distinct nodes each one requires to be unlabeled.
    pub exact_lhs: f64,
}

impl Theorem2Check {
    /// Within three standard errors (or 1e-12 when the estimate has none).
    pub fn passes(&self) -> bool {
        self.abs_err <= (3.0 * self.std_err).max(1e-12)
    }
}

/// Samples labelings where every node except `b` is unlabeled with
/// probability `beta` and `b` is labeled, averaging `I_l(a, b; k)` (zero
/// whenever `a` happens to be labeled, since its value is then pinned).
#[allow(clippy::too_many_arguments)]
pub fn check_theorem2(
    graph: &Arc<SparseGraph>,
    weights: &[f64],
    k: usize,
    a: usize,
    b: usize,
    beta: f64,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<Theorem2Check> {
    check_k(k)?;
    check_node(graph, a)?;
    check_node(graph, b)?;
    if a == b {
        return Err(Error::invalid("theorem check needs distinct a and b"));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid(format!(
            "beta must lie in (0, 1), got {beta}"
        )));
    }
    if trials < 2 {
        return Err(Error::invalid("need at least two trials"));
    }
    let t = operator_values(graph, weights)?;
    let n = graph.n_nodes();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let mut labeled = vec![false; n];
    for _ in 0..trials {
        for (i, l) in labeled.iter_mut().enumerate() {
            *l = i == b || rng.gen::<f64>() >= beta;
        }
        let v = if labeled[a] {
            0.0
        } else {
            path_dp(graph, &t, k, b, &labeled)[a]
        };
        sum += v;
        sum_sq += v * v;
    }
    let m = trials as f64;
    let lhs = sum / m;
    let var = ((sum_sq - m * lhs * lhs) / (m - 1.0)).max(0.0);
    let mut rhs = 0.0;
    let mut power = Matrix::zeros(n, 1);
    power.set(b, 0, 1.0);
    for j in 1..=k {
        power = spmm_kernel(graph, &t, &power);
        rhs += beta.powi(j as i32) * power.get(a, 0);
    }
    Ok(Theorem2Check {
        lhs,
        rhs,
        abs_err: (lhs - rhs).abs(),
        std_err: (var / m).sqrt(),
        exact_lhs: expected_label_influence(graph, &t, k, a, b, beta),
    })
}

fn expected_label_influence(
    graph: &SparseGraph,
    t: &[f64],
    k: usize,
    a: usize,
    b: usize,
    beta: f64,
) -> f64 {
    // walks a = v0 → … → vj = b with v0..v(j−1) ≠ b; each distinct node
    // among v0..v(j−1) must be unlabeled
    fn walk(
        g: &SparseGraph,
        t: &[f64],
        path: &mut Vec<usize>,
        left: usize,
        b: usize,
        beta: f64,
        prod: f64,
    ) -> f64 {
        let at = *path.last().expect("path starts at a");
        let mut total = 0.0;
        for e in g.row_range(at) {
            let next = g.col_idx()[e];
            let p = prod * t[e];
            if next == b {
                let mut distinct = path.clone();
                distinct.sort_unstable();
                distinct.dedup();
                total += p * beta.powi(distinct.len() as i32);
            } else if left > 1 {
                path.push(next);
                total += walk(g, t, path, left - 1, b, beta, p);
                path.pop();
            }
        }
        total
    }
    walk(graph, t, &mut vec![a], k, b, beta, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem3Check {
    /// `Σ_{b labeled, y_b = i} I_l(a, b; k)` per class `i`.
    pub influence: Vec<f64>,
    /// `y_a⁽ᵏ⁾[i]` from label propagation with `a` left unclamped.
    pub lpa_mass: Vec<f64>,
    /// Largest entrywise gap between the two vectors after each is scaled
    /// to sum 1 (zero vectors stay zero).
    pub max_abs_err: f64,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter().map(|x| x / s).collect()
    } else {
        v.to_vec()
    }
}

/// Compares per-class label influence on `a` with the soft label that
/// propagation assigns to `a`, with `a` treated as unlabeled.
pub fn check_theorem3(
    graph: &Arc<SparseGraph>,
    weights: &[f64],
    k: usize,
    a: usize,
    labeled: &[bool],
    labels: &[Option<usize>],
    n_classes: usize,
) -> Result<Theorem3Check> {
    check_k(k)?;
    check_node(graph, a)?;
    let mut labeled = labeled.to_vec();
    labeled[a] = false;
    let t = operator_values(graph, weights)?;
    let mut influence = vec![0.0; n_classes];
    for b in (0..graph.n_nodes()).filter(|&b| labeled[b]) {
        let class =
            labels[b].ok_or_else(|| Error::invalid(format!("labeled node {b} has no label")))?;
        influence[class] += path_dp(graph, &t, k, b, &labeled)[a];
    }
    let lpa_mass = if labeled.iter().any(|&l| l) {
        lpa_infer(graph, labels, n_classes, &labeled, weights, k)?
            .y
            .row(a)
            .to_vec()
    } else {
        vec![0.0; n_classes]
    };
    let (p, q) = (normalized(&influence), normalized(&lpa_mass));
    let max_abs_err = p
        .iter()
        .zip(&q)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(Theorem3Check {
        influence,
        lpa_mass,
        max_abs_err,
    })
}

/// `½ Σ_ij T[i, j] ‖x_i − x_j‖²`.
pub fn dirichlet_energy(op: &RowStochasticOperator, x: &Matrix) -> f64 {
    let g = op.graph();
    let mut total = 0.0;
    for i in 0..g.n_nodes() {
        for e in g.row_range(i) {
            let j = g.col_idx()[e];
            let d: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            total += op.values()[e] * d;
        }
    }
    0.5 * total
}

/// Energy before and after one aggregation step `h = T · x`.
pub fn check_theorem4(graph: &Arc<SparseGraph>, weights: &[f64], x: &Matrix) -> Result<(f64, f64)> {
    let op = normalized_adjacency(graph, weights)?;
    let h = op.apply(x)?;
    Ok((dirichlet_energy(&op, x), dirichlet_energy(&op, &h)))
}

/// Per-node smoothing residuals against a linear label map `y = wᵀx`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothingReport {
    /// `‖x_i − Σ_j T[i, j] x_j‖₂` per node.
    pub eps_norm: Vec<f64>,
    /// Lipschitz constant of the map, `‖w‖₂`.
    pub lipschitz: f64,
    /// `|y_i − Σ_j T[i, j] y_j|` per node.
    pub label_residual: Vec<f64>,
    /// `L · ‖ε_i‖₂` per node.
    pub bound: Vec<f64>,
}

impl SmoothingReport {
    /// Nodes where the residual exceeds its bound by more than `slack`.
    pub fn violations(&self, slack: f64) -> usize {
        self.label_residual
            .iter()
            .zip(&self.bound)
            .filter(|(r, b)| **r > **b + slack)
            .count()
    }
}

pub fn check_theorem1_linear(
    graph: &Arc<SparseGraph>,
    weights: &[f64],
    features: &Matrix,
    w_map: &[f64],
) -> Result<SmoothingReport> {
    if w_map.len() != features.cols() {
        return Err(Error::Shape {
            op: "theorem1",
            lhs: features.shape(),
            rhs: (w_map.len(), 1),
        });
    }
    let op = normalized_adjacency(graph, weights)?;
    let smoothed = op.apply(features)?;
    let w = Matrix::column(w_map);
    let y = features.matmul(&w)?;
    let y_smoothed = op.apply(&y)?;
    let lipschitz = w_map.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n = graph.n_nodes();
    let eps_norm: Vec<f64> = (0..n)
        .map(|i| {
            features
                .row(i)
                .iter()
                .zip(smoothed.row(i))
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let label_residual = (0..n)
        .map(|i| (y.get(i, 0) - y_smoothed.get(i, 0)).abs())
        .collect();
    let bound = eps_norm.iter().map(|e| lipschitz * e).collect();
    Ok(SmoothingReport {
        eps_norm,
        lipschitz,
        label_residual,
        bound,
    })
}

/// `Σ I_l(a, b; k)` over unlabeled `a` and labeled `b` that both belong to
/// `class`.
pub fn intra_class_influence(
    graph: &Arc<SparseGraph>,
    weights: &[f64],
    k: usize,
    labels: &[Option<usize>],
    class: usize,
    labeled: &[bool],
) -> Result<f64> {
    check_k(k)?;
    let t = operator_values(graph, weights)?;
    let n = graph.n_nodes();
    let mut total = 0.0;
    for b in (0..n).filter(|&b| labeled[b] && labels[b] == Some(class)) {
        let f = path_dp(graph, &t, k, b, labeled);
        total += (0..n)
            .filter(|&a| !labeled[a] && labels[a] == Some(class))
            .map(|a| f[a])
            .sum::<f64>();
    }
    Ok(total)
}

/// Feature-side analog: `Σ Ĩ_f(a, b; k)` over the same pairs, in the linear
/// regime where `Ĩ_f(a, b; k) = (Tᵏ)[a, b]`.
pub fn intra_class_feature_influence(
    graph: &Arc<SparseGraph>,
    weights: &[f64],
    k: usize,
    labels: &[Option<usize>],
    class: usize,
    labeled: &[bool],
) -> Result<f64> {
    check_k(k)?;
    let mut total = 0.0;
    for a in (0..graph.n_nodes()).filter(|&a| !labeled[a] && labels[a] == Some(class)) {
        let row = feature_influence_row(graph, weights, k, a)?;
        total += (0..graph.n_nodes())
            .filter(|&b| labeled[b] && labels[b] == Some(class))
            .map(|b| row[b])
            .sum::<f64>();
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Sweeps

/// A small weighted graph, serializable for replay.
#[derive(Debug, Clone, Serialize)]
pub struct Instance {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
    #[serde(skip)]
    pub graph: Arc<SparseGraph>,
}

impl Instance {
    pub fn new(n: usize, edges: Vec<(usize, usize)>, weights: Vec<f64>) -> Result<Self> {
        let graph = Arc::new(SparseGraph::from_edges(n, edges.iter().copied())?);
        Ok(Self {
            n,
            edges,
            weights,
            graph,
        })
    }
}

/// Random graph on `min_n..=max_n` nodes with up to `2n` edges and weights
/// uniform in `[0.1, 5]`.
pub fn random_instance(rng: &mut impl Rng, min_n: usize, max_n: usize) -> Instance {
    let n = rng.gen_range(min_n..=max_n);
    let m = rng.gen_range(n / 2..=2 * n);
    let edges: Vec<(usize, usize)> = (0..m)
        .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n)))
        .collect();
    let graph =
        Arc::new(SparseGraph::from_edges(n, edges.iter().copied()).expect("nodes in range"));
    let weights = (0..graph.n_undirected_edges())
        .map(|_| rng.gen_range(0.1..5.0))
        .collect();
    Instance {
        n,
        edges,
        weights,
        graph,
    }
}

/// Outcome of one sweep, the shape the `verify` command prints.
#[derive(Debug, Clone, Serialize)]
pub struct CheckSummary {
    pub name: String,
    pub instances: usize,
    pub max_abs_err: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failing_instance: Option<serde_json::Value>,
}

fn summarize(
    name: &str,
    instances: usize,
    worst: f64,
    tol: f64,
    failing: Option<serde_json::Value>,
) -> CheckSummary {
    CheckSummary {
        name: name.into(),
        instances,
        max_abs_err: worst,
        pass: worst <= tol && failing.is_none(),
        failing_instance: failing,
    }
}

fn labeled_mask(rng: &mut impl Rng, n: usize, a: usize, b: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    m[a] = false;
    m[b] = true;
    m
}

fn distinct_pair(rng: &mut impl Rng, n: usize) -> (usize, usize) {
    let a = rng.gen_range(0..n);
    let mut b = rng.gen_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

/// Tape Jacobian against walk enumeration: `n ≤ 8`, `k ≤ 4`.
pub fn sweep_lemma1(seed: u64, instances: usize) -> Result<CheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut failing) = (0.0f64, None);
    for _ in 0..instances {
        let inst = random_instance(&mut rng, 2, 8);
        let k = rng.gen_range(1..=4);
        let a = rng.gen_range(0..inst.n);
        let row = feature_influence_row(&inst.graph, &inst.weights, k, a)?;
        for (b, jac) in row.iter().enumerate() {
            let walk = walk_probability(&inst.graph, &inst.weights, k, a, b)?;
            let err = (jac - walk).abs();
            if err > worst {
                worst = err;
                if err > 1e-10 {
                    failing = Some(
                        serde_json::json!({"instance": inst, "k": k, "a": a, "b": b, "jacobian": jac, "walk": walk}),
                    );
                }
            }
        }
    }
    Ok(summarize(
        "lemma1_feature_influence_vs_walk",
        instances,
        worst,
        1e-10,
        failing,
    ))
}

/// Tape label gradient against the unlabeled-path DP: `n ≤ 8`, `k ≤ 4`.
pub fn sweep_lemma2(seed: u64, instances: usize) -> Result<CheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut failing) = (0.0f64, None);
    for _ in 0..instances {
        let inst = random_instance(&mut rng, 2, 8);
        let k = rng.gen_range(1..=4);
        let (a, b) = distinct_pair(&mut rng, inst.n);
        let labeled = labeled_mask(&mut rng, inst.n, a, b);
        let grad = label_influence_gradient(&inst.graph, &inst.weights, k, a, b, &labeled)?;
        let dp = unlabeled_path_sum(&inst.graph, &inst.weights, k, a, b, &labeled)?;
        let err = (grad - dp).abs();
        if err > worst {
            worst = err;
            if err > 1e-10 {
                failing = Some(
                    serde_json::json!({"instance": inst, "k": k, "a": a, "b": b, "labeled": labeled, "gradient": grad, "path_sum": dp}),
                );
            }
        }
    }
    Ok(summarize(
        "lemma2_label_influence_vs_paths",
        instances,
        worst,
        1e-10,
        failing,
    ))
}

/// A theorem-2 query: graph, target `a`, labeled source `b`, horizon `k`.
#[derive(Debug, Clone, Serialize)]
pub struct Theorem2Instance {
    pub instance: Instance,
    pub a: usize,
    pub b: usize,
    pub k: usize,
}

/// Ten seeded queries on 6-node graphs with `k` cycling through 1, 2, 3 and
/// `b` within `k` hops of `a`.
pub fn theorem2_instances(seed: u64) -> Vec<Theorem2Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < 10 {
        let k = out.len() % 3 + 1;
        let inst = random_instance(&mut rng, 6, 6);
        let a = rng.gen_range(0..inst.n);
        // (Tᵏ)[a, b] > 0 exactly when b is within k hops, thanks to the loops
        let mut candidates: Vec<usize> = (0..inst.n)
            .filter(|&b| b != a)
            .filter(|&b| {
                walk_probability_power(&inst.graph, &inst.weights, k, a, b).expect("valid") > 0.0
            })
            .collect();
        if candidates.is_empty() {
            continue;
        }
        candidates.shuffle(&mut rng);
        out.push(Theorem2Instance {
            a,
            b: candidates[0],
            k,
            instance: inst,
        });
    }
    out
}

/// Every fixed theorem-2 query at β ∈ {0.3, 0.5, 0.7}.
pub fn sweep_theorem2(
    seed: u64,
    trials: usize,
) -> Result<(CheckSummary, Vec<(usize, f64, Theorem2Check)>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7468_6d32);
    let mut rows = Vec::new();
    let (mut worst, mut failing) = (0.0f64, None);
    let queries = theorem2_instances(seed);
    for (idx, q) in queries.iter().enumerate() {
        for beta in [0.3, 0.5, 0.7] {
            let c = check_theorem2(
                &q.instance.graph,
                &q.instance.weights,
                q.k,
                q.a,
                q.b,
                beta,
                trials,
                &mut rng,
            )?;
            worst = worst.max(c.abs_err);
            if !c.passes() && failing.is_none() {
                failing = Some(serde_json::json!({"query": q, "beta": beta, "check": c}));
            }
            rows.push((idx, beta, c));
        }
    }
    let mut s = summarize(
        "theorem2_expected_label_influence",
        queries.len() * 3,
        worst,
        f64::INFINITY,
        None,
    );
    s.pass = failing.is_none();
    s.failing_instance = failing;
    Ok((s, rows))
}

/// Class influence against propagated mass on random 3-class instances.
pub fn sweep_theorem3(seed: u64, instances: usize) -> Result<CheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut failing) = (0.0f64, None);
    for _ in 0..instances {
        let inst = random_instance(&mut rng, 3, 8);
        let k = rng.gen_range(1..=4);
        let labels: Vec<Option<usize>> = (0..inst.n).map(|_| Some(rng.gen_range(0..3))).collect();
        let a = rng.gen_range(0..inst.n);
        let mut labeled: Vec<bool> = (0..inst.n).map(|_| rng.gen_bool(0.5)).collect();
        labeled[a] = false;
        let c = check_theorem3(&inst.graph, &inst.weights, k, a, &labeled, &labels, 3)?;
        if c.max_abs_err > worst {
            worst = c.max_abs_err;
            if worst > 1e-10 {
                failing = Some(
                    serde_json::json!({"instance": inst, "k": k, "a": a, "labeled": labeled, "labels": labels, "check": c}),
                );
            }
        }
    }
    Ok(summarize(
        "theorem3_class_influence_vs_lpa",
        instances,
        worst,
        1e-10,
        failing,
    ))
}

/// Random node features in `[−1, 1]` and edge weights `softplus(z)` with
/// standard normal `z`, the distribution of freshly initialized mask
/// parameters.
pub fn theorem4_instance(rng: &mut impl Rng) -> (Instance, Matrix) {
    let mut inst = random_instance(rng, 2, 10);
    inst.weights = inst
        .weights
        .iter()
        .map(|_| softplus(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let d = rng.gen_range(1..=4);
    let x = Matrix::from_vec(
        inst.n,
        d,
        (0..inst.n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("sized");
    (inst, x)
}

/// Counts instances where one aggregation step raises the energy by more
/// than 1e-12. `max_abs_err` reports the largest such increase.
pub fn sweep_theorem4(seed: u64, instances: usize) -> Result<CheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut failing) = (0.0f64, None);
    for _ in 0..instances {
        let (inst, x) = theorem4_instance(&mut rng);
        let (before, after) = check_theorem4(&inst.graph, &inst.weights, &x)?;
        let excess = after - before;
        if excess > 1e-12 && failing.is_none() {
            failing = Some(
                serde_json::json!({"instance": inst, "x": x.data(), "d": x.cols(), "before": before, "after": after}),
            );
        }
        worst = worst.max(excess.max(0.0));
    }
    Ok(summarize(
        "theorem4_energy_shrinks",
        instances,
        worst,
        1e-12,
        failing,
    ))
}

/// Linear-map smoothing bound on random instances.
pub fn sweep_theorem1(seed: u64, instances: usize) -> Result<CheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut failing) = (0.0f64, None);
    for _ in 0..instances {
        let inst = random_instance(&mut rng, 2, 10);
        let d = rng.gen_range(1..=5);
        let x = Matrix::from_vec(
            inst.n,
            d,
            (0..inst.n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let r = check_theorem1_linear(&inst.graph, &inst.weights, &x, &w)?;
        for (res, b) in r.label_residual.iter().zip(&r.bound) {
            worst = worst.max((res - b).max(0.0));
        }
        if r.violations(1e-12) > 0 && failing.is_none() {
            failing =
                Some(serde_json::json!({"instance": inst, "x": x.data(), "w": w, "report": r}));
        }
    }
    Ok(summarize(
        "theorem1_linear_smoothing_bound",
        instances,
        worst,
        1e-12,
        failing,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::uniform_weights;

    fn graph(n: usize, edges: &[(usize, usize)]) -> Arc<SparseGraph> {
        Arc::new(SparseGraph::from_edges(n, edges.iter().copied()).unwrap())
    }

    #[test]
    fn one_step_influence_is_the_operator_row() {
        let g = graph(4, &[(0, 1), (0, 2), (2, 3)]);
        let w: Vec<f64> = (0..g.n_undirected_edges())
            .map(|u| 0.5 + u as f64)
            .collect();
        let op = normalized_adjacency(&g, &w).unwrap();
        let row = feature_influence_row(&g, &w, 1, 0).unwrap();
        for (j, v) in row.iter().enumerate() {
            assert!((v - op.get(0, j)).abs() < 1e-14);
        }
        for k in 1..4 {
            let s: f64 = feature_influence_row(&g, &w, k, 2).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(feature_influence_row(&g, &w, 0, 2).is_err());
    }

    #[test]
    fn walk_probability_examples() {
        let pair = graph(2, &[(0, 1)]);
        assert_eq!(
            walk_probability(&pair, &uniform_weights(&pair), 1, 0, 1).unwrap(),
            0.5
        );
        let lonely = graph(3, &[(0, 1)]);
        assert_eq!(
            walk_probability(&lonely, &uniform_weights(&lonely), 2, 2, 2).unwrap(),
            1.0
        );
    }

    #[test]
    fn enumeration_matches_power_on_eight_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let inst = random_instance(&mut rng, 8, 8);
            let k = rng.gen_range(1..=5);
            let (a, b) = (rng.gen_range(0..8), rng.gen_range(0..8));
            let p = walk_probability_enumerated(&inst.graph, &inst.weights, k, a, b).unwrap();
            let q = walk_probability_power(&inst.graph, &inst.weights, k, a, b).unwrap();
            assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn label_influence_examples() {
        // a = 0 touches only b = 1; node 2 hangs off b
        let g = graph(3, &[(0, 1), (1, 2)]);
        let w = uniform_weights(&g);
        let labeled = [false, true, true];
        let t01 = normalized_adjacency(&g, &w).unwrap().get(0, 1);
        assert!((label_influence_gradient(&g, &w, 1, 0, 1, &labeled).unwrap() - t01).abs() < 1e-15);
        assert!((unlabeled_path_sum(&g, &w, 1, 0, 1, &labeled).unwrap() - t01).abs() < 1e-15);
        let split = graph(4, &[(0, 1), (2, 3)]);
        let w = uniform_weights(&split);
        assert_eq!(
            label_influence_gradient(&split, &w, 3, 0, 3, &[false, false, false, true]).unwrap(),
            0.0
        );
        assert!(
            label_influence_gradient(&split, &w, 3, 0, 3, &[true, false, false, true]).is_err()
        );
        assert!(unlabeled_path_sum(&split, &w, 3, 0, 3, &[false, false, false, false]).is_err());
    }

    #[test]
    fn path_sum_starts_at_length_two_without_direct_edge() {
        // a = 0, b = 4; the shortest unlabeled route is 0 → 1 → 4
        let g = graph(5, &[(0, 1), (1, 4), (0, 2), (2, 3), (3, 4)]);
        let w = uniform_weights(&g);
        let labeled = [false, false, false, false, true];
        assert_eq!(unlabeled_path_sum(&g, &w, 1, 0, 4, &labeled).unwrap(), 0.0);
        let two = unlabeled_path_sum(&g, &w, 2, 0, 4, &labeled).unwrap();
        let op = normalized_adjacency(&g, &w).unwrap();
        assert!((two - op.get(0, 1) * op.get(1, 4)).abs() < 1e-15);
        assert!((label_influence_gradient(&g, &w, 2, 0, 4, &labeled).unwrap() - two).abs() < 1e-15);
    }

    #[test]
    fn theorem2_is_exact_at_one_step() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3), (0, 3)]);
        let w = uniform_weights(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = check_theorem2(&g, &w, 1, 0, 1, 0.4, 20_000, &mut rng).unwrap();
        let t01 = normalized_adjacency(&g, &w).unwrap().get(0, 1);
        assert!((c.rhs - 0.4 * t01).abs() < 1e-15);
        assert!((c.exact_lhs - c.rhs).abs() < 1e-15);
        assert!(c.passes());
    }

    #[test]
    fn theorem2_monte_carlo_tracks_exact_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for q in theorem2_instances(5) {
            let c = check_theorem2(
                &q.instance.graph,
                &q.instance.weights,
                q.k,
                q.a,
                q.b,
                0.5,
                20_000,
                &mut rng,
            )
            .unwrap();
            assert!(
                (c.lhs - c.exact_lhs).abs() <= 4.0 * c.std_err + 1e-12,
                "{c:?}"
            );
        }
    }

    #[test]
    fn theorem2_sides_differ_once_walks_revisit_nodes() {
        // path 0–1–2, a = 0, b = 2, k = 3. The walk 0 → 0 → 1 → 2 needs only
        // {0, 1} unlabeled (β²) but the closed form weights it β³.
        let g = graph(3, &[(0, 1), (1, 2)]);
        let w = uniform_weights(&g);
        let c = check_theorem2(
            &g,
            &w,
            3,
            0,
            2,
            0.5,
            1000,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!((c.exact_lhs - 11.0 / 144.0).abs() < 1e-15, "{c:?}");
        assert!((c.rhs - 10.0 / 144.0).abs() < 1e-15, "{c:?}");
    }

    #[test]
    fn theorem2_vanishes_as_beta_shrinks() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let w = uniform_weights(&g);
        let c = check_theorem2(
            &g,
            &w,
            3,
            0,
            2,
            1e-6,
            1000,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(c.lhs.abs() < 1e-5 && c.rhs.abs() < 1e-5);
    }

    #[test]
    fn theorem3_examples() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3)]);
        let w = uniform_weights(&g);
        let labels = [None, None, Some(0), Some(1)];
        let labeled = [false, false, true, false];
        let c = check_theorem3(&g, &w, 3, 0, &labeled, &labels, 2).unwrap();
        assert!(c.influence[0] > 0.0 && c.influence[1] == 0.0);
        assert!(c.lpa_mass[0] > 0.0 && c.lpa_mass[1] == 0.0);
        assert!(c.max_abs_err < 1e-12);

        let labels = [Some(2), Some(0), Some(1), Some(0)];
        let labeled = [false, true, true, true];
        let w: Vec<f64> = (0..g.n_undirected_edges())
            .map(|u| 0.3 + u as f64)
            .collect();
        let a = check_theorem3(&g, &w, 4, 0, &labeled, &labels, 3).unwrap();
        let doubled: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let b = check_theorem3(&g, &doubled, 4, 0, &labeled, &labels, 3).unwrap();
        let (na, nb) = (normalized(&a.influence), normalized(&b.influence));
        assert!(na.iter().zip(&nb).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn theorem4_examples() {
        let g = graph(4, &[(0, 1), (2, 3)]);
        let w = uniform_weights(&g);
        assert_eq!(
            check_theorem4(&g, &w, &Matrix::filled(4, 3, 0.7)).unwrap(),
            (0.0, 0.0)
        );
        let pair = graph(2, &[(0, 1)]);
        let (before, after) = check_theorem4(
            &pair,
            &uniform_weights(&pair),
            &Matrix::from_rows(&[&[0.0], &[2.0]]),
        )
        .unwrap();
        // T[0,1] = T[1,0] = 1/2, each ordered pair contributes once
        assert!((before - 0.5 * (0.5 * 4.0 + 0.5 * 4.0)).abs() < 1e-15);
        assert_eq!(after, 0.0);
    }

    #[test]
    fn theorem4_can_fail_with_lopsided_degrees() {
        // path 0–2–1 where node 0 is nearly glued to the hub 2 while node 1
        // keeps most of its mass on the hub too. D⁻¹A is far from symmetric
        // and one step pulls 0 away from the pair it was close to.
        let g = graph(3, &[(0, 2), (1, 2)]);
        let mut w = vec![0.0; g.n_undirected_edges()];
        for (u, wu) in w.iter_mut().enumerate() {
            *wu = match g.endpoints(u) {
                (0, 0) => 2.6e-3,
                (1, 1) => 2.1e-3,
                (2, 2) => 0.1135,
                (0, 2) => 75.4842,
                _ => 0.1339,
            };
        }
        let x = Matrix::from_rows(&[&[0.163], &[-0.512], &[-0.511]]);
        let (before, after) = check_theorem4(&g, &w, &x).unwrap();
        assert!(after > before + 0.1, "before={before} after={after}");
    }

    #[test]
    fn theorem1_examples() {
        let g = graph(5, &[(0, 1), (1, 2), (3, 4)]);
        let w = uniform_weights(&g);
        let flat = check_theorem1_linear(&g, &w, &Matrix::filled(5, 2, 1.5), &[0.3, -2.0]).unwrap();
        assert!(flat.eps_norm.iter().all(|e| e.abs() < 1e-15));
        assert!(flat.label_residual.iter().all(|r| r.abs() < 1e-15));
        let x = Matrix::from_rows(&[
            &[0.0, 1.0],
            &[2.0, -1.0],
            &[0.5, 0.5],
            &[1.0, 1.0],
            &[-3.0, 0.0],
        ]);
        let zero = check_theorem1_linear(&g, &w, &x, &[0.0, 0.0]).unwrap();
        assert!(zero.label_residual.iter().all(|&r| r == 0.0));
        assert!(zero.eps_norm.iter().any(|&e| e > 0.1));
        assert_eq!(
            check_theorem1_linear(&g, &w, &x, &[1.0, 3.0])
                .unwrap()
                .violations(1e-12),
            0
        );
    }

    #[test]
    fn intra_class_influence_examples() {
        // class-0 triangle {0,1,2} and class-1 triangle {3,4,5} bridged by 2–3
        let g = graph(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5), (2, 3)]);
        let labels: Vec<_> = [0, 0, 0, 1, 1, 1].iter().map(|&c| Some(c)).collect();
        let labeled = [true, false, false, true, false, false];
        let w = uniform_weights(&g);
        let none = intra_class_influence(
            &g,
            &w,
            3,
            &labels,
            1,
            &[true, false, false, false, false, false],
        )
        .unwrap();
        assert_eq!(none, 0.0);
        let base = intra_class_influence(&g, &w, 3, &labels, 0, &labeled).unwrap();
        let mut heavier = w.clone();
        for (u, wu) in heavier.iter_mut().enumerate() {
            let (a, b) = g.endpoints(u);
            if a != b && labels[a] == labels[b] {
                *wu = 3.0;
            }
        }
        assert!(intra_class_influence(&g, &heavier, 3, &labels, 0, &labeled).unwrap() > base);

        let mut by_pairs = 0.0;
        for a in [1, 2] {
            by_pairs += unlabeled_path_sum(&g, &w, 3, a, 0, &labeled).unwrap();
        }
        assert!((by_pairs - base).abs() < 1e-12);
        let feat = intra_class_feature_influence(&g, &w, 3, &labels, 0, &labeled).unwrap();
        assert!(feat > 0.0);
    }

    #[test]
    fn small_sweeps_pass() {
        assert!(sweep_lemma1(1, 10).unwrap().pass);
        assert!(sweep_lemma2(1, 10).unwrap().pass);
        assert!(sweep_theorem3(1, 10).unwrap().pass);
        assert!(sweep_theorem1(1, 10).unwrap().pass);
    }
}
