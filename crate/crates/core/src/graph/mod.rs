//! Graph storage, datasets, splits, generators and structure statistics.
//!
//! [`SparseGraph`] is an immutable symmetric CSR adjacency pattern. Every node
//! carries a self-loop, and both directions of an undirected edge share one
//! *edge uid*, so per-edge parameters stay symmetric.

mod dataset;
mod generators;

pub use dataset::{load_dataset, make_split, row_normalize_features, save_dataset, Dataset, Split};
pub use generators::{add_noise_edges, karate_club, synth_random_graph};

use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Immutable symmetric adjacency in canonical CSR form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseGraph {
    n_nodes: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    edge_uid: Vec<usize>,
    /// Position of entry `(j, i)` for the entry `(i, j)` stored at each slot.
    mirror: Vec<usize>,
    /// `(min, max)` endpoints per undirected edge uid.
    endpoints: Vec<(usize, usize)>,
}

impl SparseGraph {
    /// Builds the canonical graph from an undirected edge list. Duplicates and
    /// both orientations collapse into one edge; self-loops are added to every
    /// node whether or not they are listed.
    pub fn from_edges(
        n_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            for x in [u, v] {
                if x >= n_nodes {
                    return Err(Error::OutOfBounds {
                        what: "node",
                        index: x,
                        limit: n_nodes,
                    });
                }
            }
            set.insert((u.min(v), u.max(v)));
        }
        for i in 0..n_nodes {
            set.insert((i, i));
        }
        // uids follow the sorted (min, max) order
        let endpoints: Vec<(usize, usize)> = set.into_iter().collect();

        let mut degree = vec![0usize; n_nodes];
        for &(u, v) in &endpoints {
            degree[u] += 1;
            if u != v {
                degree[v] += 1;
            }
        }
        let mut row_ptr = vec![0usize; n_nodes + 1];
        for i in 0..n_nodes {
            row_ptr[i + 1] = row_ptr[i] + degree[i];
        }
        let nnz = row_ptr[n_nodes];
        let mut entries: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_nodes];
        for (uid, &(u, v)) in endpoints.iter().enumerate() {
            entries[u].push((v, uid));
            if u != v {
                entries[v].push((u, uid));
            }
        }
        let mut col_idx = Vec::with_capacity(nnz);
        let mut edge_uid = Vec::with_capacity(nnz);
        for row in &mut entries {
            row.sort_unstable();
            for &(c, uid) in row.iter() {
                col_idx.push(c);
                edge_uid.push(uid);
            }
        }
        let mut graph = Self {
            n_nodes,
            row_ptr,
            col_idx,
            edge_uid,
            mirror: Vec::new(),
            endpoints,
        };
        let mirror = (0..n_nodes)
            .flat_map(|i| {
                let g = &graph;
                (g.row_ptr[i]..g.row_ptr[i + 1]).map(move |e| {
                    g.position(g.col_idx[e], i)
                        .expect("symmetric pattern has the mirrored entry")
                })
            })
            .collect();
        graph.mirror = mirror;
        Ok(graph)
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Number of stored directed entries, loops included.
    #[inline]
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Undirected edges including one self-loop per node.
    #[inline]
    pub fn n_undirected_edges(&self) -> usize {
        self.endpoints.len()
    }

    /// Undirected edges between distinct nodes.
    pub fn n_non_loop_edges(&self) -> usize {
        self.endpoints.len() - self.n_nodes
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn edge_uid(&self) -> &[usize] {
        &self.edge_uid
    }

    pub(crate) fn mirror(&self) -> &[usize] {
        &self.mirror
    }

    /// `(min, max)` endpoints of an undirected edge.
    pub fn endpoints(&self, uid: usize) -> (usize, usize) {
        self.endpoints[uid]
    }

    /// All undirected edges `(u, v)` with `u < v`, in uid order.
    pub fn non_loop_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.endpoints.iter().copied().filter(|&(u, v)| u != v)
    }

    /// Slot range of row `i` in `col_idx` / `edge_uid`.
    #[inline]
    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    /// Neighbors of `i` (itself included) in increasing order.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_range(i)]
    }

    /// Slot of entry `(i, j)`, if present.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let range = self.row_range(i);
        self.col_idx[range.clone()]
            .binary_search(&j)
            .ok()
            .map(|k| range.start + k)
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.position(i, j).is_some()
    }

    /// Returns a copy with extra undirected edges inserted.
    pub fn with_edges(&self, extra: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        Self::from_edges(self.n_nodes, self.non_loop_edges().chain(extra))
    }
}

/// The row-stochastic operator `D⁻¹A` over a graph's pattern, with one value
/// per stored entry.
#[derive(Debug, Clone)]
pub struct RowStochasticOperator {
    graph: Arc<SparseGraph>,
    values: Vec<f64>,
}

impl RowStochasticOperator {
    pub fn graph(&self) -> &Arc<SparseGraph> {
        &self.graph
    }

    /// Normalized value per stored entry, aligned with `graph().col_idx()`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Entry `T[i, j]` (zero when `(i, j)` is not an edge).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.graph.position(i, j).map_or(0.0, |e| self.values[e])
    }

    pub fn n(&self) -> usize {
        self.graph.n_nodes()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n())
            .map(|i| self.values[self.graph.row_range(i)].iter().sum())
            .collect()
    }

    /// `T · x`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.n() {
            return Err(Error::Shape {
                op: "spmm",
                lhs: (self.n(), self.n()),
                rhs: x.shape(),
            });
        }
        Ok(spmm_kernel(&self.graph, &self.values, x))
    }

    pub fn to_dense(&self) -> Matrix {
        let n = self.n();
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for e in self.graph.row_range(i) {
                m.set(i, self.graph.col_idx()[e], self.values[e]);
            }
        }
        m
    }
}

/// Builds `D⁻¹A` where `a_ij` is the weight of the undirected edge holding
/// entry `(i, j)` and `d_ii = Σ_j a_ij`. Degrees are recomputed from the
/// supplied weights on every call.
pub fn normalized_adjacency(
    graph: &Arc<SparseGraph>,
    edge_weights: &[f64],
) -> Result<RowStochasticOperator> {
    if edge_weights.len() != graph.n_undirected_edges() {
        return Err(Error::Shape {
            op: "normalized_adjacency",
            lhs: (graph.n_undirected_edges(), 1),
            rhs: (edge_weights.len(), 1),
        });
    }
    if let Some((uid, w)) = edge_weights
        .iter()
        .enumerate()
        .find(|(_, w)| !(**w > 0.0) || !w.is_finite())
    {
        return Err(Error::invalid(format!(
            "edge weight must be positive and finite, uid {uid} has {w}"
        )));
    }
    Ok(RowStochasticOperator {
        graph: Arc::clone(graph),
        values: normalize_values(graph, edge_weights),
    })
}

pub(crate) fn normalize_values(graph: &SparseGraph, edge_weights: &[f64]) -> Vec<f64> {
    let mut values = vec![0.0; graph.nnz()];
    for i in 0..graph.n_nodes() {
        let range = graph.row_range(i);
        let degree: f64 = graph.edge_uid()[range.clone()]
            .iter()
            .map(|&u| edge_weights[u])
            .sum();
        for e in range {
            values[e] = edge_weights[graph.edge_uid()[e]] / degree;
        }
    }
    values
}

/// Uniform weights: every edge, loops included, weighs 1.
pub fn uniform_weights(graph: &SparseGraph) -> Vec<f64> {
    vec![1.0; graph.n_undirected_edges()]
}

/// Fraction of undirected non-loop edges whose endpoints share a label.
/// Edges touching an unlabeled node are left out of both counts.
pub fn intra_class_edge_rate(graph: &SparseGraph, labels: &[Option<usize>]) -> Result<f64> {
    if labels.len() != graph.n_nodes() {
        return Err(Error::Shape {
            op: "intra_class_edge_rate",
            lhs: (graph.n_nodes(), 1),
            rhs: (labels.len(), 1),
        });
    }
    let (mut same, mut total) = (0usize, 0usize);
    for (u, v) in graph.non_loop_edges() {
        if let (Some(a), Some(b)) = (labels[u], labels[v]) {
            total += 1;
            same += usize::from(a == b);
        }
    }
    if total == 0 {
        return Err(Error::invalid("graph has no labeled non-loop edges"));
    }
    Ok(same as f64 / total as f64)
}

/// Upper bound on the internal parallelism of sparse products, read once from
/// `GRAPHFLOW_THREADS` (default 1).
pub fn configured_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("GRAPHFLOW_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&t| t >= 1)
            .unwrap_or(1)
    })
}

fn thread_pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let t = configured_threads();
        (t > 1)
            .then(|| rayon::ThreadPoolBuilder::new().num_threads(t).build().ok())
            .flatten()
    })
    .as_ref()
}

// Row-parallel loop with a fixed per-row summation order; results do not
// depend on the thread count.
fn for_each_row(out: &mut Matrix, f: impl Fn(usize, &mut [f64]) + Sync + Send) {
    let cols = out.cols();
    if cols == 0 {
        return;
    }
    match thread_pool() {
        Some(pool) if out.rows() >= 1024 => pool.install(|| {
            out.data_mut()
                .par_chunks_mut(cols)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
        }),
        _ => out
            .data_mut()
            .chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| f(i, row)),
    }
}

/// `y[i] = Σ_e values[e] · x[col(e)]` over the slots of row `i`.
pub(crate) fn spmm_kernel(graph: &SparseGraph, values: &[f64], x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(graph.n_nodes(), x.cols());
    for_each_row(&mut out, |i, row| {
        for e in graph.row_range(i) {
            let v = values[e];
            for (o, &b) in row.iter_mut().zip(x.row(graph.col_idx()[e])) {
                *o += v * b;
            }
        }
    });
    out
}

/// `Tᵀ · g`, computed as a gather through the mirrored slots.
pub(crate) fn spmm_transpose_kernel(graph: &SparseGraph, values: &[f64], g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(graph.n_nodes(), g.cols());
    let mirror = graph.mirror();
    for_each_row(&mut out, |j, row| {
        for e in graph.row_range(j) {
            // slot e holds (j, i); T[i, j] lives at its mirror
            let v = values[mirror[e]];
            for (o, &b) in row.iter_mut().zip(g.row(graph.col_idx()[e])) {
                *o += v * b;
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn triangle() -> Arc<SparseGraph> {
        Arc::new(SparseGraph::from_edges(3, [(0, 1), (1, 2), (0, 2)]).unwrap())
    }

    #[test]
    fn single_edge_gets_loops_and_both_directions() {
        let g = SparseGraph::from_edges(2, [(0, 1)]).unwrap();
        assert_eq!(g.nnz(), 4);
        assert_eq!(g.n_undirected_edges(), 3);
        assert_eq!(g.row_ptr(), &[0, 2, 4]);
        assert_eq!(g.col_idx(), &[0, 1, 0, 1]);
        let e01 = g.position(0, 1).unwrap();
        let e10 = g.position(1, 0).unwrap();
        assert_eq!(g.edge_uid()[e01], g.edge_uid()[e10]);
    }

    #[test]
    fn duplicates_and_orientation_collapse() {
        let a = SparseGraph::from_edges(3, [(0, 1), (1, 0), (0, 1), (2, 2)]).unwrap();
        let b = SparseGraph::from_edges(3, [(0, 1)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_range_node_is_rejected() {
        assert!(matches!(
            SparseGraph::from_edges(2, [(0, 2)]),
            Err(Error::OutOfBounds { index: 2, .. })
        ));
    }

    #[test]
    fn uniform_two_node_rows_are_halves() {
        let g = Arc::new(SparseGraph::from_edges(2, [(0, 1)]).unwrap());
        let op = normalized_adjacency(&g, &uniform_weights(&g)).unwrap();
        assert_eq!(
            op.to_dense(),
            Matrix::from_rows(&[&[0.5, 0.5], &[0.5, 0.5]])
        );
    }

    #[test]
    fn isolated_node_row_is_one() {
        let g = Arc::new(SparseGraph::from_edges(3, [(0, 1)]).unwrap());
        let op = normalized_adjacency(&g, &uniform_weights(&g)).unwrap();
        assert_eq!(op.get(2, 2), 1.0);
        assert_eq!(op.graph().neighbors(2), &[2]);
    }

    #[test]
    fn triangle_with_heavier_edges() {
        let g = triangle();
        let w: Vec<f64> = (0..g.n_undirected_edges())
            .map(|u| {
                let (a, b) = g.endpoints(u);
                if a == b {
                    1.0
                } else {
                    2.0
                }
            })
            .collect();
        let op = normalized_adjacency(&g, &w).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.2 } else { 0.4 };
                assert!((op.get(i, j) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nonpositive_weight_is_rejected() {
        let g = triangle();
        let mut w = uniform_weights(&g);
        w[1] = 0.0;
        assert!(normalized_adjacency(&g, &w).is_err());
        w[1] = -1.0;
        assert!(normalized_adjacency(&g, &w).is_err());
    }

    #[test]
    fn intra_class_rate_counts_only_non_loop_edges() {
        let g = SparseGraph::from_edges(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        let labels = [Some(0), Some(0), Some(1), Some(1)];
        assert!((intra_class_edge_rate(&g, &labels).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let same = [Some(4); 4];
        assert_eq!(intra_class_edge_rate(&g, &same).unwrap(), 1.0);
        let lonely = SparseGraph::from_edges(2, []).unwrap();
        assert!(intra_class_edge_rate(&lonely, &[Some(0), Some(1)]).is_err());
    }

    #[test]
    fn transpose_kernel_matches_dense_transpose() {
        let g = Arc::new(SparseGraph::from_edges(4, [(0, 1), (1, 2), (1, 3)]).unwrap());
        let w: Vec<f64> = (0..g.n_undirected_edges())
            .map(|u| 1.0 + u as f64)
            .collect();
        let op = normalized_adjacency(&g, &w).unwrap();
        let x = Matrix::from_rows(&[&[1.0, 2.0], &[-1.0, 0.5], &[3.0, 0.0], &[0.25, -2.0]]);
        let got = spmm_transpose_kernel(&g, op.values(), &x);
        let want = op.to_dense().t_matmul(&x).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-15);
    }

    fn arb_weighted_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>, Vec<f64>)> {
        (2usize..12).prop_flat_map(|n| {
            let edges = proptest::collection::vec((0..n, 0..n), 0..3 * n);
            (Just(n), edges).prop_flat_map(|(n, edges)| {
                let g = SparseGraph::from_edges(n, edges.clone()).unwrap();
                let w = proptest::collection::vec(1e-3f64..1e3, g.n_undirected_edges());
                (Just(n), Just(edges), w)
            })
        })
    }

    proptest! {
        #[test]
        fn rows_sum_to_one((n, edges, w) in arb_weighted_graph()) {
            let g = Arc::new(SparseGraph::from_edges(n, edges).unwrap());
            let op = normalized_adjacency(&g, &w).unwrap();
            for s in op.row_sums() {
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn global_rescaling_leaves_operator_unchanged((n, edges, w) in arb_weighted_graph(), c in 1e-3f64..1e3) {
            let g = Arc::new(SparseGraph::from_edges(n, edges).unwrap());
            let a = normalized_adjacency(&g, &w).unwrap();
            let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
            let b = normalized_adjacency(&g, &scaled).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn canonical_invariants_hold(n in 1usize..15, edges in proptest::collection::vec((0usize..15, 0usize..15), 0..40)) {
            let edges: Vec<_> = edges.into_iter().filter(|&(u, v)| u < n && v < n).collect();
            let g = SparseGraph::from_edges(n, edges).unwrap();
            prop_assert_eq!(g.row_ptr()[0], 0);
            prop_assert_eq!(g.row_ptr()[n], g.nnz());
            for i in 0..n {
                let row = g.neighbors(i);
                prop_assert!(row.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(g.has_edge(i, i));
                for e in g.row_range(i) {
                    let j = g.col_idx()[e];
                    let back = g.position(j, i);
                    prop_assert!(back.is_some());
                    prop_assert_eq!(g.edge_uid()[back.unwrap()], g.edge_uid()[e]);
                }
            }
        }
    }
}
