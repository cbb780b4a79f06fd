use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, SparseGraph};
use crate::error::{Error, Result};
use crate::matrix::CsrMatrix;

/// Random graph with `⌊n · avg_degree / 2⌋` distinct undirected edges drawn
/// uniformly, one-hot identity features and every label set to class 0.
///
/// The class count is 2 so the classifier has a nontrivial output layer.
pub fn synth_random_graph(n: usize, avg_degree: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "random graph needs n >= 2, got {n}"
        )));
    }
    if !(avg_degree >= 1.0) {
        return Err(Error::invalid(format!(
            "average degree must be >= 1, got {avg_degree}"
        )));
    }
    let m = (n as f64 * avg_degree / 2.0).floor() as usize;
    let max_edges = n * (n - 1) / 2;
    if m > max_edges {
        return Err(Error::invalid(format!(
            "{m} edges requested but only {max_edges} pairs exist"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<(usize, usize)> = if 2 * m > max_edges {
        let mut all: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .collect();
        let (chosen, _) = all.partial_shuffle(&mut rng, m);
        chosen.to_vec()
    } else {
        let mut seen = HashSet::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        while out.len() < m {
            let u = rng.gen_range(0..n);
            let v = rng.gen_range(0..n);
            if u == v {
                continue;
            }
            let e = (u.min(v), u.max(v));
            if seen.insert(e) {
                out.push(e);
            }
        }
        out
    };
    Ok(Dataset {
        name: format!("random-n{n}-d{avg_degree}"),
        graph: Arc::new(SparseGraph::from_edges(n, edges)?),
        features: CsrMatrix::identity(n),
        labels: vec![Some(0); n],
        n_classes: 2,
        split: None,
    })
}

const KARATE_EDGES: [(usize, usize); 78] = [
    (0, 1),
    (0, 2),
    (0, 3),
    (0, 4),
    (0, 5),
    (0, 6),
    (0, 7),
    (0, 8),
    (0, 10),
    (0, 11),
    (0, 12),
    (0, 13),
    (0, 17),
    (0, 19),
    (0, 21),
    (0, 31),
    (1, 2),
    (1, 3),
    (1, 7),
    (1, 13),
    (1, 17),
    (1, 19),
    (1, 21),
    (1, 30),
    (2, 3),
    (2, 7),
    (2, 8),
    (2, 9),
    (2, 13),
    (2, 27),
    (2, 28),
    (2, 32),
    (3, 7),
    (3, 12),
    (3, 13),
    (4, 6),
    (4, 10),
    (5, 6),
    (5, 10),
    (5, 16),
    (6, 16),
    (8, 30),
    (8, 32),
    (8, 33),
    (9, 33),
    (13, 33),
    (14, 32),
    (14, 33),
    (15, 32),
    (15, 33),
    (18, 32),
    (18, 33),
    (19, 33),
    (20, 32),
    (20, 33),
    (22, 32),
    (22, 33),
    (23, 25),
    (23, 27),
    (23, 29),
    (23, 32),
    (23, 33),
    (24, 25),
    (24, 27),
    (24, 31),
    (25, 31),
    (26, 29),
    (26, 33),
    (27, 33),
    (28, 31),
    (28, 33),
    (29, 32),
    (29, 33),
    (30, 32),
    (30, 33),
    (31, 32),
    (31, 33),
    (32, 33),
];

/// Members who followed the instructor (class 0); everyone else is class 1.
const KARATE_INSTRUCTOR_FACTION: [usize; 17] =
    [0, 1, 2, 3, 4, 5, 6, 7, 8, 10, 11, 12, 13, 16, 17, 19, 21];

/// Zachary's karate club: 34 members, 78 friendships, two factions, one-hot
/// identity features.
pub fn karate_club() -> Dataset {
    let n = 34;
    let mut labels = vec![Some(1); n];
    for &i in &KARATE_INSTRUCTOR_FACTION {
        labels[i] = Some(0);
    }
    Dataset {
        name: "karate".into(),
        graph: Arc::new(
            SparseGraph::from_edges(n, KARATE_EDGES).expect("static edge list is valid"),
        ),
        features: CsrMatrix::identity(n),
        labels,
        n_classes: 2,
        split: None,
    }
}

/// Adds `count` undirected edges drawn uniformly from the labeled node pairs
/// that have different labels and are not yet connected.
pub fn add_noise_edges(dataset: &Dataset, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Ok(dataset.clone());
    }
    let n = dataset.n_nodes();
    let mut candidates = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if let (Some(a), Some(b)) = (dataset.labels[u], dataset.labels[v]) {
                if a != b && !dataset.graph.has_edge(u, v) {
                    candidates.push((u, v));
                }
            }
        }
    }
    if candidates.len() < count {
        return Err(Error::invalid(format!(
            "only {} inter-class pairs are free, {count} requested",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (chosen, _) = candidates.partial_shuffle(&mut rng, count);
    let graph = dataset.graph.with_edges(chosen.iter().copied())?;
    Ok(Dataset {
        graph: Arc::new(graph),
        ..dataset.clone()
    })
}
