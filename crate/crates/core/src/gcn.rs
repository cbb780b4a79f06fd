//! Multi-layer GCN over a row-stochastic adjacency, recorded on a tape so the
//! adjacency values can be learned.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dropout_csr, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::matrix::{CsrMatrix, Matrix};
use crate::optim::glorot_init;

/// Nonlinearity between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
}

/// How the transformation matrices are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightInit {
    #[default]
    Glorot,
    /// Every entry uniform in `[-r, r]`.
    Uniform(f64),
}

/// Transformation matrices, one per layer, no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub weights: Vec<Matrix>,
}

impl GcnParams {
    /// Glorot-initialized layers `in_dim → hidden → … → hidden → n_classes`.
    pub fn init(
        in_dim: usize,
        hidden: usize,
        n_classes: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::init_with(in_dim, hidden, n_classes, layers, WeightInit::Glorot, rng)
    }

    pub fn init_with(
        in_dim: usize,
        hidden: usize,
        n_classes: usize,
        layers: usize,
        scheme: WeightInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::invalid("gcn needs at least one layer"));
        }
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat_n(hidden, layers - 1));
        dims.push(n_classes);
        let weights = dims
            .windows(2)
            .map(|d| match scheme {
                WeightInit::Glorot => glorot_init(d[0], d[1], rng),
                WeightInit::Uniform(r) if r > 0.0 => Matrix::from_vec(
                    d[0],
                    d[1],
                    (0..d[0] * d[1]).map(|_| rng.gen_range(-r..=r)).collect(),
                ),
                WeightInit::Uniform(r) => Err(Error::invalid(format!(
                    "uniform init range must be positive, got {r}"
                ))),
            })
            .collect::<Result<_>>()?;
        Ok(Self { weights })
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }
}

/// Layer outputs of one forward pass. `layers[k]` is the representation after
/// layer `k` (post-activation for hidden layers); the last entry is the logits.
#[derive(Debug, Clone)]
pub struct GcnOutput {
    pub layers: Vec<Tensor>,
}

impl GcnOutput {
    pub fn logits(&self) -> Tensor {
        *self.layers.last().expect("at least one layer")
    }
}

/// `h = T · x`, the aggregation half of a layer.
pub fn aggregate_step(
    tape: &mut Tape,
    graph: &Arc<SparseGraph>,
    values: Tensor,
    x: Tensor,
) -> Result<Tensor> {
    tape.spmm(graph, values, x)
}

/// Forward pass. `values` holds the per-slot entries of `D⁻¹A`; `weights` are
/// the layer matrices already on the tape. Dropout hits the input features and
/// every hidden activation while `training`.
#[allow(clippy::too_many_arguments)]
pub fn gcn_forward(
    tape: &mut Tape,
    graph: &Arc<SparseGraph>,
    values: Tensor,
    features: &Arc<CsrMatrix>,
    weights: &[Tensor],
    activation: Activation,
    dropout_rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<GcnOutput> {
    if weights.is_empty() {
        return Err(Error::invalid("gcn needs at least one layer"));
    }
    let input = if training && dropout_rate > 0.0 {
        Arc::new(dropout_csr(features, dropout_rate, rng)?)
    } else {
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout rate must be in [0, 1), got {dropout_rate}"
            )));
        }
        Arc::clone(features)
    };
    let mut layers = Vec::with_capacity(weights.len());
    // T·(X·W) equals (T·X)·W and keeps the sparse product on the narrow side
    let xw = tape.sparse_matmul(input, weights[0])?;
    let mut h = aggregate_step(tape, graph, values, xw)?;
    for &w in &weights[1..] {
        let act = match activation {
            Activation::Relu => tape.relu(h),
            Activation::Sigmoid => tape.sigmoid(h),
        };
        layers.push(act);
        let dropped = tape.dropout(act, dropout_rate, training, rng)?;
        let xw = tape.matmul(dropped, w)?;
        h = aggregate_step(tape, graph, values, xw)?;
    }
    layers.push(h);
    Ok(GcnOutput { layers })
}

/// Row argmax with ties going to the lowest class.
pub fn predict(logits: &Matrix) -> Result<Vec<usize>> {
    if logits.data().iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("logits contain NaN"));
    }
    Ok(logits.argmax_rows())
}

/// Fraction of `mask` nodes whose prediction equals their label.
pub fn masked_accuracy(pred: &[usize], labels: &[Option<usize>], mask: &[bool]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for ((p, l), &m) in pred.iter().zip(labels).zip(mask) {
        if m {
            total += 1;
            hit += usize::from(Some(*p) == *l);
        }
    }
    if total == 0 {
        return Err(Error::invalid("accuracy mask selects no nodes"));
    }
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{numerical, rel_err};
    use crate::graph::uniform_weights;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_values(t: &mut Tape, g: &Arc<SparseGraph>) -> Tensor {
        let w = t.constant(Matrix::column(&uniform_weights(g)));
        t.normalize(g, w).unwrap()
    }

    fn forward_dense(g: &Arc<SparseGraph>, w_edges: &[f64], x: &Matrix, ws: &[Matrix]) -> Matrix {
        let mut t = Tape::new();
        let wv = t.constant(Matrix::column(w_edges));
        let v = t.normalize(g, wv).unwrap();
        let params: Vec<_> = ws.iter().map(|w| t.constant(w.clone())).collect();
        let out = gcn_forward(
            &mut t,
            g,
            v,
            &Arc::new(CsrMatrix::from_dense(x)),
            &params,
            Activation::Relu,
            0.0,
            false,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        t.value(out.logits()).clone()
    }

    #[test]
    fn identity_operator_and_weight_return_features() {
        let g = Arc::new(SparseGraph::from_edges(3, []).unwrap());
        let x = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 2.0], &[3.0, 1.0]]);
        let out = forward_dense(&g, &uniform_weights(&g), &x, &[Matrix::identity(2)]);
        assert_eq!(out, x);
    }

    #[test]
    fn two_node_averaging() {
        let g = Arc::new(SparseGraph::from_edges(2, [(0, 1)]).unwrap());
        let out = forward_dense(
            &g,
            &uniform_weights(&g),
            &Matrix::from_rows(&[&[0.0], &[2.0]]),
            &[Matrix::identity(1)],
        );
        assert_eq!(out, Matrix::from_rows(&[&[1.0], &[1.0]]));
        let mut t = Tape::new();
        let v = uniform_values(&mut t, &g);
        let x = t.constant(Matrix::from_rows(&[&[0.0], &[2.0]]));
        let h = aggregate_step(&mut t, &g, v, x).unwrap();
        assert_eq!(t.value(h), &Matrix::from_rows(&[&[1.0], &[1.0]]));
    }

    #[test]
    fn predict_examples() {
        assert_eq!(
            predict(&Matrix::from_rows(&[&[0.1, 0.9]])).unwrap(),
            vec![1]
        );
        assert_eq!(
            predict(&Matrix::from_rows(&[&[0.5, 0.5]])).unwrap(),
            vec![0]
        );
        assert_eq!(
            predict(&Matrix::from_rows(&[&[3.0, 1.0, 2.0]])).unwrap(),
            vec![0]
        );
        assert!(predict(&Matrix::from_rows(&[&[f64::NAN, 1.0]])).is_err());
    }

    #[test]
    fn two_layer_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let edges: Vec<_> = (0..12)
            .map(|_| (rng.gen_range(0..8), rng.gen_range(0..8)))
            .collect();
        let g = Arc::new(SparseGraph::from_edges(8, edges).unwrap());
        let x =
            Matrix::from_vec(8, 4, (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let params = GcnParams::init(4, 3, 2, 2, &mut rng).unwrap();
        let theta0 = Matrix::column(
            &(0..g.n_undirected_edges())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        );
        let labels: Vec<_> = (0..8).map(|i| Some(i % 2)).collect();
        let mask = vec![true; 8];
        let loss = |theta: &Matrix, w0: &Matrix, w1: &Matrix| {
            let mut t = Tape::new();
            let th = t.constant(theta.clone());
            let ew = t.softplus(th);
            let v = t.normalize(&g, ew).unwrap();
            let ws = [t.constant(w0.clone()), t.constant(w1.clone())];
            let out = gcn_forward(
                &mut t,
                &g,
                v,
                &Arc::new(CsrMatrix::from_dense(&x)),
                &ws,
                Activation::Relu,
                0.0,
                false,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
            let l = t
                .masked_softmax_cross_entropy(out.logits(), &labels, &mask)
                .unwrap();
            t.scalar(l)
        };
        let mut t = Tape::new();
        let th = t.leaf(theta0.clone());
        let ew = t.softplus(th);
        let v = t.normalize(&g, ew).unwrap();
        let ws = [
            t.leaf(params.weights[0].clone()),
            t.leaf(params.weights[1].clone()),
        ];
        let out = gcn_forward(
            &mut t,
            &g,
            v,
            &Arc::new(CsrMatrix::from_dense(&x)),
            &ws,
            Activation::Relu,
            0.0,
            false,
            &mut rng,
        )
        .unwrap();
        let l = t
            .masked_softmax_cross_entropy(out.logits(), &labels, &mask)
            .unwrap();
        t.backward(l).unwrap();
        let (w0, w1) = (&params.weights[0], &params.weights[1]);
        let n_theta = numerical(&theta0, 1e-5, |p| loss(p, w0, w1));
        let n_w0 = numerical(w0, 1e-5, |p| loss(&theta0, p, w1));
        let n_w1 = numerical(w1, 1e-5, |p| loss(&theta0, w0, p));
        assert!(rel_err(t.grad(th).unwrap(), &n_theta) <= 1e-4);
        assert!(rel_err(t.grad(ws[0]).unwrap(), &n_w0) <= 1e-4);
        assert!(rel_err(t.grad(ws[1]).unwrap(), &n_w1) <= 1e-4);
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 7;
        let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (1, 5)];
        let g = Arc::new(SparseGraph::from_edges(n, edges).unwrap());
        let perm = [3, 6, 0, 5, 1, 4, 2];
        let pg = Arc::new(
            SparseGraph::from_edges(n, edges.iter().map(|&(u, v)| (perm[u], perm[v]))).unwrap(),
        );
        let x =
            Matrix::from_vec(n, 3, (0..n * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let mut px = Matrix::zeros(n, 3);
        for i in 0..n {
            px.row_mut(perm[i]).copy_from_slice(x.row(i));
        }
        let ws = GcnParams::init(3, 4, 2, 3, &mut rng).unwrap().weights;
        // uniform weights are permutation-invariant by construction
        let a = forward_dense(&g, &uniform_weights(&g), &x, &ws);
        let b = forward_dense(&pg, &uniform_weights(&pg), &px, &ws);
        for i in 0..n {
            for (p, q) in a.row(i).iter().zip(b.row(perm[i])) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_features_give_constant_logits() {
        let g = Arc::new(SparseGraph::from_edges(5, [(0, 1), (1, 2), (3, 4)]).unwrap());
        let x = Matrix::filled(5, 2, 0.25);
        let w: Vec<f64> = (0..g.n_undirected_edges())
            .map(|u| 1.0 + u as f64)
            .collect();
        let out = forward_dense(&g, &w, &x, &[Matrix::identity(2)]);
        assert!(out.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn forward_without_dropout_is_reproducible() {
        let k = crate::graph::karate_club();
        let feats = Arc::new(k.features.clone());
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let p = GcnParams::init(34, 4, 2, 2, &mut rng).unwrap();
            let mut t = Tape::new();
            let v = uniform_values(&mut t, &k.graph);
            let ws: Vec<_> = p.weights.iter().map(|w| t.constant(w.clone())).collect();
            let out = gcn_forward(
                &mut t,
                &k.graph,
                v,
                &feats,
                &ws,
                Activation::Relu,
                0.5,
                false,
                &mut rng,
            )
            .unwrap();
            t.value(out.logits()).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn accuracy_rules() {
        let labels = [Some(0), Some(1), None, Some(1)];
        assert_eq!(
            masked_accuracy(&[0, 0, 1, 1], &labels, &[true, true, false, true]).unwrap(),
            2.0 / 3.0
        );
        assert!(masked_accuracy(&[0, 0, 1, 1], &labels, &[false; 4]).is_err());
    }
}
