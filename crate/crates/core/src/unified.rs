//! GCN trained jointly with a label-propagation loss over one shared set of
//! learnable edge weights.
//!
//! Each undirected edge (self-loops included) carries a raw parameter whose
//! softplus is the edge weight. In kernel mode the weight of edge `(i, j)` is
//! instead `softplus(x_iᵀ H x_j)` with a learned `H`. Either way the same
//! weights feed the GCN propagation and the propagation loss, so the
//! classifier and the label-consistency term pull on one adjacency.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Tape, Tensor};
use crate::error::{Error, Result};
use crate::gcn::{
    gcn_forward, masked_accuracy, predict, Activation, GcnOutput, GcnParams, WeightInit,
};
use crate::graph::{Dataset, SparseGraph};
use crate::lpa::{lpa_clamp_subset, propagation_loss};
use crate::matrix::{CsrMatrix, Matrix};
use crate::optim::{glorot_init, l2_penalty, AdamState};

/// Raw parameter whose softplus equals 1.
pub const THETA_INIT: f64 = 0.541_324_854_612_918_1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMode {
    /// One free parameter per undirected edge.
    Free,
    /// `softplus(x_iᵀ H x_j)` with a learned feature kernel `H`.
    Kernel,
}

/// Every knob of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_gcn_layers: usize,
    pub n_lpa_iters: usize,
    pub l2_weight: f64,
    pub lambda: f64,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub lpa_label_ratio: f64,
    pub edge_mode: EdgeMode,
    /// When false the edge weights stay at their initial value and receive no
    /// updates; with `lambda = 0` this is a plain GCN.
    pub learn_edges: bool,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub init: WeightInit,
}

impl ModelConfig {
    fn row(
        hidden: usize,
        layers: usize,
        iters: usize,
        l2: f64,
        lambda: f64,
        dropout: f64,
        lr: f64,
    ) -> Self {
        Self {
            hidden_dim: hidden,
            n_gcn_layers: layers,
            n_lpa_iters: iters,
            l2_weight: l2,
            lambda,
            dropout_rate: dropout,
            learning_rate: lr,
            epochs: 200,
            seed: 0,
            lpa_label_ratio: 1.0,
            edge_mode: EdgeMode::Free,
            learn_edges: true,
            activation: Activation::Relu,
            init: WeightInit::Glorot,
        }
    }

    pub fn cora() -> Self {
        Self::row(32, 5, 5, 1e-4, 10.0, 0.2, 0.05)
    }

    pub fn citeseer() -> Self {
        Self::row(16, 2, 5, 5e-4, 1.0, 0.0, 0.2)
    }

    pub fn pubmed() -> Self {
        Self::row(32, 2, 1, 2e-4, 1.0, 0.0, 0.1)
    }

    pub fn coauthor_cs() -> Self {
        Self::row(32, 2, 2, 1e-4, 2.0, 0.2, 0.1)
    }

    pub fn coauthor_phy() -> Self {
        Self::row(32, 2, 3, 1e-4, 1.0, 0.2, 0.05)
    }

    /// Two-dimensional hidden and output layers for plotting, sigmoid
    /// activations and weights uniform in `[-1, 1]`.
    pub fn karate() -> Self {
        Self {
            activation: Activation::Sigmoid,
            init: WeightInit::Uniform(1.0),
            ..Self::row(2, 2, 5, 5e-4, 1.0, 0.0, 0.1)
        }
    }

    /// Defaults keyed by dataset name; unknown names get the Citeseer row.
    pub fn for_dataset(name: &str) -> Self {
        match name.to_ascii_lowercase().replace(['_', ' '], "-").as_str() {
            "cora" => Self::cora(),
            "pubmed" => Self::pubmed(),
            "coauthor-cs" => Self::coauthor_cs(),
            "coauthor-phy" | "coauthor-physics" => Self::coauthor_phy(),
            "karate" => Self::karate(),
            _ => Self::citeseer(),
        }
    }

    /// Same settings as a plain GCN: no propagation loss, frozen weights.
    pub fn as_gcn(mut self) -> Self {
        self.lambda = 0.0;
        self.learn_edges = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.n_gcn_layers == 0 || self.hidden_dim == 0 {
            return bad("need at least one layer and a positive hidden size".into());
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.lambda > 0.0 && self.n_lpa_iters == 0 {
            return bad("lpa iterations must be >= 1 when lambda > 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.l2_weight >= 0.0) {
            return bad(format!("l2 weight must be >= 0, got {}", self.l2_weight));
        }
        if !(0.0..=1.0).contains(&self.lpa_label_ratio) {
            return bad(format!(
                "lpa label ratio must be in [0, 1], got {}",
                self.lpa_label_ratio
            ));
        }
        Ok(())
    }
}

/// Learnable edge-weight mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeightParams {
    pub mode: EdgeMode,
    /// Raw value per undirected edge uid (`n_undirected_edges × 1`).
    pub theta: Matrix,
    /// Feature kernel, present in kernel mode.
    pub kernel: Option<Matrix>,
}

impl EdgeWeightParams {
    pub fn init(
        graph: &SparseGraph,
        feature_dim: usize,
        mode: EdgeMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let kernel = match mode {
            EdgeMode::Free => None,
            EdgeMode::Kernel => Some(glorot_init(feature_dim, feature_dim, rng)?),
        };
        Ok(Self {
            mode,
            theta: Matrix::filled(graph.n_undirected_edges(), 1, THETA_INIT),
            kernel,
        })
    }
}

/// All trainable state of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub gcn: GcnParams,
    pub edges: EdgeWeightParams,
    pub activation: Activation,
}

impl ModelParams {
    pub fn init(dataset: &Dataset, config: &ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::init_with(dataset, config, &mut rng)
    }

    fn init_with(dataset: &Dataset, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let gcn = GcnParams::init_with(
            dataset.feature_dim(),
            config.hidden_dim,
            dataset.n_classes,
            config.n_gcn_layers,
            config.init,
            rng,
        )?;
        let edges =
            EdgeWeightParams::init(&dataset.graph, dataset.feature_dim(), config.edge_mode, rng)?;
        Ok(Self {
            gcn,
            edges,
            activation: config.activation,
        })
    }
}

/// Positive weight per undirected edge uid.
pub fn effective_weights(
    edges: &EdgeWeightParams,
    graph: &SparseGraph,
    features: &CsrMatrix,
) -> Vec<f64> {
    match (&edges.mode, &edges.kernel) {
        (EdgeMode::Kernel, Some(h)) => (0..graph.n_undirected_edges())
            .map(|u| {
                let (i, j) = graph.endpoints(u);
                softplus(features.bilinear(i, h, j))
            })
            .collect(),
        _ => edges.theta.data().iter().map(|&t| softplus(t)).collect(),
    }
}

/// Parameters placed on a tape, plus the shared operator built from them.
#[derive(Debug, Clone)]
pub struct RecordedParams {
    pub weights: Vec<Tensor>,
    /// The edge tensor that receives gradient: `theta` or `H`.
    pub edge_param: Tensor,
    pub edge_weights: Tensor,
    pub values: Tensor,
}

pub fn record_params(
    tape: &mut Tape,
    dataset: &Dataset,
    features: &Arc<CsrMatrix>,
    params: &ModelParams,
    learn_edges: bool,
) -> Result<RecordedParams> {
    let weights = params
        .gcn
        .weights
        .iter()
        .map(|w| tape.leaf(w.clone()))
        .collect();
    let place = |tape: &mut Tape, m: &Matrix| {
        if learn_edges {
            tape.leaf(m.clone())
        } else {
            tape.constant(m.clone())
        }
    };
    let (edge_param, raw) = match (&params.edges.mode, &params.edges.kernel) {
        (EdgeMode::Kernel, Some(h)) => {
            let hv = place(tape, h);
            let raw = tape.edge_bilinear(Arc::clone(features), &dataset.graph, hv)?;
            (hv, raw)
        }
        (EdgeMode::Kernel, None) => {
            return Err(Error::invalid("kernel mode without a kernel matrix"))
        }
        (EdgeMode::Free, _) => {
            let t = place(tape, &params.edges.theta);
            (t, t)
        }
    };
    let edge_weights = tape.softplus(raw);
    let values = tape.normalize(&dataset.graph, edge_weights)?;
    Ok(RecordedParams {
        weights,
        edge_param,
        edge_weights,
        values,
    })
}

/// Handles to each term of the joint objective.
#[derive(Debug, Clone)]
pub struct JointLoss {
    pub total: Tensor,
    pub gcn: Tensor,
    /// Absent when `lambda = 0`; the term is then skipped entirely.
    pub lpa: Option<Tensor>,
    pub l2: Tensor,
    pub params: RecordedParams,
    pub output: GcnOutput,
}

/// `L_gcn + λ·L_lpa + l2 · Σ‖W‖²` on the training nodes. Dropout draws from
/// `rng`; `clamp` selects the propagation sources.
pub fn joint_loss(
    tape: &mut Tape,
    dataset: &Dataset,
    params: &ModelParams,
    config: &ModelConfig,
    clamp: &[bool],
    rng: &mut ChaCha8Rng,
) -> Result<JointLoss> {
    let split = dataset.split()?;
    let features = Arc::new(dataset.features.clone());
    joint_loss_with(
        tape,
        dataset,
        &features,
        params,
        config,
        clamp,
        &split.train_mask,
        rng,
    )
}

#[allow(clippy::too_many_arguments)]
fn joint_loss_with(
    tape: &mut Tape,
    dataset: &Dataset,
    features: &Arc<CsrMatrix>,
    params: &ModelParams,
    config: &ModelConfig,
    clamp: &[bool],
    train_mask: &[bool],
    rng: &mut ChaCha8Rng,
) -> Result<JointLoss> {
    let rec = record_params(tape, dataset, features, params, config.learn_edges)?;
    let output = gcn_forward(
        tape,
        &dataset.graph,
        rec.values,
        features,
        &rec.weights,
        params.activation,
        config.dropout_rate,
        true,
        rng,
    )?;
    let gcn = tape.masked_softmax_cross_entropy(output.logits(), &dataset.labels, train_mask)?;
    let l2 = l2_penalty(tape, &rec.weights, config.l2_weight)?;
    let mut total = tape.add(gcn, l2)?;
    let lpa = if config.lambda > 0.0 {
        let l = propagation_loss(
            tape,
            &dataset.graph,
            rec.values,
            &dataset.labels,
            dataset.n_classes,
            clamp,
            train_mask,
            config.n_lpa_iters,
        )?;
        let scaled = tape.scale(l, config.lambda);
        total = tape.add(total, scaled)?;
        Some(l)
    } else {
        None
    };
    Ok(JointLoss {
        total,
        gcn,
        lpa,
        l2,
        params: rec,
        output,
    })
}

/// Layer representations with dropout off: activated hidden layers, then the
/// logits.
pub fn forward_eval(dataset: &Dataset, params: &ModelParams) -> Result<Vec<Matrix>> {
    let features = Arc::new(dataset.features.clone());
    forward_eval_with(dataset, &features, params)
}

fn forward_eval_with(
    dataset: &Dataset,
    features: &Arc<CsrMatrix>,
    params: &ModelParams,
) -> Result<Vec<Matrix>> {
    let mut tape = Tape::new();
    let rec = record_params(&mut tape, dataset, features, params, false)?;
    let weights: Vec<Tensor> = params
        .gcn
        .weights
        .iter()
        .map(|w| tape.constant(w.clone()))
        .collect();
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let out = gcn_forward(
        &mut tape,
        &dataset.graph,
        rec.values,
        features,
        &weights,
        params.activation,
        0.0,
        false,
        &mut unused,
    )?;
    Ok(out.layers.iter().map(|&t| tape.value(t).clone()).collect())
}

/// Accuracy on `mask` with dropout off.
pub fn evaluate(dataset: &Dataset, params: &ModelParams, mask: &[bool]) -> Result<f64> {
    let layers = forward_eval(dataset, params)?;
    let pred = predict(layers.last().expect("at least one layer"))?;
    masked_accuracy(&pred, &dataset.labels, mask)
}

/// Metrics of one epoch, in the order they are serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub lpa_loss: Option<f64>,
    pub gcn_loss: f64,
    /// Wall-clock time of the epoch; only serialized when timing output is
    /// requested, so metric files stay reproducible.
    pub epoch_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

impl TrainReport {
    /// Mean wall-clock milliseconds per epoch.
    pub fn mean_epoch_ms(&self) -> f64 {
        let total: f64 = self.epochs.iter().filter_map(|e| e.epoch_ms).sum();
        total / self.epochs.len().max(1) as f64
    }

    /// One JSON object per epoch. Timings are written as `null` unless
    /// `with_timing` is set.
    pub fn to_jsonl(&self, with_timing: bool) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            let mut e = e.clone();
            if !with_timing {
                e.epoch_ms = None;
            }
            out.push_str(&serde_json::to_string(&e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// A finished run: the report and the parameters from the best epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub params: ModelParams,
}

/// Seed for the propagation-source subset, kept apart from the init and
/// dropout stream.
fn clamp_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Full-batch Adam on the joint loss, evaluating after every step and
/// keeping the parameters with the best validation accuracy (earliest on
/// ties).
pub fn train(dataset: &Dataset, config: &ModelConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let split = dataset.split()?.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init_with(dataset, config, &mut rng)?;
    let clamp = lpa_clamp_subset(
        &split.train_mask,
        config.lpa_label_ratio,
        clamp_seed(config.seed),
    )?;
    let features = Arc::new(dataset.features.clone());

    let mut shapes: Vec<(usize, usize)> = params.gcn.weights.iter().map(Matrix::shape).collect();
    if config.learn_edges {
        shapes.push(edge_matrix(&params.edges).shape());
    }
    let mut adam = AdamState::new(config.learning_rate, &shapes);

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, f64, f64, ModelParams)> = None;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut tape = Tape::new();
        let loss = joint_loss_with(
            &mut tape,
            dataset,
            &features,
            &params,
            config,
            &clamp,
            &split.train_mask,
            &mut rng,
        )?;
        let (total, gcn_loss) = (tape.scalar(loss.total), tape.scalar(loss.gcn));
        let lpa_loss = loss.lpa.map(|t| tape.scalar(t));
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                gcn_loss,
                lpa_loss: lpa_loss.unwrap_or(0.0),
                l2: tape.scalar(loss.l2),
            });
        }
        tape.backward(loss.total)?;
        let zero_grads: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        let mut grads: Vec<&Matrix> = loss
            .params
            .weights
            .iter()
            .enumerate()
            .map(|(k, &w)| tape.grad(w).unwrap_or(&zero_grads[k]))
            .collect();
        if config.learn_edges {
            let k = grads.len();
            grads.push(tape.grad(loss.params.edge_param).unwrap_or(&zero_grads[k]));
        }
        {
            let edge_slot = edge_matrix_mut(&mut params.edges);
            let mut targets: Vec<&mut Matrix> = params.gcn.weights.iter_mut().collect();
            if config.learn_edges {
                targets.push(edge_slot);
            }
            adam.step(&mut targets, &grads)?;
        }

        let layers = forward_eval_with(dataset, &features, &params)?;
        let pred = predict(layers.last().expect("at least one layer"))?;
        let train_acc = masked_accuracy(&pred, &dataset.labels, &split.train_mask)?;
        let val_acc = masked_accuracy(&pred, &dataset.labels, &split.val_mask).unwrap_or(0.0);
        let test_acc = masked_accuracy(&pred, &dataset.labels, &split.test_mask).unwrap_or(0.0);
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        epochs.push(EpochMetrics {
            epoch,
            train_loss: total,
            train_acc,
            val_acc,
            test_acc,
            lpa_loss,
            gcn_loss,
            epoch_ms: Some(elapsed),
        });
        if best.as_ref().is_none_or(|b| val_acc > b.1) {
            best = Some((epoch, val_acc, train_acc, test_acc, params.clone()));
        }
    }
    let (best_epoch, best_val_acc, train_acc, test_acc, best_params) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        report: TrainReport {
            epochs,
            best_epoch,
            best_val_acc,
            train_acc,
            test_acc,
        },
        params: best_params,
    })
}

fn edge_matrix(edges: &EdgeWeightParams) -> &Matrix {
    match (&edges.mode, &edges.kernel) {
        (EdgeMode::Kernel, Some(h)) => h,
        _ => &edges.theta,
    }
}

fn edge_matrix_mut(edges: &mut EdgeWeightParams) -> &mut Matrix {
    match (edges.mode, &mut edges.kernel) {
        (EdgeMode::Kernel, Some(h)) => h,
        _ => &mut edges.theta,
    }
}

/// Writes `node<TAB>label<TAB>v1<TAB>…` for the representation after layer
/// `layer_index` (0-based; the last layer is the logits). Unlabeled nodes get
/// label `-1`.
pub fn export_embeddings(
    dataset: &Dataset,
    params: &ModelParams,
    layer_index: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let layers = forward_eval(dataset, params)?;
    let m = layers.get(layer_index).ok_or(Error::OutOfBounds {
        what: "layer",
        index: layer_index,
        limit: layers.len(),
    })?;
    let path = path.as_ref();
    std::fs::write(path, embeddings_tsv(m, &dataset.labels)).map_err(|e| Error::io(path, e))
}

pub fn embeddings_tsv(m: &Matrix, labels: &[Option<usize>]) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let label = labels[i].map_or(-1, |l| l as i64);
        let _ = write!(out, "{i}\t{label}");
        for v in m.row(i) {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{numerical, rel_err};
    use crate::graph::{karate_club, Split};

    fn with_full_split(mut ds: Dataset, train: &[usize]) -> Dataset {
        let n = ds.n_nodes();
        let mut split = Split {
            train_mask: vec![false; n],
            val_mask: vec![false; n],
            test_mask: vec![false; n],
            seed: 0,
        };
        for i in 0..n {
            if train.contains(&i) {
                split.train_mask[i] = true;
            } else if i % 2 == 0 {
                split.val_mask[i] = true;
            } else {
                split.test_mask[i] = true;
            }
        }
        ds.split = Some(split);
        ds
    }

    fn dumbbell() -> Dataset {
        // two 4-cliques of different classes joined by 3–4
        let mut edges = Vec::new();
        for base in [0, 4] {
            for i in 0..4 {
                for j in i + 1..4 {
                    edges.push((base + i, base + j));
                }
            }
        }
        edges.push((3, 4));
        let n = 8;
        let feats = Matrix::from_vec(
            n,
            2,
            (0..n).flat_map(|i| [1.0, (i % 3) as f64 * 0.5]).collect(),
        )
        .unwrap();
        Dataset {
            name: "dumbbell".into(),
            graph: Arc::new(SparseGraph::from_edges(n, edges).unwrap()),
            features: CsrMatrix::from_dense(&feats),
            labels: (0..n).map(|i| Some(usize::from(i >= 4))).collect(),
            n_classes: 2,
            split: None,
        }
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            hidden_dim: 3,
            n_gcn_layers: 2,
            n_lpa_iters: 2,
            l2_weight: 1e-3,
            lambda: 1.0,
            dropout_rate: 0.0,
            learning_rate: 0.05,
            epochs: 10,
            seed: 3,
            lpa_label_ratio: 1.0,
            edge_mode: EdgeMode::Free,
            learn_edges: true,
            activation: Activation::Relu,
            init: WeightInit::Glorot,
        }
    }

    #[test]
    fn theta_init_gives_unit_weight() {
        assert!((softplus(THETA_INIT) - 1.0).abs() < 1e-12);
        assert!((THETA_INIT - (std::f64::consts::E - 1.0).ln()).abs() < 1e-15);
        assert!(softplus(-700.0) > 0.0);
    }

    #[test]
    fn zero_kernel_gives_ln2_everywhere() {
        let k = karate_club();
        let edges = EdgeWeightParams {
            mode: EdgeMode::Kernel,
            theta: Matrix::zeros(k.graph.n_undirected_edges(), 1),
            kernel: Some(Matrix::zeros(34, 34)),
        };
        let w = effective_weights(&edges, &k.graph, &k.features);
        assert!(w
            .iter()
            .all(|&v| (v - std::f64::consts::LN_2).abs() < 1e-15));
    }

    #[test]
    fn lambda_zero_is_gcn_plus_l2() {
        let ds = with_full_split(dumbbell(), &[0, 1, 5, 6]);
        let params = ModelParams::init(&ds, &small_config()).unwrap();
        let mut cfg = small_config();
        cfg.lambda = 0.0;
        let mut t = Tape::new();
        let l = joint_loss(
            &mut t,
            &ds,
            &params,
            &cfg,
            &ds.split().unwrap().train_mask.clone(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!(l.lpa.is_none());
        assert_eq!(t.scalar(l.total), t.scalar(l.gcn) + t.scalar(l.l2));
    }

    #[test]
    fn disconnected_same_label_cliques_have_tiny_lpa_loss() {
        let mut edges = Vec::new();
        for base in [0, 3] {
            edges.extend([(base, base + 1), (base + 1, base + 2), (base, base + 2)]);
        }
        let ds = Dataset {
            name: "cliques".into(),
            graph: Arc::new(SparseGraph::from_edges(6, edges).unwrap()),
            features: CsrMatrix::identity(6),
            labels: [0, 0, 0, 1, 1, 1].iter().map(|&c| Some(c)).collect(),
            n_classes: 2,
            split: None,
        };
        let ds = with_full_split(ds, &[0, 1, 2, 3, 4, 5]);
        let mut cfg = small_config();
        cfg.n_lpa_iters = 1;
        let params = ModelParams::init(&ds, &cfg).unwrap();
        let mut t = Tape::new();
        let clamp = ds.split().unwrap().train_mask.clone();
        let l = joint_loss(
            &mut t,
            &ds,
            &params,
            &cfg,
            &clamp,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let lpa = t.scalar(l.lpa.unwrap());
        assert!(lpa < 1e-10);
        assert!((t.scalar(l.total) - t.scalar(l.gcn) - t.scalar(l.l2)).abs() < 1e-9);
    }

    fn loss_value(ds: &Dataset, params: &ModelParams, cfg: &ModelConfig) -> f64 {
        let clamp = ds.split().unwrap().train_mask.clone();
        let mut t = Tape::new();
        let l = joint_loss(
            &mut t,
            ds,
            params,
            cfg,
            &clamp,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        t.scalar(l.total)
    }

    fn check_joint_gradients(mode: EdgeMode, activation: Activation) {
        let ds = with_full_split(dumbbell(), &[0, 1, 3, 5, 6]);
        let mut cfg = small_config();
        cfg.edge_mode = mode;
        cfg.activation = activation;
        let mut params = ModelParams::init(&ds, &cfg).unwrap();
        // move theta off the symmetric start so every edge gradient differs
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for v in params.edges.theta.data_mut() {
            *v += rand::Rng::gen_range(&mut rng, -0.5..0.5);
        }
        let clamp = ds.split().unwrap().train_mask.clone();
        let mut t = Tape::new();
        let l = joint_loss(
            &mut t,
            &ds,
            &params,
            &cfg,
            &clamp,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        t.backward(l.total).unwrap();
        for (k, &w) in l.params.weights.iter().enumerate() {
            let num = numerical(&params.gcn.weights[k], 1e-5, |m| {
                let mut p = params.clone();
                p.gcn.weights[k] = m.clone();
                loss_value(&ds, &p, &cfg)
            });
            assert!(rel_err(t.grad(w).unwrap(), &num) <= 1e-4);
        }
        let edge = edge_matrix(&params.edges).clone();
        let num = numerical(&edge, 1e-5, |m| {
            let mut p = params.clone();
            *edge_matrix_mut(&mut p.edges) = m.clone();
            loss_value(&ds, &p, &cfg)
        });
        assert!(rel_err(t.grad(l.params.edge_param).unwrap(), &num) <= 1e-4);
    }

    #[test]
    fn joint_gradient_free_mode() {
        check_joint_gradients(EdgeMode::Free, Activation::Relu);
    }

    #[test]
    fn joint_gradient_sigmoid_activation() {
        check_joint_gradients(EdgeMode::Free, Activation::Sigmoid);
    }

    #[test]
    fn joint_gradient_kernel_mode() {
        check_joint_gradients(EdgeMode::Kernel, Activation::Relu);
    }

    #[test]
    fn lpa_term_alone_reaches_theta() {
        // 3 and 4 sit on the bridge, so both classes reach them
        let ds = with_full_split(dumbbell(), &[0, 3, 4, 7]);
        let cfg = small_config();
        let params = ModelParams::init(&ds, &cfg).unwrap();
        let clamp = ds.split().unwrap().train_mask.clone();
        let mut t = Tape::new();
        let l = joint_loss(
            &mut t,
            &ds,
            &params,
            &cfg,
            &clamp,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        t.backward(l.lpa.unwrap()).unwrap();
        let g = t.grad(l.params.edge_param).unwrap();
        assert!(g.data().iter().any(|v| v.abs() > 1e-8));
        assert!(l.params.weights.iter().all(|&w| t.grad(w).is_none()));
    }

    #[test]
    fn frozen_edges_without_lambda_match_gcn_bitwise() {
        let mut ds = karate_club();
        let split = crate::graph::make_split(&ds, (0.6, 0.2, 0.2), 1).unwrap();
        ds.split = Some(split);
        let mut a = ModelConfig::karate();
        a.epochs = 15;
        a.lambda = 0.0;
        a.learn_edges = false;
        let b = ModelConfig::karate().as_gcn();
        let b = ModelConfig { epochs: 15, ..b };
        let ra = train(&ds, &a).unwrap();
        let rb = train(&ds, &b).unwrap();
        let la: Vec<f64> = ra.report.epochs.iter().map(|e| e.train_loss).collect();
        let lb: Vec<f64> = rb.report.epochs.iter().map(|e| e.train_loss).collect();
        assert_eq!(la, lb);
        assert_eq!(
            ra.params.edges.theta,
            Matrix::filled(ds.graph.n_undirected_edges(), 1, THETA_INIT)
        );
    }

    #[test]
    fn dumbbell_training_strengthens_intra_class_edges() {
        let ds = with_full_split(dumbbell(), &[0, 1, 2, 3, 4, 5, 6, 7]);
        let mut cfg = small_config();
        cfg.epochs = 100;
        cfg.lambda = 5.0;
        let out = train(&ds, &cfg).unwrap();
        let w = effective_weights(&out.params.edges, &ds.graph, &ds.features);
        let (mut intra, mut count, mut inter) = (0.0, 0, 0.0);
        for u in 0..ds.graph.n_undirected_edges() {
            let (a, b) = ds.graph.endpoints(u);
            if a == b {
                continue;
            }
            if ds.labels[a] == ds.labels[b] {
                intra += w[u];
                count += 1;
            } else {
                inter = w[u];
            }
        }
        assert!(
            intra / count as f64 > inter,
            "intra={} inter={inter}",
            intra / count as f64
        );
    }

    #[test]
    fn training_is_deterministic_and_snapshot_matches_report() {
        let mut ds = karate_club();
        ds.split = Some(crate::graph::make_split(&ds, (0.6, 0.2, 0.2), 4).unwrap());
        let cfg = ModelConfig {
            epochs: 30,
            ..ModelConfig::karate()
        };
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(
            a.report.to_jsonl(false).unwrap(),
            b.report.to_jsonl(false).unwrap()
        );
        let split = ds.split().unwrap();
        assert_eq!(
            evaluate(&ds, &a.params, &split.test_mask).unwrap(),
            a.report.test_acc
        );
        assert_eq!(
            evaluate(&ds, &a.params, &split.val_mask).unwrap(),
            a.report.best_val_acc
        );
        let best = &a.report.epochs[a.report.best_epoch - 1];
        assert!(a
            .report
            .epochs
            .iter()
            .take(a.report.best_epoch - 1)
            .all(|e| e.val_acc < best.val_acc));
    }

    #[test]
    fn untrained_accuracy_is_near_chance() {
        let mut ds = karate_club();
        ds.split = Some(crate::graph::make_split(&ds, (0.6, 0.2, 0.2), 0).unwrap());
        let all = vec![true; 34];
        let mean: f64 = (0..20)
            .map(|s| {
                let cfg = ModelConfig {
                    seed: s,
                    ..ModelConfig::karate()
                };
                evaluate(&ds, &ModelParams::init(&ds, &cfg).unwrap(), &all).unwrap()
            })
            .sum::<f64>()
            / 20.0;
        assert!((mean - 0.5).abs() <= 0.15, "mean={mean}");
    }

    #[test]
    fn embeddings_have_expected_shape() {
        let mut ds = karate_club();
        ds.split = Some(crate::graph::make_split(&ds, (0.6, 0.2, 0.2), 0).unwrap());
        let params = ModelParams::init(&ds, &ModelConfig::karate()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        export_embeddings(&ds, &params, 1, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 34);
        assert!(text.lines().all(|l| l.split('\t').count() == 4));
        assert!(export_embeddings(&ds, &params, 2, &path).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::cora().validate().is_ok());
        assert!(ModelConfig {
            epochs: 0,
            ..ModelConfig::cora()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            lambda: -1.0,
            ..ModelConfig::cora()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            lpa_label_ratio: 1.5,
            ..ModelConfig::cora()
        }
        .validate()
        .is_err());
        assert_eq!(ModelConfig::for_dataset("Cora"), ModelConfig::cora());
        assert_eq!(
            ModelConfig::for_dataset("something-else"),
            ModelConfig::citeseer()
        );
    }
}
