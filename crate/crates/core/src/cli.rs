//! Command-line front end: `train`, `verify`, `bench` and `karate`.
//!
//! Every file a command writes depends only on its flags and seed. Timings
//! go to stdout unless `--timing` asks for them in the metrics file too.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::masked_accuracy;
use crate::graph::{
    add_noise_edges, karate_club, load_dataset, make_split, synth_random_graph, uniform_weights,
    Dataset, Split,
};
use crate::lpa::{lpa_infer, DEFAULT_INFER_ITERS};
use crate::oracles::{
    sweep_lemma1, sweep_lemma2, sweep_theorem1, sweep_theorem2, sweep_theorem3, sweep_theorem4,
    CheckSummary,
};
use crate::probe::probe_accuracy;
use crate::unified::{
    evaluate, export_embeddings, forward_eval, train, EdgeMode, ModelConfig, ModelParams,
    TrainReport,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "graphflow",
    version,
    about = "GCN, label propagation and their joint training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write metrics.jsonl and manifest.json.
    Train(TrainArgs),
    /// Run the small-graph oracle sweeps.
    Verify(VerifyArgs),
    /// Time GCN against GCN-LPA on random graphs.
    Bench(BenchArgs),
    /// Karate-club embeddings and linear-probe accuracy.
    Karate(KarateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Gcn,
    Lpa,
    GcnLpa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Builtin {
    Karate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EdgeModeArg {
    Free,
    Kernel,
}

impl From<EdgeModeArg> for EdgeMode {
    fn from(m: EdgeModeArg) -> Self {
        match m {
            EdgeModeArg::Free => EdgeMode::Free,
            EdgeModeArg::Kernel => EdgeMode::Kernel,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset directory (meta.json, edges.tsv, features.tsv, labels.tsv).
    #[arg(long, conflicts_with = "builtin", required_unless_present_any = ["builtin", "manifest"])]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub builtin: Option<Builtin>,
    /// Re-run the command recorded in a manifest.json.
    #[arg(long, conflicts_with_all = ["data", "builtin"])]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "gcn-lpa")]
    pub model: ModelKind,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Propagation rounds in the loss, or for `--model lpa` the inference
    /// rounds (default 20).
    #[arg(long)]
    pub lpa_iters: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train, validation and test fractions of the labeled nodes.
    #[arg(long, default_value = "0.6,0.2,0.2", value_parser = parse_split)]
    pub split: SplitRatios,
    #[arg(long)]
    pub lpa_label_ratio: Option<f64>,
    #[arg(long, value_enum)]
    pub edge_mode: Option<EdgeModeArg>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Write the representation after this layer (default: the logits).
    #[arg(long, num_args = 0..=1, default_missing_value = "-1", allow_negative_numbers = true)]
    pub emit_embeddings: Option<i64>,
    /// Keep the raw feature rows instead of scaling each to unit sum.
    #[arg(long)]
    pub raw_features: bool,
    /// Also record per-epoch wall-clock times in metrics.jsonl.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios(pub f64, pub f64, pub f64);

fn parse_split(s: &str) -> std::result::Result<SplitRatios, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad ratio {p:?}: {e}"))
        })
        .collect::<std::result::Result<_, _>>()?;
    let [a, b, c] = parts[..] else {
        return Err(format!(
            "expected three comma-separated ratios, got {}",
            parts.len()
        ));
    };
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return Err("ratios must be positive".into());
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(format!("ratios must sum to 1, got {}", a + b + c));
    }
    Ok(SplitRatios(a, b, c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Lemmas,
    Theorems,
    All,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    /// Monte-Carlo trials per expected-influence query.
    #[arg(long, default_value_t = 100_000)]
    pub trials: usize,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Ascending node counts.
    #[arg(long, value_delimiter = ',', default_value = "10000")]
    pub nodes: Vec<usize>,
    #[arg(long, default_value_t = 5.0)]
    pub avg_degree: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct KarateArgs {
    /// Random inter-class edges added before training.
    #[arg(long, default_value_t = 0)]
    pub noise: usize,
    /// Layer counts to run, e.g. `2` or `1,2,3,4`.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub layers: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Leave the GCN at its random initialization.
    #[arg(long)]
    pub untrained: bool,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value = "karate_out")]
    pub out: PathBuf,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Canonical flags; `train --manifest` replays them.
    pub args: Vec<String>,
    pub model: ModelKind,
    pub config: Option<ModelConfig>,
    pub dataset: String,
    pub split: SplitRatios,
    pub seed: u64,
    pub outputs: Vec<String>,
    pub version: String,
}

/// Parses `argv` (program name first) and runs the command; returns the
/// process exit code.
pub fn run_from<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let out = std::io::stdout();
    let mut out = out.lock();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, &mut out),
        Command::Verify(a) => cmd_verify(&a, &mut out),
        Command::Bench(a) => cmd_bench(&a, &mut out),
        Command::Karate(a) => cmd_karate(&a, &mut out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::InvalidArgument(_)) {
                2
            } else {
                1
            }
        }
    }
}

impl TrainArgs {
    fn dataset_label(&self) -> String {
        match (&self.data, self.builtin) {
            (Some(p), _) => p.display().to_string(),
            (None, Some(Builtin::Karate)) => "builtin:karate".into(),
            _ => String::new(),
        }
    }

    fn dataset_name(&self) -> String {
        match (&self.data, self.builtin) {
            (Some(p), _) => p
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            _ => "karate".into(),
        }
    }

    /// Dataset defaults with any explicit flag on top.
    pub fn resolve_config(&self) -> ModelConfig {
        let mut c = ModelConfig::for_dataset(&self.dataset_name());
        c.hidden_dim = self.hidden.unwrap_or(c.hidden_dim);
        c.n_gcn_layers = self.layers.unwrap_or(c.n_gcn_layers);
        c.n_lpa_iters = self.lpa_iters.unwrap_or(c.n_lpa_iters);
        c.lambda = self.lambda.unwrap_or(c.lambda);
        c.dropout_rate = self.dropout.unwrap_or(c.dropout_rate);
        c.learning_rate = self.lr.unwrap_or(c.learning_rate);
        c.l2_weight = self.l2.unwrap_or(c.l2_weight);
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c.lpa_label_ratio = self.lpa_label_ratio.unwrap_or(c.lpa_label_ratio);
        c.edge_mode = self.edge_mode.map_or(c.edge_mode, EdgeMode::from);
        c.seed = self.seed;
        if self.model == ModelKind::Gcn {
            c = c.as_gcn();
        }
        c
    }

    /// Flags that rebuild this exact run, minus `--out`.
    fn canonical_args(&self, config: &ModelConfig) -> Vec<String> {
        let mut a = Vec::new();
        match (&self.data, self.builtin) {
            (Some(p), _) => a.extend(["--data".into(), p.display().to_string()]),
            _ => a.extend(["--builtin".into(), "karate".into()]),
        }
        let model = self
            .model
            .to_possible_value()
            .expect("not skipped")
            .get_name()
            .to_owned();
        let SplitRatios(tr, va, te) = self.split;
        let mut push = |k: &str, v: String| {
            a.push(format!("--{k}"));
            a.push(v);
        };
        push("model", model);
        push("seed", self.seed.to_string());
        push("split", format!("{tr},{va},{te}"));
        if self.model == ModelKind::Lpa {
            push(
                "lpa-iters",
                self.lpa_iters.unwrap_or(DEFAULT_INFER_ITERS).to_string(),
            );
        } else {
            push("layers", config.n_gcn_layers.to_string());
            push("hidden", config.hidden_dim.to_string());
            push("lpa-iters", config.n_lpa_iters.to_string());
            push("lambda", config.lambda.to_string());
            push("dropout", config.dropout_rate.to_string());
            push("lr", config.learning_rate.to_string());
            push("l2", config.l2_weight.to_string());
            push("epochs", config.epochs.to_string());
            push("lpa-label-ratio", config.lpa_label_ratio.to_string());
            let mode = match config.edge_mode {
                EdgeMode::Free => "free",
                EdgeMode::Kernel => "kernel",
            };
            push("edge-mode", mode.into());
            if let Some(l) = self.emit_embeddings {
                push("emit-embeddings", l.to_string());
            }
        }
        if self.raw_features {
            a.push("--raw-features".into());
        }
        if self.timing {
            a.push("--timing".into());
        }
        a
    }
}

fn load_train_dataset(args: &TrainArgs) -> Result<Dataset> {
    let ds = match (&args.data, args.builtin) {
        (Some(dir), _) => {
            let ds = load_dataset(dir)?;
            if args.raw_features {
                ds
            } else {
                ds.with_row_normalized_features()?
            }
        }
        (None, Some(Builtin::Karate)) => karate_club(),
        _ => return Err(Error::invalid("one of --data or --builtin is required")),
    };
    let SplitRatios(tr, va, te) = args.split;
    let split = make_split(&ds, (tr, va, te), args.seed)?;
    Ok(ds.with_split(split))
}

fn replay_manifest(path: &Path, out: &Path, w: &mut impl std::io::Write) -> Result<i32> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    if manifest.command != "train" {
        return Err(Error::invalid(format!(
            "cannot replay a {:?} manifest",
            manifest.command
        )));
    }
    let mut argv = vec!["graphflow".to_string(), "train".to_string()];
    argv.extend(manifest.args);
    argv.extend(["--out".to_string(), out.display().to_string()]);
    let cli = Cli::try_parse_from(&argv)
        .map_err(|e| Error::invalid(format!("manifest flags rejected: {e}")))?;
    match cli.command {
        Command::Train(a) => cmd_train(a, w),
        _ => unreachable!("argv starts with train"),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

pub fn cmd_train(args: TrainArgs, w: &mut impl std::io::Write) -> Result<i32> {
    if let Some(m) = &args.manifest {
        return replay_manifest(m, &args.out, w);
    }
    let config = args.resolve_config();
    if args.model != ModelKind::Lpa {
        config.validate()?;
    }
    let ds = load_train_dataset(&args)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut outputs = vec!["metrics.jsonl".to_string(), "manifest.json".to_string()];

    let (test_acc, best_epoch) = if args.model == ModelKind::Lpa {
        let split = ds.split()?;
        let iters = args.lpa_iters.unwrap_or(DEFAULT_INFER_ITERS);
        let soft = lpa_infer(
            &ds.graph,
            &ds.labels,
            ds.n_classes,
            &split.train_mask,
            &uniform_weights(&ds.graph),
            iters,
        )?;
        let pred = soft.predict();
        let acc = |m: &[bool]| masked_accuracy(&pred, &ds.labels, m);
        let (tr, va, te) = (
            acc(&split.train_mask)?,
            acc(&split.val_mask)?,
            acc(&split.test_mask)?,
        );
        let line =
            serde_json::json!({"iters": iters, "train_acc": tr, "val_acc": va, "test_acc": te});
        write_file(&args.out.join("metrics.jsonl"), &format!("{line}\n"))?;
        (te, 0)
    } else {
        let outcome = train(&ds, &config)?;
        let report: &TrainReport = &outcome.report;
        write_file(
            &args.out.join("metrics.jsonl"),
            &report.to_jsonl(args.timing)?,
        )?;
        if let Some(layer) = args.emit_embeddings {
            let n_layers = config.n_gcn_layers as i64;
            let layer = if layer < 0 { n_layers + layer } else { layer };
            if !(0..n_layers).contains(&layer) {
                return Err(Error::invalid(format!(
                    "no layer {layer} in a {n_layers}-layer model"
                )));
            }
            let name = format!("embeddings_layer{layer}.tsv");
            export_embeddings(&ds, &outcome.params, layer as usize, args.out.join(&name))?;
            outputs.push(name);
        }
        writeln!(w, "mean_epoch_ms={:.3}", report.mean_epoch_ms()).map_err(io_err)?;
        (report.test_acc, report.best_epoch)
    };

    let manifest = RunManifest {
        command: "train".into(),
        args: args.canonical_args(&config),
        model: args.model,
        config: (args.model != ModelKind::Lpa).then(|| config.clone()),
        dataset: args.dataset_label(),
        split: args.split,
        seed: args.seed,
        outputs,
        version: VERSION.into(),
    };
    write_file(
        &args.out.join("manifest.json"),
        &(serde_json::to_string_pretty(&manifest)? + "\n"),
    )?;
    writeln!(w, "test_acc={test_acc:.4} best_epoch={best_epoch}").map_err(io_err)?;
    Ok(0)
}

/// Sweeps selected by `suite`, in a fixed order.
pub fn run_suite(
    suite: Suite,
    seed: u64,
    instances: usize,
    trials: usize,
) -> Result<Vec<CheckSummary>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Lemmas | Suite::All) {
        out.push(sweep_lemma1(seed, instances)?);
        out.push(sweep_lemma2(seed, instances)?);
    }
    if matches!(suite, Suite::Theorems | Suite::All) {
        out.push(sweep_theorem1(seed, instances)?);
        out.push(sweep_theorem2(seed, trials)?.0);
        out.push(sweep_theorem3(seed, instances)?);
        out.push(sweep_theorem4(seed, instances)?);
    }
    Ok(out)
}

pub fn cmd_verify(args: &VerifyArgs, w: &mut impl std::io::Write) -> Result<i32> {
    let checks = run_suite(args.suite, args.seed, args.instances, args.trials)?;
    for c in &checks {
        writeln!(w, "{}", serde_json::to_string(c)?).map_err(io_err)?;
    }
    Ok(if checks.iter().all(|c| c.pass) { 0 } else { 1 })
}

/// One benchmark row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub gcn_ms_per_epoch: f64,
    pub gcnlpa_ms_per_epoch: f64,
    pub overhead_pct: f64,
}

/// Times GCN and GCN-LPA with the Cora settings on one random graph.
pub fn bench_row(n: usize, avg_degree: f64, epochs: usize, seed: u64) -> Result<BenchRow> {
    let ds = synth_random_graph(n, avg_degree, seed)?;
    let split = make_split(&ds, (0.6, 0.2, 0.2), seed)?;
    let ds = ds.with_split(split);
    let joint = ModelConfig {
        epochs,
        seed,
        ..ModelConfig::cora()
    };
    let gcn = joint.clone().as_gcn();
    // untimed warm-up so neither model pays for first-touch allocation
    train(
        &ds,
        &ModelConfig {
            epochs: 2,
            ..joint.clone()
        },
    )?;
    let gcn_ms = train(&ds, &gcn)?.report.mean_epoch_ms();
    let joint_ms = train(&ds, &joint)?.report.mean_epoch_ms();
    Ok(BenchRow {
        n,
        gcn_ms_per_epoch: gcn_ms,
        gcnlpa_ms_per_epoch: joint_ms,
        overhead_pct: 100.0 * (joint_ms - gcn_ms) / gcn_ms,
    })
}

pub fn cmd_bench(args: &BenchArgs, w: &mut impl std::io::Write) -> Result<i32> {
    if args.nodes.is_empty() || args.nodes.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::invalid("--nodes must be a non-empty ascending list"));
    }
    writeln!(w, "n\tgcn_ms_per_epoch\tgcnlpa_ms_per_epoch\toverhead_pct").map_err(io_err)?;
    let mut failed = false;
    for &n in &args.nodes {
        match bench_row(n, args.avg_degree, args.epochs, args.seed) {
            Ok(r) => writeln!(
                w,
                "{}\t{:.3}\t{:.3}\t{:.2}",
                r.n, r.gcn_ms_per_epoch, r.gcnlpa_ms_per_epoch, r.overhead_pct
            ),
            Err(e) => {
                failed = true;
                writeln!(w, "{n}\terror: {e}\t\t")
            }
        }
        .map_err(io_err)?;
    }
    Ok(i32::from(failed))
}

/// Probe accuracy of one karate configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KarateResult {
    pub model: &'static str,
    pub layers: usize,
    pub noise: usize,
    pub trained: bool,
    pub train_acc: f64,
    pub probe_acc: f64,
}

/// Karate network with `noise` extra inter-class edges. Every member is
/// labeled and the embedding is fit to all of them, so train, validation and
/// test masks all cover the whole club.
pub fn karate_dataset(noise: usize, seed: u64) -> Result<Dataset> {
    let base = karate_club();
    let ds = if noise > 0 {
        add_noise_edges(&base, noise, seed)?
    } else {
        base
    };
    let all = vec![true; ds.n_nodes()];
    Ok(ds.with_split(Split {
        train_mask: all.clone(),
        val_mask: all.clone(),
        test_mask: all,
        seed,
    }))
}

/// Trains (or initializes) one model and probes its 2-D output embedding.
pub fn karate_run(
    ds: &Dataset,
    joint: bool,
    layers: usize,
    epochs: usize,
    seed: u64,
    trained: bool,
) -> Result<(KarateResult, ModelParams)> {
    let mut config = ModelConfig {
        n_gcn_layers: layers,
        epochs,
        seed,
        ..ModelConfig::karate()
    };
    if !joint {
        config = config.as_gcn();
    }
    let params = if trained || joint {
        train(ds, &config)?.params
    } else {
        ModelParams::init(ds, &config)?
    };
    let layer_out = forward_eval(ds, &params)?;
    let emb = layer_out.last().expect("at least one layer");
    let y: Vec<bool> = ds.labels.iter().map(|l| *l == Some(1)).collect();
    let result = KarateResult {
        model: if joint { "gcn-lpa" } else { "gcn" },
        layers,
        noise: ds.graph.n_non_loop_edges().saturating_sub(78),
        trained: trained || joint,
        train_acc: evaluate(ds, &params, &ds.split()?.train_mask)?,
        probe_acc: probe_accuracy(emb, &y)?,
    };
    Ok((result, params))
}

pub fn cmd_karate(args: &KarateArgs, w: &mut impl std::io::Write) -> Result<i32> {
    if args.layers.contains(&0) {
        return Err(Error::invalid("layer counts must be >= 1"));
    }
    let ds = karate_dataset(args.noise, args.seed)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for &layers in &args.layers {
        for joint in [false, true] {
            let (r, params) =
                karate_run(&ds, joint, layers, args.epochs, args.seed, !args.untrained)?;
            let file = format!("{}_layers{}.tsv", r.model, layers);
            export_embeddings(&ds, &params, layers - 1, args.out.join(&file))?;
            writeln!(
                w,
                "model={} layers={} noise={} trained={} train_acc={:.4} probe_acc={:.4} file={}",
                r.model, r.layers, args.noise, r.trained, r.train_acc, r.probe_acc, file
            )
            .map_err(io_err)?;
        }
    }
    Ok(0)
}
