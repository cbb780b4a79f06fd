use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SparseGraph;
use crate::error::{Error, Result};
use crate::matrix::CsrMatrix;

/// A graph with node features, (partial) labels and an optional split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub graph: Arc<SparseGraph>,
    pub features: CsrMatrix,
    /// Class index per node; `None` for unlabeled nodes.
    pub labels: Vec<Option<usize>>,
    pub n_classes: usize,
    pub split: Option<Split>,
}

/// Disjoint train/validation/test node masks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_mask: Vec<bool>,
    pub val_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
    pub seed: u64,
}

impl Split {
    pub fn train_count(&self) -> usize {
        self.train_mask.iter().filter(|&&b| b).count()
    }

    pub fn val_count(&self) -> usize {
        self.val_mask.iter().filter(|&&b| b).count()
    }

    pub fn test_count(&self) -> usize {
        self.test_mask.iter().filter(|&&b| b).count()
    }

    /// Random split with fixed train and validation sizes; every remaining
    /// labeled node goes to test.
    pub fn with_counts(dataset: &Dataset, n_train: usize, n_val: usize, seed: u64) -> Result<Self> {
        let labeled = dataset.labeled_nodes();
        if n_train == 0 || n_train + n_val > labeled.len() {
            return Err(Error::invalid(format!(
                "cannot take {n_train} train + {n_val} val nodes from {} labeled nodes",
                labeled.len()
            )));
        }
        let perm = shuffled(labeled, seed);
        let n = dataset.n_nodes();
        Ok(Self::from_parts(
            n,
            &perm[..n_train],
            &perm[n_train..n_train + n_val],
            &perm[n_train + n_val..],
            seed,
        ))
    }

    fn from_parts(n: usize, train: &[usize], val: &[usize], test: &[usize], seed: u64) -> Self {
        let mask = |nodes: &[usize]| {
            let mut m = vec![false; n];
            for &i in nodes {
                m[i] = true;
            }
            m
        };
        Self {
            train_mask: mask(train),
            val_mask: mask(val),
            test_mask: mask(test),
            seed,
        }
    }
}

impl Dataset {
    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labeled_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&i| self.labels[i].is_some())
            .collect()
    }

    /// The assigned split, or an error when none has been made yet.
    pub fn split(&self) -> Result<&Split> {
        self.split
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("dataset {} has no split", self.name)))
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }

    pub fn with_row_normalized_features(mut self) -> Result<Self> {
        self.features = row_normalize_features(&self.features)?;
        Ok(self)
    }
}

fn shuffled(mut nodes: Vec<usize>, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    nodes.shuffle(&mut rng);
    nodes
}

/// Uniformly random split of the labeled nodes. Validation and test receive
/// `⌊ratio · m⌋` nodes each; train keeps the remainder.
pub fn make_split(dataset: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (tr, va, te) = ratios;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) {
        return Err(Error::invalid(format!(
            "split ratios must be positive, got {ratios:?}"
        )));
    }
    if (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios must sum to 1, got {ratios:?}"
        )));
    }
    let labeled = dataset.labeled_nodes();
    let m = labeled.len();
    if m < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 labeled nodes to split, have {m}"
        )));
    }
    // absorb representation error such as 0.29 * 100 = 28.999999999999996
    let n_val = (va * m as f64 + 1e-9).floor() as usize;
    let n_test = (te * m as f64 + 1e-9).floor() as usize;
    let n_train = m - n_val - n_test;
    if n_train == 0 {
        return Err(Error::invalid("split leaves the training set empty"));
    }
    let perm = shuffled(labeled, seed);
    Ok(Split::from_parts(
        dataset.n_nodes(),
        &perm[..n_train],
        &perm[n_train..n_train + n_val],
        &perm[n_train + n_val..],
        seed,
    ))
}

/// Divides each nonzero row by its sum. All-zero rows stay zero.
pub fn row_normalize_features(features: &CsrMatrix) -> Result<CsrMatrix> {
    if let Some(v) = features.values().iter().find(|&&v| v < 0.0) {
        return Err(Error::invalid(format!(
            "row normalization needs nonnegative features, found {v}"
        )));
    }
    let mut values = features.values().to_vec();
    for r in 0..features.rows() {
        let span = features.row_ptr()[r]..features.row_ptr()[r + 1];
        let sum: f64 = values[span.clone()].iter().sum();
        if sum > 0.0 {
            for v in &mut values[span] {
                *v /= sum;
            }
        }
    }
    Ok(features.with_values(values))
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    n: usize,
    d: usize,
    c: usize,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: usize,
    field: &str,
    what: &str,
) -> Result<T> {
    field.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("cannot parse {what} from {field:?}"),
    })
}

/// Parses tab-separated lines with exactly `arity` fields, skipping blank
/// lines. Line numbers are 1-based.
fn tsv_lines<'a>(
    path: &'a Path,
    text: &'a str,
    arity: usize,
) -> impl Iterator<Item = Result<(usize, Vec<&'a str>)>> + 'a {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(move |(k, l)| {
            let fields: Vec<&str> = l.split('\t').collect();
            if fields.len() != arity {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: k + 1,
                    msg: format!(
                        "expected {arity} tab-separated fields, found {}",
                        fields.len()
                    ),
                });
            }
            Ok((k + 1, fields))
        })
}

fn check_index(index: usize, limit: usize, what: &'static str) -> Result<usize> {
    if index >= limit {
        return Err(Error::OutOfBounds { what, index, limit });
    }
    Ok(index)
}

/// Loads a dataset directory holding `meta.json`, `edges.tsv`, `features.tsv`
/// and `labels.tsv`. The split is left unassigned.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_str(&read(&meta_path)?)
        .map_err(|e| Error::InvalidMeta(format!("{}: {e}", meta_path.display())))?;
    if meta.c < 2 {
        return Err(Error::InvalidMeta(format!(
            "need at least 2 classes, c = {}",
            meta.c
        )));
    }
    if meta.n == 0 {
        return Err(Error::InvalidMeta("n must be positive".into()));
    }

    let edges_path = dir.join("edges.tsv");
    let text = read(&edges_path)?;
    let mut edges = Vec::new();
    for item in tsv_lines(&edges_path, &text, 2) {
        let (line, f) = item?;
        let u: usize = parse_field(&edges_path, line, f[0], "node")?;
        let v: usize = parse_field(&edges_path, line, f[1], "node")?;
        edges.push((
            check_index(u, meta.n, "node")?,
            check_index(v, meta.n, "node")?,
        ));
    }
    let graph = SparseGraph::from_edges(meta.n, edges)?;

    let feat_path = dir.join("features.tsv");
    let text = read(&feat_path)?;
    let mut triplets = Vec::new();
    for item in tsv_lines(&feat_path, &text, 3) {
        let (line, f) = item?;
        let node: usize = parse_field(&feat_path, line, f[0], "node")?;
        let dim: usize = parse_field(&feat_path, line, f[1], "dimension")?;
        let value: f64 = parse_field(&feat_path, line, f[2], "value")?;
        triplets.push((
            check_index(node, meta.n, "node")?,
            check_index(dim, meta.d, "dimension")?,
            value,
        ));
    }
    let features = CsrMatrix::from_triplets(meta.n, meta.d, triplets)?;

    let labels_path = dir.join("labels.tsv");
    let text = read(&labels_path)?;
    let mut labels = vec![None; meta.n];
    for item in tsv_lines(&labels_path, &text, 2) {
        let (line, f) = item?;
        let node: usize = parse_field(&labels_path, line, f[0], "node")?;
        let class: usize = parse_field(&labels_path, line, f[1], "class")?;
        labels[check_index(node, meta.n, "node")?] = Some(check_index(class, meta.c, "class")?);
    }

    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok(Dataset {
        name,
        graph: Arc::new(graph),
        features,
        labels,
        n_classes: meta.c,
        split: None,
    })
}

/// Writes a dataset in the layout [`load_dataset`] reads. Self-loops are
/// implicit and not written.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        n: dataset.n_nodes(),
        d: dataset.feature_dim(),
        c: dataset.n_classes,
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string(&meta)? + "\n")
        .map_err(|e| Error::io(&meta_path, e))?;

    write_lines(&dir.join("edges.tsv"), |w| {
        for (u, v) in dataset.graph.non_loop_edges() {
            writeln!(w, "{u}\t{v}")?;
        }
        Ok(())
    })?;
    write_lines(&dir.join("features.tsv"), |w| {
        for r in 0..dataset.features.rows() {
            for (c, v) in dataset.features.row(r) {
                writeln!(w, "{r}\t{c}\t{v}")?;
            }
        }
        Ok(())
    })?;
    write_lines(&dir.join("labels.tsv"), |w| {
        for (i, l) in dataset.labels.iter().enumerate() {
            if let Some(c) = l {
                writeln!(w, "{i}\t{c}")?;
            }
        }
        Ok(())
    })
}

fn write_lines(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn write_dir(files: &[(&str, &str)]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (name, body) in files {
            fs::write(dir.path().join(name), body).unwrap();
        }
        dir
    }

    fn tiny(edges: &str) -> tempfile::TempDir {
        write_dir(&[
            ("meta.json", r#"{"n": 2, "d": 2, "c": 2}"#),
            ("edges.tsv", edges),
            ("features.tsv", "0\t0\t1\n1\t1\t1\n"),
            ("labels.tsv", "0\t0\n1\t1\n"),
        ])
    }

    fn labeled_dataset(n: usize) -> Dataset {
        Dataset {
            name: "t".into(),
            graph: Arc::new(SparseGraph::from_edges(n, []).unwrap()),
            features: CsrMatrix::identity(n),
            labels: (0..n).map(|i| Some(i % 2)).collect(),
            n_classes: 2,
            split: None,
        }
    }

    #[test]
    fn single_edge_loads_with_loops() {
        let dir = tiny("0\t1\n");
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.graph.nnz(), 4);
        assert_eq!(ds.labels, vec![Some(0), Some(1)]);
    }

    #[test]
    fn duplicate_edge_lines_collapse() {
        let a = load_dataset(tiny("0\t1\n0\t1\n").path()).unwrap();
        let b = load_dataset(tiny("0\t1\n").path()).unwrap();
        assert_eq!(a.graph, b.graph);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tiny("0\t1\n0 1\n");
        match load_dataset(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let dir = tiny("0\tx\n");
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn out_of_range_index_is_a_bounds_error() {
        let dir = tiny("0\t2\n");
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::OutOfBounds { index: 2, .. })
        ));
    }

    #[test]
    fn single_class_meta_is_rejected() {
        let dir = write_dir(&[
            ("meta.json", r#"{"n": 2, "d": 2, "c": 1}"#),
            ("edges.tsv", ""),
            ("features.tsv", ""),
            ("labels.tsv", ""),
        ]);
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::InvalidMeta(_))
        ));
    }

    #[test]
    fn save_then_load_round_trips() {
        let ds = crate::graph::karate_club();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.graph, ds.graph);
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
        save_dataset(&back, dir.path().join("again")).unwrap();
        let again = load_dataset(dir.path().join("again")).unwrap();
        assert_eq!(again.graph.row_ptr(), ds.graph.row_ptr());
        assert_eq!(again.graph.col_idx(), ds.graph.col_idx());
        assert_eq!(again.graph.edge_uid(), ds.graph.edge_uid());
    }

    #[test]
    fn split_sizes_for_ten_nodes() {
        let ds = labeled_dataset(10);
        let s = make_split(&ds, (0.6, 0.2, 0.2), 3).unwrap();
        assert_eq!((s.train_count(), s.val_count(), s.test_count()), (6, 2, 2));
    }

    #[test]
    fn split_sizes_for_cora_count() {
        let ds = labeled_dataset(2708);
        let s = make_split(&ds, (0.6, 0.2, 0.2), 0).unwrap();
        assert_eq!(
            (s.train_count(), s.val_count(), s.test_count()),
            (1626, 541, 541)
        );
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let ds = labeled_dataset(50);
        let a = make_split(&ds, (0.6, 0.2, 0.2), 11).unwrap();
        let b = make_split(&ds, (0.6, 0.2, 0.2), 11).unwrap();
        assert_eq!(a, b);
        let c = make_split(&ds, (0.6, 0.2, 0.2), 12).unwrap();
        assert_ne!(a, c);
        for i in 0..50 {
            let k = [a.train_mask[i], a.val_mask[i], a.test_mask[i]]
                .iter()
                .filter(|&&x| x)
                .count();
            assert_eq!(k, 1);
        }
    }

    #[test]
    fn split_skips_unlabeled_and_validates_input() {
        let mut ds = labeled_dataset(10);
        ds.labels[3] = None;
        let s = make_split(&ds, (0.6, 0.2, 0.2), 1).unwrap();
        assert!(!s.train_mask[3] && !s.val_mask[3] && !s.test_mask[3]);
        assert!(make_split(&ds, (0.5, 0.5, 0.5), 1).is_err());
        assert!(make_split(&ds, (1.0, 0.0, 0.0), 1).is_err());
        let mut few = labeled_dataset(4);
        few.labels[0] = None;
        few.labels[1] = None;
        assert!(make_split(&few, (0.6, 0.2, 0.2), 1).is_err());
    }

    #[test]
    fn row_normalization_examples() {
        let m = CsrMatrix::from_dense(&Matrix::from_rows(&[
            &[2.0, 2.0, 0.0],
            &[0.0, 0.0, 0.0],
            &[1.0, 3.0, 0.0],
        ]));
        let n = row_normalize_features(&m).unwrap().to_dense();
        assert_eq!(
            n,
            Matrix::from_rows(&[&[0.5, 0.5, 0.0], &[0.0, 0.0, 0.0], &[0.25, 0.75, 0.0]])
        );
        let neg = CsrMatrix::from_dense(&Matrix::from_rows(&[&[1.0, -1.0]]));
        assert!(row_normalize_features(&neg).is_err());
    }
}
