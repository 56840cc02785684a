//! Text graph bundles, split files, stochastic block model generation and
//! JSON-lines metrics.
//!
//! A bundle is a directory with
//!
//! - `nodes.txt`: `<id> <f_1> … <f_F> <label>` per node, ids `0..N` each once;
//! - `edges.txt`: `<u> <v>` per undirected edge, `u < v`;
//! - `splits.txt` (optional): `<id> <train|val|test|unused>`; ids not listed
//!   are unused.
//!
//! Blank lines and lines starting with `#` are skipped. Floats are written
//! with Rust's shortest round-trip formatting, so save followed by load is
//! exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bias::DEFAULT_PER_CLASS;
use crate::graph::{GraphDataset, Split};
use crate::{seeded_rng, CieError, Matrix, Result};

pub const NODES_FILE: &str = "nodes.txt";
pub const EDGES_FILE: &str = "edges.txt";
pub const SPLITS_FILE: &str = "splits.txt";

/// Explicit role assignment keyed by node id.
pub type SplitAssignment = BTreeMap<usize, Split>;

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|e| CieError::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CieError::io(path, e))?;
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            out.push((k + 1, t.to_owned()));
        }
    }
    Ok(out)
}

fn parse_err(path: &Path, line: usize, detail: impl Into<String>) -> CieError {
    CieError::Parse {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

fn parse_tok<T: std::str::FromStr>(path: &Path, line: usize, tok: &str, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| parse_err(path, line, format!("cannot parse {what} `{tok}`")))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CieError::io(path, e))
}

/// Reads a split file. Parse errors name the offending token.
pub fn load_splits(path: &Path) -> Result<SplitAssignment> {
    let mut out = SplitAssignment::new();
    for (line, text) in read_lines(path)? {
        let toks: Vec<&str> = text.split_whitespace().collect();
        let [id, role] = toks[..] else {
            return Err(parse_err(path, line, "expected `<id> <role>`"));
        };
        let id: usize = parse_tok(path, line, id, "node id")?;
        let role: Split = role.parse().map_err(|e: String| parse_err(path, line, e))?;
        if out.insert(id, role).is_some() {
            return Err(CieError::Validation(format!("{}: node {id} listed twice", path.display())));
        }
    }
    Ok(out)
}

pub fn save_splits(splits: &SplitAssignment, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    for (id, role) in splits {
        writeln!(w, "{id} {}", role.token()).map_err(|e| CieError::io(path, e))?;
    }
    w.flush().map_err(|e| CieError::io(path, e))
}

/// Listed non-unused roles of a per-node split vector.
pub fn assignment_of(splits: &[Split]) -> SplitAssignment {
    splits
        .iter()
        .enumerate()
        .filter(|(_, &s)| s != Split::Unused)
        .map(|(i, &s)| (i, s))
        .collect()
}

/// Expands an assignment to one role per node.
pub fn splits_from(assignment: &SplitAssignment, num_nodes: usize) -> Result<Vec<Split>> {
    let mut out = vec![Split::Unused; num_nodes];
    for (&id, &role) in assignment {
        if id >= num_nodes {
            return Err(CieError::Validation(format!(
                "split file names node {id} but the graph has {num_nodes} nodes"
            )));
        }
        out[id] = role;
    }
    Ok(out)
}

/// Loads a bundle directory. A missing splits file marks every node unused.
pub fn load_graph(dir: &Path) -> Result<GraphDataset> {
    let nodes_path = dir.join(NODES_FILE);
    let lines = read_lines(&nodes_path)?;
    let n = lines.len();
    if n == 0 {
        return Err(CieError::Validation(format!("{} has no nodes", nodes_path.display())));
    }
    let width = lines[0].1.split_whitespace().count();
    if width < 2 {
        return Err(parse_err(&nodes_path, lines[0].0, "expected `<id> <features…> <label>`"));
    }
    let f = width - 2;
    let mut features = Matrix::zeros((n, f));
    let mut labels = vec![0usize; n];
    let mut seen = vec![false; n];
    for (line, text) in &lines {
        let toks: Vec<&str> = text.split_whitespace().collect();
        if toks.len() != width {
            return Err(parse_err(
                &nodes_path,
                *line,
                format!("expected {width} fields, found {}", toks.len()),
            ));
        }
        let id: usize = parse_tok(&nodes_path, *line, toks[0], "node id")?;
        if id >= n {
            return Err(CieError::Validation(format!(
                "{}:{line}: node id {id} outside 0..{n}",
                nodes_path.display()
            )));
        }
        if std::mem::replace(&mut seen[id], true) {
            return Err(CieError::Validation(format!(
                "{}:{line}: node id {id} appears twice",
                nodes_path.display()
            )));
        }
        for (j, tok) in toks[1..=f].iter().enumerate() {
            features[[id, j]] = parse_tok(&nodes_path, *line, tok, "feature")?;
        }
        labels[id] = parse_tok(&nodes_path, *line, toks[f + 1], "label")?;
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);

    let edges_path = dir.join(EDGES_FILE);
    let mut edges = Vec::new();
    for (line, text) in read_lines(&edges_path)? {
        let toks: Vec<&str> = text.split_whitespace().collect();
        let [u, v] = toks[..] else {
            return Err(parse_err(&edges_path, line, "expected `<u> <v>`"));
        };
        let u: usize = parse_tok(&edges_path, line, u, "node id")?;
        let v: usize = parse_tok(&edges_path, line, v, "node id")?;
        if u >= v {
            return Err(CieError::Validation(format!(
                "{}:{line}: edge ({u}, {v}) must satisfy u < v",
                edges_path.display()
            )));
        }
        edges.push((u, v));
    }

    let splits_path = dir.join(SPLITS_FILE);
    let splits = if splits_path.exists() {
        splits_from(&load_splits(&splits_path)?, n)?
    } else {
        vec![Split::Unused; n]
    };
    let g = GraphDataset::new(features, labels, num_classes, edges, splits)?;
    log::info!(
        "loaded {}: {} nodes, {} edges ({} directions), {} features, {} classes",
        dir.display(),
        g.num_nodes(),
        g.edges().len(),
        2 * g.edges().len(),
        g.num_features(),
        g.num_classes()
    );
    Ok(g)
}

/// Writes a bundle directory, creating it if needed. The splits file lists
/// every node that is not unused.
pub fn save_graph(graph: &GraphDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CieError::io(dir, e))?;
    let nodes_path = dir.join(NODES_FILE);
    let mut w = create(&nodes_path)?;
    for (i, row) in graph.features().rows().into_iter().enumerate() {
        let mut line = i.to_string();
        for v in row {
            line.push(' ');
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line} {}", graph.labels()[i]).map_err(|e| CieError::io(&nodes_path, e))?;
    }
    w.flush().map_err(|e| CieError::io(&nodes_path, e))?;

    let edges_path = dir.join(EDGES_FILE);
    let mut w = create(&edges_path)?;
    for (u, v) in graph.edges() {
        writeln!(w, "{u} {v}").map_err(|e| CieError::io(&edges_path, e))?;
    }
    w.flush().map_err(|e| CieError::io(&edges_path, e))?;

    save_splits(&assignment_of(graph.splits()), &dir.join(SPLITS_FILE))
}

/// Stochastic block model with class-conditional Gaussian features.
///
/// Class means are distinct standard basis vectors (unit norm, pairwise
/// orthogonal), so `features >= classes` is required. Each feature row is its
/// class mean plus isotropic noise of standard deviation `tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub classes: usize,
    pub nodes_per_class: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub features: usize,
    pub tau: f64,
    pub seed: u64,
    /// Validation nodes; `None` picks `min(500, N/5)`.
    pub val: Option<usize>,
    /// Test nodes; `None` picks `min(1000, 2N/5)`.
    pub test: Option<usize>,
}

impl Default for SbmSpec {
    fn default() -> Self {
        Self {
            classes: 7,
            nodes_per_class: 100,
            p_in: 0.03,
            p_out: 0.004,
            features: 16,
            tau: 0.5,
            seed: 0,
            val: None,
            test: None,
        }
    }
}

impl SbmSpec {
    pub fn num_nodes(&self) -> usize {
        self.classes * self.nodes_per_class
    }

    pub fn val_count(&self) -> usize {
        self.val.unwrap_or_else(|| 500.min(self.num_nodes() / 5))
    }

    pub fn test_count(&self) -> usize {
        self.test.unwrap_or_else(|| 1000.min(2 * self.num_nodes() / 5))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CieError::Parameter(m));
        if self.classes == 0 || self.nodes_per_class == 0 {
            return fail("SBM needs at least one class and one node per class".into());
        }
        if !(0.0 <= self.p_out && self.p_out < self.p_in && self.p_in <= 1.0) {
            return fail(format!(
                "SBM probabilities must satisfy 0 <= p_out < p_in <= 1, got p_in = {}, p_out = {}",
                self.p_in, self.p_out
            ));
        }
        if !(self.tau > 0.0) {
            return fail(format!("SBM noise must be positive, got {}", self.tau));
        }
        if self.features < self.classes {
            return fail(format!(
                "SBM needs at least one feature per class, got {} for {} classes",
                self.features, self.classes
            ));
        }
        if self.val_count() + self.test_count() > self.num_nodes() {
            return fail("SBM validation and test sets exceed the node count".into());
        }
        Ok(())
    }
}

/// Draws an SBM graph. Labels are block ids (`i / nodes_per_class`). Roles:
/// a uniform validation and test set, then up to `DEFAULT_PER_CLASS` uniform
/// training nodes per class among the rest; the remainder is unused.
pub fn synth_sbm(spec: &SbmSpec) -> Result<GraphDataset> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let n = spec.num_nodes();
    let labels: Vec<usize> = (0..n).map(|i| i / spec.nodes_per_class).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] { spec.p_in } else { spec.p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let mut features = Matrix::zeros((n, spec.features));
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        for v in row.iter_mut() {
            *v = spec.tau * rng.sample::<f64, _>(StandardNormal);
        }
        row[labels[i]] += 1.0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Unused; n];
    let (val, test) = (spec.val_count(), spec.test_count());
    for &i in &order[..val] {
        splits[i] = Split::Val;
    }
    for &i in &order[val..val + test] {
        splits[i] = Split::Test;
    }
    let mut taken = vec![0usize; spec.classes];
    for &i in &order[val + test..] {
        if taken[labels[i]] < DEFAULT_PER_CLASS {
            taken[labels[i]] += 1;
            splits[i] = Split::Train;
        }
    }
    GraphDataset::new(features, labels, spec.classes, edges, splits)
}

/// One trial of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub experiment_id: String,
    pub backbone: String,
    pub bias: String,
    pub lambda1: f64,
    pub lambda2: f64,
    pub kernel: String,
    pub seed: u64,
    pub test_accuracy: f64,
    pub epoch_seconds: f64,
    pub epochs: usize,
    pub best_val_epoch: usize,
}

/// Aggregate over the trials of one experiment. `std` is the sample
/// standard deviation (0 for a single trial).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub experiment_id: String,
    pub trials: usize,
    pub mean: f64,
    pub std: f64,
}

impl SummaryRecord {
    pub fn from_accuracies(experiment_id: impl Into<String>, acc: &[f64]) -> Self {
        let (mean, std) = mean_std(acc);
        Self {
            experiment_id: experiment_id.into(),
            trials: acc.len(),
            mean,
            std,
        }
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum MetricsLine {
    Trial(TrialRecord),
    Summary(SummaryRecord),
}

/// Trial lines followed by their summary line.
pub fn experiment_lines(trials: &[TrialRecord]) -> Vec<MetricsLine> {
    let id = trials.first().map(|t| t.experiment_id.clone()).unwrap_or_default();
    let acc: Vec<f64> = trials.iter().map(|t| t.test_accuracy).collect();
    let mut out: Vec<MetricsLine> = trials.iter().cloned().map(MetricsLine::Trial).collect();
    out.push(MetricsLine::Summary(SummaryRecord::from_accuracies(id, &acc)));
    out
}

fn write_lines_to(records: &[MetricsLine], path: &Path, append: bool) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CieError::io(parent, e))?;
    }
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| CieError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("metrics records serialize");
        writeln!(w, "{line}").map_err(|e| CieError::io(path, e))?;
    }
    w.flush().map_err(|e| CieError::io(path, e))
}

/// Writes one JSON object per line, replacing the file.
pub fn write_metrics(records: &[MetricsLine], path: &Path) -> Result<()> {
    write_lines_to(records, path, false)
}

pub fn append_metrics(records: &[MetricsLine], path: &Path) -> Result<()> {
    write_lines_to(records, path, true)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsLine>> {
    read_lines(path)?
        .into_iter()
        .map(|(line, text)| serde_json::from_str(&text).map_err(|e| parse_err(path, line, e.to_string())))
        .collect()
}
