//! Training loop and experiment orchestration.
//!
//! A trial masks test nodes out of the graph, applies the bias to the
//! training graph, trains with Adam while tracking validation accuracy on
//! the training graph, and scores the best-validation parameters on the test
//! nodes of the complete graph.
//!
//! Each trial seed feeds four independent generator streams (bias, weight
//! init, dropout/sampling, permutations). Backbone weights are drawn before
//! the mask, so a plain run and a CIE run with the same seed share splits,
//! initial backbone weights and dropout masks.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bias::{apply_bias, BiasReport, BiasSpec};
use crate::diff::Adam;
use crate::graph::{inductive_split, GraphDataset, Split};
use crate::io::{experiment_lines, load_graph, mean_std, synth_sbm, MetricsLine, SbmSpec, TrialRecord};
use crate::kernels::KernelSpec;
use crate::layers::{BackboneConfig, BackboneKind};
use crate::model::{CieConfig, CieModel, GraphInput, LossBreakdown, ModelConfig};
use crate::{seeded_rng, CieError, Result, Rng};

/// Epochs skipped at the start of per-epoch timing.
pub const TIMING_WARMUP: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Bundle(PathBuf),
    Sbm(SbmSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub id: String,
    pub data: DataSource,
    pub backbone: BackboneKind,
    pub cie: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub kernel: KernelSpec,
    pub mc_samples: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub dropout: f64,
    /// Overrides the backbone's default hidden width.
    pub hidden: Option<usize>,
    pub bias: BiasSpec,
    pub seeds: Vec<u64>,
    /// Run seeds on the rayon pool.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            id: "experiment".into(),
            data: DataSource::Sbm(SbmSpec::default()),
            backbone: BackboneKind::Gcn,
            cie: true,
            lambda1: 0.5,
            lambda2: 0.5,
            kernel: KernelSpec::rbf(),
            mc_samples: 1,
            lr: 0.01,
            weight_decay: 5e-4,
            epochs: 200,
            patience: 50,
            dropout: 0.5,
            hidden: None,
            bias: BiasSpec::Unbiased,
            seeds: (0..10).collect(),
            parallel: true,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

/// `a,b,c` or the half-open range `a..b`.
pub fn parse_seeds(v: &str) -> Option<Vec<u64>> {
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
        return Some((a..b).collect());
    }
    v.split(',').map(|s| s.trim().parse().ok()).collect()
}

/// Reads `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| CieError::Parse {
            path: origin.to_path_buf(),
            line: k + 1,
            detail: format!("expected `key = value`, found `{line}`"),
        })?;
        out.push((key.trim().to_owned(), value.trim().to_owned()));
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| CieError::io(path, e))?;
    parse_config_text(&text, path)
}

impl ExperimentConfig {
    fn sbm_mut(&mut self) -> &mut SbmSpec {
        if !matches!(self.data, DataSource::Sbm(_)) {
            self.data = DataSource::Sbm(SbmSpec::default());
        }
        match &mut self.data {
            DataSource::Sbm(s) => s,
            DataSource::Bundle(_) => unreachable!(),
        }
    }

    /// Applies one `key = value` setting. Keys mirror the field names;
    /// `data` takes a bundle directory and `sbm.<field>` sets the
    /// generator.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || CieError::Config(format!("invalid value `{value}` for `{key}`"));
        fn num<T: FromStr>(v: &str, bad: impl Fn() -> CieError) -> Result<T> {
            v.parse().map_err(|_| bad())
        }
        match key {
            "id" => self.id = value.to_owned(),
            "data" => self.data = DataSource::Bundle(PathBuf::from(value)),
            "backbone" => self.backbone = value.parse().map_err(|_| bad())?,
            "cie" => self.cie = parse_bool(value).ok_or_else(bad)?,
            "lambda1" => self.lambda1 = num(value, bad)?,
            "lambda2" => self.lambda2 = num(value, bad)?,
            "kernel" => self.kernel = value.parse().map_err(|_| bad())?,
            "mc_samples" => self.mc_samples = num(value, bad)?,
            "lr" => self.lr = num(value, bad)?,
            "weight_decay" => self.weight_decay = num(value, bad)?,
            "epochs" => self.epochs = num(value, bad)?,
            "patience" => self.patience = num(value, bad)?,
            "dropout" => self.dropout = num(value, bad)?,
            "hidden" => self.hidden = Some(num(value, bad)?),
            "bias" => self.bias = value.parse()?,
            "seeds" => self.seeds = parse_seeds(value).ok_or_else(bad)?,
            "parallel" => self.parallel = parse_bool(value).ok_or_else(bad)?,
            "sbm.classes" => self.sbm_mut().classes = num(value, bad)?,
            "sbm.nodes_per_class" => self.sbm_mut().nodes_per_class = num(value, bad)?,
            "sbm.p_in" => self.sbm_mut().p_in = num(value, bad)?,
            "sbm.p_out" => self.sbm_mut().p_out = num(value, bad)?,
            "sbm.features" => self.sbm_mut().features = num(value, bad)?,
            "sbm.tau" => self.sbm_mut().tau = num(value, bad)?,
            "sbm.seed" => self.sbm_mut().seed = num(value, bad)?,
            "sbm.val" => self.sbm_mut().val = Some(num(value, bad)?),
            "sbm.test" => self.sbm_mut().test = Some(num(value, bad)?),
            _ => return Err(CieError::Config(format!("unknown setting `{key}`"))),
        }
        Ok(())
    }

    pub fn apply<K: AsRef<str>, V: AsRef<str>>(&mut self, settings: &[(K, V)]) -> Result<()> {
        settings.iter().try_for_each(|(k, v)| self.set(k.as_ref(), v.as_ref()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CieError::Config(m));
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(0.0..=1.0).contains(&l) {
                return fail(format!("{name} must lie in [0, 1], got {l}"));
            }
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return fail(format!("bad optimizer settings lr = {}, weight_decay = {}", self.lr, self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.mc_samples == 0 {
            return fail("mc_samples must be at least 1".into());
        }
        self.kernel.validate().map_err(|e| CieError::Config(e.to_string()))?;
        self.bias.validate().map_err(|e| CieError::Config(e.to_string()))?;
        if let DataSource::Sbm(s) = &self.data {
            s.validate().map_err(|e| CieError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<GraphDataset> {
        match &self.data {
            DataSource::Bundle(p) => load_graph(p),
            DataSource::Sbm(s) => synth_sbm(s),
        }
    }

    pub fn model_config(&self, in_dim: usize, classes: usize) -> ModelConfig {
        let mut backbone = BackboneConfig::new(self.backbone, in_dim, classes);
        backbone.dropout = self.dropout;
        if let Some(h) = self.hidden {
            backbone.hidden = h;
        }
        let cie = self.cie.then_some(CieConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            kernel: self.kernel,
            mc_samples: self.mc_samples,
        });
        ModelConfig { backbone, cie }
    }

    /// Short label of the loss configuration.
    pub fn variant(&self) -> String {
        if self.cie {
            format!("{}+cie", self.backbone)
        } else {
            self.backbone.to_string()
        }
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{} bias={} λ1={} λ2={} kernel={}]",
            self.id,
            self.variant(),
            self.bias,
            self.lambda1,
            self.lambda2,
            self.kernel
        )
    }
}

/// Outcome of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub best_val_epoch: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    /// Mean wall seconds of a training step, epochs `TIMING_WARMUP..` only
    /// (all epochs when fewer were run).
    pub epoch_seconds: f64,
    pub epochs_run: usize,
    pub losses: Vec<LossBreakdown>,
    pub val_accuracy: Vec<f64>,
    /// Hash of the training, validation and test nodes and removed edges.
    pub split_fingerprint: String,
    pub num_parameters: usize,
    pub bias_report: BiasReport,
}

impl TrialResult {
    /// Equality of everything except wall-clock timing.
    pub fn same_outcome(&self, other: &Self) -> bool {
        Self {
            epoch_seconds: 0.0,
            ..self.clone()
        } == Self {
            epoch_seconds: 0.0,
            ..other.clone()
        }
    }

    pub fn record(&self, config: &ExperimentConfig) -> TrialRecord {
        TrialRecord {
            experiment_id: config.id.clone(),
            backbone: config.variant(),
            bias: config.bias.to_string(),
            lambda1: config.lambda1,
            lambda2: config.lambda2,
            kernel: config.kernel.to_string(),
            seed: self.seed,
            test_accuracy: self.test_accuracy,
            epoch_seconds: self.epoch_seconds,
            epochs: self.epochs_run,
            best_val_epoch: self.best_val_epoch,
        }
    }
}

/// Fraction of `nodes` whose prediction matches the label.
pub fn accuracy(pred: &[usize], labels: &[usize], nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    let hit = nodes.iter().filter(|&&i| pred[i] == labels[i]).count();
    hit as f64 / nodes.len() as f64
}

fn stream(seed: u64, id: u64) -> Rng {
    let mut r = seeded_rng(seed);
    r.set_stream(id);
    r
}

fn split_fingerprint(full: &GraphDataset, train_full: &[usize], removed_full: &[(usize, usize)]) -> String {
    let mut h = Sha256::new();
    h.update(format!("train {train_full:?}\n"));
    h.update(format!("val {:?}\n", full.nodes_with(Split::Val)));
    h.update(format!("test {:?}\n", full.nodes_with(Split::Test)));
    h.update(format!("removed {removed_full:?}\n"));
    hex::encode(h.finalize())
}

/// Biased training graph, evaluation graph and the bookkeeping between them.
#[derive(Clone, Debug)]
pub struct PreparedTrial {
    pub train_graph: GraphDataset,
    pub full_graph: GraphDataset,
    /// Node and edge ids in the report refer to `train_graph`.
    pub report: BiasReport,
    /// Training nodes as complete-graph ids.
    pub train_nodes: Vec<usize>,
    /// Removed edges as complete-graph ids.
    pub removed_edges: Vec<(usize, usize)>,
    pub fingerprint: String,
}

impl PreparedTrial {
    /// The bias report with complete-graph ids.
    pub fn full_report(&self) -> BiasReport {
        BiasReport {
            train_nodes: self.train_nodes.clone(),
            removed_edges: self.removed_edges.clone(),
            ..self.report.clone()
        }
    }
}

/// Inductive split followed by bias injection on the training graph. With
/// any bias other than `canonical`, every node that is neither validation
/// nor test is a selection candidate.
pub fn prepare_trial(dataset: &GraphDataset, bias: &BiasSpec, seed: u64) -> Result<PreparedTrial> {
    if dataset.nodes_with(Split::Val).is_empty() || dataset.nodes_with(Split::Test).is_empty() {
        return Err(CieError::Validation("dataset needs validation and test nodes".into()));
    }
    let base = if *bias == BiasSpec::Canonical {
        dataset.clone()
    } else {
        let roles = dataset
            .splits()
            .iter()
            .map(|&s| if s == Split::Unused { Split::Train } else { s })
            .collect();
        dataset.with_splits(roles)?
    };
    let split = inductive_split(&base)?;
    let outcome = apply_bias(&split.train_graph, bias, &mut stream(seed, 0))?;
    let train_full: Vec<usize> = outcome.report.train_nodes.iter().map(|&j| split.new_to_old[j]).collect();
    let removed_full: Vec<(usize, usize)> = outcome
        .report
        .removed_edges
        .iter()
        .map(|&(u, v)| (split.new_to_old[u], split.new_to_old[v]))
        .collect();
    let mut roles = dataset.splits().to_vec();
    for r in roles.iter_mut().filter(|r| **r == Split::Train) {
        *r = Split::Unused;
    }
    for &i in &train_full {
        roles[i] = Split::Train;
    }
    let full_graph = dataset.with_splits(roles)?;
    Ok(PreparedTrial {
        fingerprint: split_fingerprint(&full_graph, &train_full, &removed_full),
        train_graph: outcome.graph,
        full_graph,
        report: outcome.report,
        train_nodes: train_full,
        removed_edges: removed_full,
    })
}

/// Trains one seed on an already loaded dataset.
pub fn run_trial_on(dataset: &GraphDataset, config: &ExperimentConfig, seed: u64) -> Result<TrialResult> {
    train_model(dataset, config, seed).map(|(r, _)| r)
}

/// As [`run_trial_on`], also returning the best-validation model.
pub fn train_model(dataset: &GraphDataset, config: &ExperimentConfig, seed: u64) -> Result<(TrialResult, CieModel)> {
    config.validate()?;
    let prep = prepare_trial(dataset, &config.bias, seed)?;
    let mcfg = config.model_config(dataset.num_features(), dataset.num_classes());
    let mut model = CieModel::new(mcfg, &mut stream(seed, 1))?;
    let mut forward_rng = stream(seed, 2);
    let mut perm_rng = stream(seed, 3);

    let train_in = GraphInput::new(&prep.train_graph)?;
    let full_in = GraphInput::new(&prep.full_graph)?;
    let train = prep.train_graph.nodes_with(Split::Train);
    let val = prep.train_graph.nodes_with(Split::Val);
    let test = prep.full_graph.nodes_with(Split::Test);
    let labels = prep.train_graph.labels();

    let mut adam = Adam::new(&model.params, config.lr);
    adam.weight_decay = config.weight_decay;
    let mut best = (f64::NEG_INFINITY, 0usize, model.params.clone());
    let mut losses = Vec::new();
    let mut val_curve = Vec::new();
    let mut step_secs = Vec::new();
    let mut stale = 0;
    for epoch in 0..config.epochs {
        let t0 = Instant::now();
        let noise = model.draw_noise(&train_in, train.len(), true, &mut forward_rng, &mut perm_rng)?;
        let pass = model.total_loss_with_noise(&train_in, labels, &train, &noise)?;
        pass.backward(&mut model.params)?;
        adam.step(&mut model.params)?;
        step_secs.push(t0.elapsed().as_secs_f64());
        losses.push(pass.breakdown);
        if !pass.breakdown.total.is_finite() {
            return Err(CieError::Domain {
                op: "training",
                detail: format!("loss became {} at epoch {epoch}", pass.breakdown.total),
            });
        }

        let va = accuracy(&model.predict(&train_in)?, labels, &val);
        val_curve.push(va);
        if va > best.0 {
            best = (va, epoch, model.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let (best_val_accuracy, best_val_epoch, params) = best;
    model.params = params;
    let test_accuracy = accuracy(&model.predict(&full_in)?, prep.full_graph.labels(), &test);
    let timed = if step_secs.len() > TIMING_WARMUP { &step_secs[TIMING_WARMUP..] } else { &step_secs[..] };
    let result = TrialResult {
        seed,
        best_val_epoch,
        best_val_accuracy,
        test_accuracy,
        epoch_seconds: timed.iter().sum::<f64>() / timed.len() as f64,
        epochs_run: step_secs.len(),
        losses,
        val_accuracy: val_curve,
        split_fingerprint: prep.fingerprint,
        num_parameters: model.params.num_scalars(),
        bias_report: prep.report,
    };
    Ok((result, model))
}

pub fn run_trial(config: &ExperimentConfig, seed: u64) -> Result<TrialResult> {
    config.validate()?;
    run_trial_on(&config.load_dataset()?, config, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: ExperimentConfig,
    pub mean: f64,
    pub std: f64,
    /// In the order of `config.seeds`.
    pub trials: Vec<TrialResult>,
}

impl ExperimentSummary {
    pub fn accuracies(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.test_accuracy).collect()
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        self.trials.iter().map(|t| t.epoch_seconds).sum::<f64>() / self.trials.len() as f64
    }

    /// Trial lines plus the summary line.
    pub fn metrics(&self) -> Vec<MetricsLine> {
        let records: Vec<TrialRecord> = self.trials.iter().map(|t| t.record(&self.config)).collect();
        experiment_lines(&records)
    }
}

pub fn run_experiment_on(dataset: &GraphDataset, config: &ExperimentConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    let trials: Vec<TrialResult> = if config.parallel {
        config
            .seeds
            .par_iter()
            .map(|&s| run_trial_on(dataset, config, s))
            .collect::<Result<_>>()?
    } else {
        config
            .seeds
            .iter()
            .map(|&s| run_trial_on(dataset, config, s))
            .collect::<Result<_>>()?
    };
    let acc: Vec<f64> = trials.iter().map(|t| t.test_accuracy).collect();
    let (mean, std) = mean_std(&acc);
    log::info!("{config}: {mean:.4} ± {std:.4} over {} seeds", trials.len());
    Ok(ExperimentSummary {
        config: config.clone(),
        mean,
        std,
        trials,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    run_experiment_on(&config.load_dataset()?, config)
}

/// Every `(λ1, λ2)` pair of the two axes.
pub fn grid(lambda1: &[f64], lambda2: &[f64]) -> Vec<(f64, f64)> {
    lambda1.iter().flat_map(|&a| lambda2.iter().map(move |&b| (a, b))).collect()
}

/// `0, step, 2·step, …, 1`.
pub fn unit_steps(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round() as usize;
    (0..=n).map(|k| (k as f64 * step * 1e12).round() / 1e12).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub summary: ExperimentSummary,
}

/// One experiment per grid point, in grid order.
pub fn sweep(config: &ExperimentConfig, points: &[(f64, f64)]) -> Result<Vec<SweepRow>> {
    let dataset = config.load_dataset()?;
    points
        .iter()
        .map(|&(l1, l2)| {
            let cfg = ExperimentConfig {
                id: format!("{}/l1={l1},l2={l2}", config.id),
                lambda1: l1,
                lambda2: l2,
                cie: true,
                ..config.clone()
            };
            Ok(SweepRow {
                lambda1: l1,
                lambda2: l2,
                summary: run_experiment_on(&dataset, &cfg)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub full: ExperimentSummary,
    pub without_idp: ExperimentSummary,
    pub without_backdoor: ExperimentSummary,
    pub backbone_only: ExperimentSummary,
}

impl Ablation {
    pub fn rows(&self) -> [(&'static str, &ExperimentSummary); 4] {
        [
            ("full", &self.full),
            ("w/o idp", &self.without_idp),
            ("w/o backdoor", &self.without_backdoor),
            ("backbone", &self.backbone_only),
        ]
    }
}

/// Full objective, each single loss removed, and the plain backbone, on the
/// same dataset and seeds.
pub fn ablate(config: &ExperimentConfig) -> Result<Ablation> {
    let dataset = config.load_dataset()?;
    let variant = |suffix: &str, cie: bool, l1: f64, l2: f64| {
        let cfg = ExperimentConfig {
            id: format!("{}/{suffix}", config.id),
            cie,
            lambda1: l1,
            lambda2: l2,
            ..config.clone()
        };
        run_experiment_on(&dataset, &cfg)
    };
    Ok(Ablation {
        full: variant("full", true, config.lambda1, config.lambda2)?,
        without_idp: variant("no-idp", true, 0.0, config.lambda2)?,
        without_backdoor: variant("no-backdoor", true, config.lambda1, 0.0)?,
        backbone_only: variant("backbone", false, config.lambda1, config.lambda2)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub id: String,
    pub variant: String,
    pub epochs: usize,
    pub epoch_seconds: f64,
}

/// Mean per-epoch training time of each config. Early stopping is disabled
/// and seeds run serially so timings do not compete for cores.
pub fn timing_report(configs: &[ExperimentConfig]) -> Result<Vec<TimingRow>> {
    configs
        .iter()
        .map(|c| {
            let cfg = ExperimentConfig {
                patience: usize::MAX,
                parallel: false,
                ..c.clone()
            };
            let s = run_experiment(&cfg)?;
            Ok(TimingRow {
                id: c.id.clone(),
                variant: c.variant(),
                epochs: cfg.epochs,
                epoch_seconds: s.mean_epoch_seconds(),
            })
        })
        .collect()
}
