//! `cie`: batch experiments for debiased node classification.
//!
//! Settings come from built-in defaults, then an optional `--config` file of
//! `key = value` lines, then `--set key=value` pairs and the explicit flags,
//! in that order. Exit status is 0 on success, 2 for bad configuration or
//! input, and 3 when a run fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cie_core::bias::BiasSpec;
use cie_core::harness::{
    ablate, grid, prepare_trial, read_config_file, run_experiment_on, sweep, timing_report, train_model, unit_steps,
    ExperimentConfig, ExperimentSummary,
};
use cie_core::io::{
    append_metrics, assignment_of, load_graph, mean_std, read_metrics, save_graph, save_splits, synth_sbm,
    MetricsLine, SbmSpec, TrialRecord,
};
use cie_core::{checkpoint, CieError};

#[derive(Parser, Debug)]
#[command(name = "cie", version, about = "Causal/spurious disentanglement for debiased node classification")]
struct Cli {
    /// Log filter, e.g. `info` or `debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a stochastic block model bundle.
    Synth(SynthArgs),
    /// Apply a bias to a bundle and write the split file and bias report.
    Inject(InjectArgs),
    /// Run one experiment over its seeds.
    Train(TrainArgs),
    /// Run a grid over the two loss weights.
    Sweep(SweepArgs),
    /// Compare the full objective with single-loss ablations and the backbone.
    Ablate(ExpArgs),
    /// Per-epoch training time of the backbone and the CIE model.
    Timing(ExpArgs),
    /// Summarize metrics files as a table.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct ExpArgs {
    /// File of `key = value` settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    id: Option<String>,
    /// Bundle directory; the default is a generated SBM.
    #[arg(long)]
    data: Option<PathBuf>,
    /// gcn, sage or gat.
    #[arg(long)]
    backbone: Option<String>,
    /// Train with the soft mask and extra losses (true/false).
    #[arg(long)]
    cie: Option<String>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// linear, poly:D:C, rbf:median, rbf:SIGMA or rq:ALPHA:LENGTHSCALE.
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    /// canonical, unbiased, label:E, structural:E, mixed:EL,ES or small:K.
    #[arg(long)]
    bias: Option<String>,
    /// Comma list or half-open range `a..b`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Run seeds one after another.
    #[arg(long)]
    serial: bool,
    /// Append JSON-lines metrics to this file.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    exp: ExpArgs,
    /// Save the first seed's best-validation model here.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    exp: ExpArgs,
    /// Which weight varies while the other stays at `--fixed`: lambda1,
    /// lambda2, or both (full grid).
    #[arg(long, default_value = "both")]
    vary: String,
    #[arg(long, default_value_t = 0.5)]
    fixed: f64,
    #[arg(long, default_value_t = 0.1)]
    step: f64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    nodes_per_class: usize,
    #[arg(long)]
    p_in: Option<f64>,
    #[arg(long)]
    p_out: Option<f64>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InjectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    bias: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for `splits.txt` and `bias_report.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

type CliResult<T> = Result<T, CieError>;

impl ExpArgs {
    fn settings(&self) -> CliResult<Vec<(String, String)>> {
        let mut kv = Vec::new();
        if let Some(p) = &self.config {
            kv.extend(read_config_file(p)?);
        }
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CieError::Config(format!("`--set {s}` is not key=value")))?;
            kv.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k.to_owned(), v));
            }
        };
        push("id", self.id.clone());
        push("data", self.data.as_ref().map(|p| p.display().to_string()));
        push("backbone", self.backbone.clone());
        push("cie", self.cie.clone());
        push("lambda1", self.lambda1.map(|v| v.to_string()));
        push("lambda2", self.lambda2.map(|v| v.to_string()));
        push("kernel", self.kernel.clone());
        push("lr", self.lr.map(|v| v.to_string()));
        push("weight_decay", self.weight_decay.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("patience", self.patience.map(|v| v.to_string()));
        push("dropout", self.dropout.map(|v| v.to_string()));
        push("hidden", self.hidden.map(|v| v.to_string()));
        push("bias", self.bias.clone());
        push("seeds", self.seeds.clone());
        push("mc_samples", self.mc_samples.map(|v| v.to_string()));
        if self.serial {
            push("parallel", Some("false".into()));
        }
        Ok(kv)
    }

    fn config(&self) -> CliResult<ExperimentConfig> {
        let mut c = ExperimentConfig::default();
        c.apply(&self.settings()?)?;
        c.validate()?;
        Ok(c)
    }

    fn emit(&self, summaries: &[&ExperimentSummary]) -> CliResult<()> {
        if let Some(p) = &self.metrics {
            for s in summaries {
                append_metrics(&s.metrics(), p)?;
            }
        }
        Ok(())
    }
}

/// Left-aligned first column, right-aligned rest.
fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = width[i])
                } else {
                    format!("{c:>w$}", w = width[i])
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = vec![line(header.to_vec())];
    out.push(width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
    out.extend(rows.iter().map(|r| line(r.iter().map(String::as_str).collect())));
    out.join("\n")
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn summary_row(label: &str, s: &ExperimentSummary) -> Vec<String> {
    vec![
        label.to_owned(),
        s.config.variant(),
        s.config.bias.to_string(),
        s.config.lambda1.to_string(),
        s.config.lambda2.to_string(),
        s.trials.len().to_string(),
        pct(s.mean),
        pct(s.std),
        format!("{:.2e}", s.mean_epoch_seconds()),
    ]
}

const SUMMARY_HEADER: [&str; 9] = ["experiment", "model", "bias", "λ1", "λ2", "seeds", "acc %", "std", "s/epoch"];

fn synth(a: &SynthArgs) -> CliResult<()> {
    let d = SbmSpec::default();
    let spec = SbmSpec {
        classes: a.classes,
        nodes_per_class: a.nodes_per_class,
        p_in: a.p_in.unwrap_or(d.p_in),
        p_out: a.p_out.unwrap_or(d.p_out),
        features: a.features.unwrap_or(d.features.max(a.classes)),
        tau: a.tau.unwrap_or(d.tau),
        seed: a.seed,
        ..d
    };
    spec.validate().map_err(|e| CieError::Config(e.to_string()))?;
    let g = synth_sbm(&spec)?;
    save_graph(&g, &a.out)?;
    println!(
        "wrote {}: {} nodes, {} edges, {} features, {} classes",
        a.out.display(),
        g.num_nodes(),
        g.edges().len(),
        g.num_features(),
        g.num_classes()
    );
    Ok(())
}

fn inject(a: &InjectArgs) -> CliResult<()> {
    let spec: BiasSpec = a.bias.parse()?;
    let g = load_graph(&a.data)?;
    let prep = prepare_trial(&g, &spec, a.seed)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CieError::Io {
        path: a.out.clone(),
        source: e,
    })?;
    save_splits(&assignment_of(prep.full_graph.splits()), &a.out.join("splits.txt"))?;
    let report_path = a.out.join("bias_report.json");
    let json = serde_json::to_string_pretty(&prep.full_report()).expect("report serializes");
    std::fs::write(&report_path, json + "\n").map_err(|e| CieError::Io {
        path: report_path.clone(),
        source: e,
    })?;
    println!(
        "{}: {} training nodes, {} edges removed, mean consistency {:.3}",
        spec,
        prep.train_nodes.len(),
        prep.removed_edges.len(),
        prep.report.mean_consistency
    );
    Ok(())
}

fn train(a: &TrainArgs) -> CliResult<()> {
    let cfg = a.exp.config()?;
    let ds = cfg.load_dataset()?;
    let summary = run_experiment_on(&ds, &cfg)?;
    if let Some(p) = &a.checkpoint {
        let (_, model) = train_model(&ds, &cfg, cfg.seeds[0])?;
        checkpoint::save(&model, p)?;
    }
    let rows: Vec<Vec<String>> = summary
        .trials
        .iter()
        .map(|t| {
            vec![
                t.seed.to_string(),
                pct(t.test_accuracy),
                pct(t.best_val_accuracy),
                t.best_val_epoch.to_string(),
                t.epochs_run.to_string(),
                format!("{:.2e}", t.epoch_seconds),
            ]
        })
        .collect();
    println!("{cfg}");
    println!("{}", table(&["seed", "test %", "val %", "best epoch", "epochs", "s/epoch"], &rows));
    println!("mean {} ± {}", pct(summary.mean), pct(summary.std));
    a.exp.emit(&[&summary])
}

fn run_sweep(a: &SweepArgs) -> CliResult<()> {
    let cfg = a.exp.config()?;
    if !(a.step > 0.0 && a.step <= 1.0) {
        return Err(CieError::Config(format!("step must lie in (0, 1], got {}", a.step)));
    }
    let axis = unit_steps(a.step);
    let points = match a.vary.as_str() {
        "lambda1" => grid(&axis, &[a.fixed]),
        "lambda2" => grid(&[a.fixed], &axis),
        "both" => grid(&axis, &axis),
        other => return Err(CieError::Config(format!("unknown sweep axis `{other}`"))),
    };
    let rows = sweep(&cfg, &points)?;
    let table_rows: Vec<Vec<String>> = rows.iter().map(|r| summary_row(&r.summary.config.id, &r.summary)).collect();
    println!("{}", table(&SUMMARY_HEADER, &table_rows));
    a.exp.emit(&rows.iter().map(|r| &r.summary).collect::<Vec<_>>())
}

fn run_ablate(a: &ExpArgs) -> CliResult<()> {
    let cfg = a.config()?;
    let ab = ablate(&cfg)?;
    let rows: Vec<Vec<String>> = ab.rows().iter().map(|(l, s)| summary_row(l, s)).collect();
    println!("{}", table(&SUMMARY_HEADER, &rows));
    a.emit(&ab.rows().map(|(_, s)| s))
}

fn run_timing(a: &ExpArgs) -> CliResult<()> {
    let cfg = a.config()?;
    let base = ExperimentConfig {
        id: format!("{}/backbone", cfg.id),
        cie: false,
        ..cfg.clone()
    };
    let full = ExperimentConfig {
        id: format!("{}/cie", cfg.id),
        cie: true,
        ..cfg
    };
    let t = timing_report(&[base, full])?;
    let rows: Vec<Vec<String>> = t
        .iter()
        .map(|r| vec![r.id.clone(), r.variant.clone(), r.epochs.to_string(), format!("{:.3e}", r.epoch_seconds)])
        .collect();
    println!("{}", table(&["experiment", "model", "epochs", "s/epoch"], &rows));
    println!("ratio {:.2}", t[1].epoch_seconds / t[0].epoch_seconds);
    Ok(())
}

fn report(a: &ReportArgs) -> CliResult<()> {
    let mut groups: BTreeMap<String, Vec<TrialRecord>> = BTreeMap::new();
    for f in &a.files {
        for line in read_metrics(Path::new(f))? {
            if let MetricsLine::Trial(t) = line {
                groups.entry(t.experiment_id.clone()).or_default().push(t);
            }
        }
    }
    let rows: Vec<Vec<String>> = groups
        .iter()
        .map(|(id, ts)| {
            let acc: Vec<f64> = ts.iter().map(|t| t.test_accuracy).collect();
            let (mean, std) = mean_std(&acc);
            let secs = ts.iter().map(|t| t.epoch_seconds).sum::<f64>() / ts.len() as f64;
            vec![
                id.clone(),
                ts[0].backbone.clone(),
                ts[0].bias.clone(),
                ts[0].lambda1.to_string(),
                ts[0].lambda2.to_string(),
                ts.len().to_string(),
                pct(mean),
                pct(std),
                format!("{secs:.2e}"),
            ]
        })
        .collect();
    println!("{}", table(&SUMMARY_HEADER, &rows));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Inject(a) => inject(a),
        Command::Train(a) => train(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Timing(a) => run_timing(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 3 })
        }
    }
}
