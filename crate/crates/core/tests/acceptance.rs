//! End-to-end acceptance checks. Prints one PASS/FAIL/SKIP line per
//! criterion and exits nonzero if any check fails.
//!
//! Set `CIE_CORA_DIR` to a node/edge/split bundle of Cora to enable the
//! real-data check.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use cie_core::bias::{label_selection_bias, mean_consistency, small_sample_bias, structural_bias, BiasSpec};
use cie_core::diff::Tape;
use cie_core::graph::Split;
use cie_core::harness::{ablate, run_experiment_on, timing_report, DataSource, ExperimentConfig};
use cie_core::io::{load_graph, synth_sbm, SbmSpec};
use cie_core::kernels::{cka_value, gram_matrix, hsic_value, KernelSpec};
use cie_core::layers::BackboneKind;
use cie_core::model::{CieConfig, GraphInput};
use cie_core::{seeded_rng, Matrix};
use rand::Rng as _;

use common::{fixed_rbf_cie, naive_double_sum, param_gradient_errors, planted, random_graph, small_model};

const KINDS: [BackboneKind; 3] = [BackboneKind::Gcn, BackboneKind::Sage, BackboneKind::Gat];

enum Outcome {
    Pass,
    Fail,
    Skip,
}

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, outcome: Outcome, detail: String, took: Duration) {
        let tag = match outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => {
                self.failed += 1;
                "FAIL"
            }
            Outcome::Skip => "SKIP",
        };
        println!("{tag} [{id}] {name}: {detail} ({:.2} s)", took.as_secs_f64());
    }

    fn check(&mut self, id: u32, name: &str, ok: bool, detail: String, took: Duration) {
        self.line(id, name, if ok { Outcome::Pass } else { Outcome::Fail }, detail, took);
    }
}

fn random_matrix(rng: &mut cie_core::Rng, m: usize, d: usize) -> Matrix {
    Matrix::from_shape_fn((m, d), |_| rng.random_range(-2.0..2.0))
}

fn families() -> [KernelSpec; 4] {
    [KernelSpec::Linear, KernelSpec::polynomial(), KernelSpec::rbf(), KernelSpec::rational_quadratic()]
}

fn hsic_oracle(r: &mut Report) {
    let t = Instant::now();
    let mut rng = seeded_rng(101);
    let mut worst = 0.0f64;
    for kernel in families() {
        for _ in 0..100 {
            let m = rng.random_range(2..=50);
            let d = rng.random_range(1..=8);
            let k = gram_matrix(&kernel, &random_matrix(&mut rng, m, d)).unwrap();
            let l = gram_matrix(&kernel, &random_matrix(&mut rng, m, d)).unwrap();
            let fast = hsic_value(&k, &l).unwrap();
            let slow = naive_double_sum(k.matrix(), l.matrix());
            worst = worst.max((fast - slow).abs() / slow.abs().max(1e-300));
        }
    }
    let took = t.elapsed();
    let ok = worst < 1e-10 && took < Duration::from_secs(10);
    r.check(1, "hsic oracle equivalence", ok, format!("max relative error {worst:.2e} over 400 pairs"), took);
}

fn cka_properties(r: &mut Report) {
    let t = Instant::now();
    let mut rng = seeded_rng(102);
    let (mut self_err, mut scale_err, mut out_of_range, mut asym) = (0.0f64, 0.0f64, 0usize, 0usize);
    for i in 0..100 {
        let kernel = families()[i % 4];
        let m = rng.random_range(3..30);
        let d = rng.random_range(1..6);
        let x = random_matrix(&mut rng, m, d);
        let y = random_matrix(&mut rng, m, d);
        self_err = self_err.max((cka_value(&x, &x, &kernel).unwrap().0 - 1.0).abs());
        for c in [0.1, 3.0, -2.0] {
            scale_err = scale_err.max((cka_value(&x, &(&x * c), &KernelSpec::Linear).unwrap().0 - 1.0).abs());
        }
        let xy = cka_value(&x, &y, &kernel).unwrap().0;
        if xy != cka_value(&y, &x, &kernel).unwrap().0 {
            asym += 1;
        }
        if !(0.0..=1.0 + 1e-9).contains(&xy) {
            out_of_range += 1;
        }
    }
    let ok = self_err < 1e-9 && scale_err < 1e-9 && asym == 0 && out_of_range == 0;
    let detail = format!(
        "|cka(X,X)-1| {self_err:.1e}, |cka(X,cX)-1| {scale_err:.1e}, asymmetric {asym}, out of range {out_of_range}"
    );
    r.check(2, "cka properties", ok, detail, t.elapsed());
}

fn gradient_suite(r: &mut Report) {
    let t = Instant::now();
    let g = random_graph(6, 3, 2, 0.5, 103);
    let gi = GraphInput::new(&g).unwrap();
    let train: Vec<usize> = (0..6).collect();
    let mut worst = (0.0f64, String::new());
    for kind in KINDS {
        let m = small_model(kind, 3, 2, Some(fixed_rbf_cie(1.0)), 7);
        let noise = common::training_noise(&m, &gi, train.len(), 11);
        for (name, e) in param_gradient_errors(&m, 1e-5, |m| m.total_loss_with_noise(&gi, g.labels(), &train, &noise)) {
            if e >= worst.0 {
                worst = (e, format!("{kind} {name}"));
            }
        }
    }
    let took = t.elapsed();
    let ok = worst.0 < 1e-4 && took < Duration::from_secs(30);
    r.check(3, "total-loss gradient suite", ok, format!("max relative error {:.2e} at {}", worst.0, worst.1), took);
}

fn mask_invariants(r: &mut Report) {
    let t = Instant::now();
    let (mut mask_err, mut sum_err) = (0.0f64, 0.0f64);
    for pass in 0..1000u64 {
        let kind = KINDS[pass as usize % 3];
        let n = 2 + (pass as usize % 11);
        let g = random_graph(n, 3, 2, 0.3, pass);
        let gi = GraphInput::new(&g).unwrap();
        let m = small_model(kind, 3, 2, Some(CieConfig::default()), pass + 5000);
        let noise = m
            .draw_noise(&gi, n, pass % 2 == 0, &mut seeded_rng(pass), &mut seeded_rng(pass + 1))
            .unwrap();
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape);
        let h = m.encode(&mut tape, &b, &gi, &noise).unwrap();
        let reps = m.disentangle(&mut tape, &b, h).unwrap();
        let total = tape.value(reps.mc) + tape.value(reps.ms);
        mask_err = total.iter().fold(mask_err, |a, v| a.max((v - 1.0).abs()));
        let back = tape.value(reps.hc) + tape.value(reps.hs) - tape.value(h);
        sum_err = back.iter().fold(sum_err, |a, v| a.max(v.abs()));
    }
    let ok = mask_err < 1e-9 && sum_err < 1e-9;
    let detail = format!("max|Mc+Ms-1| {mask_err:.1e}, max|Hc+Hs-H| {sum_err:.1e} over 1000 passes");
    r.check(4, "mask invariants", ok, detail, t.elapsed());
}

fn bias_contracts(r: &mut Report) {
    let t = Instant::now();
    let g = synth_sbm(&SbmSpec::default()).unwrap();
    let e = g.edges().len();
    let mut counts_ok = true;
    let mut parts = Vec::new();
    for eps in [0.4, 0.6, 0.8] {
        let (out, removed) = structural_bias(&g, eps, &mut seeded_rng(104)).unwrap();
        let k = (eps * e as f64).floor() as usize;
        counts_ok &= removed.len() == k && out.edges().len() == e - k && out.num_nodes() == g.num_nodes();
        parts.push(format!("{eps}: {}/{e} removed", removed.len()));
    }
    let mut wins = 0;
    for seed in 0..20 {
        let p = planted(seed);
        let lo = label_selection_bias(&p, 0.4, 20, &mut seeded_rng(1000 + seed)).unwrap();
        let hi = label_selection_bias(&p, 0.8, 20, &mut seeded_rng(2000 + seed)).unwrap();
        if mean_consistency(&p, &hi).unwrap() < mean_consistency(&p, &lo).unwrap() {
            wins += 1;
        }
    }
    let mut small_ok = true;
    for k in [1, 5, 10] {
        let s = small_sample_bias(&g, k, &mut seeded_rng(k as u64)).unwrap();
        small_ok &= (0..g.num_classes()).all(|c| s.iter().filter(|&&i| g.labels()[i] == c).count() == k);
        small_ok &= s.iter().all(|&i| !matches!(g.splits()[i], Split::Val | Split::Test));
    }
    let ok = counts_ok && wins >= 15 && small_ok;
    let detail = format!(
        "structural {}; sign test {wins}/20 (need 15); small-sample exact {small_ok}",
        parts.join(", ")
    );
    r.check(5, "bias-injection contracts", ok, detail, t.elapsed());
}

fn directional_and_ablation(r: &mut Report) {
    let t = Instant::now();
    let cfg = ExperimentConfig {
        id: "acceptance-mixed".into(),
        bias: BiasSpec::Mixed { label: 0.6, structural: 0.6 },
        ..ExperimentConfig::default()
    };
    let ab = ablate(&cfg).unwrap();
    let took = t.elapsed();
    let gain = ab.full.mean - ab.backbone_only.mean;
    let ok = gain >= 0.01 && took < Duration::from_secs(15 * 60);
    let detail = format!(
        "gcn+cie {:.2}% vs gcn {:.2}%, gain {:+.2} points over {} seeds",
        100.0 * ab.full.mean,
        100.0 * ab.backbone_only.mean,
        100.0 * gain,
        ab.full.trials.len()
    );
    r.check(6, "directional gain under mixed bias", ok, detail, took);

    let worst = ab.full.mean - ab.without_idp.mean.max(ab.without_backdoor.mean);
    let ok = worst >= -0.005;
    let detail = format!(
        "full {:.2}%, w/o idp {:.2}%, w/o backdoor {:.2}%",
        100.0 * ab.full.mean,
        100.0 * ab.without_idp.mean,
        100.0 * ab.without_backdoor.mean
    );
    r.check(7, "ablation pattern", ok, detail, Duration::ZERO);
}

fn timing(r: &mut Report) {
    let t = Instant::now();
    let base = ExperimentConfig {
        seeds: vec![0, 1, 2],
        ..ExperimentConfig::default()
    };
    let rows = timing_report(&[
        ExperimentConfig { id: "gcn".into(), cie: false, ..base.clone() },
        ExperimentConfig { id: "gcn+cie".into(), ..base },
    ])
    .unwrap();
    let ratio = rows[1].epoch_seconds / rows[0].epoch_seconds;
    let detail = format!(
        "gcn {:.2e} s/epoch, gcn+cie {:.2e} s/epoch, ratio {ratio:.2}",
        rows[0].epoch_seconds, rows[1].epoch_seconds
    );
    r.check(8, "per-epoch timing ratio", ratio < 10.0, detail, t.elapsed());
}

fn cora(r: &mut Report) {
    let Some(dir) = std::env::var_os("CIE_CORA_DIR").map(PathBuf::from) else {
        r.line(9, "cora bundle", Outcome::Skip, "CIE_CORA_DIR not set".into(), Duration::ZERO);
        return;
    };
    let t = Instant::now();
    let g = match load_graph(&dir) {
        Ok(g) => g,
        Err(e) => {
            r.check(9, "cora bundle", false, format!("failed to load {}: {e}", dir.display()), t.elapsed());
            return;
        }
    };
    let stats = (g.num_nodes(), g.num_features(), g.num_classes());
    let stats_ok = stats == (2708, 1433, 7);
    let bias = if g.nodes_with(Split::Train).is_empty() { BiasSpec::Unbiased } else { BiasSpec::Canonical };
    let cfg = ExperimentConfig {
        id: "acceptance-cora".into(),
        data: DataSource::Bundle(dir),
        bias,
        ..ExperimentConfig::default()
    };
    let s = run_experiment_on(&g, &cfg).unwrap();
    let ok = stats_ok && (0.78..=0.83).contains(&s.mean);
    let detail = format!(
        "N {} F {} C {} |E| {}; unbiased gcn+cie {:.2}% over {} seeds ({bias})",
        stats.0,
        stats.1,
        stats.2,
        g.edges().len(),
        100.0 * s.mean,
        s.trials.len()
    );
    r.check(9, "cora bundle", ok, detail, t.elapsed());
}

fn main() {
    let mut r = Report { failed: 0 };
    hsic_oracle(&mut r);
    cka_properties(&mut r);
    gradient_suite(&mut r);
    mask_invariants(&mut r);
    bias_contracts(&mut r);
    directional_and_ablation(&mut r);
    timing(&mut r);
    cora(&mut r);
    if r.failed > 0 {
        println!("{} acceptance check(s) failed", r.failed);
        std::process::exit(1);
    }
    println!("all acceptance checks passed");
}
