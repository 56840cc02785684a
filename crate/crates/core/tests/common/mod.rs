//! Shared fixtures and oracles for the integration tests.

#![allow(dead_code)]

use cie_core::graph::{GraphDataset, Split};
use cie_core::kernels::{Bandwidth, KernelSpec};
use cie_core::layers::{BackboneConfig, BackboneKind};
use cie_core::model::{CieConfig, CieModel, GraphInput, LossPass, ModelConfig, Noise};
use cie_core::{seeded_rng, Matrix, Result};
use rand::Rng as _;

/// Erdős–Rényi graph with uniform features, labels `i % classes`, all
/// nodes training nodes.
pub fn random_graph(n: usize, f: usize, classes: usize, p: f64, seed: u64) -> GraphDataset {
    let mut rng = seeded_rng(seed);
    let x = Matrix::from_shape_fn((n, f), |_| rng.random_range(-1.0..1.0));
    let labels = (0..n).map(|i| i % classes).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    GraphDataset::new(x, labels, classes, edges, vec![Split::Train; n]).unwrap()
}

/// Small model with narrow layers, for gradient checks.
pub fn small_model(kind: BackboneKind, f: usize, classes: usize, cie: Option<CieConfig>, seed: u64) -> CieModel {
    let mut backbone = BackboneConfig::new(kind, f, classes);
    backbone.hidden = 3;
    backbone.heads = 2;
    backbone.fanouts = (2, 2);
    CieModel::new(ModelConfig { backbone, cie }, &mut seeded_rng(seed)).unwrap()
}

pub fn fixed_rbf_cie(sigma: f64) -> CieConfig {
    CieConfig {
        lambda1: 0.5,
        lambda2: 0.5,
        kernel: KernelSpec::Rbf {
            bandwidth: Bandwidth::Fixed(sigma),
        },
        mc_samples: 1,
    }
}

pub fn training_noise(model: &CieModel, g: &GraphInput, n_train: usize, seed: u64) -> Noise {
    model
        .draw_noise(g, n_train, true, &mut seeded_rng(seed), &mut seeded_rng(seed + 1))
        .unwrap()
}

/// Largest `|analytic − numeric| / max|numeric|` for each parameter, using
/// central differences of `loss` with step `h`. Returns `(name, error)`.
pub fn param_gradient_errors<F>(model: &CieModel, h: f64, loss: F) -> Vec<(String, f64)>
where
    F: Fn(&CieModel) -> Result<LossPass>,
{
    let mut analytic = model.clone();
    let pass = loss(&analytic).unwrap();
    pass.backward(&mut analytic.params).unwrap();
    let ids: Vec<_> = model.params.ids().collect();
    let mut out = Vec::new();
    let mut probe = model.clone();
    for id in ids {
        let shape = probe.params.get(id).data.dim();
        let mut max_diff: f64 = 0.0;
        let mut max_num: f64 = 0.0;
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = probe.params.get(id).data[[r, c]];
                probe.params.get_mut(id).data[[r, c]] = orig + h;
                let up = loss(&probe).unwrap().breakdown.total;
                probe.params.get_mut(id).data[[r, c]] = orig - h;
                let down = loss(&probe).unwrap().breakdown.total;
                probe.params.get_mut(id).data[[r, c]] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = analytic.params.get(id).grad[[r, c]];
                max_diff = max_diff.max((ana - num).abs());
                max_num = max_num.max(num.abs());
            }
        }
        let err = if max_num > 0.0 { max_diff / max_num } else { max_diff };
        out.push((probe.params.get(id).name.clone(), err));
    }
    out
}

/// `Σ_ij K̃_ij L̃_ij / (m−1)²` with explicit row, column and grand means.
pub fn naive_double_sum(k: &Matrix, l: &Matrix) -> f64 {
    let m = k.nrows();
    let centred = |a: &Matrix| {
        let rm: Vec<f64> = (0..m).map(|i| (0..m).map(|j| a[[i, j]]).sum::<f64>() / m as f64).collect();
        let cm: Vec<f64> = (0..m).map(|j| (0..m).map(|i| a[[i, j]]).sum::<f64>() / m as f64).collect();
        let g = rm.iter().sum::<f64>() / m as f64;
        Matrix::from_shape_fn((m, m), |(i, j)| a[[i, j]] - rm[i] - cm[j] + g)
    };
    let (kc, lc) = (centred(k), centred(l));
    let mut s = 0.0;
    for i in 0..m {
        for j in 0..m {
            s += kc[[i, j]] * lc[[i, j]];
        }
    }
    s / ((m - 1) * (m - 1)) as f64
}

/// Two dense communities of 100 with 20% of labels flipped against their
/// community.
pub fn planted(seed: u64) -> GraphDataset {
    let mut rng = seeded_rng(seed);
    let n = 200;
    let labels: Vec<usize> = (0..n)
        .map(|i| {
            let c = i / 100;
            if rng.random::<f64>() < 0.2 {
                1 - c
            } else {
                c
            }
        })
        .collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if u / 100 == v / 100 { 0.1 } else { 0.01 };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    GraphDataset::new(Matrix::zeros((n, 1)), labels, 2, edges, vec![Split::Unused; n]).unwrap()
}
