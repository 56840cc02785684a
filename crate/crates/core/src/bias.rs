//! Biased training splits and perturbed training graphs.
//!
//! Every operation works on the training graph and only reassigns nodes
//! between `train` and `unused`; validation and test roles are never
//! touched. Candidates for selection are all nodes that are neither
//! validation nor test.
//!
//! Label-selection bias draws each class's training nodes one at a time.
//! With probability `ε` the draw comes from the class's inconsistent pool
//! (nodes whose neighbourhood consistency is below one half) and otherwise
//! from all remaining candidates of the class. An exhausted inconsistent
//! pool falls back to the remaining candidates, and `ε = 0` is plain uniform
//! selection.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, IndexedRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::graph::{build_csr, CsrAdjacency, GraphDataset, Split};
use crate::{CieError, Result, Rng};

/// Consistency below this value puts a node in the inconsistent pool.
pub const INCONSISTENCY_THRESHOLD: f64 = 0.5;

/// Training nodes per class for the unbiased and label-selection regimes.
pub const DEFAULT_PER_CLASS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BiasSpec {
    /// Keep the training nodes already marked in the graph.
    Canonical,
    /// `DEFAULT_PER_CLASS` uniform nodes per class.
    Unbiased,
    LabelSelection(f64),
    Structural(f64),
    Mixed { label: f64, structural: f64 },
    SmallSample(usize),
}

impl BiasSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |eps: f64| {
            if (0.0..1.0).contains(&eps) {
                Ok(())
            } else {
                Err(CieError::Parameter(format!("bias strength must lie in [0, 1), got {eps}")))
            }
        };
        match *self {
            BiasSpec::Canonical | BiasSpec::Unbiased => Ok(()),
            BiasSpec::LabelSelection(e) | BiasSpec::Structural(e) => check(e),
            BiasSpec::Mixed { label, structural } => check(label).and(check(structural)),
            BiasSpec::SmallSample(0) => {
                Err(CieError::Parameter("small-sample bias needs k >= 1".into()))
            }
            BiasSpec::SmallSample(_) => Ok(()),
        }
    }
}

impl fmt::Display for BiasSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BiasSpec::Canonical => write!(f, "canonical"),
            BiasSpec::Unbiased => write!(f, "unbiased"),
            BiasSpec::LabelSelection(e) => write!(f, "label:{e}"),
            BiasSpec::Structural(e) => write!(f, "structural:{e}"),
            BiasSpec::Mixed { label, structural } => write!(f, "mixed:{label},{structural}"),
            BiasSpec::SmallSample(k) => write!(f, "small:{k}"),
        }
    }
}

impl FromStr for BiasSpec {
    type Err = CieError;

    /// Accepts `canonical`, `unbiased`, `label:ε`, `structural:ε`,
    /// `mixed:ε_label,ε_struct` and `small:k`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || CieError::Config(format!("cannot parse bias spec `{s}`"));
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        let (kind, arg) = match s.trim().split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s.trim(), None),
        };
        let spec = match (kind, arg) {
            ("canonical", None) => BiasSpec::Canonical,
            ("unbiased", None) => BiasSpec::Unbiased,
            ("label", Some(a)) => BiasSpec::LabelSelection(num(a)?),
            ("structural", Some(a)) => BiasSpec::Structural(num(a)?),
            ("mixed", Some(a)) => {
                let (l, r) = a.split_once(',').ok_or_else(bad)?;
                BiasSpec::Mixed { label: num(l)?, structural: num(r)? }
            }
            ("small", Some(a)) => BiasSpec::SmallSample(a.trim().parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        spec.validate().map_err(|e| CieError::Config(e.to_string()))?;
        Ok(spec)
    }
}

/// What a bias operation did, for writing next to the split files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub spec: String,
    pub train_nodes: Vec<usize>,
    pub removed_edges: Vec<(usize, usize)>,
    /// Mean neighbourhood consistency of the training nodes, measured on the
    /// graph before any edges were removed.
    pub mean_consistency: f64,
    pub class_counts: Vec<usize>,
}

/// Biased training graph plus its report.
#[derive(Clone, Debug)]
pub struct BiasOutcome {
    pub graph: GraphDataset,
    pub report: BiasReport,
}

fn consistency_in(adj: &CsrAdjacency, labels: &[usize], node: usize) -> f64 {
    let nbrs = adj.neighbors(node);
    if nbrs.is_empty() {
        return 1.0;
    }
    let same = nbrs.iter().filter(|&&v| labels[v] == labels[node]).count();
    same as f64 / nbrs.len() as f64
}

/// Fraction of `node`'s neighbours that share its label; 1 for an isolated
/// node.
pub fn neighborhood_consistency(graph: &GraphDataset, node: usize) -> Result<f64> {
    if node >= graph.num_nodes() {
        return Err(CieError::Index {
            what: "node",
            index: node,
            bound: graph.num_nodes(),
        });
    }
    Ok(consistency_in(&build_csr(graph)?, graph.labels(), node))
}

/// Mean consistency over `nodes` (0 for an empty set).
pub fn mean_consistency(graph: &GraphDataset, nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Ok(0.0);
    }
    let adj = build_csr(graph)?;
    let total: f64 = nodes.iter().map(|&i| consistency_in(&adj, graph.labels(), i)).sum();
    Ok(total / nodes.len() as f64)
}

/// Selection candidates grouped by class, ascending within each class.
fn candidates_by_class(graph: &GraphDataset, need: usize) -> Result<Vec<Vec<usize>>> {
    let mut by_class = vec![Vec::new(); graph.num_classes()];
    for (i, (&s, &y)) in graph.splits().iter().zip(graph.labels()).enumerate() {
        if s != Split::Val && s != Split::Test {
            by_class[y].push(i);
        }
    }
    if let Some((c, pool)) = by_class.iter().enumerate().find(|(_, p)| p.len() < need) {
        return Err(CieError::Validation(format!(
            "class {c} has {} candidate nodes, {need} needed",
            pool.len()
        )));
    }
    Ok(by_class)
}

fn uniform_per_class(graph: &GraphDataset, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for pool in candidates_by_class(graph, k)? {
        out.extend(index::sample(rng, pool.len(), k).into_iter().map(|j| pool[j]));
    }
    out.sort_unstable();
    Ok(out)
}

/// `per_class` nodes per class, drawn with a tendency towards nodes whose
/// neighbours mostly carry other labels. Returns the selected nodes
/// ascending.
pub fn label_selection_bias(graph: &GraphDataset, eps: f64, per_class: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    BiasSpec::LabelSelection(eps).validate()?;
    let adj = build_csr(graph)?;
    let labels = graph.labels();
    let mut out = Vec::new();
    for mut remaining in candidates_by_class(graph, per_class)? {
        for _ in 0..per_class {
            let inconsistent: Vec<usize> = (0..remaining.len())
                .filter(|&j| consistency_in(&adj, labels, remaining[j]) < INCONSISTENCY_THRESHOLD)
                .collect();
            let use_pool = rng.random::<f64>() < eps;
            let j = match inconsistent.choose(rng) {
                Some(&j) if use_pool => j,
                _ => rng.random_range(0..remaining.len()),
            };
            out.push(remaining.swap_remove(j));
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Removes exactly `⌊ε·|E|⌋` edges chosen uniformly without replacement.
/// Returns the new graph and the removed edges, ascending.
pub fn structural_bias(graph: &GraphDataset, eps: f64, rng: &mut Rng) -> Result<(GraphDataset, Vec<(usize, usize)>)> {
    BiasSpec::Structural(eps).validate()?;
    let edges = graph.edges();
    let k = (eps * edges.len() as f64).floor() as usize;
    let mut drop = vec![false; edges.len()];
    for j in index::sample(rng, edges.len(), k) {
        drop[j] = true;
    }
    let (removed, kept): (Vec<_>, Vec<_>) = edges.iter().zip(&drop).partition(|(_, &d)| d);
    let kept = kept.into_iter().map(|(&e, _)| e).collect();
    let removed = removed.into_iter().map(|(&e, _)| e).collect();
    Ok((graph.with_edges(kept)?, removed))
}

/// Label selection on the intact structure, then structural removal.
pub fn mixed_bias(
    graph: &GraphDataset,
    eps_label: f64,
    eps_struct: f64,
    rng: &mut Rng,
) -> Result<(Vec<usize>, GraphDataset, Vec<(usize, usize)>)> {
    let train = label_selection_bias(graph, eps_label, DEFAULT_PER_CLASS, rng)?;
    let (g, removed) = structural_bias(graph, eps_struct, rng)?;
    Ok((train, g, removed))
}

/// Uniform `k` nodes per class.
pub fn small_sample_bias(graph: &GraphDataset, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    BiasSpec::SmallSample(k).validate()?;
    uniform_per_class(graph, k, rng)
}

/// Uniform `DEFAULT_PER_CLASS` nodes per class.
pub fn unbiased_split(graph: &GraphDataset, rng: &mut Rng) -> Result<Vec<usize>> {
    uniform_per_class(graph, DEFAULT_PER_CLASS, rng)
}

/// Marks exactly `train` as training nodes; previous training nodes that are
/// not in `train` become unused.
pub fn assign_train(graph: &GraphDataset, train: &[usize]) -> Result<GraphDataset> {
    let mut splits: Vec<Split> = graph
        .splits()
        .iter()
        .map(|&s| if s == Split::Train { Split::Unused } else { s })
        .collect();
    for &i in train {
        match splits.get(i) {
            Some(Split::Val | Split::Test) => {
                return Err(CieError::Contract(format!("node {i} is already a validation or test node")))
            }
            Some(_) => splits[i] = Split::Train,
            None => {
                return Err(CieError::Index {
                    what: "node",
                    index: i,
                    bound: graph.num_nodes(),
                })
            }
        }
    }
    graph.with_splits(splits)
}

/// Applies `spec` to a training graph.
pub fn apply_bias(graph: &GraphDataset, spec: &BiasSpec, rng: &mut Rng) -> Result<BiasOutcome> {
    spec.validate()?;
    let (train, edited, removed) = match *spec {
        BiasSpec::Canonical => {
            let train = graph.nodes_with(Split::Train);
            if train.is_empty() {
                return Err(CieError::Validation("canonical split has no training nodes".into()));
            }
            (train, None, Vec::new())
        }
        BiasSpec::Unbiased => (unbiased_split(graph, rng)?, None, Vec::new()),
        BiasSpec::LabelSelection(e) => (label_selection_bias(graph, e, DEFAULT_PER_CLASS, rng)?, None, Vec::new()),
        BiasSpec::Structural(e) => {
            let train = unbiased_split(graph, rng)?;
            let (g, removed) = structural_bias(graph, e, rng)?;
            (train, Some(g), removed)
        }
        BiasSpec::Mixed { label, structural } => {
            let (train, g, removed) = mixed_bias(graph, label, structural, rng)?;
            (train, Some(g), removed)
        }
        BiasSpec::SmallSample(k) => (small_sample_bias(graph, k, rng)?, None, Vec::new()),
    };
    let mean = mean_consistency(graph, &train)?;
    let out = assign_train(edited.as_ref().unwrap_or(graph), &train)?;
    let report = BiasReport {
        spec: spec.to_string(),
        class_counts: out.class_counts(Split::Train),
        train_nodes: train,
        removed_edges: removed,
        mean_consistency: mean,
    };
    Ok(BiasOutcome { graph: out, report })
}
