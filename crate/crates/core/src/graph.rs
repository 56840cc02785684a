//! Graph storage, normalisation, sampling and the inductive split.

use std::collections::HashSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::{CieError, Matrix, Result, Rng};

/// Role of a node in an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unused,
}

impl Split {
    pub fn token(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unused => "unused",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unused" => Ok(Split::Unused),
            other => Err(format!("unknown split role `{other}`")),
        }
    }
}

/// Node features, labels, undirected edges and split roles.
///
/// Edges are stored once as `(u, v)` with `u < v`, sorted, without
/// duplicates or self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    edges: Vec<(usize, usize)>,
    splits: Vec<Split>,
}

impl GraphDataset {
    /// Validates and builds a dataset. Edges may be given in either
    /// orientation; duplicates (in either orientation) and self-loops are
    /// rejected.
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        edges: Vec<(usize, usize)>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n {
            return Err(CieError::Validation(format!(
                "{} labels for {n} nodes",
                labels.len()
            )));
        }
        if splits.len() != n {
            return Err(CieError::Validation(format!(
                "{} split roles for {n} nodes",
                splits.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(CieError::Validation(format!(
                "node {i} has label {y} but only {num_classes} classes"
            )));
        }
        let mut seen = HashSet::with_capacity(edges.len());
        let mut canon = Vec::with_capacity(edges.len());
        for &(a, b) in &edges {
            if a >= n || b >= n {
                return Err(CieError::Validation(format!(
                    "edge ({a}, {b}) has an endpoint outside 0..{n}"
                )));
            }
            if a == b {
                return Err(CieError::Validation(format!("self-loop at node {a}")));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(CieError::Validation(format!(
                    "duplicate edge ({}, {})",
                    e.0, e.1
                )));
            }
            canon.push(e);
        }
        canon.sort_unstable();
        Ok(Self {
            features,
            labels,
            num_classes,
            edges: canon,
            splits,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// Indices of nodes with the given role, ascending.
    pub fn nodes_with(&self, role: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == role)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn with_splits(&self, splits: Vec<Split>) -> Result<Self> {
        Self::new(
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
            self.edges.clone(),
            splits,
        )
    }

    pub fn with_edges(&self, edges: Vec<(usize, usize)>) -> Result<Self> {
        Self::new(
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
            edges,
            self.splits.clone(),
        )
    }

    /// Per-class node counts over the given role.
    pub fn class_counts(&self, role: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for (i, &s) in self.splits.iter().enumerate() {
            if s == role {
                counts[self.labels[i]] += 1;
            }
        }
        counts
    }
}

/// Square sparse matrix in compressed-row form.
///
/// Columns are sorted within each row. Adjacencies built by this module are
/// symmetric; sampled aggregators (see [`mean_aggregator`]) need not be.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrAdjacency {
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl CsrAdjacency {
    /// Builds from per-row `(column, weight)` lists. Rows are sorted by
    /// column; callers must not pass duplicate columns.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let nnz = rows.iter().map(Vec::len).sum();
        let mut indices = Vec::with_capacity(nnz);
        let mut weights = Vec::with_capacity(nnz);
        offsets.push(0);
        for mut row in rows {
            row.sort_unstable_by_key(|&(c, _)| c);
            for (c, w) in row {
                indices.push(c);
                weights.push(w);
            }
            offsets.push(indices.len());
        }
        Self {
            offsets,
            indices,
            weights,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.indices[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn row_weights(&self, node: usize) -> &[f64] {
        &self.weights[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn weight(&self, u: usize, v: usize) -> Option<f64> {
        let cols = self.neighbors(u);
        cols.binary_search(&v).ok().map(|k| self.row_weights(u)[k])
    }

    /// True when every `(u, v)` entry has a matching `(v, u)` entry with a
    /// bitwise-equal weight.
    pub fn is_symmetric(&self) -> bool {
        (0..self.num_nodes()).all(|u| {
            self.neighbors(u)
                .iter()
                .zip(self.row_weights(u))
                .all(|(&v, &w)| self.weight(v, u) == Some(w))
        })
    }

    /// Dense copy, mostly for tests.
    pub fn to_dense(&self) -> Matrix {
        let n = self.num_nodes();
        let mut m = Matrix::zeros((n, n));
        for u in 0..n {
            for (&v, &w) in self.neighbors(u).iter().zip(self.row_weights(u)) {
                m[[u, v]] = w;
            }
        }
        m
    }
}

/// `D̃^{-1/2}(A+I)D̃^{-1/2}` stored as CSR; every node carries a self-loop.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency(CsrAdjacency);

impl NormalizedAdjacency {
    pub fn csr(&self) -> &CsrAdjacency {
        &self.0
    }

    pub fn into_csr(self) -> CsrAdjacency {
        self.0
    }

    pub fn self_weight(&self, node: usize) -> f64 {
        self.0.weight(node, node).unwrap_or(0.0)
    }
}

/// Symmetric unit-weight adjacency with both directions of every edge.
pub fn build_csr(dataset: &GraphDataset) -> Result<CsrAdjacency> {
    let n = dataset.num_nodes();
    let mut rows = vec![Vec::new(); n];
    for &(u, v) in dataset.edges() {
        if u >= n || v >= n {
            return Err(CieError::Validation(format!(
                "edge ({u}, {v}) has an endpoint outside 0..{n}"
            )));
        }
        rows[u].push((v, 1.0));
        rows[v].push((u, 1.0));
    }
    Ok(CsrAdjacency::from_rows(rows))
}

/// Symmetric normalisation with self-loops. Isolated nodes get weight 1 on
/// their self-loop.
pub fn sym_normalize(adj: &CsrAdjacency) -> NormalizedAdjacency {
    let n = adj.num_nodes();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|u| {
            let d: f64 = adj
                .neighbors(u)
                .iter()
                .zip(adj.row_weights(u))
                .filter(|(&v, _)| v != u)
                .map(|(_, &w)| w)
                .sum::<f64>()
                + 1.0;
            1.0 / d.sqrt()
        })
        .collect();
    let rows = (0..n)
        .map(|u| {
            let mut row: Vec<(usize, f64)> = adj
                .neighbors(u)
                .iter()
                .zip(adj.row_weights(u))
                .filter(|(&v, _)| v != u)
                .map(|(&v, &w)| (v, w * inv_sqrt[u] * inv_sqrt[v]))
                .collect();
            row.push((u, inv_sqrt[u] * inv_sqrt[u]));
            row
        })
        .collect();
    NormalizedAdjacency(CsrAdjacency::from_rows(rows))
}

/// Training graph with test nodes removed, plus the untouched full graph.
#[derive(Clone, Debug)]
pub struct InductiveSplit {
    pub train_graph: GraphDataset,
    pub full_graph: GraphDataset,
    /// `old_to_new[i]` is the index of full-graph node `i` in the training
    /// graph, or `None` for test nodes.
    pub old_to_new: Vec<Option<usize>>,
    /// `new_to_old[j]` is the full-graph index of training-graph node `j`.
    pub new_to_old: Vec<usize>,
}

/// Masks out test nodes and every edge touching them. Validation nodes stay
/// in the training graph.
pub fn inductive_split(dataset: &GraphDataset) -> Result<InductiveSplit> {
    if !dataset.splits().contains(&Split::Train) {
        return Err(CieError::Validation(
            "inductive split needs at least one training node".into(),
        ));
    }
    let mut old_to_new = vec![None; dataset.num_nodes()];
    let mut new_to_old = Vec::new();
    for (i, &s) in dataset.splits().iter().enumerate() {
        if s != Split::Test {
            old_to_new[i] = Some(new_to_old.len());
            new_to_old.push(i);
        }
    }
    let features = dataset.features().select(ndarray::Axis(0), &new_to_old);
    let labels = new_to_old.iter().map(|&i| dataset.labels()[i]).collect();
    let splits = new_to_old.iter().map(|&i| dataset.splits()[i]).collect();
    let edges = dataset
        .edges()
        .iter()
        .filter_map(|&(u, v)| Some((old_to_new[u]?, old_to_new[v]?)))
        .collect();
    let train_graph =
        GraphDataset::new(features, labels, dataset.num_classes(), edges, splits)?;
    Ok(InductiveSplit {
        train_graph,
        full_graph: dataset.clone(),
        old_to_new,
        new_to_old,
    })
}

/// All neighbours when `degree <= fanout`, otherwise a uniform sample of
/// `fanout` distinct neighbours. The result is sorted ascending.
pub fn neighbor_sample(adj: &CsrAdjacency, node: usize, fanout: usize, rng: &mut Rng) -> Vec<usize> {
    let nbrs = adj.neighbors(node);
    if nbrs.len() <= fanout {
        return nbrs.to_vec();
    }
    let mut picked: Vec<usize> = index::sample(rng, nbrs.len(), fanout)
        .into_iter()
        .map(|k| nbrs[k])
        .collect();
    picked.sort_unstable();
    picked
}

/// Row-normalised neighbour-mean operator. With `fanout = Some(k)` each row
/// averages over a uniform sample of at most `k` neighbours; `None` uses the
/// full neighbourhood. Rows of isolated nodes are empty (zero aggregate).
/// Self-loop entries in `adj` are ignored.
pub fn mean_aggregator(adj: &CsrAdjacency, fanout: Option<usize>, rng: &mut Rng) -> CsrAdjacency {
    let rows = (0..adj.num_nodes())
        .map(|u| {
            let nbrs: Vec<usize> = match fanout {
                Some(k) => neighbor_sample(adj, u, k, rng),
                None => adj.neighbors(u).to_vec(),
            };
            let nbrs: Vec<usize> = nbrs.into_iter().filter(|&v| v != u).collect();
            let w = 1.0 / nbrs.len().max(1) as f64;
            nbrs.into_iter().map(|v| (v, w)).collect()
        })
        .collect();
    CsrAdjacency::from_rows(rows)
}
