//! Two-layer GCN, GraphSAGE and GAT backbones.
//!
//! Every layer supports two evaluations:
//!
//! - [`Layer::forward`]: the ordinary layer over all nodes.
//! - [`Layer::forward_with_self_rows`]: output rows for a set of target
//!   nodes, computed as if each target's own input row had been replaced by
//!   a supplied vector while every other row keeps the base input. The
//!   intervention loss uses this to evaluate one mixed representation per
//!   node without a full propagation per node.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diff::{dropout_mask, Bound, ParamId, ParamSet, Tape, Var};
use crate::graph::{build_csr, mean_aggregator, sym_normalize, CsrAdjacency, GraphDataset};
use crate::{CieError, Matrix, Result, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Gcn,
    Sage,
    Gat,
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Gcn => "gcn",
            BackboneKind::Sage => "sage",
            BackboneKind::Gat => "gat",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = CieError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(BackboneKind::Gcn),
            "sage" | "graphsage" => Ok(BackboneKind::Sage),
            "gat" => Ok(BackboneKind::Gat),
            other => Err(CieError::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu(s) => tape.leaky_relu(x, s),
        }
    }
}

/// Structural operators of one graph, built once and shared by all passes.
#[derive(Clone, Debug)]
pub struct GraphOperators {
    /// Unit-weight symmetric adjacency without self-loops.
    pub adjacency: Arc<CsrAdjacency>,
    /// `D̃^{-1/2}(A+I)D̃^{-1/2}`.
    pub normalized: Arc<CsrAdjacency>,
}

impl GraphOperators {
    pub fn new(graph: &GraphDataset) -> Result<Self> {
        let adj = build_csr(graph)?;
        let norm = sym_normalize(&adj).into_csr();
        Ok(Self {
            adjacency: Arc::new(adj),
            normalized: Arc::new(norm),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.num_nodes()
    }
}

/// Per-pass graph operator chosen by a layer.
#[derive(Clone, Debug)]
pub enum Propagation {
    /// Symmetric-normalised adjacency with self-loops.
    Normalized(Arc<CsrAdjacency>),
    /// Row-normalised (possibly sampled) neighbour mean, self excluded.
    Mean(Arc<CsrAdjacency>),
    /// Plain neighbour structure for attention.
    Attention(Arc<CsrAdjacency>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayer {
    pub weight: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SageLayer {
    pub w_self: ParamId,
    pub w_neigh: ParamId,
    pub fanout: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatHead {
    pub weight: ParamId,
    pub att_src: ParamId,
    pub att_dst: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadCombine {
    Concat,
    Average,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatLayer {
    pub heads: Vec<GatHead>,
    pub slope: f64,
    pub combine: HeadCombine,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Gcn(GcnLayer),
    Sage(SageLayer),
    Gat(GatLayer),
}

impl Layer {
    pub fn gcn(params: &mut ParamSet, name: &str, fin: usize, fout: usize, rng: &mut Rng) -> Self {
        Layer::Gcn(GcnLayer {
            weight: params.add_glorot(format!("{name}.weight"), fin, fout, rng),
        })
    }

    pub fn sage(params: &mut ParamSet, name: &str, fin: usize, fout: usize, fanout: usize, rng: &mut Rng) -> Self {
        Layer::Sage(SageLayer {
            w_self: params.add_glorot(format!("{name}.w_self"), fin, fout, rng),
            w_neigh: params.add_glorot(format!("{name}.w_neigh"), fin, fout, rng),
            fanout,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn gat(
        params: &mut ParamSet,
        name: &str,
        fin: usize,
        per_head: usize,
        heads: usize,
        combine: HeadCombine,
        slope: f64,
        rng: &mut Rng,
    ) -> Self {
        let heads = (0..heads)
            .map(|h| GatHead {
                weight: params.add_glorot(format!("{name}.head{h}.weight"), fin, per_head, rng),
                att_src: params.add_glorot(format!("{name}.head{h}.att_src"), per_head, 1, rng),
                att_dst: params.add_glorot(format!("{name}.head{h}.att_dst"), per_head, 1, rng),
            })
            .collect();
        Layer::Gat(GatLayer {
            heads,
            slope,
            combine,
        })
    }

    /// Picks this layer's graph operator for one pass. SAGE samples
    /// neighbours only in training; evaluation uses full neighbourhoods.
    pub fn prepare(&self, ops: &GraphOperators, training: bool, rng: &mut Rng) -> Propagation {
        match self {
            Layer::Gcn(_) => Propagation::Normalized(ops.normalized.clone()),
            Layer::Sage(l) => {
                let fanout = training.then_some(l.fanout);
                Propagation::Mean(Arc::new(mean_aggregator(&ops.adjacency, fanout, rng)))
            }
            Layer::Gat(_) => Propagation::Attention(ops.adjacency.clone()),
        }
    }

    fn mismatch(&self) -> CieError {
        CieError::Contract(format!("propagation does not match layer {self:?}"))
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, prop: &Propagation, h: Var) -> Result<Var> {
        match (self, prop) {
            (Layer::Gcn(l), Propagation::Normalized(adj)) => {
                let hw = tape.matmul(h, bound.var(l.weight))?;
                tape.spmm(adj.clone(), hw)
            }
            (Layer::Sage(l), Propagation::Mean(agg)) => {
                let own = tape.matmul(h, bound.var(l.w_self))?;
                let hw = tape.matmul(h, bound.var(l.w_neigh))?;
                let nb = tape.spmm(agg.clone(), hw)?;
                tape.add(own, nb)
            }
            (Layer::Gat(l), Propagation::Attention(adj)) => {
                let targets: Vec<usize> = (0..adj.num_nodes()).collect();
                l.heads_out(tape, bound, adj, &targets, h, None)
            }
            _ => Err(self.mismatch()),
        }
    }

    /// Rows `targets` of the layer output when row `targets[r]` of the input
    /// is replaced by row `r` of `self_rows` (one target at a time; all
    /// other rows come from `base`).
    pub fn forward_with_self_rows(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prop: &Propagation,
        base: Var,
        targets: &[usize],
        self_rows: Var,
    ) -> Result<Var> {
        if tape.shape(self_rows).0 != targets.len() || tape.shape(self_rows).1 != tape.shape(base).1 {
            return Err(CieError::Dimension {
                op: "forward_with_self_rows",
                left: tape.shape(base),
                right: tape.shape(self_rows),
            });
        }
        match (self, prop) {
            (Layer::Gcn(l), Propagation::Normalized(adj)) => {
                // Â(base)W at targets, then swap each target's self-loop term.
                let w = bound.var(l.weight);
                let full = self.forward(tape, bound, prop, base)?;
                let full_t = tape.gather_rows(full, targets)?;
                let own = tape.gather_rows(base, targets)?;
                let delta = tape.sub(self_rows, own)?;
                let delta_w = tape.matmul(delta, w)?;
                let diag = Matrix::from_shape_fn((targets.len(), 1), |(r, _)| {
                    adj.weight(targets[r], targets[r]).unwrap_or(0.0)
                });
                let diag = tape.leaf(diag);
                let swapped = tape.mul_col(delta_w, diag)?;
                tape.add(full_t, swapped)
            }
            (Layer::Sage(l), Propagation::Mean(agg)) => {
                let hw = tape.matmul(base, bound.var(l.w_neigh))?;
                let nb = tape.spmm(agg.clone(), hw)?;
                let nb_t = tape.gather_rows(nb, targets)?;
                let own = tape.matmul(self_rows, bound.var(l.w_self))?;
                tape.add(own, nb_t)
            }
            (Layer::Gat(l), Propagation::Attention(adj)) => {
                l.heads_out(tape, bound, adj, targets, base, Some(self_rows))
            }
            _ => Err(self.mismatch()),
        }
    }

    pub fn out_dim(&self, params: &ParamSet) -> usize {
        match self {
            Layer::Gcn(l) => params.get(l.weight).data.ncols(),
            Layer::Sage(l) => params.get(l.w_self).data.ncols(),
            Layer::Gat(l) => {
                let per = params.get(l.heads[0].weight).data.ncols();
                match l.combine {
                    HeadCombine::Concat => per * l.heads.len(),
                    HeadCombine::Average => per,
                }
            }
        }
    }
}

impl GatLayer {
    fn heads_out(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        adj: &Arc<CsrAdjacency>,
        targets: &[usize],
        base: Var,
        self_rows: Option<Var>,
    ) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (w, a_src, a_dst) = (bound.var(head.weight), bound.var(head.att_src), bound.var(head.att_dst));
            let wh = tape.matmul(base, w)?;
            let t = tape.matmul(wh, a_dst)?;
            let (q_wh, q_t) = match self_rows {
                Some(rows) => {
                    let q_wh = tape.matmul(rows, w)?;
                    let q_t = tape.matmul(q_wh, a_dst)?;
                    (q_wh, q_t)
                }
                None => (wh, t),
            };
            let q_s = tape.matmul(q_wh, a_src)?;
            outs.push(tape.gat_attention(adj.clone(), targets, wh, t, q_s, q_wh, q_t, self.slope)?);
        }
        match self.combine {
            HeadCombine::Concat => tape.concat_cols(&outs),
            HeadCombine::Average => {
                let mut acc = outs[0];
                for &o in &outs[1..] {
                    acc = tape.add(acc, o)?;
                }
                Ok(tape.scale(acc, 1.0 / outs.len() as f64))
            }
        }
    }
}

/// Backbone hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub in_dim: usize,
    /// Layer-1 width (per head for GAT).
    pub hidden: usize,
    pub classes: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub heads: usize,
    pub fanouts: (usize, usize),
    pub attention_slope: f64,
}

impl BackboneConfig {
    /// Defaults of each family's reference architecture: width 16 with a
    /// rectifier for GCN/SAGE; 8 heads of width 8 with leaky-relu(0.2) for
    /// GAT; SAGE fanouts 25 and 10.
    pub fn new(kind: BackboneKind, in_dim: usize, classes: usize) -> Self {
        let (hidden, activation) = match kind {
            BackboneKind::Gat => (8, Activation::LeakyRelu(0.2)),
            _ => (16, Activation::Relu),
        };
        Self {
            kind,
            in_dim,
            hidden,
            classes,
            dropout: 0.5,
            activation,
            heads: 8,
            fanouts: (25, 10),
            attention_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CieError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.hidden == 0 || self.classes == 0 || self.in_dim == 0 || self.heads == 0 {
            return Err(CieError::Config("backbone dimensions must be positive".into()));
        }
        if self.fanouts.0 == 0 || self.fanouts.1 == 0 {
            return Err(CieError::Config("SAGE fanouts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Exactly two layers of one family.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub layer1: Layer,
    pub layer2: Layer,
}

/// Random state of one forward pass, drawn up front so a pass can be
/// replayed exactly (finite-difference checks, paired comparisons).
#[derive(Clone, Debug)]
pub struct ForwardNoise {
    pub input_mask: Option<Arc<Matrix>>,
    pub hidden_mask: Option<Arc<Matrix>>,
    pub prop1: Propagation,
    pub prop2: Propagation,
}

impl Backbone {
    pub fn new(config: BackboneConfig, params: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (layer1, layer2) = match c.kind {
            BackboneKind::Gcn => (
                Layer::gcn(params, "layer1", c.in_dim, c.hidden, rng),
                Layer::gcn(params, "layer2", c.hidden, c.classes, rng),
            ),
            BackboneKind::Sage => (
                Layer::sage(params, "layer1", c.in_dim, c.hidden, c.fanouts.0, rng),
                Layer::sage(params, "layer2", c.hidden, c.classes, c.fanouts.1, rng),
            ),
            BackboneKind::Gat => (
                Layer::gat(params, "layer1", c.in_dim, c.hidden, c.heads, HeadCombine::Concat, c.attention_slope, rng),
                Layer::gat(params, "layer2", c.hidden * c.heads, c.classes, 1, HeadCombine::Average, c.attention_slope, rng),
            ),
        };
        Ok(Self {
            config,
            layer1,
            layer2,
        })
    }

    /// Width of the layer-1 representation.
    pub fn hidden_dim(&self) -> usize {
        match self.config.kind {
            BackboneKind::Gat => self.config.hidden * self.config.heads,
            _ => self.config.hidden,
        }
    }

    pub fn draw_noise(&self, ops: &GraphOperators, training: bool, rng: &mut Rng) -> Result<ForwardNoise> {
        let n = ops.num_nodes();
        let p = self.config.dropout;
        let input_mask = dropout_mask((n, self.config.in_dim), p, training, rng)?.map(Arc::new);
        let hidden_mask = dropout_mask((n, self.hidden_dim()), p, training, rng)?.map(Arc::new);
        Ok(ForwardNoise {
            input_mask,
            hidden_mask,
            prop1: self.layer1.prepare(ops, training, rng),
            prop2: self.layer2.prepare(ops, training, rng),
        })
    }

    /// Input dropout, layer 1, activation, dropout.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, x: Var, noise: &ForwardNoise) -> Result<Var> {
        let x = match &noise.input_mask {
            Some(m) => tape.mul_const(x, m.clone())?,
            None => x,
        };
        let h = self.layer1.forward(tape, bound, &noise.prop1, x)?;
        let h = self.config.activation.apply(tape, h);
        match &noise.hidden_mask {
            Some(m) => tape.mul_const(h, m.clone()),
            None => Ok(h),
        }
    }

    /// Layer 2 applied to a representation.
    pub fn classify(&self, tape: &mut Tape, bound: &Bound, h: Var, noise: &ForwardNoise) -> Result<Var> {
        self.layer2.forward(tape, bound, &noise.prop2, h)
    }

    /// Layer 2 at `targets` with each target's own input row replaced.
    pub fn classify_with_self_rows(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        base: Var,
        targets: &[usize],
        self_rows: Var,
        noise: &ForwardNoise,
    ) -> Result<Var> {
        self.layer2
            .forward_with_self_rows(tape, bound, &noise.prop2, base, targets, self_rows)
    }
}

/// Hidden representation and logits of the plain backbone.
pub fn backbone_forward(
    backbone: &Backbone,
    tape: &mut Tape,
    bound: &Bound,
    ops: &GraphOperators,
    x: Var,
    training: bool,
    rng: &mut Rng,
) -> Result<(Var, Var)> {
    let noise = backbone.draw_noise(ops, training, rng)?;
    let h = backbone.encode(tape, bound, x, &noise)?;
    let logits = backbone.classify(tape, bound, h, &noise)?;
    Ok((h, logits))
}
