//! Soft-mask disentanglement with supervised, independence and backdoor
//! losses.
//!
//! A forward pass runs the backbone's first layer to get `H`, splits it with
//! a per-node two-way softmax mask into `Hc = H ⊙ Mc` and `Hs = H ⊙ Ms`, and
//! classifies `Hc` with the backbone's second layer. The total objective is
//!
//! ```text
//! total = sup + λ1 · idp + λ2 · backdoor
//! ```
//!
//! where `sup` is cross-entropy of the causal logits on labelled training
//! nodes, `idp` is CKA between the training rows of `Hc` and `Hs`, and
//! `backdoor` is cross-entropy after replacing each training node's own
//! classifier input with `hc_i + hs_π(i)` for a random permutation `π` of the
//! training nodes.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diff::{Bound, ParamId, ParamSet, Tape, Var};
use crate::graph::GraphDataset;
use crate::kernels::{cka, Cka, KernelSpec};
use crate::layers::{Backbone, BackboneConfig, ForwardNoise, GraphOperators};
use crate::{CieError, Matrix, Result, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CieConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub kernel: KernelSpec,
    /// Permutations drawn per pass for the backdoor loss.
    pub mc_samples: usize,
}

impl Default for CieConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
            kernel: KernelSpec::rbf(),
            mc_samples: 1,
        }
    }
}

impl CieConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(CieError::Config(format!(
                "loss weights must be non-negative, got λ1 = {}, λ2 = {}",
                self.lambda1, self.lambda2
            )));
        }
        if self.mc_samples == 0 {
            return Err(CieError::Config("mc_samples must be at least 1".into()));
        }
        self.kernel.validate()
    }
}

/// `None` for `cie` trains the plain backbone: no mask parameters exist and
/// layer 2 classifies `H` directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub cie: Option<CieConfig>,
}

/// Affine map `H → 2` logits per node.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMlp {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct CieModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub backbone: Backbone,
    pub mask: Option<MaskMlp>,
}

/// A graph ready for the model: operators plus features.
#[derive(Clone, Debug)]
pub struct GraphInput {
    pub ops: GraphOperators,
    pub features: Matrix,
}

impl GraphInput {
    pub fn new(graph: &GraphDataset) -> Result<Self> {
        Ok(Self {
            ops: GraphOperators::new(graph)?,
            features: graph.features().clone(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }
}

/// All randomness of one training pass.
#[derive(Clone, Debug)]
pub struct Noise {
    pub forward: ForwardNoise,
    /// One permutation of `0..n_train` per Monte-Carlo sample.
    pub perms: Vec<Vec<usize>>,
}

/// Tape handles for `H`, the masks and the two branches.
#[derive(Clone, Copy, Debug)]
pub struct DisentangledReps {
    pub h: Var,
    pub mc: Var,
    pub ms: Var,
    pub hc: Var,
    pub hs: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub idp: f64,
    pub backdoor: f64,
    pub total: f64,
    /// Set when CKA hit constant features and contributed zero.
    pub idp_degenerate: bool,
}

/// A recorded loss evaluation, ready for a backward pass.
pub struct LossPass {
    pub tape: Tape,
    pub bound: Bound,
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub reps: Option<DisentangledReps>,
}

impl LossPass {
    pub fn backward(&self, params: &mut ParamSet) -> Result<()> {
        params.backward(&self.tape, self.total, &self.bound)
    }
}

/// Mean cross-entropy of `logits` over the rows `train`.
pub fn loss_sup(tape: &mut Tape, logits: Var, labels: &[usize], train: &[usize]) -> Result<Var> {
    if train.is_empty() {
        return Err(CieError::Contract("supervised loss needs labelled nodes".into()));
    }
    let rows = tape.gather_rows(logits, train)?;
    let y: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    tape.cross_entropy(rows, &y)
}

/// CKA between the `train` rows of `Hc` and `Hs`.
pub fn loss_idp(tape: &mut Tape, reps: &DisentangledReps, train: &[usize], kernel: &KernelSpec) -> Result<Cka> {
    if train.len() < 2 {
        return Err(CieError::Contract(format!(
            "independence loss needs at least 2 labelled nodes, got {}",
            train.len()
        )));
    }
    let hc = tape.gather_rows(reps.hc, train)?;
    let hs = tape.gather_rows(reps.hs, train)?;
    cka(tape, hc, hs, kernel)
}

/// Mean cross-entropy of intervened logits against the training labels.
pub fn loss_backdoor(tape: &mut Tape, intervened: Var, train_labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(intervened, train_labels)
}

fn uniform_permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

impl CieModel {
    /// Backbone parameters are drawn before mask parameters, so a plain and
    /// a CIE model built from the same seed share their backbone weights.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        if let Some(c) = &config.cie {
            c.validate()?;
        }
        let mut params = ParamSet::new();
        let backbone = Backbone::new(config.backbone.clone(), &mut params, rng)?;
        let mask = config.cie.as_ref().map(|_| MaskMlp {
            weight: params.add_glorot("mask.weight", backbone.hidden_dim(), 2, rng),
            bias: params.add("mask.bias", Matrix::zeros((1, 2))),
        });
        Ok(Self {
            config,
            params,
            backbone,
            mask,
        })
    }

    pub fn cie(&self) -> Option<&CieConfig> {
        self.config.cie.as_ref()
    }

    /// Draws dropout masks and SAGE samples from `forward_rng` and the
    /// backdoor permutations from `perm_rng`. Permutations are drawn
    /// whenever the mask is enabled (even with `λ2 = 0`, where they go
    /// unused) so ablations consume identical random streams.
    pub fn draw_noise(
        &self,
        graph: &GraphInput,
        n_train: usize,
        training: bool,
        forward_rng: &mut Rng,
        perm_rng: &mut Rng,
    ) -> Result<Noise> {
        let forward = self.backbone.draw_noise(&graph.ops, training, forward_rng)?;
        let perms = match self.cie() {
            Some(c) if training => (0..c.mc_samples)
                .map(|_| uniform_permutation(n_train, perm_rng))
                .collect(),
            _ => Vec::new(),
        };
        Ok(Noise { forward, perms })
    }

    /// Layer 1 (plus activation and dropout) of the backbone.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, graph: &GraphInput, noise: &Noise) -> Result<Var> {
        let x = tape.leaf(graph.features.clone());
        self.backbone.encode(tape, bound, x, &noise.forward)
    }

    fn mask_mlp(&self) -> Result<&MaskMlp> {
        self.mask
            .as_ref()
            .ok_or_else(|| CieError::Contract("model was built without the soft mask".into()))
    }

    /// `(Mc, Ms) = softmax(H W + b)`, `Hc = H ⊙ Mc`, `Hs = H ⊙ Ms`.
    pub fn disentangle(&self, tape: &mut Tape, bound: &Bound, h: Var) -> Result<DisentangledReps> {
        let mask = self.mask_mlp()?;
        let z = tape.matmul(h, bound.var(mask.weight))?;
        let z = tape.add_row(z, bound.var(mask.bias))?;
        let m = tape.softmax_rows(z)?;
        let mc = tape.slice_cols(m, 0, 1)?;
        let ms = tape.slice_cols(m, 1, 1)?;
        let hc = tape.mul_col(h, mc)?;
        let hs = tape.mul_col(h, ms)?;
        Ok(DisentangledReps { h, mc, ms, hc, hs })
    }

    /// Layer 2 over the graph applied to the causal branch.
    pub fn causal_logits(&self, tape: &mut Tape, bound: &Bound, hc: Var, noise: &Noise) -> Result<Var> {
        self.backbone.classify(tape, bound, hc, &noise.forward)
    }

    /// Logits for each training node `train[r]` when its own classifier
    /// input is `hc_i + hs_j` with `j = train[perm[r]]`; every other row of
    /// the classifier input stays `Hc`.
    pub fn intervene(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        reps: &DisentangledReps,
        train: &[usize],
        perm: &[usize],
        noise: &Noise,
    ) -> Result<Var> {
        if train.len() < 2 {
            return Err(CieError::Contract(format!(
                "intervention needs at least 2 labelled nodes, got {}",
                train.len()
            )));
        }
        if perm.len() != train.len() {
            return Err(CieError::Contract(format!(
                "permutation of length {} for {} training nodes",
                perm.len(),
                train.len()
            )));
        }
        let donors: Vec<usize> = perm.iter().map(|&k| train[k]).collect();
        let own = tape.gather_rows(reps.hc, train)?;
        let spurious = tape.gather_rows(reps.hs, &donors)?;
        let mixed = tape.add(own, spurious)?;
        self.backbone
            .classify_with_self_rows(tape, bound, reps.hc, train, mixed, &noise.forward)
    }

    /// Records the full objective with fixed noise.
    pub fn total_loss_with_noise(
        &self,
        graph: &GraphInput,
        labels: &[usize],
        train: &[usize],
        noise: &Noise,
    ) -> Result<LossPass> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let h = self.encode(&mut tape, &bound, graph, noise)?;
        let Some(cfg) = self.cie() else {
            let logits = self.backbone.classify(&mut tape, &bound, h, &noise.forward)?;
            let sup = loss_sup(&mut tape, logits, labels, train)?;
            let v = tape.scalar_value(sup);
            return Ok(LossPass {
                tape,
                bound,
                total: sup,
                breakdown: LossBreakdown {
                    sup: v,
                    total: v,
                    ..Default::default()
                },
                reps: None,
            });
        };
        let reps = self.disentangle(&mut tape, &bound, h)?;
        let zc = self.causal_logits(&mut tape, &bound, reps.hc, noise)?;
        let sup = loss_sup(&mut tape, zc, labels, train)?;
        let mut breakdown = LossBreakdown {
            sup: tape.scalar_value(sup),
            ..Default::default()
        };
        let mut total = sup;
        if cfg.lambda1 > 0.0 {
            let idp = loss_idp(&mut tape, &reps, train, &cfg.kernel)?;
            breakdown.idp = tape.scalar_value(idp.value);
            breakdown.idp_degenerate = idp.degenerate;
            let weighted = tape.scale(idp.value, cfg.lambda1);
            total = tape.add(total, weighted)?;
        }
        if cfg.lambda2 > 0.0 {
            if noise.perms.is_empty() {
                return Err(CieError::Contract("backdoor loss needs at least one permutation".into()));
            }
            let y: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
            let mut acc: Option<Var> = None;
            for perm in &noise.perms {
                let z = self.intervene(&mut tape, &bound, &reps, train, perm, noise)?;
                let l = loss_backdoor(&mut tape, z, &y)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, l)?,
                    None => l,
                });
            }
            let bd = tape.scale(acc.expect("non-empty"), 1.0 / noise.perms.len() as f64);
            breakdown.backdoor = tape.scalar_value(bd);
            let weighted = tape.scale(bd, cfg.lambda2);
            total = tape.add(total, weighted)?;
        }
        breakdown.total = tape.scalar_value(total);
        Ok(LossPass {
            tape,
            bound,
            total,
            breakdown,
            reps: Some(reps),
        })
    }

    /// Training-mode objective with noise drawn from `rng`.
    pub fn total_loss(&self, graph: &GraphInput, labels: &[usize], train: &[usize], rng: &mut Rng) -> Result<LossPass> {
        let mut perm_rng = crate::seeded_rng(rand::Rng::random(rng));
        let noise = self.draw_noise(graph, train.len(), true, rng, &mut perm_rng)?;
        self.total_loss_with_noise(graph, labels, train, &noise)
    }

    /// Evaluation-mode logits: no dropout, full neighbourhoods, classifier
    /// on `Hc` (or on `H` for the plain backbone).
    pub fn eval_logits(&self, graph: &GraphInput) -> Result<Matrix> {
        // evaluation draws nothing, any generator will do
        let mut rng = crate::seeded_rng(0);
        let noise = self.draw_noise(graph, 0, false, &mut rng.clone(), &mut rng)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let h = self.encode(&mut tape, &bound, graph, &noise)?;
        let input = match self.mask {
            Some(_) => self.disentangle(&mut tape, &bound, h)?.hc,
            None => h,
        };
        let logits = self.backbone.classify(&mut tape, &bound, input, &noise.forward)?;
        Ok(tape.value(logits).clone())
    }

    pub fn predict(&self, graph: &GraphInput) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.eval_logits(graph)?))
    }
}
