//! Debiased node classification by disentangling causal and spurious node
//! representations.
//!
//! The crate is organised bottom-up:
//!
//! - [`diff`]: a small reverse-mode tape over dense `f64` matrices and Adam.
//! - [`graph`]: datasets, CSR adjacency, symmetric normalisation, neighbour
//!   sampling and the inductive train/test split.
//! - [`layers`]: two-layer GCN, GraphSAGE and GAT backbones.
//! - [`kernels`]: Gram matrices, HSIC and its normalised form (CKA).
//! - [`model`]: the soft-mask model with its supervised, independence and
//!   backdoor-intervention losses.
//! - [`bias`]: label-selection, structural, mixed and small-sample bias
//!   injection.
//! - [`io`]: text bundles, split files, stochastic block model generation and
//!   JSON-lines metrics.
//! - [`harness`]: training loop, seed repetition, sweeps, ablations and timing.

pub mod bias;
pub mod checkpoint;
pub mod diff;
pub mod error;
pub mod graph;
pub mod harness;
pub mod io;
pub mod kernels;
pub mod layers;
pub mod model;

pub use error::{CieError, Result};

/// Dense row-major matrix used throughout the crate.
pub type Matrix = ndarray::Array2<f64>;

/// Seeded generator used for every random draw.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's generator from a `u64` seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

pub(crate) fn shape(m: &Matrix) -> (usize, usize) {
    m.dim()
}
