//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records each operation as it runs; [`Tape::backward`] walks the
//! record in reverse and returns [`Gradients`]. Persistent trainable state
//! lives in a [`ParamSet`]: bind it to a fresh tape per forward pass, run the
//! backward sweep, then accumulate into each [`Param::grad`]. Gradients
//! accumulate across calls until zeroed (the [`Adam`] step zeroes them).
//!
//! Broadcasting is explicit: [`Tape::mul_col`] multiplies by an `m×1` column
//! across all columns and [`Tape::add_row`] adds a `1×n` row to every row.
//! All other binary operations require equal shapes.

mod adam;
mod params;
mod tape;

pub use adam::Adam;
pub use params::{dropout, dropout_mask, Bound, Param, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};

pub(crate) use tape::{center, sq_dists};
#[cfg(test)]
use tape::softmax;

#[cfg(test)]
mod tests;
