//! Speed-controllable text-to-speech: features, model, training, synthesis
//! and evaluation.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod rate;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{Error, Result};
