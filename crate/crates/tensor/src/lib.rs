//! A small 64-bit tensor engine with a recording tape for reverse-mode
//! differentiation.
//!
//! Values live on a [`Tape`]; every operation appends a record and returns a
//! [`Var`] handle. [`Tape::backward`] replays the records in reverse and
//! returns [`Gradients`], which can be folded into persistent [`Tensor`]
//! parameters. Persistent parameters are grouped in a [`ParamSet`] and
//! updated with [`Adam`].

mod adam;
mod checkpoint;
mod determinism;
mod error;
mod gemm;
mod ops;
mod params;
mod sparse;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointEntry, CheckpointManifest};
pub use determinism::{deterministic_reductions, set_deterministic_reductions};
pub use error::{Result, TensorError};
pub use ops::activation::LEAKY_RELU_SLOPE;
pub use ops::conv::ConvSpec;
pub use params::ParamSet;
pub use sparse::CsrMatrix;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
