//! A small dense transformer engine: token embedding, sinusoidal positions,
//! multi-head self-attention, pre-norm residual blocks and an output
//! projection, with reverse-mode gradients and a byte-reproducible
//! checkpoint format.
//!
//! Everything runs in `f64` on the CPU with no external numeric backend.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod positional;
pub mod rng;
pub mod tensor;
pub mod toy;
pub mod transformer;

pub use attention::{AttentionConfig, AttentionParams, ScaleDenominator};
pub use autodiff::{GradMap, Tape, Var};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use positional::PositionalTable;
pub use rng::PrngState;
pub use tensor::{Activation, IndexTensor, Tensor};
pub use transformer::{BlockParams, Mode, ModelParams};
