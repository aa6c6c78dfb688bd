//! Command-line front end for the `atinuke` engine.

pub mod commands;
pub mod logits;
pub mod tokens;

pub use commands::{CliError, LogitsFormat};
