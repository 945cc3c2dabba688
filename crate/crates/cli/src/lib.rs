//! The `quase` pipeline: synthetic corpus generation, data preparation, pair
//! mining, training, editing, evaluation and ablation, one stage per call.

pub mod config;
pub mod error;
pub mod pipeline;

pub use error::{CliError, CliResult};
