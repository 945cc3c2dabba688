//! Quantifiable sentence editing: learn disentangled outcome and content
//! factors from rated sentences and pseudo-parallel pairs, then revise a
//! sentence so that its predicted outcome approaches a numeric target.

pub mod artifact;
pub mod corpus;
pub mod editing;
pub mod error;
pub mod eval;
pub mod model;
pub mod pairing;
pub mod seed;
pub mod synth;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
