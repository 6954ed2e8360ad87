//! Conversational speech recognition with role and topic latent variables.
//!
//! The pipeline: a conformer speech encoder and transformer decoder
//! ([`backbone`]), conditioned on latent vectors inferred from the role and
//! dialogue context of each turn ([`lvm`]), trained in two stages
//! ([`training`]), decoded with beam search and rescored with a topic model
//! ([`rescoring`]), and scored by character error rate ([`eval`]).

pub mod backbone;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod eval;
mod error;
pub mod lvm;
pub mod model;
pub mod rescoring;
pub mod training;

pub use error::{Error, Result};
pub use model::{LatentFlags, Model, Prepared};
