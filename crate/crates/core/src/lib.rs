//! Decompose, look, reason: a tiny vision-language model that interleaves
//! text with latent visual vectors, trained on synthetic grid scenes.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod format;
pub mod generate;
pub mod grounder;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod reward;
pub mod sglp;
pub mod stage1;
pub mod stage2;
pub mod stage3;
pub mod synth;
pub mod vlm;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("bad training data: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),
    #[error(transparent)]
    Format(#[from] format::FormatError),
    #[error(transparent)]
    Sglp(#[from] sglp::SglpError),
}
