//! Prompt tables, the causal-decoder backbone, the aspect head and the
//! training losses.

mod backbone;
mod head;
mod loss;
mod maple;
mod params;

pub use backbone::{Backbone, DecoderConfig, ExternalDecoderAdapter, TinyDecoder};
pub use head::{sigmoid, AspectHead};
pub use loss::{
    compute_rebalance_weights, db_loss, db_loss_batch, db_loss_on_tape, raw_rebalance_ratios,
    raw_rebalance_ratios_with_counts, smooth_ratios, DbLossConfig, VarMap,
};
pub use maple::{AspectDistribution, EncodedExample, MapleModel, ModelConfig, PromptTables};
pub use params::{ParamBlob, ParamSet};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown user ID: {0}")]
    UnknownUser(String),
    #[error("unknown item ID: {0}")]
    UnknownItem(String),
    #[error("unknown category ID: {0}")]
    UnknownCategory(usize),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
