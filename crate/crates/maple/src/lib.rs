//! MAPLE: aspect-controlled explanation generation for recommendation.
//!
//! The crate covers the full pipeline: multi-aspect review segmentation and
//! dataset construction ([`corpus`]), a prompt-learner model with a trainable
//! causal decoder and a distribution-balanced aspect head ([`model`]),
//! two-stage training ([`training`]), aspect selection and greedy decoding
//! ([`inference`]), the explainability metrics suite ([`metrics`]), and a
//! retriever-reader adapter that treats generated explanations as discrete
//! queries ([`rag`]).

pub mod autodiff;
pub mod corpus;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod rag;
pub mod synth;
pub mod training;
