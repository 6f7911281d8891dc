use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("aspect inventory invalid: {0}")]
    InvalidInventory(String),
    #[error("unknown aspect category: {0}")]
    UnknownCategory(String),
    #[error("tuple extractor failed: {0}")]
    Extractor(String),
    #[error("category classifier failed: {0}")]
    Classifier(String),
    #[error("pruning removed every interaction (min_interactions = {0})")]
    EmptyAfterPruning(usize),
    #[error("warm-start split impossible: {0}")]
    SplitImpossible(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record: {0}")]
    Malformed(String),
}

/// Fixed, ordered list of aspect categories. The index of a category is its
/// integer ID for the lifetime of a run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct AspectInventory {
    categories: Vec<String>,
}

impl AspectInventory {
    pub fn new(categories: Vec<String>) -> Result<Self, CorpusError> {
        if categories.len() < 2 {
            return Err(CorpusError::InvalidInventory(
                "need at least 2 categories".into(),
            ));
        }
        let unique: BTreeSet<&String> = categories.iter().collect();
        if unique.len() != categories.len() {
            return Err(CorpusError::InvalidInventory(
                "category names must be unique".into(),
            ));
        }
        Ok(Self { categories })
    }

    pub fn n_aspect(&self) -> usize {
        self.categories.len()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.categories[id]
    }

    pub fn names(&self) -> &[String] {
        &self.categories
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Negative,
    Neutral,
}

/// (aspect term, opinion, sentiment, category) mined from a review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentimentTuple {
    pub aspect_term: String,
    pub opinion: String,
    pub sentiment: Sentiment,
    pub category: usize,
}

/// A raw review with its mined tuples and per-category segments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub user: String,
    pub item: String,
    pub text: String,
    #[serde(default)]
    pub tuples: Vec<SentimentTuple>,
    /// category ID -> text span (the whole review when spans are unavailable)
    #[serde(default)]
    pub segments: BTreeMap<usize, String>,
}

/// One (user, item, category) explanation segment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainingExample {
    pub user: String,
    pub item: String,
    pub category: usize,
    pub text: String,
    /// token IDs bounded by bos/eos markers; empty until a tokenizer runs
    #[serde(default)]
    pub tokens: Vec<u32>,
    /// features mined from the ground-truth review for this pair
    #[serde(default)]
    pub gt_features: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitDataset {
    pub fold_id: usize,
    pub train: Vec<TrainingExample>,
    pub valid: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
    /// user -> categories seen in the training split
    pub user_history: BTreeMap<String, BTreeSet<usize>>,
    /// item -> categories seen in the training split
    pub item_history: BTreeMap<String, BTreeSet<usize>>,
}

impl SplitDataset {
    /// Encodes every example's text with `tokenizer`, truncating to
    /// `max_len` inner tokens and adding bos/eos markers.
    pub fn tokenize(&mut self, tokenizer: &dyn Tokenizer, max_len: usize) {
        for ex in self
            .train
            .iter_mut()
            .chain(self.valid.iter_mut())
            .chain(self.test.iter_mut())
        {
            let mut inner = tokenizer.encode(&ex.text);
            inner.truncate(max_len);
            let mut tokens = Vec::with_capacity(inner.len() + 2);
            tokens.push(tokenizer.bos_id());
            tokens.extend(inner);
            tokens.push(tokenizer.eos_id());
            ex.tokens = tokens;
        }
    }
}

use super::tokenizer::Tokenizer;

/// Run metadata written next to each fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub fold_id: usize,
    pub min_interactions: usize,
    pub pruned_users: usize,
    pub pruned_items: usize,
    pub surviving_pairs: usize,
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub test_pairs: usize,
    pub skipped_reviews: usize,
}
