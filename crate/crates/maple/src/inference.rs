//! Aspect selection and greedy decoding: predict an aspect distribution,
//! pick categories by strategy, fuse them into one signal, and decode.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Tokenizer;
use crate::model::{Backbone, MapleModel, ModelError};

/// Categories retained after trimming the predicted distribution.
pub const SUPERVISED_TRIM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// sample K categories with replacement from the trimmed predicted
    /// distribution
    Supervised(usize),
    /// sample K categories without replacement from the user/item history
    /// intersection
    Heuristic(usize),
    /// use the provided ground-truth category; never consults the model
    GroundTruth,
}

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("supervised K must be between 1 and {SUPERVISED_TRIM}, got {0}")]
    BadK(usize),
    #[error("ground-truth strategy requires a category")]
    MissingGroundTruth,
    #[error("unknown category {0}")]
    UnknownCategory(usize),
    #[error("no history for user {0}")]
    NoUserHistory(String),
    #[error("empty item history for item {0}")]
    EmptyItemHistory(String),
    #[error("elbow selection needs at least 3 consecutive K values")]
    TooFewPoints,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The outcome of aspect selection: chosen category IDs (with multiplicity),
/// the sampling weights over all categories, and the fused d-vector signal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AspectSelection {
    pub strategy: Strategy,
    pub chosen: Vec<usize>,
    pub weights: Vec<f64>,
    pub signal: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub tokens: Vec<u32>,
    pub text: String,
}

pub struct InferenceEngine<'a> {
    pub model: &'a MapleModel,
    /// user -> categories seen in the training split
    pub user_history: BTreeMap<String, BTreeSet<usize>>,
    /// item -> categories seen in the training split
    pub item_history: BTreeMap<String, BTreeSet<usize>>,
    head_calls: Cell<usize>,
}

impl<'a> InferenceEngine<'a> {
    pub fn new(
        model: &'a MapleModel,
        user_history: BTreeMap<String, BTreeSet<usize>>,
        item_history: BTreeMap<String, BTreeSet<usize>>,
    ) -> Self {
        Self {
            model,
            user_history,
            item_history,
            head_calls: Cell::new(0),
        }
    }

    /// Number of aspect-head evaluations performed so far.
    pub fn head_calls(&self) -> usize {
        self.head_calls.get()
    }

    pub fn recommend_aspects(
        &self,
        user: &str,
        item: &str,
        strategy: Strategy,
        ground_truth: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<AspectSelection, InferenceError> {
        let n_aspect = self.model.inventory.n_aspect();
        let (chosen, weights) = match strategy {
            Strategy::Supervised(k) => {
                if k == 0 || k > SUPERVISED_TRIM {
                    return Err(InferenceError::BadK(k));
                }
                self.head_calls.set(self.head_calls.get() + 1);
                let scores = self.model.aspect_scores(user, item)?.scores;
                let weights = trim_and_renormalize(&scores, SUPERVISED_TRIM);
                let dist = WeightedIndex::new(&weights)
                    .expect("trimmed weights hold at least one positive entry");
                let chosen: Vec<usize> = (0..k).map(|_| dist.sample(rng)).collect();
                (chosen, weights)
            }
            Strategy::Heuristic(k) => {
                if k == 0 {
                    return Err(InferenceError::BadK(k));
                }
                // resolve IDs so unknown users/items fail the same way as
                // the supervised path
                self.model.tables.user_id(user)?;
                self.model.tables.item_id(item)?;
                let item_hist = self
                    .item_history
                    .get(item)
                    .filter(|h| !h.is_empty())
                    .ok_or_else(|| InferenceError::EmptyItemHistory(item.to_string()))?;
                let user_hist = self.user_history.get(user).cloned().unwrap_or_default();
                let intersection: Vec<usize> =
                    item_hist.iter().copied().filter(|c| user_hist.contains(c)).collect();
                let pool: Vec<usize> = if intersection.len() >= k {
                    intersection
                } else {
                    item_hist.iter().copied().collect()
                };
                let take = k.min(pool.len());
                let chosen: Vec<usize> = pool.choose_multiple(rng, take).copied().collect();
                let mut weights = vec![0.0; n_aspect];
                for &c in &pool {
                    weights[c] = 1.0 / pool.len() as f64;
                }
                (chosen, weights)
            }
            Strategy::GroundTruth => {
                let c = ground_truth.ok_or(InferenceError::MissingGroundTruth)?;
                if c >= n_aspect {
                    return Err(InferenceError::UnknownCategory(c));
                }
                let mut weights = vec![0.0; n_aspect];
                weights[c] = 1.0;
                (vec![c], weights)
            }
        };
        let signal = fuse_aspect_signal(&chosen, self.model)?;
        Ok(AspectSelection {
            strategy,
            chosen,
            weights,
            signal,
        })
    }

    /// Greedy argmax decoding from <bos> until <eos> or `max_len` tokens.
    pub fn generate_explanation(
        &self,
        user: &str,
        item: &str,
        signal: &[f64],
        max_len: usize,
    ) -> Result<GenerationOutput, InferenceError> {
        let eos = self.model.tokenizer.eos_id();
        let mut tokens: Vec<u32> = Vec::new();
        loop {
            // the trailing <eos> row of the assembled sequence sits after the
            // position we read, so causal masking keeps it out of the result
            let seq = self.model.assemble_sequence(user, item, signal, &tokens)?;
            let logp = self.model.next_token_log_probs(&seq)?;
            let row = logp.row(3 + tokens.len());
            let next = argmax(row.as_slice().unwrap()) as u32;
            if next == eos || tokens.len() >= max_len {
                break;
            }
            tokens.push(next);
            if tokens.len() >= max_len {
                break;
            }
        }
        let text = self.model.tokenizer.decode(&tokens);
        Ok(GenerationOutput { tokens, text })
    }

    /// Full path: select aspects, fuse, decode.
    pub fn explain(
        &self,
        user: &str,
        item: &str,
        strategy: Strategy,
        ground_truth: Option<usize>,
        max_len: usize,
        rng: &mut impl Rng,
    ) -> Result<(AspectSelection, GenerationOutput), InferenceError> {
        let selection = self.recommend_aspects(user, item, strategy, ground_truth, rng)?;
        let output = self.generate_explanation(user, item, &selection.signal, max_len)?;
        Ok((selection, output))
    }
}

/// Keeps the `trim` largest scores (ties at the boundary broken by category
/// index), zeroes the rest, and renormalizes to sum to 1.
pub fn trim_and_renormalize(scores: &[f64], trim: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let kept: BTreeSet<usize> = order.into_iter().take(trim).collect();
    let total: f64 = kept.iter().map(|&i| scores[i]).sum();
    let mut weights = vec![0.0; scores.len()];
    if total > 0.0 {
        for &i in &kept {
            weights[i] = scores[i] / total;
        }
    } else {
        // degenerate all-zero scores: uniform over the kept set
        for &i in &kept {
            weights[i] = 1.0 / kept.len() as f64;
        }
    }
    weights
}

/// Arithmetic mean of the chosen categories' embedding rows, counting
/// multiplicity.
pub fn fuse_aspect_signal(chosen: &[usize], model: &MapleModel) -> Result<Vec<f64>, ModelError> {
    assert!(!chosen.is_empty(), "at least one category must be chosen");
    let d = model.d();
    let mut signal = vec![0.0; d];
    for &c in chosen {
        let row = model.tables.aspect_row(c)?;
        for (s, &v) in signal.iter_mut().zip(row.iter()) {
            *s += v;
        }
    }
    for s in &mut signal {
        *s /= chosen.len() as f64;
    }
    Ok(signal)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Elbow pick over a BLEU-by-K curve: the K immediately preceding the
/// steepest drop, ties toward the smallest K. Returns the chosen K and a flag
/// set when the curve is flat (no positive drop anywhere).
pub fn select_elbow_k(bleu_by_k: &BTreeMap<usize, f64>) -> Result<(usize, bool), InferenceError> {
    if bleu_by_k.len() < 3 {
        return Err(InferenceError::TooFewPoints);
    }
    let ks: Vec<usize> = bleu_by_k.keys().copied().collect();
    for w in ks.windows(2) {
        if w[1] != w[0] + 1 {
            return Err(InferenceError::TooFewPoints);
        }
    }
    let mut best_k = ks[0];
    let mut best_drop = f64::NEG_INFINITY;
    for w in ks.windows(2) {
        let drop = bleu_by_k[&w[0]] - bleu_by_k[&w[1]];
        if drop > best_drop {
            best_drop = drop;
            best_k = w[0];
        }
    }
    Ok((best_k, best_drop <= 0.0))
}
