//! Aspect-ranking quality: hit ratio and set F1 against ground-truth
//! category sets.

use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub hr_at_k: f64,
    pub f1: f64,
    /// pairs skipped for an empty ground-truth set
    pub skipped: usize,
}

/// HR@K = fraction of pairs whose top-K prediction intersects the truth;
/// F1 = mean per-pair F1 between the predicted top-K set and the truth set.
pub fn aspect_ranking_metrics(
    predictions: &[Vec<usize>],
    truths: &[BTreeSet<usize>],
    k: usize,
) -> Ranking {
    assert!(k >= 1);
    assert_eq!(predictions.len(), truths.len());
    let mut hits = 0usize;
    let mut f1_sum = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for (pred, truth) in predictions.iter().zip(truths.iter()) {
        if truth.is_empty() {
            skipped += 1;
            continue;
        }
        counted += 1;
        let top_k: BTreeSet<usize> = pred.iter().copied().take(k).collect();
        let overlap = top_k.intersection(truth).count();
        if overlap > 0 {
            hits += 1;
        }
        if !top_k.is_empty() && overlap > 0 {
            let precision = overlap as f64 / top_k.len() as f64;
            let recall = overlap as f64 / truth.len() as f64;
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    if counted == 0 {
        return Ranking {
            hr_at_k: 0.0,
            f1: 0.0,
            skipped,
        };
    }
    Ranking {
        hr_at_k: hits as f64 / counted as f64,
        f1: f1_sum / counted as f64,
        skipped,
    }
}
