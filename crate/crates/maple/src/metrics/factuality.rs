//! Feature-match and coverage ratios against the per-item menus.

use std::collections::BTreeSet;

use crate::corpus::{contains_word_boundary, passes_feature_filter};

use super::EvalCorpus;

/// Head/tail restriction width: the 5 most/least frequent categories.
pub const HEAD_TAIL_WIDTH: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatch {
    pub ifmr: f64,
    pub gt_fmr: f64,
    /// pairs whose item has an empty menu (they count as misses)
    pub empty_menu_pairs: usize,
}

/// iFMR: fraction of pairs whose generation contains any menu feature of its
/// item. GT-FMR: same against the pair's own ground-truth features.
pub fn feature_match_metrics(corpus: &EvalCorpus) -> FeatureMatch {
    let n = corpus.pairs.len();
    let mut menu_hits = 0usize;
    let mut gt_hits = 0usize;
    let mut empty_menu_pairs = 0usize;
    for pair in &corpus.pairs {
        match corpus.features.item_features(&pair.item) {
            Some(menu) if !menu.is_empty() => {
                if menu.iter().any(|f| contains_word_boundary(&pair.generated, f)) {
                    menu_hits += 1;
                }
            }
            _ => empty_menu_pairs += 1,
        }
        if pair
            .gt_features
            .iter()
            .filter(|f| passes_feature_filter(f))
            .any(|f| contains_word_boundary(&pair.generated, f))
        {
            gt_hits += 1;
        }
    }
    FeatureMatch {
        ifmr: ratio(menu_hits, n),
        gt_fmr: ratio(gt_hits, n),
        empty_menu_pairs,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub fcr: f64,
    pub ifcr: f64,
    pub head_fcr: f64,
    pub tail_fcr: f64,
    /// items skipped in the iFCR mean for lack of menu features
    pub skipped_items: usize,
}

/// FCR over the features of the sampled items, iFCR per item, and FCR
/// restricted to the head/tail categories by training-label count.
pub fn coverage_metrics(corpus: &EvalCorpus) -> Coverage {
    let items = corpus.items();
    // F: aggregated features of the sampled items
    let mut sampled: BTreeSet<&str> = BTreeSet::new();
    for item in &items {
        if let Some(menu) = corpus.features.item_features(item) {
            sampled.extend(menu.iter().map(|f| f.as_str()));
        }
    }
    let matched: BTreeSet<&str> = sampled
        .iter()
        .copied()
        .filter(|f| {
            corpus
                .pairs
                .iter()
                .any(|p| contains_word_boundary(&p.generated, f))
        })
        .collect();
    let fcr = ratio(matched.len(), sampled.len());

    let mut item_ratios = Vec::new();
    let mut skipped_items = 0usize;
    for item in &items {
        let Some(menu) = corpus.features.item_features(item).filter(|m| !m.is_empty()) else {
            skipped_items += 1;
            continue;
        };
        let gens: Vec<&str> = corpus
            .pairs
            .iter()
            .filter(|p| p.item == *item)
            .map(|p| p.generated.as_str())
            .collect();
        let hit = menu
            .iter()
            .filter(|f| gens.iter().any(|g| contains_word_boundary(g, f)))
            .count();
        item_ratios.push(hit as f64 / menu.len() as f64);
    }
    let ifcr = mean(&item_ratios);

    let by_freq = corpus.features.categories_by_frequency();
    let head: Vec<usize> = by_freq.iter().copied().take(HEAD_TAIL_WIDTH).collect();
    let tail: Vec<usize> = by_freq
        .iter()
        .rev()
        .copied()
        .take(HEAD_TAIL_WIDTH)
        .collect();
    let restricted_fcr = |cats: &[usize]| {
        let mut pool: BTreeSet<&str> = BTreeSet::new();
        for c in cats {
            if let Some(fs) = corpus.features.per_category.get(c) {
                pool.extend(fs.iter().map(|f| f.as_str()).filter(|f| sampled.contains(f)));
            }
        }
        let hit = pool.iter().filter(|f| matched.contains(*f)).count();
        ratio(hit, pool.len())
    };

    Coverage {
        fcr,
        ifcr,
        head_fcr: restricted_fcr(&head),
        tail_fcr: restricted_fcr(&tail),
        skipped_items,
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
