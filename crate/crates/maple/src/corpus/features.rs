//! Per-item "menu" feature indexes used by the factuality metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::types::{AspectInventory, ReviewRecord};

/// Verbatim stop list applied to mined features.
pub const DUMMY_WORDS: &[&str] = &[
    "and", "very", "the", "is", "a", "an", "it", "this", "that", "of", "in", "that", "are",
    "were", "was", "food",
];

/// A feature survives if it has at least 4 characters and is not a dummy word.
pub fn passes_feature_filter(term: &str) -> bool {
    let lower = term.to_lowercase();
    term.chars().count() >= 4 && !DUMMY_WORDS.contains(&lower.as_str())
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct FeatureIndex {
    /// item -> filtered features mined from its training reviews (F_i)
    pub per_item: BTreeMap<String, BTreeSet<String>>,
    /// union of all per-item features (F)
    pub global: BTreeSet<String>,
    /// category ID -> features mined under that category
    pub per_category: BTreeMap<usize, BTreeSet<String>>,
    /// category ID -> number of training tuples labeled with it
    pub category_counts: BTreeMap<usize, usize>,
}

impl FeatureIndex {
    pub fn item_features(&self, item: &str) -> Option<&BTreeSet<String>> {
        self.per_item.get(item)
    }

    /// Categories ordered most-frequent first, ties broken by category ID.
    pub fn categories_by_frequency(&self) -> Vec<usize> {
        let mut cats: Vec<(usize, usize)> = self
            .category_counts
            .iter()
            .map(|(&c, &n)| (c, n))
            .collect();
        cats.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        cats.into_iter().map(|(c, _)| c).collect()
    }
}

/// Builds the feature index from training-split reviews only. Features are
/// lowercased aspect terms that pass the dummy/length filter.
pub fn build_feature_index(
    train_records: &[ReviewRecord],
    inventory: &AspectInventory,
) -> FeatureIndex {
    let mut index = FeatureIndex::default();
    for c in 0..inventory.n_aspect() {
        index.category_counts.insert(c, 0);
    }
    for rec in train_records {
        for t in &rec.tuples {
            *index.category_counts.entry(t.category).or_insert(0) += 1;
            let feature = t.aspect_term.to_lowercase();
            if !passes_feature_filter(&feature) {
                continue;
            }
            index
                .per_item
                .entry(rec.item.clone())
                .or_default()
                .insert(feature.clone());
            index
                .per_category
                .entry(t.category)
                .or_default()
                .insert(feature.clone());
            index.global.insert(feature);
        }
    }
    index
}
