//! Recursive interaction pruning and warm-start fold construction.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::extract::select_tuple_per_category;
use super::features::passes_feature_filter;
use super::types::{CorpusError, ReviewRecord, SplitDataset, SplitManifest, TrainingExample};

#[derive(Debug, Clone)]
pub struct SplitOptions {
    pub min_interactions: usize,
    pub ratios: (u32, u32, u32),
    pub folds: usize,
    pub seed: u64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            min_interactions: 20,
            ratios: (8, 1, 1),
            folds: 5,
            seed: 42,
        }
    }
}

/// Drops users and items with fewer than `min_interactions` user-item pairs,
/// repeating until a fixpoint. Returns the surviving pairs plus the number of
/// removed users and items.
pub fn prune_interactions(
    pairs: &BTreeSet<(String, String)>,
    min_interactions: usize,
) -> (BTreeSet<(String, String)>, usize, usize) {
    let mut current = pairs.clone();
    let all_users: BTreeSet<&String> = pairs.iter().map(|(u, _)| u).collect();
    let all_items: BTreeSet<&String> = pairs.iter().map(|(_, i)| i).collect();
    loop {
        let mut user_counts: BTreeMap<&String, usize> = BTreeMap::new();
        let mut item_counts: BTreeMap<&String, usize> = BTreeMap::new();
        for (u, i) in &current {
            *user_counts.entry(u).or_insert(0) += 1;
            *item_counts.entry(i).or_insert(0) += 1;
        }
        let next: BTreeSet<(String, String)> = current
            .iter()
            .filter(|(u, i)| {
                user_counts[u] >= min_interactions && item_counts[i] >= min_interactions
            })
            .cloned()
            .collect();
        if next.len() == current.len() {
            break;
        }
        current = next;
    }
    let kept_users: BTreeSet<&String> = current.iter().map(|(u, _)| u).collect();
    let kept_items: BTreeSet<&String> = current.iter().map(|(_, i)| i).collect();
    (
        current.clone(),
        all_users.len() - kept_users.len(),
        all_items.len() - kept_items.len(),
    )
}

struct PairData {
    user: String,
    item: String,
    /// category -> (segment text, winning aspect-term length) for tie-breaks
    segments: BTreeMap<usize, (String, usize)>,
    gt_features: BTreeSet<String>,
}

/// Prunes the interaction graph and builds `folds` warm-start 8:1:1 splits.
/// All categories of a user-item pair land in the same split.
pub fn prune_and_split(
    records: &[ReviewRecord],
    options: &SplitOptions,
) -> Result<Vec<(SplitDataset, SplitManifest)>, CorpusError> {
    let mut skipped = 0usize;
    let mut pair_data: BTreeMap<(String, String), PairData> = BTreeMap::new();
    for rec in records {
        if rec.tuples.is_empty() {
            skipped += 1;
            continue;
        }
        let key = (rec.user.clone(), rec.item.clone());
        let entry = pair_data.entry(key).or_insert_with(|| PairData {
            user: rec.user.clone(),
            item: rec.item.clone(),
            segments: BTreeMap::new(),
            gt_features: BTreeSet::new(),
        });
        for t in &rec.tuples {
            let feature = t.aspect_term.to_lowercase();
            if passes_feature_filter(&feature) {
                entry.gt_features.insert(feature);
            }
        }
        let selected = select_tuple_per_category(&rec.tuples);
        for (cat, tuple) in selected {
            let seg = rec
                .segments
                .get(&cat)
                .cloned()
                .unwrap_or_else(|| rec.text.clone());
            let len = tuple.aspect_term.chars().count();
            match entry.segments.get(&cat) {
                Some((_, best)) if *best >= len => {}
                _ => {
                    entry.segments.insert(cat, (seg, len));
                }
            }
        }
    }

    let pairs: BTreeSet<(String, String)> = pair_data.keys().cloned().collect();
    let (surviving, pruned_users, pruned_items) =
        prune_interactions(&pairs, options.min_interactions);
    if surviving.is_empty() {
        return Err(CorpusError::EmptyAfterPruning(options.min_interactions));
    }

    let (rt, rv, rs) = options.ratios;
    let total_ratio = (rt + rv + rs) as usize;
    let n = surviving.len();
    let n_valid = n * rv as usize / total_ratio;
    let n_test = n * rs as usize / total_ratio;

    let mut folds = Vec::with_capacity(options.folds);
    for fold_id in 0..options.folds {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(fold_id as u64));
        let mut shuffled: Vec<&(String, String)> = surviving.iter().collect();
        shuffled.shuffle(&mut rng);

        // First occurrence of every user and item is pinned to train; that is
        // what makes the split warm-start by construction.
        let mut seen_users: BTreeSet<&String> = BTreeSet::new();
        let mut seen_items: BTreeSet<&String> = BTreeSet::new();
        let mut train_keys: Vec<&(String, String)> = Vec::new();
        let mut flexible: Vec<&(String, String)> = Vec::new();
        for key in shuffled {
            let (u, i) = key;
            if seen_users.contains(u) && seen_items.contains(i) {
                flexible.push(key);
            } else {
                seen_users.insert(u);
                seen_items.insert(i);
                train_keys.push(key);
            }
        }
        if flexible.len() < n_valid + n_test {
            return Err(CorpusError::SplitImpossible(format!(
                "fold {fold_id}: only {} pairs free after warm-start cover, need {}",
                flexible.len(),
                n_valid + n_test
            )));
        }
        let valid_keys: Vec<&(String, String)> = flexible[..n_valid].to_vec();
        let test_keys: Vec<&(String, String)> = flexible[n_valid..n_valid + n_test].to_vec();
        train_keys.extend_from_slice(&flexible[n_valid + n_test..]);

        let expand = |keys: &[&(String, String)]| -> Vec<TrainingExample> {
            let mut out = Vec::new();
            for key in keys {
                let data = &pair_data[*key];
                for (&cat, (seg, _)) in &data.segments {
                    out.push(TrainingExample {
                        user: data.user.clone(),
                        item: data.item.clone(),
                        category: cat,
                        text: seg.clone(),
                        tokens: Vec::new(),
                        gt_features: data.gt_features.iter().cloned().collect(),
                    });
                }
            }
            out.sort_by(|a, b| {
                (&a.user, &a.item, a.category).cmp(&(&b.user, &b.item, b.category))
            });
            out
        };

        let train = expand(&train_keys);
        let valid = expand(&valid_keys);
        let test = expand(&test_keys);

        let mut user_history: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        let mut item_history: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        for ex in &train {
            user_history
                .entry(ex.user.clone())
                .or_default()
                .insert(ex.category);
            item_history
                .entry(ex.item.clone())
                .or_default()
                .insert(ex.category);
        }

        let manifest = SplitManifest {
            seed: options.seed,
            fold_id,
            min_interactions: options.min_interactions,
            pruned_users,
            pruned_items,
            surviving_pairs: n,
            train_pairs: train_keys.len(),
            valid_pairs: valid_keys.len(),
            test_pairs: test_keys.len(),
            skipped_reviews: skipped,
        };
        folds.push((
            SplitDataset {
                fold_id,
                train,
                valid,
                test,
                user_history,
                item_history,
            },
            manifest,
        ));
    }
    Ok(folds)
}

/// The user-item pairs of the training split.
pub fn train_pair_set(split: &SplitDataset) -> BTreeSet<(String, String)> {
    split
        .train
        .iter()
        .map(|ex| (ex.user.clone(), ex.item.clone()))
        .collect()
}
