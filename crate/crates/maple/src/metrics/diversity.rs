//! Sentence-uniqueness and n-gram diversity metrics.

use std::collections::{BTreeMap, HashMap, HashSet};

use super::{tokens_of, EvalCorpus};

#[derive(Debug, Clone, PartialEq)]
pub struct Uniqueness {
    pub usr: f64,
    pub uusr: f64,
    pub iusr: f64,
}

/// USR = distinct/total over all generations; uUSR/iUSR = unweighted mean of
/// the same ratio within each user's/item's collection.
pub fn uniqueness_metrics(corpus: &EvalCorpus) -> Uniqueness {
    let all: Vec<&str> = corpus.pairs.iter().map(|p| p.generated.as_str()).collect();
    let usr = set_ratio(&all);

    let mut by_user: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut by_item: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for p in &corpus.pairs {
        by_user.entry(&p.user).or_default().push(&p.generated);
        by_item.entry(&p.item).or_default().push(&p.generated);
    }
    let grouped_mean = |groups: &BTreeMap<&str, Vec<&str>>| {
        if groups.is_empty() {
            return 0.0;
        }
        groups.values().map(|g| set_ratio(g)).sum::<f64>() / groups.len() as f64
    };
    Uniqueness {
        usr,
        uusr: grouped_mean(&by_user),
        iusr: grouped_mean(&by_item),
    }
}

fn set_ratio(sentences: &[&str]) -> f64 {
    if sentences.is_empty() {
        return 0.0;
    }
    let distinct: HashSet<&str> = sentences.iter().copied().collect();
    distinct.len() as f64 / sentences.len() as f64
}

/// Distinct-n over the whole corpus: distinct n-grams / total n-grams, with
/// n-grams never crossing sentence boundaries. Returns 0 when no text is
/// long enough.
pub fn distinct_n(texts: &[String], n: usize) -> f64 {
    assert!(n >= 1);
    let mut total = 0usize;
    let mut distinct: HashSet<Vec<String>> = HashSet::new();
    for text in texts {
        let toks = tokens_of(text);
        if toks.len() < n {
            continue;
        }
        for gram in toks.windows(n) {
            total += 1;
            distinct.insert(gram.to_vec());
        }
    }
    if total == 0 {
        0.0
    } else {
        distinct.len() as f64 / total as f64
    }
}

/// Shannon entropy (bits) of the corpus n-gram frequency distribution;
/// unigrams by default at the call sites.
pub fn entr(texts: &[String], n: usize) -> f64 {
    assert!(n >= 1);
    let mut counts: HashMap<Vec<String>, usize> = HashMap::new();
    let mut total = 0usize;
    for text in texts {
        let toks = tokens_of(text);
        if toks.len() < n {
            continue;
        }
        for gram in toks.windows(n) {
            *counts.entry(gram.to_vec()).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum()
}
