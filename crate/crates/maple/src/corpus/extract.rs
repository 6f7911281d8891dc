//! Sentiment-tuple extraction and aspect-category assignment.
//!
//! The production extractor/classifier are large models behind these traits;
//! the deterministic lexicon and keyword stubs implement the same interfaces
//! for tests and the bundled toy corpus.

use std::collections::BTreeMap;

use super::types::{AspectInventory, CorpusError, ReviewRecord, Sentiment, SentimentTuple};

/// A tuple as produced by an extractor, before category resolution.
#[derive(Debug, Clone)]
pub struct MinedTuple {
    pub aspect_term: String,
    pub opinion: String,
    pub sentiment: Sentiment,
    /// category name if the extractor already knows it
    pub category: Option<String>,
}

pub trait TupleExtractor {
    fn extract(&self, review_text: &str) -> Result<Vec<MinedTuple>, CorpusError>;
}

pub trait CategoryClassifier {
    /// Returns per-category scores; `None` means the classifier abstains.
    fn classify(&self, aspect_term: &str, inventory: &AspectInventory)
        -> Result<Option<usize>, CorpusError>;
}

#[derive(Debug, Clone)]
pub struct LexiconEntry {
    pub term: String,
    pub opinion: String,
    pub sentiment: Sentiment,
    pub category: Option<String>,
}

/// Deterministic extractor stub: emits one tuple per lexicon term found in
/// the review, ordered by first occurrence.
#[derive(Debug, Clone, Default)]
pub struct LexiconExtractor {
    entries: Vec<LexiconEntry>,
}

impl LexiconExtractor {
    pub fn new(entries: Vec<LexiconEntry>) -> Self {
        Self { entries }
    }
}

/// Case-insensitive word-boundary containment, shared with the factuality
/// metrics.
pub fn contains_word_boundary(haystack: &str, needle: &str) -> bool {
    find_word_boundary(haystack, needle).is_some()
}

fn find_word_boundary(haystack: &str, needle: &str) -> Option<usize> {
    let hay = haystack.to_lowercase();
    let needle = needle.to_lowercase();
    let mut from = 0;
    while let Some(rel) = hay[from..].find(&needle) {
        let at = from + rel;
        let before_ok = at == 0
            || !hay[..at].chars().next_back().map_or(false, |c| c.is_alphanumeric());
        let end = at + needle.len();
        let after_ok = end == hay.len()
            || !hay[end..].chars().next().map_or(false, |c| c.is_alphanumeric());
        if before_ok && after_ok {
            return Some(at);
        }
        from = at + 1;
    }
    None
}

impl TupleExtractor for LexiconExtractor {
    fn extract(&self, review_text: &str) -> Result<Vec<MinedTuple>, CorpusError> {
        let mut hits: Vec<(usize, MinedTuple)> = Vec::new();
        for e in &self.entries {
            if let Some(pos) = find_word_boundary(review_text, &e.term) {
                hits.push((
                    pos,
                    MinedTuple {
                        aspect_term: e.term.clone(),
                        opinion: e.opinion.clone(),
                        sentiment: e.sentiment,
                        category: e.category.clone(),
                    },
                ));
            }
        }
        hits.sort_by_key(|(pos, _)| *pos);
        Ok(hits.into_iter().map(|(_, t)| t).collect())
    }
}

/// Classifier stub: exact category-name match wins, then a keyword map;
/// anything else abstains.
#[derive(Debug, Clone, Default)]
pub struct KeywordClassifier {
    map: BTreeMap<String, String>,
}

impl KeywordClassifier {
    pub fn new(map: BTreeMap<String, String>) -> Self {
        let map = map
            .into_iter()
            .map(|(k, v)| (k.to_lowercase(), v))
            .collect();
        Self { map }
    }
}

impl CategoryClassifier for KeywordClassifier {
    fn classify(
        &self,
        aspect_term: &str,
        inventory: &AspectInventory,
    ) -> Result<Option<usize>, CorpusError> {
        let lower = aspect_term.to_lowercase();
        for (id, name) in inventory.names().iter().enumerate() {
            if name.to_lowercase() == lower {
                return Ok(Some(id));
            }
        }
        match self.map.get(&lower) {
            Some(name) => inventory
                .id_of(name)
                .map(Some)
                .ok_or_else(|| CorpusError::UnknownCategory(name.clone())),
            None => Ok(None),
        }
    }
}

/// Runs the extractor over a review. Tuples whose category name is unknown
/// to the inventory are dropped. An empty result means the caller should
/// discard the review.
pub fn extract_tuples(
    review_text: &str,
    extractor: &dyn TupleExtractor,
    inventory: &AspectInventory,
    classifier: &dyn CategoryClassifier,
) -> Result<(Vec<SentimentTuple>, usize), CorpusError> {
    let mined = extractor.extract(review_text)?;
    let mut out = Vec::new();
    let mut dropped = 0usize;
    for m in mined {
        let category = match &m.category {
            Some(name) => inventory.id_of(name),
            None => assign_category(&m.aspect_term, inventory, classifier)?,
        };
        match category {
            Some(c) => out.push(SentimentTuple {
                aspect_term: m.aspect_term,
                opinion: m.opinion,
                sentiment: m.sentiment,
                category: c,
            }),
            None => dropped += 1,
        }
    }
    Ok((out, dropped))
}

/// Resolves an aspect term to a category ID, or `None` when the classifier
/// abstains (the tuple is then dropped rather than guessed).
pub fn assign_category(
    aspect_term: &str,
    inventory: &AspectInventory,
    classifier: &dyn CategoryClassifier,
) -> Result<Option<usize>, CorpusError> {
    if aspect_term.is_empty() {
        return Err(CorpusError::Malformed("empty aspect term".into()));
    }
    classifier.classify(aspect_term, inventory)
}

/// Keeps one tuple per category: the longest aspect term wins, ties broken
/// by earliest occurrence in the input list.
pub fn select_tuple_per_category(
    tuples: &[SentimentTuple],
) -> BTreeMap<usize, SentimentTuple> {
    let mut selected: BTreeMap<usize, SentimentTuple> = BTreeMap::new();
    for t in tuples {
        match selected.get(&t.category) {
            Some(cur) if cur.aspect_term.chars().count() >= t.aspect_term.chars().count() => {}
            _ => {
                selected.insert(t.category, t.clone());
            }
        }
    }
    selected
}

/// Builds a [`ReviewRecord`] from a raw review: selects one tuple per
/// category and records per-category segments. With no span information the
/// full review text stands in for every segment.
pub fn segment_review(
    user: &str,
    item: &str,
    text: &str,
    tuples: Vec<SentimentTuple>,
) -> ReviewRecord {
    let selected = select_tuple_per_category(&tuples);
    let segments = selected
        .keys()
        .map(|&c| (c, text.to_string()))
        .collect();
    ReviewRecord {
        user: user.to_string(),
        item: item.to_string(),
        text: text.to_string(),
        tuples: selected.into_values().collect(),
        segments,
    }
}
