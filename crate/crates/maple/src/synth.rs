//! Synthetic corpora with known structure, used by the acceptance tests:
//! an overfittable generation corpus and a planted-affinity corpus with a
//! long-tail category skew.

use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::{AspectInventory, Tokenizer, TrainingExample, WhitespaceTokenizer};

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub inventory: AspectInventory,
    pub tokenizer: WhitespaceTokenizer,
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub examples: Vec<TrainingExample>,
}

/// Tokenizes examples in place with bos/eos markers.
pub fn tokenize_examples(
    tokenizer: &WhitespaceTokenizer,
    examples: &mut [TrainingExample],
    max_len: usize,
) {
    for ex in examples {
        let mut inner = tokenizer.encode(&ex.text);
        inner.truncate(max_len);
        let mut tokens = Vec::with_capacity(inner.len() + 2);
        tokens.push(tokenizer.bos_id());
        tokens.extend(inner);
        tokens.push(tokenizer.eos_id());
        ex.tokens = tokens;
    }
}

/// One triple per (user, item) pair; the segment text and its ground-truth
/// feature are a pure function of (item, category), so a small decoder can
/// memorize the corpus from the prompt alone.
pub fn overfit_corpus(n_users: usize, n_items: usize, n_aspects: usize) -> SynthCorpus {
    let inventory = AspectInventory::new(
        (0..n_aspects).map(|c| format!("aspect{c:02}")).collect(),
    )
    .expect("at least two aspects");
    let users: Vec<String> = (0..n_users).map(|u| format!("user{u:02}")).collect();
    let items: Vec<String> = (0..n_items).map(|i| format!("item{i:02}")).collect();
    let mut examples = Vec::with_capacity(n_users * n_items);
    for u in 0..n_users {
        for i in 0..n_items {
            let c = (u + i) % n_aspects;
            let feature = format!("dish{i}x{c}");
            examples.push(TrainingExample {
                user: users[u].clone(),
                item: items[i].clone(),
                category: c,
                text: format!("the {feature} was tasty"),
                tokens: Vec::new(),
                gt_features: vec![feature],
            });
        }
    }
    let tokenizer = WhitespaceTokenizer::fit(examples.iter().map(|e| e.text.as_str()));
    let mut corpus = SynthCorpus {
        inventory,
        tokenizer,
        users,
        items,
        examples,
    };
    tokenize_examples(&corpus.tokenizer, &mut corpus.examples, 20);
    corpus
}

#[derive(Debug, Clone)]
pub struct AffinityCorpus {
    pub inventory: AspectInventory,
    pub tokenizer: WhitespaceTokenizer,
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub train: Vec<TrainingExample>,
    pub valid: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
    /// the planted user -> aspect-set mapping (the learning target)
    pub user_labels: BTreeMap<String, BTreeSet<usize>>,
    /// the two rarest classes, each owned by a single user
    pub rare_classes: Vec<usize>,
}

impl AffinityCorpus {
    /// Mean number of positive labels per user-item pair.
    pub fn average_positives(&self) -> f64 {
        let pairs: BTreeSet<(&str, &str)> = self
            .train
            .iter()
            .chain(self.valid.iter())
            .chain(self.test.iter())
            .map(|e| (e.user.as_str(), e.item.as_str()))
            .collect();
        let total: usize = pairs
            .iter()
            .map(|(u, _)| self.user_labels[*u].len())
            .sum();
        total as f64 / pairs.len() as f64
    }
}

/// 30 users x 20 items x 12 aspects. Every pair of user u carries exactly the
/// categories of u's planted affinity set, so the aspect labels are a pure
/// function of the user. Classes 10 and 11 appear only in one user's history
/// each (the long tail). Each user contributes 8 train, 1 valid and 1 test
/// pair.
pub fn affinity_corpus() -> AffinityCorpus {
    const N_USERS: usize = 30;
    const N_ITEMS: usize = 20;
    const N_ASPECTS: usize = 12;
    const ITEMS_PER_USER: usize = 10;

    let inventory = AspectInventory::new(
        (0..N_ASPECTS).map(|c| format!("aspect{c:02}")).collect(),
    )
    .expect("twelve aspects");
    let users: Vec<String> = (0..N_USERS).map(|u| format!("user{u:02}")).collect();
    let items: Vec<String> = (0..N_ITEMS).map(|i| format!("item{i:02}")).collect();

    let mut user_labels: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for u in 0..N_USERS {
        let labels = match u {
            28 => BTreeSet::from([10]),
            29 => BTreeSet::from([11]),
            _ if u % 3 == 0 => BTreeSet::from([u % 10, (u + 3) % 10]),
            _ => BTreeSet::from([u % 10]),
        };
        user_labels.insert(users[u].clone(), labels);
    }

    let texts: Vec<String> = (0..N_ASPECTS)
        .map(|c| format!("plenty of aspect{c:02} here"))
        .collect();
    let tokenizer = WhitespaceTokenizer::fit(texts.iter().map(|t| t.as_str()));

    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for u in 0..N_USERS {
        for j in 0..ITEMS_PER_USER {
            let i = (u * 7 + j) % N_ITEMS;
            for &c in &user_labels[&users[u]] {
                let ex = TrainingExample {
                    user: users[u].clone(),
                    item: items[i].clone(),
                    category: c,
                    text: texts[c].clone(),
                    tokens: Vec::new(),
                    gt_features: Vec::new(),
                };
                match j {
                    0..=7 => train.push(ex),
                    8 => valid.push(ex),
                    _ => test.push(ex),
                }
            }
        }
    }
    for split in [&mut train, &mut valid, &mut test] {
        tokenize_examples(&tokenizer, split, 20);
    }
    AffinityCorpus {
        inventory,
        tokenizer,
        users,
        items,
        train,
        valid,
        test,
        user_labels,
        rare_classes: vec![10, 11],
    }
}
