//! Tokenizer contract plus the whitespace default.
//!
//! Any subword tokenizer exposing encode/decode and the marker tokens fits;
//! the whitespace tokenizer is what the desk-scale pipeline and tests use.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub trait Tokenizer {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn decode(&self, tokens: &[u32]) -> String;
    fn bos_id(&self) -> u32;
    fn eos_id(&self) -> u32;
    fn unk_id(&self) -> u32;
    fn vocab_size(&self) -> usize;
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct WhitespaceTokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

impl WhitespaceTokenizer {
    /// Builds the vocabulary from the given texts, sorted for determinism.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab: BTreeSet<String> = BTreeSet::new();
        for text in texts {
            for word in text.split_whitespace() {
                vocab.insert(word.to_string());
            }
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(vocab);
        let mut tok = Self {
            tokens,
            index: HashMap::new(),
        };
        tok.rebuild_index();
        tok
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl Tokenizer for WhitespaceTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| *self.index.get(w).unwrap_or(&self.unk_id()))
            .collect()
    }

    fn decode(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .filter(|&&t| (t as usize) < self.tokens.len() && t != 0 && t != 1 && t != 2)
            .map(|&t| self.tokens[t as usize].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn bos_id(&self) -> u32 {
        1
    }

    fn eos_id(&self) -> u32 {
        2
    }

    fn unk_id(&self) -> u32 {
        3
    }

    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }
}
