//! Retriever-reader pipeline: the generated explanation acts as a discrete
//! query against user/item review pools, and the filled prompt goes to a
//! pluggable reader.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{AspectSelection, InferenceEngine, InferenceError, Strategy};

/// Versioned reader prompt template. Placeholders: {user}, {item},
/// {personal_query}, {item_reviews}, {user_reviews}.
pub const READER_PROMPT_TEMPLATE: &str = include_str!("../resources/reader_prompt_v1.txt");
pub const READER_PROMPT_VERSION: &str = "v1";

const PLACEHOLDERS: &[&str] = &[
    "{user}",
    "{item}",
    "{personal_query}",
    "{item_reviews}",
    "{user_reviews}",
];

#[derive(Debug, Error)]
pub enum RagError {
    #[error("review pool is empty")]
    EmptyPool,
    #[error("personal query is empty")]
    EmptyQuery,
    #[error("review list for {0} is empty")]
    EmptyReviews(&'static str),
    #[error("placeholder {0} left unfilled")]
    UnfilledPlaceholder(String),
    #[error("pool was encoded with {pool} but queried with {query}")]
    EncoderMismatch { pool: String, query: String },
    #[error("reader failed: {message}")]
    Reader {
        message: String,
        /// the assembled prompt, preserved so the call can be retried
        prompt: String,
    },
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Text-to-vector interface; the tests use the deterministic hashing stub.
pub trait TextEncoder {
    /// stable identity used to key cached pool vectors
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<f64>;
}

/// Deterministic bag-of-words encoder: hashed token counts.
#[derive(Debug, Clone)]
pub struct HashingEncoder {
    pub dim: usize,
}

impl HashingEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "encoder dimension must be positive");
        Self { dim }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl TextEncoder for HashingEncoder {
    fn id(&self) -> String {
        format!("hashing-{}-v1", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for word in text.to_lowercase().split_whitespace() {
            let word: String = word.chars().filter(|c| c.is_alphanumeric()).collect();
            if word.is_empty() {
                continue;
            }
            v[(fnv1a(word.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        v
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolScope {
    User,
    Item,
}

/// A fixed review collection with precomputed encoder vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReviewPool {
    pub scope: PoolScope,
    pub entries: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub encoder_id: String,
}

impl ReviewPool {
    pub fn build(scope: PoolScope, entries: Vec<String>, encoder: &dyn TextEncoder) -> Self {
        let vectors = entries.iter().map(|e| encoder.encode(e)).collect();
        Self {
            scope,
            entries,
            vectors,
            encoder_id: encoder.id(),
        }
    }

    /// Reuses the cached pool at `path` when its encoder identity and entries
    /// match; rebuilds and rewrites the cache otherwise.
    pub fn load_or_build(
        path: &Path,
        scope: PoolScope,
        entries: Vec<String>,
        encoder: &dyn TextEncoder,
    ) -> Result<Self, RagError> {
        if path.exists() {
            if let Ok(cached) = serde_json::from_str::<ReviewPool>(&fs::read_to_string(path)?) {
                if cached.encoder_id == encoder.id()
                    && cached.scope == scope
                    && cached.entries == entries
                {
                    return Ok(cached);
                }
            }
        }
        let pool = Self::build(scope, entries, encoder);
        fs::write(path, serde_json::to_string(&pool).expect("pool serializes"))?;
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievedReview {
    pub index: usize,
    pub text: String,
    pub similarity: f64,
}

/// Top-k pool reviews by cosine similarity to the encoded query; ties broken
/// by pool order. k larger than the pool returns the whole pool ranked.
pub fn retrieve_reviews(
    query: &str,
    pool: &ReviewPool,
    k: usize,
    encoder: &dyn TextEncoder,
) -> Result<Vec<RetrievedReview>, RagError> {
    if pool.is_empty() {
        return Err(RagError::EmptyPool);
    }
    if encoder.id() != pool.encoder_id {
        return Err(RagError::EncoderMismatch {
            pool: pool.encoder_id.clone(),
            query: encoder.id(),
        });
    }
    let qv = encoder.encode(query);
    let mut ranked: Vec<RetrievedReview> = pool
        .entries
        .iter()
        .zip(pool.vectors.iter())
        .enumerate()
        .map(|(index, (text, v))| RetrievedReview {
            index,
            text: text.clone(),
            similarity: cosine(&qv, v),
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.index.cmp(&b.index))
    });
    ranked.truncate(k);
    Ok(ranked)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReaderPrompt {
    pub user: String,
    pub item: String,
    pub personal_query: String,
    pub item_reviews: Vec<String>,
    pub user_reviews: Vec<String>,
    pub rendered: String,
}

/// Fills the versioned template; reviews become bulleted lines.
pub fn build_reader_prompt(
    user: &str,
    item: &str,
    personal_query: &str,
    item_reviews: &[String],
    user_reviews: &[String],
) -> Result<ReaderPrompt, RagError> {
    if personal_query.trim().is_empty() {
        return Err(RagError::EmptyQuery);
    }
    if item_reviews.is_empty() {
        return Err(RagError::EmptyReviews("item"));
    }
    if user_reviews.is_empty() {
        return Err(RagError::EmptyReviews("user"));
    }
    let bullets = |reviews: &[String]| {
        reviews
            .iter()
            .map(|r| format!("- {r}"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let rendered = READER_PROMPT_TEMPLATE
        .replace("{user}", user)
        .replace("{item}", item)
        .replace("{personal_query}", personal_query)
        .replace("{item_reviews}", &bullets(item_reviews))
        .replace("{user_reviews}", &bullets(user_reviews));
    for ph in PLACEHOLDERS {
        if rendered.contains(ph) {
            return Err(RagError::UnfilledPlaceholder((*ph).to_string()));
        }
    }
    Ok(ReaderPrompt {
        user: user.to_string(),
        item: item.to_string(),
        personal_query: personal_query.to_string(),
        item_reviews: item_reviews.to_vec(),
        user_reviews: user_reviews.to_vec(),
        rendered,
    })
}

/// Reader interface: prompt text in, completion text out.
pub trait Reader {
    fn read(&self, prompt: &str) -> Result<String, String>;
}

/// Mock reader that extracts and echoes the personal query line.
pub struct EchoReader;

impl Reader for EchoReader {
    fn read(&self, prompt: &str) -> Result<String, String> {
        for line in prompt.lines() {
            if let Some(rest) = line.strip_prefix("Personal query: ") {
                return Ok(rest.to_string());
            }
        }
        Err("prompt holds no personal query line".to_string())
    }
}

/// Mock reader with a fixed completion.
pub struct CannedReader(pub String);

impl Reader for CannedReader {
    fn read(&self, _prompt: &str) -> Result<String, String> {
        Ok(self.0.clone())
    }
}

/// HTTP reader posting {"prompt": ...} and expecting {"completion": ...}.
#[cfg(feature = "http-reader")]
pub struct HttpReader {
    pub endpoint: String,
    pub api_key: Option<String>,
}

#[cfg(feature = "http-reader")]
impl Reader for HttpReader {
    fn read(&self, prompt: &str) -> Result<String, String> {
        let client = reqwest::blocking::Client::new();
        let mut req = client
            .post(&self.endpoint)
            .json(&serde_json::json!({ "prompt": prompt }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp: serde_json::Value = req
            .send()
            .map_err(|e| e.to_string())?
            .error_for_status()
            .map_err(|e| e.to_string())?
            .json()
            .map_err(|e| e.to_string())?;
        resp.get("completion")
            .and_then(|c| c.as_str())
            .map(|s| s.to_string())
            .ok_or_else(|| "response holds no completion field".to_string())
    }
}

/// Full provenance of one retriever-reader run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RagTranscript {
    pub user: String,
    pub item: String,
    pub selection: AspectSelection,
    pub query: String,
    pub item_reviews: Vec<RetrievedReview>,
    pub user_reviews: Vec<RetrievedReview>,
    pub prompt: ReaderPrompt,
    pub reader_output: String,
}

/// generate_explanation -> retrieve from both pools -> fill prompt -> reader.
#[allow(clippy::too_many_arguments)]
pub fn explain_with_reader(
    engine: &InferenceEngine<'_>,
    user: &str,
    item: &str,
    strategy: Strategy,
    ground_truth: Option<usize>,
    max_len: usize,
    user_pool: &ReviewPool,
    item_pool: &ReviewPool,
    k: usize,
    encoder: &dyn TextEncoder,
    reader: &dyn Reader,
    rng: &mut impl Rng,
) -> Result<RagTranscript, RagError> {
    let (selection, output) = engine.explain(user, item, strategy, ground_truth, max_len, rng)?;
    let item_reviews = retrieve_reviews(&output.text, item_pool, k, encoder)?;
    let user_reviews = retrieve_reviews(&output.text, user_pool, k, encoder)?;
    let item_texts: Vec<String> = item_reviews.iter().map(|r| r.text.clone()).collect();
    let user_texts: Vec<String> = user_reviews.iter().map(|r| r.text.clone()).collect();
    let prompt = build_reader_prompt(user, item, &output.text, &item_texts, &user_texts)?;
    let reader_output = reader.read(&prompt.rendered).map_err(|message| RagError::Reader {
        message,
        prompt: prompt.rendered.clone(),
    })?;
    Ok(RagTranscript {
        user: user.to_string(),
        item: item.to_string(),
        selection,
        query: output.text,
        item_reviews,
        user_reviews,
        prompt,
        reader_output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool_of(texts: &[&str], encoder: &dyn TextEncoder) -> ReviewPool {
        ReviewPool::build(
            PoolScope::Item,
            texts.iter().map(|s| s.to_string()).collect(),
            encoder,
        )
    }

    #[test]
    fn identical_query_ranks_first_with_similarity_one() {
        let enc = HashingEncoder::new(64);
        let pool = pool_of(
            &["great crab chowder", "slow service", "lovely patio"],
            &enc,
        );
        let out = retrieve_reviews("slow service", &pool, 3, &enc).unwrap();
        assert_eq!(out[0].text, "slow service");
        assert!((out[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_entry_pool_returns_that_entry() {
        let enc = HashingEncoder::new(32);
        let pool = pool_of(&["only review"], &enc);
        let out = retrieve_reviews("anything else", &pool, 1, &enc).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].index, 0);
    }

    #[test]
    fn oversized_k_returns_whole_pool_ranked() {
        let enc = HashingEncoder::new(32);
        let pool = pool_of(&["alpha", "beta", "gamma"], &enc);
        let out = retrieve_reviews("beta", &pool, 10, &enc).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].text, "beta");
    }

    #[test]
    fn ranking_matches_brute_force_selection_sort() {
        let enc = HashingEncoder::new(48);
        let texts: Vec<String> = (0..20)
            .map(|i| format!("review number {} mentions topic {}", i, i % 5))
            .collect();
        let pool = ReviewPool::build(PoolScope::User, texts.clone(), &enc);
        let query = "which review mentions topic 3";
        let got = retrieve_reviews(query, &pool, 20, &enc).unwrap();

        // oracle: repeated max-selection over raw cosine values
        let qv = enc.encode(query);
        let mut sims: Vec<(usize, f64)> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| (i, cosine(&qv, &enc.encode(t))))
            .collect();
        let mut oracle = Vec::new();
        while !sims.is_empty() {
            let mut best = 0;
            for j in 1..sims.len() {
                if sims[j].1 > sims[best].1 {
                    best = j;
                }
            }
            oracle.push(sims.remove(best));
        }
        for (r, (i, s)) in got.iter().zip(oracle.iter()) {
            assert_eq!(r.index, *i);
            assert!((r.similarity - s).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_pool_is_an_error() {
        let enc = HashingEncoder::new(8);
        let pool = ReviewPool::build(PoolScope::Item, Vec::new(), &enc);
        assert!(matches!(
            retrieve_reviews("q", &pool, 5, &enc),
            Err(RagError::EmptyPool)
        ));
    }

    #[test]
    fn encoder_mismatch_is_an_error() {
        let a = HashingEncoder::new(8);
        let b = HashingEncoder::new(16);
        let pool = pool_of(&["x"], &a);
        assert!(matches!(
            retrieve_reviews("q", &pool, 1, &b),
            Err(RagError::EncoderMismatch { .. })
        ));
    }

    #[test]
    fn pool_cache_roundtrip_and_invalidation() {
        let enc = HashingEncoder::new(16);
        let dir = std::env::temp_dir().join("maple-pool-cache-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pool.json");
        let _ = std::fs::remove_file(&path);
        let entries = vec!["one".to_string(), "two".to_string()];
        let built =
            ReviewPool::load_or_build(&path, PoolScope::User, entries.clone(), &enc).unwrap();
        let cached =
            ReviewPool::load_or_build(&path, PoolScope::User, entries.clone(), &enc).unwrap();
        assert_eq!(built.vectors, cached.vectors);
        // different encoder identity forces a rebuild
        let other = HashingEncoder::new(24);
        let rebuilt = ReviewPool::load_or_build(&path, PoolScope::User, entries, &other).unwrap();
        assert_eq!(rebuilt.encoder_id, other.id());
    }

    #[test]
    fn prompt_contains_the_opening_instruction() {
        let prompt = build_reader_prompt(
            "u1",
            "Neptune Oyster",
            "crab chowder worth the wait",
            &["the chowder is famous".to_string()],
            &["I always order seafood".to_string()],
        )
        .unwrap();
        assert!(prompt.rendered.contains("Begin your explanation with"));
        assert!(prompt.rendered.contains("\"You may be interested in\""));
        assert!(prompt.rendered.contains("- the chowder is famous"));
        for ph in PLACEHOLDERS {
            assert!(!prompt.rendered.contains(ph));
        }
    }

    #[test]
    fn empty_personal_query_is_an_error() {
        let reviews = vec!["r".to_string()];
        assert!(matches!(
            build_reader_prompt("u", "i", "  ", &reviews, &reviews),
            Err(RagError::EmptyQuery)
        ));
    }

    #[test]
    fn prompt_rendering_matches_golden_file() {
        let prompt = build_reader_prompt(
            "u42",
            "Harbor Shack",
            "smoked salmon bagel at brunch",
            &[
                "best bagels on the pier".to_string(),
                "brunch line moves fast".to_string(),
            ],
            &["I love a lazy brunch".to_string()],
        )
        .unwrap();
        let golden = include_str!("../resources/reader_prompt_golden.txt");
        assert_eq!(prompt.rendered, golden);
    }

    #[test]
    fn distinct_review_lists_yield_distinct_prompts() {
        let base = vec!["same review".to_string()];
        let a = build_reader_prompt("u", "i", "q", &base, &base).unwrap();
        let b = build_reader_prompt(
            "u",
            "i",
            "q",
            &vec!["same review".to_string(), "extra".to_string()],
            &base,
        )
        .unwrap();
        assert_ne!(a.rendered, b.rendered);
    }

    #[test]
    fn echo_reader_returns_the_personal_query() {
        let reviews = vec!["r".to_string()];
        let prompt = build_reader_prompt("u", "i", "the exact query", &reviews, &reviews).unwrap();
        assert_eq!(
            EchoReader.read(&prompt.rendered).unwrap(),
            "the exact query"
        );
    }
}
