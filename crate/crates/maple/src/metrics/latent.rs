//! Latent-space similarity via a pluggable sentence encoder, plus
//! embedding-neighborhood analysis of the learned aspect table.

use crate::corpus::{FeatureIndex, Tokenizer};
use crate::model::MapleModel;
use crate::rag::{cosine, TextEncoder};

#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub mse: f64,
    pub cosine: f64,
    /// pairs skipped because either side encoded to an empty vector
    pub skipped: usize,
}

/// Mean pairwise MSE and cosine between encoded generations and references.
pub fn latent_metrics(generated: &[String], references: &[String], encoder: &dyn TextEncoder) -> Latent {
    assert_eq!(generated.len(), references.len());
    let mut mse_sum = 0.0;
    let mut cos_sum = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for (g, r) in generated.iter().zip(references.iter()) {
        let gv = encoder.encode(g);
        let rv = encoder.encode(r);
        if gv.iter().all(|&x| x == 0.0) || rv.iter().all(|&x| x == 0.0) {
            skipped += 1;
            continue;
        }
        counted += 1;
        let d = encoder.dim() as f64;
        mse_sum += gv
            .iter()
            .zip(rv.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / d;
        cos_sum += cosine(&gv, &rv);
    }
    if counted == 0 {
        return Latent {
            mse: 0.0,
            cosine: 0.0,
            skipped,
        };
    }
    Latent {
        mse: mse_sum / counted as f64,
        cosine: cos_sum / counted as f64,
        skipped,
    }
}

/// Embedding of a (possibly multi-word) feature: mean of its token-embedding
/// rows under the model's own tokenizer.
pub fn feature_embedding(model: &MapleModel, feature: &str) -> Vec<f64> {
    let d = model.d();
    let emb = model.tok.get("emb");
    let ids = model.tokenizer.encode(feature);
    let mut v = vec![0.0; d];
    if ids.is_empty() {
        return v;
    }
    for &id in &ids {
        for (slot, &x) in v.iter_mut().zip(emb.row(id as usize).iter()) {
            *slot += x;
        }
    }
    for slot in &mut v {
        *slot /= ids.len() as f64;
    }
    v
}

/// Top-k features of `category` by cosine similarity between the category's
/// aspect row and the features' token embeddings. Ties break alphabetically.
pub fn nearest_features(
    model: &MapleModel,
    index: &FeatureIndex,
    category: usize,
    k: usize,
) -> Vec<(String, f64)> {
    let Some(features) = index.per_category.get(&category) else {
        return Vec::new();
    };
    let Ok(row) = model.tables.aspect_row(category) else {
        return Vec::new();
    };
    let anchor: Vec<f64> = row.to_vec();
    let mut scored: Vec<(String, f64)> = features
        .iter()
        .map(|f| (f.clone(), cosine(&anchor, &feature_embedding(model, f))))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    scored.truncate(k);
    scored
}

/// TSV export of all category and feature vectors for external 2-D
/// projection: word, category name, then d floats.
pub fn export_embeddings_tsv(model: &MapleModel, index: &FeatureIndex) -> String {
    let mut out = String::new();
    for c in 0..model.inventory.n_aspect() {
        let name = model.inventory.name(c);
        let row = model.tables.aspect_row(c).expect("category in range");
        push_tsv_line(&mut out, name, name, row.iter().copied());
        if let Some(features) = index.per_category.get(&c) {
            for f in features {
                let v = feature_embedding(model, f);
                push_tsv_line(&mut out, f, name, v.into_iter());
            }
        }
    }
    out
}

fn push_tsv_line(out: &mut String, word: &str, category: &str, values: impl Iterator<Item = f64>) {
    out.push_str(word);
    out.push('\t');
    out.push_str(category);
    for v in values {
        out.push('\t');
        out.push_str(&format!("{v}"));
    }
    out.push('\n');
}
