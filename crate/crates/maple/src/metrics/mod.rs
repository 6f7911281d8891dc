//! Evaluation suite: factuality, aspect-wise explainability, text diversity,
//! similarity, aspect ranking and latent/embedding analysis.

mod bleu;
mod diversity;
mod factuality;
mod latent;
mod ranking;

pub use bleu::bleu4_multiref;
pub use diversity::{distinct_n, entr, uniqueness_metrics, Uniqueness};
pub use factuality::{coverage_metrics, feature_match_metrics, Coverage, FeatureMatch};
pub use latent::{export_embeddings_tsv, latent_metrics, nearest_features, Latent};
pub use ranking::{aspect_ranking_metrics, Ranking};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{AspectInventory, FeatureIndex};

/// One evaluated (user, item) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPair {
    pub user: String,
    pub item: String,
    pub generated: String,
    pub references: Vec<String>,
    /// features mined from the pair's ground-truth review
    pub gt_features: Vec<String>,
    pub gt_categories: BTreeSet<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCorpus {
    pub pairs: Vec<EvalPair>,
    pub features: FeatureIndex,
    pub inventory: AspectInventory,
}

impl EvalCorpus {
    /// Distinct items appearing in the corpus, in first-seen order.
    pub fn items(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for p in &self.pairs {
            if seen.insert(p.item.as_str()) {
                out.push(p.item.as_str());
            }
        }
        out
    }

    pub fn generated_texts(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.generated.clone()).collect()
    }
}

/// The full report; ranking and latent entries are present only when their
/// inputs were supplied.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "iFMR")]
    pub ifmr: f64,
    #[serde(rename = "FCR")]
    pub fcr: f64,
    #[serde(rename = "iFCR")]
    pub ifcr: f64,
    #[serde(rename = "GT-FMR")]
    pub gt_fmr: f64,
    #[serde(rename = "head FCR")]
    pub head_fcr: f64,
    #[serde(rename = "tail FCR")]
    pub tail_fcr: f64,
    #[serde(rename = "USR")]
    pub usr: f64,
    #[serde(rename = "uUSR")]
    pub uusr: f64,
    #[serde(rename = "iUSR")]
    pub iusr: f64,
    #[serde(rename = "Distinct-2")]
    pub distinct2: f64,
    #[serde(rename = "Distinct-3")]
    pub distinct3: f64,
    #[serde(rename = "ENTR")]
    pub entr: f64,
    #[serde(rename = "BLEU-4")]
    pub bleu4: f64,
    #[serde(rename = "HR@K", skip_serializing_if = "Option::is_none")]
    pub hr_at_k: Option<f64>,
    #[serde(rename = "F1", skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(rename = "latent MSE", skip_serializing_if = "Option::is_none")]
    pub latent_mse: Option<f64>,
    #[serde(rename = "latent cosine", skip_serializing_if = "Option::is_none")]
    pub latent_cosine: Option<f64>,
}

/// Computes every text-level metric of the report; ranking and latent slots
/// start empty.
pub fn compute_report(corpus: &EvalCorpus) -> MetricsReport {
    let fm = feature_match_metrics(corpus);
    let cov = coverage_metrics(corpus);
    let uniq = uniqueness_metrics(corpus);
    let texts = corpus.generated_texts();
    let rows: Vec<(String, Vec<String>)> = corpus
        .pairs
        .iter()
        .map(|p| (p.generated.clone(), p.references.clone()))
        .collect();
    MetricsReport {
        ifmr: fm.ifmr,
        fcr: cov.fcr,
        ifcr: cov.ifcr,
        gt_fmr: fm.gt_fmr,
        head_fcr: cov.head_fcr,
        tail_fcr: cov.tail_fcr,
        usr: uniq.usr,
        uusr: uniq.uusr,
        iusr: uniq.iusr,
        distinct2: distinct_n(&texts, 2),
        distinct3: distinct_n(&texts, 3),
        entr: entr(&texts, 1),
        bleu4: bleu4_multiref(&rows),
        hr_at_k: None,
        f1: None,
        latent_mse: None,
        latent_cosine: None,
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table grouped by metric family.
    pub fn render_table(&self) -> String {
        let mut rows: Vec<(&str, &str, String)> = vec![
            ("Factuality", "iFMR", format!("{:.4}", self.ifmr)),
            ("Factuality", "FCR", format!("{:.4}", self.fcr)),
            ("Factuality", "iFCR", format!("{:.4}", self.ifcr)),
            ("Aspect-wise Exp.", "GT-FMR", format!("{:.4}", self.gt_fmr)),
            ("Aspect-wise Exp.", "head FCR", format!("{:.4}", self.head_fcr)),
            ("Aspect-wise Exp.", "tail FCR", format!("{:.4}", self.tail_fcr)),
            ("Text Diversity", "USR", format!("{:.4}", self.usr)),
            ("Text Diversity", "uUSR", format!("{:.4}", self.uusr)),
            ("Text Diversity", "iUSR", format!("{:.4}", self.iusr)),
            ("Text Diversity", "Distinct-2", format!("{:.4}", self.distinct2)),
            ("Text Diversity", "Distinct-3", format!("{:.4}", self.distinct3)),
            ("Text Diversity", "ENTR", format!("{:.4}", self.entr)),
            ("Similarity", "BLEU-4", format!("{:.4}", self.bleu4)),
        ];
        if let Some(v) = self.hr_at_k {
            rows.push(("Aspect Ranking", "HR@K", format!("{v:.4}")));
        }
        if let Some(v) = self.f1 {
            rows.push(("Aspect Ranking", "F1", format!("{v:.4}")));
        }
        if let Some(v) = self.latent_mse {
            rows.push(("Latent", "latent MSE", format!("{v:.4}")));
        }
        if let Some(v) = self.latent_cosine {
            rows.push(("Latent", "latent cosine", format!("{v:.4}")));
        }
        let group_w = rows.iter().map(|(g, _, _)| g.len()).max().unwrap();
        let name_w = rows.iter().map(|(_, n, _)| n.len()).max().unwrap();
        let mut out = String::new();
        let mut last_group = "";
        for (group, name, value) in &rows {
            let shown = if *group == last_group { "" } else { group };
            last_group = group;
            out.push_str(&format!(
                "{shown:<group_w$}  {name:<name_w$}  {value}\n"
            ));
        }
        out
    }
}

pub(crate) fn tokens_of(text: &str) -> Vec<String> {
    text.split_whitespace().map(|s| s.to_string()).collect()
}
