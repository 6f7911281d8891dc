//! Corpus-level multi-reference BLEU-4.

use std::collections::HashMap;

use super::tokens_of;

const MAX_N: usize = 4;

/// Standard corpus BLEU with n <= 4: clipped n-gram precision against the
/// best of each row's references, geometric mean, brevity penalty with the
/// closest reference length (ties toward the shorter). Reported in [0, 1].
pub fn bleu4_multiref(rows: &[(String, Vec<String>)]) -> f64 {
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (candidate, references) in rows {
        assert!(!references.is_empty(), "BLEU rows need references");
        let cand = tokens_of(candidate);
        let refs: Vec<Vec<String>> = references.iter().map(|r| tokens_of(r)).collect();
        cand_len += cand.len();
        ref_len += closest_ref_len(cand.len(), &refs);
        for n in 1..=MAX_N {
            let cand_counts = ngram_counts(&cand, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &refs {
                for (gram, count) in ngram_counts(r, n) {
                    let slot = max_ref.entry(gram).or_insert(0);
                    *slot = (*slot).max(count);
                }
            }
            for (gram, count) in &cand_counts {
                matched[n - 1] += (*count).min(*max_ref.get(gram).unwrap_or(&0));
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_N {
        if total[n] == 0 || matched[n] == 0 {
            return 0.0;
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln() / MAX_N as f64;
    }
    let bp = if cand_len > ref_len {
        1.0
    } else if cand_len == 0 {
        return 0.0;
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * log_sum.exp()
}

fn closest_ref_len(cand_len: usize, refs: &[Vec<String>]) -> usize {
    let mut best = refs[0].len();
    for r in refs {
        let d = r.len().abs_diff(cand_len);
        let bd = best.abs_diff(cand_len);
        if d < bd || (d == bd && r.len() < best) {
            best = r.len();
        }
    }
    best
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}
