//! Distribution-balanced multi-label loss and its rebalance weights.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};

use super::head::sigmoid;
use super::ModelError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DbLossConfig {
    /// negative-tolerance coefficient
    pub lambda: f64,
    /// per-class bias; length must equal n_aspect
    pub nu: Vec<f64>,
    /// smoothing: r_hat = alpha_s + sigmoid(beta_s * (r - mu_s))
    pub alpha_s: f64,
    pub beta_s: f64,
    pub mu_s: f64,
}

impl DbLossConfig {
    pub fn with_defaults(n_aspect: usize) -> Self {
        Self {
            lambda: 2.0,
            nu: vec![0.05; n_aspect],
            alpha_s: 0.1,
            beta_s: 10.0,
            mu_s: 0.2,
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Raw class-over-instance weights r for each sample and class:
/// r^k_i = (1/n_i) / sum_{j : y^k_j = 1} (1/n_j), with counts taken from the
/// label matrix itself. Rows with no positive label get r = 0 uniformly.
pub fn raw_rebalance_ratios(labels: &Array2<f64>) -> Array2<f64> {
    let (n_samples, n_classes) = labels.dim();
    let mut counts = vec![0.0f64; n_classes];
    for k in 0..n_samples {
        for (i, count) in counts.iter_mut().enumerate() {
            if labels[[k, i]] > 0.5 {
                *count += 1.0;
            }
        }
    }
    raw_rebalance_ratios_with_counts(labels, &counts)
}

/// Same as [`raw_rebalance_ratios`] but with externally supplied per-class
/// positive counts (e.g. training counts applied to validation rows).
pub fn raw_rebalance_ratios_with_counts(
    labels: &Array2<f64>,
    counts: &[f64],
) -> Array2<f64> {
    let (n_samples, n_classes) = labels.dim();
    let inv: Vec<f64> = counts
        .iter()
        .map(|&n| if n > 0.0 { 1.0 / n } else { 0.0 })
        .collect();
    let mut r = Array2::zeros((n_samples, n_classes));
    for k in 0..n_samples {
        let denom: f64 = (0..n_classes)
            .filter(|&j| labels[[k, j]] > 0.5)
            .map(|j| inv[j])
            .sum();
        if denom > 0.0 {
            for i in 0..n_classes {
                r[[k, i]] = inv[i] / denom;
            }
        }
    }
    r
}

/// Smoothed per-sample per-class weights r_hat, in (alpha_s, alpha_s + 1).
pub fn compute_rebalance_weights(labels: &Array2<f64>, config: &DbLossConfig) -> Array2<f64> {
    let r = raw_rebalance_ratios(labels);
    smooth_ratios(&r, config)
}

/// Applies the sigmoid smoothing to raw ratios.
pub fn smooth_ratios(r: &Array2<f64>, config: &DbLossConfig) -> Array2<f64> {
    r.mapv(|v| config.alpha_s + sigmoid(config.beta_s * (v - config.mu_s)))
}

/// Distribution-balanced loss for one sample.
pub fn db_loss(
    logits: &[f64],
    labels: &[f64],
    weights: &[f64],
    config: &DbLossConfig,
) -> Result<f64, ModelError> {
    let n = logits.len();
    if labels.len() != n || weights.len() != n || config.nu.len() != n {
        return Err(ModelError::Shape(format!(
            "db_loss length mismatch: z={}, y={}, r={}, nu={}",
            n,
            labels.len(),
            weights.len(),
            config.nu.len()
        )));
    }
    if config.lambda <= 0.0 {
        return Err(ModelError::Shape("lambda must be positive".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let delta = logits[i] - config.nu[i];
        let pos = labels[i] * softplus(-delta);
        let neg = (1.0 - labels[i]) * softplus(config.lambda * delta) / config.lambda;
        total += weights[i] * (pos + neg);
    }
    Ok(total / n as f64)
}

/// Batch form: mean of per-sample losses.
pub fn db_loss_batch(
    logits: &Array2<f64>,
    labels: &Array2<f64>,
    weights: &Array2<f64>,
    config: &DbLossConfig,
) -> Result<f64, ModelError> {
    let n = logits.nrows();
    let mut total = 0.0;
    for k in 0..n {
        total += db_loss(
            logits.row(k).as_slice().unwrap(),
            labels.row(k).as_slice().unwrap(),
            weights.row(k).as_slice().unwrap(),
            config,
        )?;
    }
    Ok(total / n as f64)
}

/// Tape version used during stage-2 training. `logits` is B x C; labels and
/// weights are constants.
pub fn db_loss_on_tape(
    tape: &mut Tape,
    logits: Var,
    labels: &Array2<f64>,
    weights: &Array2<f64>,
    config: &DbLossConfig,
) -> Var {
    let (b, c) = labels.dim();
    let nu_row = Array2::from_shape_fn((1, c), |(_, i)| config.nu[i]);
    let nu = tape.leaf(nu_row);
    let y = tape.leaf(labels.clone());
    let one_minus_y = tape.leaf(labels.mapv(|v| 1.0 - v));
    let r = tape.leaf(weights.clone());

    let neg_nu = tape.scale(nu, -1.0);
    let delta = tape.add_row(logits, neg_nu);
    let neg_delta = tape.scale(delta, -1.0);
    let pos_term = tape.softplus(neg_delta);
    let pos_term = tape.mul_elem(pos_term, y);
    let scaled = tape.scale(delta, config.lambda);
    let neg_term = tape.softplus(scaled);
    let neg_term = tape.mul_elem(neg_term, one_minus_y);
    let neg_term = tape.scale(neg_term, 1.0 / config.lambda);
    let both = tape.add(pos_term, neg_term);
    let weighted = tape.mul_elem(both, r);
    let total = tape.sum_all(weighted);
    tape.scale(total, 1.0 / (b * c) as f64)
}

/// Leaf map helper used by callers that mix this loss with others on one tape.
pub type VarMap = HashMap<String, Var>;
