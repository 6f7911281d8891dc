//! Two-stage training: stage 1 optimizes the generation loss alone; stage 2
//! adds the distribution-balanced aspect loss at weight alpha on a dataset
//! where each user-item pair appears once.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TrainingExample;
use crate::model::{
    db_loss_batch, db_loss_on_tape, raw_rebalance_ratios_with_counts, smooth_ratios, DbLossConfig,
    MapleModel, ModelError,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub stage1_max_epochs: usize,
    pub stage1_patience: usize,
    pub stage2_max_epochs: usize,
    pub stage2_patience: usize,
    /// weight of the aspect-recommendation loss in stage 2
    pub alpha: f64,
    /// global gradient-norm clip
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 0.0,
            batch_size: 196,
            max_seq_len: 20,
            stage1_max_epochs: 30,
            stage1_patience: 5,
            stage2_max_epochs: 20,
            stage2_patience: 2,
            alpha: 0.01,
            grad_clip: 1.0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 {
            return Err(TrainError::InvalidConfig("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.alpha < 0.0 {
            return Err(TrainError::InvalidConfig("alpha must be >= 0".into()));
        }
        if self.stage1_patience >= self.stage1_max_epochs {
            return Err(TrainError::InvalidConfig(
                "stage-1 patience must be < max epochs".into(),
            ));
        }
        if self.stage2_patience >= self.stage2_max_epochs {
            return Err(TrainError::InvalidConfig(
                "stage-2 patience must be < max epochs".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("training diverged (non-finite loss) at stage {stage} epoch {epoch}")]
    Diverged { stage: u8, epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One line of the training history (also the JSON-lines record).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub train_lt: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_ldb: Option<f64>,
    pub valid_lt: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_ldb: Option<f64>,
}

pub fn history_to_jsonl(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("epoch record serializes"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Strict-improvement early stopping on a monitored validation loss.
#[derive(Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    best: f64,
    since: usize,
}

#[derive(Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Wait,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val: f64) -> StopDecision {
        if val < self.best {
            self.best = val;
            self.since = 0;
            StopDecision::Improved
        } else {
            self.since += 1;
            if self.since >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Wait
            }
        }
    }
}

/// AdamW: adaptive per-parameter steps with decoupled weight decay.
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: HashMap<String, Array2<f64>>,
    v: HashMap<String, Array2<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Applies one update from named gradients; parameters without a gradient
    /// entry are left untouched.
    pub fn step(&mut self, model: &mut MapleModel, grads: &HashMap<String, Array2<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (beta1, beta2, eps, lr, wd) =
            (self.beta1, self.beta2, self.eps, self.lr, self.weight_decay);
        let m = &mut self.m;
        let v = &mut self.v;
        model.for_each_param_mut(|name, value| {
            let Some(g) = grads.get(name) else { return };
            let m_t = m
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(value.dim()));
            let v_t = v
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(value.dim()));
            for ((p, &gi), (mi, vi)) in value
                .iter_mut()
                .zip(g.iter())
                .zip(m_t.iter_mut().zip(v_t.iter_mut()))
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            }
        });
    }
}

/// Scales all gradients so their concatenated L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut HashMap<String, Array2<f64>>, max_norm: f64) -> f64 {
    // accumulate in name order so the norm is reproducible across runs
    let mut names: Vec<&String> = grads.keys().collect();
    names.sort();
    let total: f64 = names
        .iter()
        .map(|n| grads[*n].iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let scale = max_norm / total;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    total
}

/// A stage-2 example: one representative per user-item pair, with the pair's
/// multi-hot union of category labels.
#[derive(Debug, Clone)]
pub struct Stage2Example {
    pub example: TrainingExample,
    pub labels: Vec<f64>,
}

/// Collapses the split so each (user, item) pair appears exactly once. The
/// retained text is the example of the pair's globally most frequent category
/// (ties to the smaller category ID); the label is the union of the pair's
/// categories.
pub fn dedup_pairs(train: &[TrainingExample], n_aspect: usize) -> Vec<Stage2Example> {
    let mut global_counts = vec![0usize; n_aspect];
    for ex in train {
        global_counts[ex.category] += 1;
    }
    let mut by_pair: BTreeMap<(&str, &str), Vec<&TrainingExample>> = BTreeMap::new();
    for ex in train {
        by_pair
            .entry((ex.user.as_str(), ex.item.as_str()))
            .or_default()
            .push(ex);
    }
    by_pair
        .into_values()
        .map(|group| {
            let mut labels = vec![0.0; n_aspect];
            for ex in &group {
                labels[ex.category] = 1.0;
            }
            let representative = group
                .iter()
                .max_by(|a, b| {
                    global_counts[a.category]
                        .cmp(&global_counts[b.category])
                        .then(b.category.cmp(&a.category))
                })
                .unwrap();
            Stage2Example {
                example: (*representative).clone(),
                labels,
            }
        })
        .collect()
}

/// Mean generation loss over `examples`, evaluated in bounded batches.
pub fn evaluate_lt(
    model: &MapleModel,
    examples: &[TrainingExample],
    batch_size: usize,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for chunk in examples.chunks(batch_size) {
        total += model.generation_loss(chunk)? * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

fn one_step(
    model: &mut MapleModel,
    opt: &mut AdamW,
    clip: f64,
    build: impl FnOnce(
        &MapleModel,
        &mut crate::autodiff::Tape,
        &crate::model::VarMap,
    ) -> Result<crate::autodiff::Var, ModelError>,
) -> Result<f64, ModelError> {
    let mut tape = crate::autodiff::Tape::new();
    let vars = model.bind(&mut tape);
    let loss = build(model, &mut tape, &vars)?;
    let value = tape.scalar(loss);
    tape.backward(loss);
    let mut grads: HashMap<String, Array2<f64>> = vars
        .iter()
        .map(|(name, &var)| (name.clone(), tape.grad(var).clone()))
        .collect();
    clip_global_norm(&mut grads, clip);
    opt.step(model, &grads);
    Ok(value)
}

/// Stage 1: generation loss only, early-stopped on validation L_T.
pub fn train_stage1(
    model: &mut MapleModel,
    train: &[TrainingExample],
    valid: &[TrainingExample],
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if valid.is_empty() {
        return Err(TrainError::EmptySplit("valid"));
    }
    let encoded: Vec<_> = train
        .iter()
        .map(|ex| model.encode_example(ex))
        .collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let mut stopper = EarlyStopper::new(config.stage1_patience);
    let mut best_snapshot = model.snapshot();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..encoded.len()).collect();

    for epoch in 1..=config.stage1_max_epochs {
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| encoded[i].clone()).collect();
            let value = one_step(model, &mut opt, config.grad_clip, |m, tape, vars| {
                m.generation_loss_on_tape(tape, vars, &batch)
            })?;
            train_total += value * chunk.len() as f64;
        }
        let train_lt = train_total / encoded.len() as f64;
        let valid_lt = evaluate_lt(model, valid, config.batch_size)?;
        if !train_lt.is_finite() || !valid_lt.is_finite() {
            return Err(TrainError::Diverged { stage: 1, epoch });
        }
        history.push(EpochRecord {
            stage: 1,
            epoch,
            train_lt,
            train_ldb: None,
            valid_lt,
            valid_ldb: None,
        });
        match stopper.observe(valid_lt) {
            StopDecision::Improved => best_snapshot = model.snapshot(),
            StopDecision::Wait => {}
            StopDecision::Stop => break,
        }
    }
    model.restore(&best_snapshot);
    Ok(history)
}

/// Stage 2: L = L_T + alpha * L_DB on the deduplicated dataset, early-stopped
/// on validation L_DB only. Validation rebalance weights reuse the training
/// class counts.
pub fn train_stage2(
    model: &mut MapleModel,
    stage2: &[Stage2Example],
    valid: &[TrainingExample],
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>, TrainError> {
    config.validate()?;
    if stage2.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if valid.is_empty() {
        return Err(TrainError::EmptySplit("valid"));
    }
    let n_aspect = model.inventory.n_aspect();
    let db_config = DbLossConfig::with_defaults(n_aspect);

    let encoded: Vec<_> = stage2
        .iter()
        .map(|s| model.encode_example(&s.example))
        .collect::<Result<_, _>>()?;
    let mut train_counts = vec![0.0f64; n_aspect];
    for s in stage2 {
        for (c, &y) in s.labels.iter().enumerate() {
            if y > 0.5 {
                train_counts[c] += 1.0;
            }
        }
    }
    let labels_of = |rows: &[usize]| {
        Array2::from_shape_fn((rows.len(), n_aspect), |(k, c)| stage2[rows[k]].labels[c])
    };

    // validation pairs with multi-hot labels, weighted by training counts
    let valid_pairs = dedup_pairs(valid, n_aspect);
    let valid_labels = Array2::from_shape_fn((valid_pairs.len(), n_aspect), |(k, c)| {
        valid_pairs[k].labels[c]
    });
    let valid_weights = smooth_ratios(
        &raw_rebalance_ratios_with_counts(&valid_labels, &train_counts),
        &db_config,
    );

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let mut stopper = EarlyStopper::new(config.stage2_patience);
    let mut best_snapshot = model.snapshot();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..stage2.len()).collect();

    for epoch in 1..=config.stage2_max_epochs {
        order.shuffle(&mut rng);
        let mut lt_total = 0.0;
        let mut ldb_total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| encoded[i].clone()).collect();
            let pairs: Vec<(usize, usize)> = batch.iter().map(|e| (e.user, e.item)).collect();
            let labels = labels_of(chunk);
            let weights = smooth_ratios(
                &raw_rebalance_ratios_with_counts(&labels, &train_counts),
                &db_config,
            );
            let mut lt_value = 0.0;
            let mut ldb_value = 0.0;
            one_step(model, &mut opt, config.grad_clip, |m, tape, vars| {
                let lt = m.generation_loss_on_tape(tape, vars, &batch)?;
                let logits = m.aspect_logits_on_tape(tape, vars, &pairs);
                let ldb = db_loss_on_tape(tape, logits, &labels, &weights, &db_config);
                lt_value = tape.scalar(lt);
                ldb_value = tape.scalar(ldb);
                let scaled = tape.scale(ldb, config.alpha);
                Ok(tape.add(lt, scaled))
            })?;
            lt_total += lt_value * chunk.len() as f64;
            ldb_total += ldb_value * chunk.len() as f64;
        }
        let train_lt = lt_total / stage2.len() as f64;
        let train_ldb = ldb_total / stage2.len() as f64;

        let valid_lt = evaluate_lt(model, valid, config.batch_size)?;
        let valid_ldb = {
            let mut logits = Array2::zeros((valid_pairs.len(), n_aspect));
            for (k, s) in valid_pairs.iter().enumerate() {
                let row = model.aspect_logits(&s.example.user, &s.example.item)?;
                for (c, z) in row.into_iter().enumerate() {
                    logits[[k, c]] = z;
                }
            }
            db_loss_batch(&logits, &valid_labels, &valid_weights, &db_config)?
        };
        if !train_lt.is_finite() || !valid_lt.is_finite() || !valid_ldb.is_finite() {
            return Err(TrainError::Diverged { stage: 2, epoch });
        }
        history.push(EpochRecord {
            stage: 2,
            epoch,
            train_lt,
            train_ldb: Some(train_ldb),
            valid_lt,
            valid_ldb: Some(valid_ldb),
        });
        match stopper.observe(valid_ldb) {
            StopDecision::Improved => best_snapshot = model.snapshot(),
            StopDecision::Wait => {}
            StopDecision::Stop => break,
        }
    }
    model.restore(&best_snapshot);
    Ok(history)
}
