//! The combined prompt-learner model: ID/aspect prompt tables, token
//! embeddings, the decoder backbone and the aspect head.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::{AspectInventory, Tokenizer, TrainingExample, WhitespaceTokenizer};

use super::backbone::{Backbone, DecoderConfig, TinyDecoder};
use super::head::{sigmoid, AspectHead};
use super::params::{ParamBlob, ParamSet};
use super::{ModelError, VarMap};

/// Per-category sigmoid scores, element-wise in [0, 1]; the scores are
/// independent and do not sum to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AspectDistribution {
    pub scores: Vec<f64>,
}

/// Embedding tables U, I, C indexed by ID lookup.
#[derive(Debug, Clone)]
pub struct PromptTables {
    pub d: usize,
    pub params: ParamSet,
    pub user_index: BTreeMap<String, usize>,
    pub item_index: BTreeMap<String, usize>,
}

impl PromptTables {
    fn new(
        users: &[String],
        items: &[String],
        n_aspect: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, 0.1).unwrap();
        let mut init =
            |rows: usize| Array2::from_shape_fn((rows, d), |_| normal.sample(rng));
        let mut params = ParamSet::new();
        params.insert("usr", init(users.len()));
        params.insert("itm", init(items.len()));
        params.insert("asp", init(n_aspect));
        Self {
            d,
            params,
            user_index: users
                .iter()
                .enumerate()
                .map(|(i, u)| (u.clone(), i))
                .collect(),
            item_index: items
                .iter()
                .enumerate()
                .map(|(i, s)| (s.clone(), i))
                .collect(),
        }
    }

    pub fn user_id(&self, user: &str) -> Result<usize, ModelError> {
        self.user_index
            .get(user)
            .copied()
            .ok_or_else(|| ModelError::UnknownUser(user.to_string()))
    }

    pub fn item_id(&self, item: &str) -> Result<usize, ModelError> {
        self.item_index
            .get(item)
            .copied()
            .ok_or_else(|| ModelError::UnknownItem(item.to_string()))
    }

    /// Row lookup; equal to the one-hot product C^T g(c).
    pub fn aspect_row(&self, category: usize) -> Result<ArrayView1<'_, f64>, ModelError> {
        let asp = self.params.get("asp");
        if category >= asp.nrows() {
            return Err(ModelError::UnknownCategory(category));
        }
        Ok(asp.row(category))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub head_hidden: Vec<usize>,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 768,
            layers: 2,
            heads: 2,
            ff_mult: 4,
            head_hidden: vec![256, 128],
            max_len: 20,
        }
    }
}

impl ModelConfig {
    /// Small settings for desk-scale training from scratch.
    pub fn toy() -> Self {
        Self {
            d: 64,
            head_hidden: vec![64, 32],
            ..Self::default()
        }
    }
}

/// A training example with IDs resolved to table rows.
#[derive(Debug, Clone)]
pub struct EncodedExample {
    pub user: usize,
    pub item: usize,
    pub category: usize,
    /// token IDs including bos/eos markers
    pub tokens: Vec<u32>,
}

pub struct MapleModel {
    pub config: ModelConfig,
    pub inventory: AspectInventory,
    pub tokenizer: WhitespaceTokenizer,
    pub tables: PromptTables,
    /// token embedding table, "emb": V x d
    pub tok: ParamSet,
    pub decoder: TinyDecoder,
    pub head: AspectHead,
}

impl MapleModel {
    pub fn new(
        inventory: AspectInventory,
        tokenizer: WhitespaceTokenizer,
        users: Vec<String>,
        items: Vec<String>,
        config: ModelConfig,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tables = PromptTables::new(&users, &items, inventory.n_aspect(), config.d, &mut rng);
        let vocab = tokenizer.vocab_size();
        // positions: 3 prompts + bos + max_len tokens + eos
        let max_pos = 3 + 1 + config.max_len + 1;
        let dec_config = DecoderConfig {
            d: config.d,
            layers: config.layers,
            heads: config.heads,
            ff_mult: config.ff_mult,
            vocab,
            max_pos,
        };
        let decoder = TinyDecoder::new(dec_config, &mut rng);
        let head = AspectHead::new(config.d, &config.head_hidden, inventory.n_aspect(), &mut rng);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let mut tok = ParamSet::new();
        tok.insert(
            "emb",
            Array2::from_shape_fn((vocab, config.d), |_| normal.sample(&mut rng)),
        );
        Self {
            config,
            inventory,
            tokenizer,
            tables,
            tok,
            decoder,
            head,
        }
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    /// Registers every parameter as a tape leaf, keyed by its full name.
    pub fn bind(&self, tape: &mut Tape) -> VarMap {
        let mut vars = VarMap::new();
        for (name, value) in self.tables.params.iter() {
            vars.insert(format!("tab.{name}"), tape.leaf(value.clone()));
        }
        for (name, value) in self.tok.iter() {
            vars.insert(format!("tok.{name}"), tape.leaf(value.clone()));
        }
        self.decoder.bind(tape, "dec.", &mut vars);
        self.head.bind(tape, "head.", &mut vars);
        vars
    }

    /// Visits every parameter as (full name, matrix).
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Array2<f64>)) {
        for (name, value) in self.tables.params.iter_mut() {
            f(&format!("tab.{name}"), value);
        }
        for (name, value) in self.tok.iter_mut() {
            f(&format!("tok.{name}"), value);
        }
        for (name, value) in self.decoder.params.iter_mut() {
            f(&format!("dec.{name}"), value);
        }
        for (name, value) in self.head.params.iter_mut() {
            f(&format!("head.{name}"), value);
        }
    }

    pub fn snapshot(&self) -> Vec<(String, Array2<f64>)> {
        let mut out = Vec::new();
        for (name, value) in self.tables.params.iter() {
            out.push((format!("tab.{name}"), value.clone()));
        }
        for (name, value) in self.tok.iter() {
            out.push((format!("tok.{name}"), value.clone()));
        }
        for (name, value) in self.decoder.params.iter() {
            out.push((format!("dec.{name}"), value.clone()));
        }
        for (name, value) in self.head.params.iter() {
            out.push((format!("head.{name}"), value.clone()));
        }
        out
    }

    pub fn restore(&mut self, snapshot: &[(String, Array2<f64>)]) {
        let map: BTreeMap<&str, &Array2<f64>> =
            snapshot.iter().map(|(n, v)| (n.as_str(), v)).collect();
        self.for_each_param_mut(|name, value| {
            if let Some(saved) = map.get(name) {
                value.assign(saved);
            }
        });
    }

    pub fn encode_example(&self, ex: &TrainingExample) -> Result<EncodedExample, ModelError> {
        if ex.category >= self.inventory.n_aspect() {
            return Err(ModelError::UnknownCategory(ex.category));
        }
        Ok(EncodedExample {
            user: self.tables.user_id(&ex.user)?,
            item: self.tables.item_id(&ex.item)?,
            category: ex.category,
            tokens: ex.tokens.clone(),
        })
    }

    /// Builds the embedding sequence [u, i, signal, <bos>, e_1 .. e_T, <eos>].
    /// `tokens` are the explanation tokens without markers.
    pub fn assemble_sequence(
        &self,
        user: &str,
        item: &str,
        aspect_signal: &[f64],
        tokens: &[u32],
    ) -> Result<Array2<f64>, ModelError> {
        if aspect_signal.len() != self.config.d {
            return Err(ModelError::Shape(format!(
                "aspect signal width {} != d={}",
                aspect_signal.len(),
                self.config.d
            )));
        }
        let u = self.tables.user_id(user)?;
        let i = self.tables.item_id(item)?;
        let d = self.config.d;
        let len = 3 + 1 + tokens.len() + 1;
        let mut seq = Array2::zeros((len, d));
        seq.row_mut(0).assign(&self.tables.params.get("usr").row(u));
        seq.row_mut(1).assign(&self.tables.params.get("itm").row(i));
        for (j, &v) in aspect_signal.iter().enumerate() {
            seq[[2, j]] = v;
        }
        let emb = self.tok.get("emb");
        seq.row_mut(3).assign(&emb.row(self.tokenizer.bos_id() as usize));
        for (t, &tok_id) in tokens.iter().enumerate() {
            seq.row_mut(3 + 1 + t).assign(&emb.row(tok_id as usize));
        }
        seq.row_mut(len - 1)
            .assign(&emb.row(self.tokenizer.eos_id() as usize));
        Ok(seq)
    }

    /// Eq.-1 style loss on the tape: mean over examples of the mean
    /// per-token negative log-probability, with <eos> included as a target.
    pub fn generation_loss_on_tape(
        &self,
        tape: &mut Tape,
        vars: &VarMap,
        batch: &[EncodedExample],
    ) -> Result<Var, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Shape("empty batch".into()));
        }
        let usr = vars["tab.usr"];
        let itm = vars["tab.itm"];
        let asp = vars["tab.asp"];
        let emb = vars["tok.emb"];
        let mut total: Option<Var> = None;
        for ex in batch {
            if ex.tokens.len() < 2 {
                return Err(ModelError::Shape(
                    "example must hold at least bos and eos markers".into(),
                ));
            }
            let u = tape.gather(usr, &[ex.user]);
            let i = tape.gather(itm, &[ex.item]);
            let c = tape.gather(asp, &[ex.category]);
            let tok_rows: Vec<usize> = ex.tokens.iter().map(|&t| t as usize).collect();
            let toks = tape.gather(emb, &tok_rows);
            let seq = tape.concat_rows(&[u, i, c, toks]);
            let logp = self.decoder.forward_on_tape(tape, vars, "dec.", seq);
            let n_targets = ex.tokens.len() - 1;
            let w = 1.0 / (n_targets as f64 * batch.len() as f64);
            let picks: Vec<(usize, usize, f64)> = (1..ex.tokens.len())
                .map(|j| (2 + j, ex.tokens[j] as usize, w))
                .collect();
            let loss = tape.pick_weighted_neg_sum(logp, picks);
            total = Some(match total {
                Some(acc) => tape.add(acc, loss),
                None => loss,
            });
        }
        let loss = total.unwrap();
        if !tape.scalar(loss).is_finite() {
            return Err(ModelError::NonFinite("generation loss"));
        }
        Ok(loss)
    }

    /// Forward-only generation loss for a batch.
    pub fn generation_loss(&self, batch: &[TrainingExample]) -> Result<f64, ModelError> {
        let encoded: Vec<EncodedExample> = batch
            .iter()
            .map(|ex| self.encode_example(ex))
            .collect::<Result<_, _>>()?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let loss = self.generation_loss_on_tape(&mut tape, &vars, &encoded)?;
        Ok(tape.scalar(loss))
    }

    /// Aspect-head logits for a batch of (user row, item row) pairs.
    pub fn aspect_logits_on_tape(
        &self,
        tape: &mut Tape,
        vars: &VarMap,
        pairs: &[(usize, usize)],
    ) -> Var {
        let users: Vec<usize> = pairs.iter().map(|&(u, _)| u).collect();
        let items: Vec<usize> = pairs.iter().map(|&(_, i)| i).collect();
        let u = tape.gather(vars["tab.usr"], &users);
        let i = tape.gather(vars["tab.itm"], &items);
        let x = tape.concat_cols(&[u, i]);
        self.head.logits_on_tape(tape, vars, "head.", x)
    }

    /// Plain aspect-head logits for one pair.
    pub fn aspect_logits(&self, user: &str, item: &str) -> Result<Vec<f64>, ModelError> {
        let u = self.tables.user_id(user)?;
        let i = self.tables.item_id(item)?;
        let d = self.config.d;
        let mut x = Array2::zeros((1, 2 * d));
        x.slice_mut(ndarray::s![0, ..d])
            .assign(&self.tables.params.get("usr").row(u));
        x.slice_mut(ndarray::s![0, d..])
            .assign(&self.tables.params.get("itm").row(i));
        let logits = self.head.logits(&x)?;
        Ok(logits.row(0).to_vec())
    }

    /// sigma(W_c relu(W_h [u; i] + b_h) + b_c)
    pub fn aspect_scores(&self, user: &str, item: &str) -> Result<AspectDistribution, ModelError> {
        let logits = self.aspect_logits(user, item)?;
        Ok(AspectDistribution {
            scores: logits.into_iter().map(sigmoid).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let users = index_to_vec(&self.tables.user_index);
        let items = index_to_vec(&self.tables.item_index);
        let mut params = self.tables.params.to_blobs("tab.");
        params.extend(self.tok.to_blobs("tok."));
        params.extend(self.decoder.params.to_blobs("dec."));
        params.extend(self.head.params.to_blobs("head."));
        let checkpoint = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            inventory: self.inventory.clone(),
            tokenizer: self.tokenizer.clone(),
            users,
            items,
            params,
        };
        let json = serde_json::to_string(&checkpoint)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let json = fs::read_to_string(path)?;
        let checkpoint: Checkpoint =
            serde_json::from_str(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if checkpoint.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!(
                "unexpected format {:?}",
                checkpoint.format
            )));
        }
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {}",
                checkpoint.version
            )));
        }
        let mut tokenizer = checkpoint.tokenizer;
        tokenizer.rebuild_index();
        let mut model = Self::new(
            checkpoint.inventory,
            tokenizer,
            checkpoint.users,
            checkpoint.items,
            checkpoint.config,
            0,
        );
        let mut blobs: BTreeMap<&str, &ParamBlob> = BTreeMap::new();
        for blob in &checkpoint.params {
            blobs.insert(&blob.name, blob);
        }
        let mut error: Option<String> = None;
        model.for_each_param_mut(|name, value| {
            if error.is_some() {
                return;
            }
            match blobs.get(name) {
                Some(blob) => {
                    if value.nrows() != blob.rows || value.ncols() != blob.cols {
                        error = Some(format!("shape mismatch for {name}"));
                        return;
                    }
                    for (slot, v) in value.iter_mut().zip(blob.data.iter()) {
                        *slot = *v;
                    }
                }
                None => error = Some(format!("checkpoint missing parameter {name}")),
            }
        });
        match error {
            Some(e) => Err(ModelError::Checkpoint(e)),
            None => Ok(model),
        }
    }
}

impl Backbone for MapleModel {
    fn embed_dim(&self) -> usize {
        self.config.d
    }

    fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    fn next_token_log_probs(&self, input: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        self.decoder.next_token_log_probs(input)
    }
}

fn index_to_vec(index: &BTreeMap<String, usize>) -> Vec<String> {
    let mut out = vec![String::new(); index.len()];
    for (name, &i) in index {
        out[i] = name.clone();
    }
    out
}

const CHECKPOINT_FORMAT: &str = "maple-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    inventory: AspectInventory,
    tokenizer: WhitespaceTokenizer,
    users: Vec<String>,
    items: Vec<String>,
    params: Vec<ParamBlob>,
}
