//! Causal decoder backbones.
//!
//! The contract is embeddings in, next-token log-probabilities out, with
//! causal masking. Two implementations: [`TinyDecoder`], a small randomly
//! initialized transformer trainable from scratch, and
//! [`ExternalDecoderAdapter`], which delegates to a pretrained decoder
//! supplied by the caller.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};

use super::params::ParamSet;
use super::ModelError;

pub trait Backbone {
    fn embed_dim(&self) -> usize;
    fn vocab_size(&self) -> usize;
    /// Row `t` of the output holds the log-probabilities of the token at
    /// position `t + 1` given positions `0..=t`.
    fn next_token_log_probs(&self, input: &Array2<f64>) -> Result<Array2<f64>, ModelError>;
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub vocab: usize,
    pub max_pos: usize,
}

impl DecoderConfig {
    pub fn tiny(d: usize, vocab: usize, max_pos: usize) -> Self {
        Self {
            d,
            layers: 2,
            heads: 2,
            ff_mult: 4,
            vocab,
            max_pos,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TinyDecoder {
    pub config: DecoderConfig,
    pub params: ParamSet,
}

impl TinyDecoder {
    pub fn new(config: DecoderConfig, rng: &mut impl Rng) -> Self {
        assert!(config.d % config.heads == 0, "heads must divide d");
        let normal = Normal::new(0.0, 0.02).unwrap();
        let mut init = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
        };
        let d = config.d;
        let ff = config.d * config.ff_mult;
        let mut params = ParamSet::new();
        params.insert("pos", init(config.max_pos, d));
        for l in 0..config.layers {
            params.insert(&format!("l{l}.ln1.g"), Array2::ones((1, d)));
            params.insert(&format!("l{l}.ln1.b"), Array2::zeros((1, d)));
            params.insert(&format!("l{l}.wq"), init(d, d));
            params.insert(&format!("l{l}.bq"), Array2::zeros((1, d)));
            params.insert(&format!("l{l}.wk"), init(d, d));
            params.insert(&format!("l{l}.bk"), Array2::zeros((1, d)));
            params.insert(&format!("l{l}.wv"), init(d, d));
            params.insert(&format!("l{l}.bv"), Array2::zeros((1, d)));
            params.insert(&format!("l{l}.wo"), init(d, d));
            params.insert(&format!("l{l}.bo"), Array2::zeros((1, d)));
            params.insert(&format!("l{l}.ln2.g"), Array2::ones((1, d)));
            params.insert(&format!("l{l}.ln2.b"), Array2::zeros((1, d)));
            params.insert(&format!("l{l}.wfc"), init(d, ff));
            params.insert(&format!("l{l}.bfc"), Array2::zeros((1, ff)));
            params.insert(&format!("l{l}.wpr"), init(ff, d));
            params.insert(&format!("l{l}.bpr"), Array2::zeros((1, d)));
        }
        params.insert("lnf.g", Array2::ones((1, d)));
        params.insert("lnf.b", Array2::zeros((1, d)));
        params.insert("wout", init(d, config.vocab));
        params.insert("bout", Array2::zeros((1, config.vocab)));
        Self { config, params }
    }

    /// Registers every decoder parameter as a tape leaf under `prefix`.
    pub fn bind(&self, tape: &mut Tape, prefix: &str, vars: &mut HashMap<String, Var>) {
        for (name, value) in self.params.iter() {
            vars.insert(format!("{prefix}{name}"), tape.leaf(value.clone()));
        }
    }

    /// Transformer forward pass on the tape. `input` is an L x d embedding
    /// sequence; returns L x V next-token log-probabilities.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &HashMap<String, Var>,
        prefix: &str,
        input: Var,
    ) -> Var {
        let v = |name: &str| vars[&format!("{prefix}{name}")];
        let d = self.config.d;
        let heads = self.config.heads;
        let dk = d / heads;
        let len = tape.value(input).nrows();

        let pos = v("pos");
        let pos_rows: Vec<usize> = (0..len).collect();
        let pos_slice = tape.gather(pos, &pos_rows);
        let mut x = tape.add(input, pos_slice);

        for l in 0..self.config.layers {
            let p = |s: &str| format!("l{l}.{s}");
            // attention block
            let n = tape.normalize_rows(x, 1e-5);
            let n = tape.mul_row(n, v(&p("ln1.g")));
            let n = tape.add_row(n, v(&p("ln1.b")));
            let q = tape.matmul(n, v(&p("wq")));
            let q = tape.add_row(q, v(&p("bq")));
            let k = tape.matmul(n, v(&p("wk")));
            let k = tape.add_row(k, v(&p("bk")));
            let val = tape.matmul(n, v(&p("wv")));
            let val = tape.add_row(val, v(&p("bv")));
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * dk, dk);
                let kh = tape.slice_cols(k, h * dk, dk);
                let vh = tape.slice_cols(val, h * dk, dk);
                let scores = tape.matmul_trans_b(qh, kh);
                let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
                let attn = tape.causal_softmax_rows(scores);
                head_outs.push(tape.matmul(attn, vh));
            }
            let ctx = tape.concat_cols(&head_outs);
            let proj = tape.matmul(ctx, v(&p("wo")));
            let proj = tape.add_row(proj, v(&p("bo")));
            x = tape.add(x, proj);
            // feed-forward block
            let n = tape.normalize_rows(x, 1e-5);
            let n = tape.mul_row(n, v(&p("ln2.g")));
            let n = tape.add_row(n, v(&p("ln2.b")));
            let fc = tape.matmul(n, v(&p("wfc")));
            let fc = tape.add_row(fc, v(&p("bfc")));
            let act = tape.gelu(fc);
            let pr = tape.matmul(act, v(&p("wpr")));
            let pr = tape.add_row(pr, v(&p("bpr")));
            x = tape.add(x, pr);
        }
        let n = tape.normalize_rows(x, 1e-5);
        let n = tape.mul_row(n, v("lnf.g"));
        let n = tape.add_row(n, v("lnf.b"));
        let logits = tape.matmul(n, v("wout"));
        let logits = tape.add_row(logits, v("bout"));
        tape.log_softmax_rows(logits)
    }
}

impl Backbone for TinyDecoder {
    fn embed_dim(&self) -> usize {
        self.config.d
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab
    }

    fn next_token_log_probs(&self, input: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        if input.ncols() != self.config.d {
            return Err(ModelError::Shape(format!(
                "input width {} does not match d={}",
                input.ncols(),
                self.config.d
            )));
        }
        if input.nrows() > self.config.max_pos {
            return Err(ModelError::Shape(format!(
                "sequence length {} exceeds max positions {}",
                input.nrows(),
                self.config.max_pos
            )));
        }
        let mut tape = Tape::new();
        let mut vars = HashMap::new();
        self.bind(&mut tape, "", &mut vars);
        let inp = tape.leaf(input.clone());
        let out = self.forward_on_tape(&mut tape, &vars, "", inp);
        let value = tape.value(out).clone();
        if value.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite("decoder output"));
        }
        Ok(value)
    }
}

/// Adapter for an external pretrained decoder exposed as a closure from
/// embedding sequences to next-token log-probabilities.
pub struct ExternalDecoderAdapter {
    d: usize,
    vocab: usize,
    f: Box<dyn Fn(&Array2<f64>) -> Array2<f64> + Send + Sync>,
}

impl ExternalDecoderAdapter {
    pub fn new(
        d: usize,
        vocab: usize,
        f: impl Fn(&Array2<f64>) -> Array2<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            d,
            vocab,
            f: Box::new(f),
        }
    }
}

impl Backbone for ExternalDecoderAdapter {
    fn embed_dim(&self) -> usize {
        self.d
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_token_log_probs(&self, input: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        let out = (self.f)(input);
        if out.dim() != (input.nrows(), self.vocab) {
            return Err(ModelError::Shape(format!(
                "external decoder returned {:?}, expected {:?}",
                out.dim(),
                (input.nrows(), self.vocab)
            )));
        }
        for row in out.rows() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(ModelError::NonFinite("external decoder output"));
            }
            let total: f64 = row.iter().map(|lp| lp.exp()).sum();
            if (total - 1.0).abs() > 1e-5 {
                return Err(ModelError::Shape(format!(
                    "log-probability row sums to {total}, expected 1 within 1e-5"
                )));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_rows_are_normalized_log_probs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = TinyDecoder::new(DecoderConfig::tiny(8, 11, 16), &mut rng);
        let input = Array2::from_shape_fn((5, 8), |_| rng.gen_range(-0.5..0.5));
        let out = dec.next_token_log_probs(&input).unwrap();
        assert_eq!(out.dim(), (5, 11));
        for row in out.rows() {
            let total: f64 = row.iter().map(|lp| lp.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn causality_earlier_rows_ignore_later_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dec = TinyDecoder::new(DecoderConfig::tiny(8, 7, 16), &mut rng);
        let a = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-0.5..0.5));
        let mut b = a.clone();
        for j in 0..8 {
            b[[3, j]] += 1.0; // perturb only the last position
        }
        let oa = dec.next_token_log_probs(&a).unwrap();
        let ob = dec.next_token_log_probs(&b).unwrap();
        for t in 0..3 {
            for v in 0..7 {
                assert!((oa[[t, v]] - ob[[t, v]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn external_adapter_validates_normalization() {
        let vocab = 4;
        let good = ExternalDecoderAdapter::new(3, vocab, move |inp| {
            Array2::from_elem((inp.nrows(), vocab), (1.0 / vocab as f64).ln())
        });
        let input = Array2::zeros((2, 3));
        assert!(good.next_token_log_probs(&input).is_ok());

        let bad = ExternalDecoderAdapter::new(3, vocab, move |inp| {
            Array2::from_elem((inp.nrows(), vocab), -0.1)
        });
        assert!(bad.next_token_log_probs(&input).is_err());
    }
}
