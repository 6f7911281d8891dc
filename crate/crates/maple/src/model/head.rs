//! Aspect-recommendation MLP: sigmoid(W_c relu(W_h [u; i] + b_h) + b_c),
//! generalized to a configurable hidden stack (default 256 -> 128).

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};

use super::params::ParamSet;
use super::ModelError;

#[derive(Debug, Clone)]
pub struct AspectHead {
    /// layer widths from input (2d) through hiddens to n_aspect
    pub sizes: Vec<usize>,
    pub params: ParamSet,
}

impl AspectHead {
    pub fn new(d: usize, hidden: &[usize], n_aspect: usize, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![2 * d];
        sizes.extend_from_slice(hidden);
        sizes.push(n_aspect);
        let mut params = ParamSet::new();
        for w in sizes.windows(2).enumerate() {
            let (l, pair) = w;
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            params.insert(
                &format!("w{l}"),
                Array2::from_shape_fn((fan_in, fan_out), |_| normal.sample(rng)),
            );
            params.insert(&format!("b{l}"), Array2::zeros((1, fan_out)));
        }
        Self { sizes, params }
    }

    pub fn n_aspect(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str, vars: &mut HashMap<String, Var>) {
        for (name, value) in self.params.iter() {
            vars.insert(format!("{prefix}{name}"), tape.leaf(value.clone()));
        }
    }

    /// Logits for a batch of concatenated [u; i] rows (B x 2d -> B x n_aspect).
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        vars: &HashMap<String, Var>,
        prefix: &str,
        input: Var,
    ) -> Var {
        let n_layers = self.sizes.len() - 1;
        let mut x = input;
        for l in 0..n_layers {
            let w = vars[&format!("{prefix}w{l}")];
            let b = vars[&format!("{prefix}b{l}")];
            x = tape.matmul(x, w);
            x = tape.add_row(x, b);
            if l + 1 < n_layers {
                x = tape.relu(x);
            }
        }
        x
    }

    /// Plain forward pass returning logits.
    pub fn logits(&self, input: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        if input.ncols() != self.sizes[0] {
            return Err(ModelError::Shape(format!(
                "head input width {} != {}",
                input.ncols(),
                self.sizes[0]
            )));
        }
        let n_layers = self.sizes.len() - 1;
        let mut x = input.clone();
        for l in 0..n_layers {
            let w = self.params.get(&format!("w{l}"));
            let b = self.params.get(&format!("b{l}"));
            x = x.dot(w);
            for mut row in x.rows_mut() {
                row += &b.row(0);
            }
            if l + 1 < n_layers {
                x.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(x)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
