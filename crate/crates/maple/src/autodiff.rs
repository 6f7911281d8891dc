//! A small reverse-mode autodiff tape over `ndarray` matrices.
//!
//! Every tensor on the tape is a dense `f64` matrix. The op set is exactly
//! what the decoder, the aspect head and the two losses need; gradients are
//! verified against central finite differences in the test suite.

use ndarray::{s, Array2, Axis};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// a.dot(b)
    MatMul { a: usize, b: usize },
    /// a.dot(b.t())
    MatMulTransB { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    MulElem { a: usize, b: usize },
    /// broadcast a 1-row matrix over every row of `a`
    AddRow { a: usize, row: usize },
    Scale { a: usize, c: f64 },
    Relu { a: usize },
    Gelu { a: usize },
    Sigmoid { a: usize },
    /// numerically stable ln(1 + e^x)
    Softplus { a: usize },
    /// per-row (x - mean) / sqrt(var + eps)
    NormalizeRows { a: usize, eps: f64 },
    /// softmax per row, masking columns j > i to zero probability
    CausalSoftmaxRows { a: usize },
    LogSoftmaxRows { a: usize },
    /// select rows of a table
    Gather { table: usize, rows: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    SliceCols { a: usize, start: usize, len: usize },
    /// broadcast-multiply a 1-row matrix over every row of `a`
    MulRow { a: usize, row: usize },
    /// scalar: sum of -w * a[r, c] over picks
    PickWeightedNegSum { a: usize, picks: Vec<(usize, usize, f64)> },
    SumAll { a: usize },
}

struct Node {
    value: Array2<f64>,
    grad: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let grad = Array2::zeros(value.raw_dim());
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul { a: a.0, b: b.0 })
    }

    pub fn matmul_trans_b(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(value, Op::MatMulTransB { a: a.0, b: b.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::MulElem { a: a.0, b: b.0 })
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.nodes[row.0].value.row(0).to_owned();
        let value = &self.nodes[a.0].value + &r;
        self.push(value, Op::AddRow { a: a.0, row: row.0 })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(value, Op::Scale { a: a.0, c })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(value, Op::Relu { a: a.0 })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| {
            0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
        });
        self.push(value, Op::Gelu { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(sigmoid);
        self.push(value, Op::Sigmoid { a: a.0 })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(stable_softplus);
        self.push(value, Op::Softplus { a: a.0 })
    }

    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = &self.nodes[a.0].value;
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        self.push(value, Op::NormalizeRows { a: a.0, eps })
    }

    pub fn causal_softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let (rows, cols) = x.dim();
        let mut value = Array2::zeros((rows, cols));
        for i in 0..rows {
            let limit = (i + 1).min(cols);
            let row = x.row(i);
            let max = row
                .iter()
                .take(limit)
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..limit {
                let e = (row[j] - max).exp();
                value[[i, j]] = e;
                denom += e;
            }
            for j in 0..limit {
                value[[i, j]] /= denom;
            }
        }
        self.push(value, Op::CausalSoftmaxRows { a: a.0 })
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(value, Op::LogSoftmaxRows { a: a.0 })
    }

    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = &self.nodes[table.0].value;
        let cols = t.ncols();
        let mut value = Array2::zeros((rows.len(), cols));
        for (out, &r) in rows.iter().enumerate() {
            value.row_mut(out).assign(&t.row(r));
        }
        self.push(
            value,
            Op::Gather {
                table: table.0,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.nodes[parts[0].0].value.nrows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let mut value = Array2::zeros((rows, total));
        let mut at = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            value.slice_mut(s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        self.push(
            value,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.nodes[parts[0].0].value.ncols();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.nrows()).sum();
        let mut value = Array2::zeros((total, cols));
        let mut at = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            value.slice_mut(s![at..at + v.nrows(), ..]).assign(v);
            at += v.nrows();
        }
        self.push(
            value,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        )
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.nodes[row.0].value.row(0).to_owned();
        let value = &self.nodes[a.0].value * &r;
        self.push(value, Op::MulRow { a: a.0, row: row.0 })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[a.0]
            .value
            .slice(s![.., start..start + len])
            .to_owned();
        self.push(value, Op::SliceCols { a: a.0, start, len })
    }

    /// Scalar loss node: sum over picks of `-weight * a[row, col]`.
    pub fn pick_weighted_neg_sum(&mut self, a: Var, picks: Vec<(usize, usize, f64)>) -> Var {
        let x = &self.nodes[a.0].value;
        let total: f64 = picks.iter().map(|&(r, c, w)| -w * x[[r, c]]).sum();
        let value = Array2::from_elem((1, 1), total);
        self.push(value, Op::PickWeightedNegSum { a: a.0, picks })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(value, Op::SumAll { a: a.0 })
    }

    /// Runs backpropagation from a scalar node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].value.dim(), (1, 1), "loss must be scalar");
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
        self.nodes[loss.0].grad[[0, 0]] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            if self.nodes[idx].grad.iter().all(|g| *g == 0.0) {
                continue;
            }
            let grad = self.nodes[idx].grad.clone();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                &Op::MatMul { a, b } => {
                    let da = grad.dot(&self.nodes[b].value.t());
                    let db = self.nodes[a].value.t().dot(&grad);
                    self.nodes[a].grad += &da;
                    self.nodes[b].grad += &db;
                }
                &Op::MatMulTransB { a, b } => {
                    let da = grad.dot(&self.nodes[b].value);
                    let db = grad.t().dot(&self.nodes[a].value);
                    self.nodes[a].grad += &da;
                    self.nodes[b].grad += &db;
                }
                &Op::Add { a, b } => {
                    self.nodes[a].grad += &grad;
                    self.nodes[b].grad += &grad;
                }
                &Op::Sub { a, b } => {
                    self.nodes[a].grad += &grad;
                    self.nodes[b].grad -= &grad;
                }
                &Op::MulElem { a, b } => {
                    let da = &grad * &self.nodes[b].value;
                    let db = &grad * &self.nodes[a].value;
                    self.nodes[a].grad += &da;
                    self.nodes[b].grad += &db;
                }
                &Op::AddRow { a, row } => {
                    self.nodes[a].grad += &grad;
                    let summed = grad.sum_axis(Axis(0));
                    self.nodes[row].grad.row_mut(0).scaled_add(1.0, &summed);
                }
                &Op::Scale { a, c } => {
                    self.nodes[a].grad.scaled_add(c, &grad);
                }
                &Op::Relu { a } => {
                    let mask = self.nodes[a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let da = &grad * &mask;
                    self.nodes[a].grad += &da;
                }
                &Op::Gelu { a } => {
                    let d = self.nodes[a].value.mapv(|x| {
                        let inner = GELU_C * (x + 0.044715 * x * x * x);
                        let t = inner.tanh();
                        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
                    });
                    let da = &grad * &d;
                    self.nodes[a].grad += &da;
                }
                &Op::Sigmoid { a } => {
                    let d = self.nodes[idx].value.mapv(|s| s * (1.0 - s));
                    let da = &grad * &d;
                    self.nodes[a].grad += &da;
                }
                &Op::Softplus { a } => {
                    let d = self.nodes[a].value.mapv(sigmoid);
                    let da = &grad * &d;
                    self.nodes[a].grad += &da;
                }
                &Op::NormalizeRows { a, eps } => {
                    let x = &self.nodes[a].value;
                    let xhat = &self.nodes[idx].value;
                    let mut da = Array2::zeros(x.raw_dim());
                    for i in 0..x.nrows() {
                        let n = x.ncols() as f64;
                        let row = x.row(i);
                        let mean = row.sum() / n;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g = grad.row(i);
                        let xh = xhat.row(i);
                        let g_mean = g.sum() / n;
                        let gx_mean = g
                            .iter()
                            .zip(xh.iter())
                            .map(|(gi, xi)| gi * xi)
                            .sum::<f64>()
                            / n;
                        for j in 0..x.ncols() {
                            da[[i, j]] = inv * (g[j] - g_mean - xh[j] * gx_mean);
                        }
                    }
                    self.nodes[a].grad += &da;
                }
                &Op::CausalSoftmaxRows { a } => {
                    let sm = &self.nodes[idx].value;
                    let mut da = Array2::zeros(sm.raw_dim());
                    for i in 0..sm.nrows() {
                        let g = grad.row(i);
                        let srow = sm.row(i);
                        let dot = g
                            .iter()
                            .zip(srow.iter())
                            .map(|(gi, si)| gi * si)
                            .sum::<f64>();
                        for j in 0..sm.ncols() {
                            da[[i, j]] = srow[j] * (g[j] - dot);
                        }
                    }
                    self.nodes[a].grad += &da;
                }
                &Op::LogSoftmaxRows { a } => {
                    let logp = &self.nodes[idx].value;
                    let mut da = Array2::zeros(logp.raw_dim());
                    for i in 0..logp.nrows() {
                        let g = grad.row(i);
                        let gsum: f64 = g.sum();
                        for j in 0..logp.ncols() {
                            da[[i, j]] = g[j] - logp[[i, j]].exp() * gsum;
                        }
                    }
                    self.nodes[a].grad += &da;
                }
                Op::Gather { table, rows } => {
                    let table = *table;
                    let rows = rows.clone();
                    for (out, r) in rows.iter().enumerate() {
                        let g = grad.row(out).to_owned();
                        self.nodes[table].grad.row_mut(*r).scaled_add(1.0, &g);
                    }
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let h = self.nodes[p].value.nrows();
                        let g = grad.slice(s![at..at + h, ..]).to_owned();
                        self.nodes[p].grad += &g;
                        at += h;
                    }
                }
                &Op::MulRow { a, row } => {
                    let r = self.nodes[row].value.row(0).to_owned();
                    let da = &grad * &r;
                    self.nodes[a].grad += &da;
                    let dr = (&grad * &self.nodes[a].value).sum_axis(Axis(0));
                    self.nodes[row].grad.row_mut(0).scaled_add(1.0, &dr);
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let w = self.nodes[p].value.ncols();
                        let g = grad.slice(s![.., at..at + w]).to_owned();
                        self.nodes[p].grad += &g;
                        at += w;
                    }
                }
                &Op::SliceCols { a, start, len } => {
                    let mut view = self.nodes[a].grad.slice_mut(s![.., start..start + len]);
                    view += &grad;
                }
                Op::PickWeightedNegSum { a, picks } => {
                    let a = *a;
                    let picks = picks.clone();
                    let g = grad[[0, 0]];
                    for (r, c, w) in picks {
                        self.nodes[a].grad[[r, c]] -= w * g;
                    }
                }
                &Op::SumAll { a } => {
                    let g = grad[[0, 0]];
                    self.nodes[a].grad.mapv_inplace(|_| 0.0);
                    let add = Array2::from_elem(self.nodes[a].value.raw_dim(), g);
                    self.nodes[a].grad += &add;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn finite_diff<F: FnMut(&Array2<f64>) -> f64>(x: &Array2<f64>, mut f: F) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let fp = f(&xp);
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            let fm = f(&xm);
            g[[r, c]] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = 1.0_f64.max(x.abs()).max(y.abs());
            assert!(
                (x - y).abs() / denom < tol,
                "analytic {x} vs numeric {y}"
            );
        }
    }

    #[test]
    fn matmul_chain_gradient() {
        let a0 = arr2(&[[0.3, -1.2], [0.7, 0.5], [-0.4, 0.9]]);
        let b0 = arr2(&[[1.1, -0.3, 0.2], [0.4, 0.8, -0.6]]);
        let loss_of = |a: &Array2<f64>, b: &Array2<f64>| {
            let mut t = Tape::new();
            let va = t.leaf(a.clone());
            let vb = t.leaf(b.clone());
            let m = t.matmul(va, vb);
            let g = t.gelu(m);
            let s = t.sum_all(g);
            t.scalar(s)
        };
        let mut t = Tape::new();
        let va = t.leaf(a0.clone());
        let vb = t.leaf(b0.clone());
        let m = t.matmul(va, vb);
        let g = t.gelu(m);
        let s = t.sum_all(g);
        t.backward(s);
        assert_close(t.grad(va), &finite_diff(&a0, |a| loss_of(a, &b0)), 1e-6);
        assert_close(t.grad(vb), &finite_diff(&b0, |b| loss_of(&a0, b)), 1e-6);
    }

    #[test]
    fn causal_softmax_rows_masks_future() {
        let mut t = Tape::new();
        let a = t.leaf(arr2(&[[5.0, 100.0, 100.0], [1.0, 1.0, 100.0], [1.0, 1.0, 1.0]]));
        let sm = t.causal_softmax_rows(a);
        let v = t.value(sm);
        assert_eq!(v[[0, 0]], 1.0);
        assert_eq!(v[[0, 1]], 0.0);
        assert_eq!(v[[0, 2]], 0.0);
        assert!((v[[1, 0]] - 0.5).abs() < 1e-12);
        assert_eq!(v[[1, 2]], 0.0);
        let row2: f64 = (0..3).map(|j| v[[2, j]]).sum();
        assert!((row2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layernorm_and_softmax_gradients() {
        let x0 = arr2(&[[0.5, -0.2, 1.3, 0.1], [2.0, -1.0, 0.3, 0.8]]);
        let loss_of = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let n = t.normalize_rows(v, 1e-5);
            let sm = t.causal_softmax_rows(n);
            let lp = t.log_softmax_rows(sm);
            let s = t.pick_weighted_neg_sum(lp, vec![(0, 0, 1.0), (1, 2, 0.5)]);
            t.scalar(s)
        };
        let mut t = Tape::new();
        let v = t.leaf(x0.clone());
        let n = t.normalize_rows(v, 1e-5);
        let sm = t.causal_softmax_rows(n);
        let lp = t.log_softmax_rows(sm);
        let s = t.pick_weighted_neg_sum(lp, vec![(0, 0, 1.0), (1, 2, 0.5)]);
        t.backward(s);
        assert_close(t.grad(v), &finite_diff(&x0, loss_of), 1e-5);
    }

    #[test]
    fn gather_concat_slice_gradients() {
        let table0 = arr2(&[[0.1, 0.2], [0.3, -0.4], [0.5, 0.6]]);
        let loss_of = |table: &Array2<f64>| {
            let mut t = Tape::new();
            let tb = t.leaf(table.clone());
            let g = t.gather(tb, &[2, 0, 2]);
            let cat = t.concat_cols(&[g, g]);
            let sl = t.slice_cols(cat, 1, 2);
            let sp = t.softplus(sl);
            let s = t.sum_all(sp);
            t.scalar(s)
        };
        let mut t = Tape::new();
        let tb = t.leaf(table0.clone());
        let g = t.gather(tb, &[2, 0, 2]);
        let cat = t.concat_cols(&[g, g]);
        let sl = t.slice_cols(cat, 1, 2);
        let sp = t.softplus(sl);
        let s = t.sum_all(sp);
        t.backward(s);
        assert_close(t.grad(tb), &finite_diff(&table0, loss_of), 1e-6);
    }

    #[test]
    fn sigmoid_relu_addrow_gradients() {
        let x0 = arr2(&[[0.4, -0.7, 1.2]]);
        let r0 = arr2(&[[0.2, 0.3, -0.1]]);
        let loss_of = |x: &Array2<f64>, r: &Array2<f64>| {
            let mut t = Tape::new();
            let vx = t.leaf(x.clone());
            let vr = t.leaf(r.clone());
            let a = t.add_row(vx, vr);
            let rl = t.relu(a);
            let sg = t.sigmoid(rl);
            let s = t.sum_all(sg);
            t.scalar(s)
        };
        let mut t = Tape::new();
        let vx = t.leaf(x0.clone());
        let vr = t.leaf(r0.clone());
        let a = t.add_row(vx, vr);
        let rl = t.relu(a);
        let sg = t.sigmoid(rl);
        let s = t.sum_all(sg);
        t.backward(s);
        assert_close(t.grad(vx), &finite_diff(&x0, |x| loss_of(x, &r0)), 1e-6);
        assert_close(t.grad(vr), &finite_diff(&r0, |r| loss_of(&x0, r)), 1e-6);
    }
}
