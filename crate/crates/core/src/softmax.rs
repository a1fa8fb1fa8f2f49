//! Softmax-linear model `p(y | x) ∝ exp(<theta_y, x>)` with cross-entropy
//! loss, shared by the token teacher, the student and the Rademacher check.

use std::collections::HashMap;

use crate::linalg::Matrix;

pub type Params = Matrix;

/// Weighted labelled points. Exact duplicates may be merged into one point
/// whose weight is their total; the weighted objective is unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    vocab: usize,
    xs: Vec<f64>,
    labels: Vec<usize>,
    weights: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, vocab: usize) -> Self {
        Self {
            dim,
            vocab,
            xs: Vec::new(),
            labels: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Uniform weights `1/n` over the given points.
    pub fn from_points(dim: usize, vocab: usize, points: &[(Vec<f64>, usize)]) -> Self {
        let mut d = Self::new(dim, vocab);
        let w = 1.0 / points.len().max(1) as f64;
        for (x, y) in points {
            d.push(x, *y, w);
        }
        d
    }

    /// Merges bit-identical `(x, y)` records, keeping first-seen order.
    /// Weight of a merged point is `count / total`.
    pub fn from_points_merged(dim: usize, vocab: usize, points: &[(Vec<f64>, usize)]) -> Self {
        let mut index: HashMap<(Vec<u64>, usize), usize> = HashMap::new();
        let mut d = Self::new(dim, vocab);
        let mut counts: Vec<u64> = Vec::new();
        for (x, y) in points {
            let key = (x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), *y);
            match index.get(&key) {
                Some(&i) => counts[i] += 1,
                None => {
                    index.insert(key, counts.len());
                    counts.push(1);
                    d.push(x, *y, 0.0);
                }
            }
        }
        let total = points.len() as f64;
        for (w, c) in d.weights.iter_mut().zip(counts) {
            *w = c as f64 / total;
        }
        d
    }

    pub fn push(&mut self, x: &[f64], y: usize, weight: f64) {
        assert_eq!(x.len(), self.dim, "point dimension");
        assert!(y < self.vocab, "label out of range");
        self.xs.extend_from_slice(x);
        self.labels.push(y);
        self.weights.push(weight);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    softmax_into(z, &mut out);
    out
}

/// `-log p_theta(y | x)`.
pub fn loss(theta: &Params, x: &[f64], y: usize) -> f64 {
    let z = theta.mul_vec(x);
    log_sum_exp(&z) - z[y]
}

/// `sum_i w_i loss_i` with caller-supplied weights (may be negative).
pub fn weighted_loss(theta: &Params, data: &Dataset, weights: &[f64]) -> f64 {
    let mut z = vec![0.0; data.vocab];
    let mut total = 0.0;
    for i in 0..data.len() {
        theta.mul_vec_into(data.x(i), &mut z);
        total += weights[i] * (log_sum_exp(&z) - z[data.labels[i]]);
    }
    total
}

/// Weighted loss and its gradient `sum_i w_i (softmax(z_i) - e_{y_i}) x_i^T`.
pub fn weighted_loss_and_grad(theta: &Params, data: &Dataset, weights: &[f64]) -> (f64, Params) {
    let (vocab, dim) = (data.vocab, data.dim);
    let mut grad = Params::zeros(vocab, dim);
    let mut z = vec![0.0; vocab];
    let mut p = vec![0.0; vocab];
    let mut total = 0.0;
    for i in 0..data.len() {
        let x = data.x(i);
        let y = data.labels[i];
        let w = weights[i];
        theta.mul_vec_into(x, &mut z);
        total += w * (log_sum_exp(&z) - z[y]);
        softmax_into(&z, &mut p);
        p[y] -= 1.0;
        for (c, &pc) in p.iter().enumerate() {
            let coef = w * pc;
            for (g, xv) in grad.row_mut(c).iter_mut().zip(x) {
                *g += coef * xv;
            }
        }
    }
    (total, grad)
}

/// Loss under the dataset's own weights.
pub fn mean_loss(theta: &Params, data: &Dataset) -> f64 {
    weighted_loss(theta, data, &data.weights)
}

/// Cross-entropy `E_{y ~ target}[-log p_theta(y | x)]` against a full label
/// distribution.
pub fn expected_loss(theta: &Params, x: &[f64], target: &[f64]) -> f64 {
    let z = theta.mul_vec(x);
    let lse = log_sum_exp(&z);
    target.iter().zip(&z).map(|(p, zi)| p * (lse - zi)).sum()
}

pub fn argmax(z: &[f64]) -> usize {
    // first maximum wins
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}
