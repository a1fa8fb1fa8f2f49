//! Desk-scale teachers `x = G(q, eps)` with computable Lipschitz constants.
//!
//! Teacher parameter files are plain text: a `key = value` header, a line
//! reading `matrix`, then one whitespace-separated row per line.
//!
//! ```text
//! kind = token
//! rows = 8
//! cols = 8
//! w_bound = 3
//! r_x = 1
//! matrix
//! 0.12 -0.4 ...
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LadsError, Result};
use crate::linalg::Matrix;
use crate::noise::{gaussian_noise, splitmix64, Seed};
use crate::softmax;

/// Continuous teacher `x = A q + sigma eps`; Lipschitz in `q` with constant
/// `||A||_op`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianTeacher {
    a: Matrix,
    sigma: f64,
    lipschitz: f64,
}

impl LinearGaussianTeacher {
    pub fn new(a: Matrix, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(LadsError::ConfigInvalid(format!("sigma must be positive, got {sigma}")));
        }
        if !a.is_finite() {
            return Err(LadsError::ConfigInvalid("teacher matrix has non-finite entries".into()));
        }
        let lipschitz = a.operator_norm();
        Ok(Self { a, sigma, lipschitz })
    }

    /// Entries i.i.d. `N(0, 1/q_dim)`.
    pub fn random(out_dim: usize, q_dim: usize, sigma: f64, seed: u64) -> Result<Self> {
        let g = gaussian_noise(Seed(splitmix64(seed)), out_dim * q_dim).into_values();
        let scale = 1.0 / (q_dim as f64).sqrt();
        let a = Matrix::from_vec(out_dim, q_dim, g.into_iter().map(|v| v * scale).collect())
            .ok_or_else(|| LadsError::ConfigInvalid("empty teacher".into()))?;
        Self::new(a, sigma)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.a
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn out_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn q_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn generate_continuous(&self, q: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.q_dim() {
            return Err(LadsError::DimensionMismatch {
                expected: self.q_dim(),
                got: q.len(),
            });
        }
        if eps.len() != self.out_dim() {
            return Err(LadsError::DimensionMismatch {
                expected: self.out_dim(),
                got: eps.len(),
            });
        }
        let mut x = self.a.mul_vec(q);
        for (xi, e) in x.iter_mut().zip(eps) {
            *xi += self.sigma * e;
        }
        Ok(x)
    }

    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz
    }
}

/// Softmax-linear token sampler; the same class the student is drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxTokenTeacher {
    theta: Matrix,
    w_bound: f64,
    r_x: f64,
}

/// Maps a standard normal draw to a standard Gumbel draw through the normal
/// CDF, computed in log space so neither tail rounds to 0 or 1.
pub fn gaussian_to_gumbel(z: f64) -> f64 {
    let log_cdf = if z < 0.0 {
        libm::log(0.5 * libm::erfc(-z / std::f64::consts::SQRT_2))
    } else {
        libm::log1p(-0.5 * libm::erfc(z / std::f64::consts::SQRT_2))
    };
    -libm::log(-log_cdf)
}

impl SoftmaxTokenTeacher {
    pub fn new(theta: Matrix, w_bound: f64, r_x: f64) -> Result<Self> {
        if !theta.is_finite() {
            return Err(LadsError::ConfigInvalid("teacher matrix has non-finite entries".into()));
        }
        if theta.frobenius() > w_bound * (1.0 + 1e-12) {
            return Err(LadsError::ConfigInvalid(format!(
                "teacher norm {} exceeds W = {w_bound}",
                theta.frobenius()
            )));
        }
        if !(r_x > 0.0) {
            return Err(LadsError::ConfigInvalid(format!("R_x must be positive, got {r_x}")));
        }
        Ok(Self { theta, w_bound, r_x })
    }

    /// Random direction scaled to Frobenius norm `norm_fraction * W`.
    pub fn random(vocab: usize, q_dim: usize, w_bound: f64, r_x: f64, norm_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&norm_fraction) {
            return Err(LadsError::ConfigInvalid(format!("norm fraction {norm_fraction}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Matrix::zeros(vocab, q_dim);
        for v in theta.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let norm = theta.frobenius();
        theta.scale(norm_fraction * w_bound / norm);
        Self::new(theta, w_bound, r_x)
    }

    pub fn theta(&self) -> &Matrix {
        &self.theta
    }

    pub fn vocab(&self) -> usize {
        self.theta.rows()
    }

    pub fn q_dim(&self) -> usize {
        self.theta.cols()
    }

    pub fn w_bound(&self) -> f64 {
        self.w_bound
    }

    pub fn r_x(&self) -> f64 {
        self.r_x
    }

    pub fn logits(&self, q: &[f64]) -> Vec<f64> {
        self.theta.mul_vec(q)
    }

    pub fn probs(&self, q: &[f64]) -> Vec<f64> {
        softmax::softmax(&self.logits(q))
    }

    /// Gumbel-max: `argmax_i (<theta_i, q> + eps_i)`, lowest index on ties.
    pub fn generate_token(&self, q: &[f64], eps: &[f64]) -> Result<usize> {
        if q.len() != self.q_dim() {
            return Err(LadsError::DimensionMismatch {
                expected: self.q_dim(),
                got: q.len(),
            });
        }
        if eps.len() != self.vocab() {
            return Err(LadsError::DimensionMismatch {
                expected: self.vocab(),
                got: eps.len(),
            });
        }
        let mut z = self.logits(q);
        z.iter_mut().zip(eps).for_each(|(zi, e)| *zi += e);
        Ok(softmax::argmax(&z))
    }

    /// Token from standard Gaussian noise (the form the gateway issues).
    pub fn generate_token_from_gaussian(&self, q: &[f64], gaussian: &[f64]) -> Result<usize> {
        let eps: Vec<f64> = gaussian.iter().map(|&z| gaussian_to_gumbel(z)).collect();
        self.generate_token(q, &eps)
    }

    /// Autoregressive reduction: token `t` consumes Gumbel slice
    /// `eps[t*Y .. (t+1)*Y]`. A trailing partial slice is ignored.
    pub fn generate_tokens(&self, q: &[f64], eps: &[f64]) -> Result<Vec<usize>> {
        eps.chunks_exact(self.vocab())
            .map(|slice| self.generate_token(q, slice))
            .collect()
    }

    /// Certified Lipschitz constant of the logit map `q -> theta q`:
    /// `||theta||_op <= ||theta||_F <= W`.
    pub fn lipschitz_bound(&self) -> f64 {
        self.w_bound
    }

    /// `log Y + 2 R_x W`, the loss bound over the class for `||q|| <= R_x`.
    pub fn loss_bound(&self) -> f64 {
        (self.vocab() as f64).ln() + 2.0 * self.r_x * self.w_bound
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Teacher {
    Linear(LinearGaussianTeacher),
    Token(SoftmaxTokenTeacher),
}

impl Teacher {
    pub fn lipschitz_bound(&self) -> f64 {
        match self {
            Teacher::Linear(t) => t.lipschitz_bound(),
            Teacher::Token(t) => t.lipschitz_bound(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = match self {
            Teacher::Linear(t) => {
                s.push_str("kind = linear\n");
                let _ = writeln!(s, "sigma = {:?}", t.sigma);
                &t.a
            }
            Teacher::Token(t) => {
                s.push_str("kind = token\n");
                let _ = writeln!(s, "w_bound = {:?}", t.w_bound);
                let _ = writeln!(s, "r_x = {:?}", t.r_x);
                &t.theta
            }
        };
        let _ = writeln!(s, "rows = {}\ncols = {}\nmatrix", m.rows(), m.cols());
        for i in 0..m.rows() {
            let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let mut header = std::collections::HashMap::new();
        for line in lines.by_ref() {
            if line == "matrix" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LadsError::Parse(format!("bad header line {line:?}")))?;
            header.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> {
            header
                .get(k)
                .ok_or_else(|| LadsError::Parse(format!("missing header field {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse::<f64>().map_err(|e| LadsError::Parse(format!("{k}: {e}")))
        };
        let rows = num("rows")? as usize;
        let cols = num("cols")? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for line in lines {
            for f in line.split_whitespace() {
                data.push(f.parse::<f64>().map_err(|e| LadsError::Parse(e.to_string()))?);
            }
        }
        let m = Matrix::from_vec(rows, cols, data)
            .ok_or_else(|| LadsError::Parse(format!("matrix body does not hold {rows}x{cols} values")))?;
        match get("kind")?.as_str() {
            "linear" => Ok(Teacher::Linear(LinearGaussianTeacher::new(m, num("sigma")?)?)),
            "token" => Ok(Teacher::Token(SoftmaxTokenTeacher::new(m, num("w_bound")?, num("r_x")?)?)),
            other => Err(LadsError::Parse(format!("unknown teacher kind {other:?}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{gumbel_noise, uniform_stream};
    use crate::stats::chi_square_categorical;

    #[test]
    fn zero_noise_gives_the_mean() {
        let t = LinearGaussianTeacher::random(3, 4, 0.5, 1).unwrap();
        let q = [0.1, -0.2, 0.3, 0.4];
        let x = t.generate_continuous(&q, &[0.0; 3]).unwrap();
        assert_eq!(x, t.matrix().mul_vec(&q));
        assert_eq!(x, t.generate_continuous(&q, &[0.0; 3]).unwrap());
        assert!(t.generate_continuous(&q, &[0.0; 2]).is_err());
        assert!(t.generate_continuous(&q[..3], &[0.0; 3]).is_err());
    }

    #[test]
    fn lipschitz_of_scaled_identity() {
        let t = LinearGaussianTeacher::new(Matrix::identity(4), 1.0).unwrap();
        assert!((t.lipschitz_bound() - 1.0).abs() < 1e-12);
        let mut two = Matrix::identity(4);
        two.scale(2.0);
        let t2 = LinearGaussianTeacher::new(two, 1.0).unwrap();
        assert!((t2.lipschitz_bound() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_matches_svd_oracle() {
        for seed in 0..20 {
            let t = LinearGaussianTeacher::random(5, 3 + (seed as usize % 4), 1.0, seed).unwrap();
            let m = t.matrix();
            let dense = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
            let top = dense.singular_values().max();
            assert!((t.lipschitz_bound() - top).abs() < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn gaussian_to_gumbel_is_monotone_and_finite() {
        let zs = [-8.6, -3.0, 0.0, 1.0, 8.6];
        let gs: Vec<f64> = zs.iter().map(|&z| gaussian_to_gumbel(z)).collect();
        assert!(gs.iter().all(|g| g.is_finite()));
        assert!(gs.windows(2).all(|w| w[0] < w[1]));
        // Phi(0) = 1/2 -> -ln(ln 2)
        assert!((gs[2] + (2f64.ln()).ln()).abs() < 1e-14);
    }

    #[test]
    fn equal_logits_split_evenly() {
        let t = SoftmaxTokenTeacher::new(Matrix::zeros(2, 3), 1.0, 1.0).unwrap();
        let q = [0.2, 0.1, -0.4];
        let mut counts = [0u64; 2];
        for s in 0..100_000 {
            counts[t.generate_token(&q, gumbel_noise(Seed(s), 2).values()).unwrap()] += 1;
        }
        assert!(chi_square_categorical(&counts, &[0.5, 0.5]).unwrap().passed);
    }

    #[test]
    fn log_two_logit_gives_two_thirds() {
        let theta = Matrix::from_rows(&[vec![2f64.ln()], vec![0.0]]).unwrap();
        let t = SoftmaxTokenTeacher::new(theta, 1.0, 1.0).unwrap();
        let n = 100_000;
        let ones = (0..n)
            .filter(|&s| t.generate_token(&[1.0], gumbel_noise(Seed(s + 7_000_000), 2).values()).unwrap() == 0)
            .count();
        assert!((ones as f64 / n as f64 - 2.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn shared_noise_gives_shared_token() {
        let t = SoftmaxTokenTeacher::random(8, 4, 3.0, 1.0, 0.9, 5).unwrap();
        let q = [0.3, 0.3, -0.1, 0.2];
        let eps = gumbel_noise(Seed(11), 8);
        assert_eq!(
            t.generate_token(&q, eps.values()).unwrap(),
            t.generate_token(&q, eps.values()).unwrap()
        );
    }

    #[test]
    fn gumbel_max_matches_softmax_across_vocab_sizes() {
        for (i, &vocab) in [2usize, 8, 32].iter().enumerate() {
            let t = SoftmaxTokenTeacher::random(vocab, 3, 2.0, 1.0, 1.0, 40 + i as u64).unwrap();
            let q = [0.5, -0.5, 0.5];
            let probs = t.probs(&q);
            let mut counts = vec![0u64; vocab];
            let n = 40_000 * (vocab as u64 / 2).max(1);
            for s in 0..n {
                let eps = gumbel_noise(Seed(s ^ 0xabc0_0000_0000), vocab);
                counts[t.generate_token(&q, eps.values()).unwrap()] += 1;
            }
            let r = chi_square_categorical(&counts, &probs).unwrap();
            assert!(r.passed, "Y={vocab}: chi2 = {} > {}", r.statistic, r.critical_value);
        }
    }

    #[test]
    fn gaussian_route_matches_softmax() {
        let t = SoftmaxTokenTeacher::random(4, 2, 2.0, 1.0, 1.0, 3).unwrap();
        let q = [0.6, -0.8];
        let mut counts = vec![0u64; 4];
        for s in 0..60_000u64 {
            counts[t.generate_token_from_gaussian(&q, gaussian_noise(Seed(s), 4).values()).unwrap()] += 1;
        }
        assert!(chi_square_categorical(&counts, &t.probs(&q)).unwrap().passed);
    }

    #[test]
    fn lipschitz_ratio_never_exceeds_bound() {
        let t = LinearGaussianTeacher::random(6, 4, 0.3, 9).unwrap();
        let u = uniform_stream(Seed(77), 10_000 * 8);
        let eps = gaussian_noise(Seed(78), 6);
        for c in u.chunks_exact(8) {
            let q1: Vec<f64> = c[..4].iter().map(|v| 2.0 * v - 1.0).collect();
            let q2: Vec<f64> = c[4..].iter().map(|v| 2.0 * v - 1.0).collect();
            let x1 = t.generate_continuous(&q1, eps.values()).unwrap();
            let x2 = t.generate_continuous(&q2, eps.values()).unwrap();
            let dx = x1.iter().zip(&x2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let dq = q1.iter().zip(&q2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(dx <= t.lipschitz_bound() * dq * (1.0 + 1e-9));
        }
    }

    #[test]
    fn token_teacher_respects_norm_bound() {
        let mut big = Matrix::identity(2);
        big.scale(5.0);
        assert!(SoftmaxTokenTeacher::new(big, 1.0, 1.0).is_err());
        let t = SoftmaxTokenTeacher::random(8, 8, 3.0, 1.0, 1.0, 1).unwrap();
        assert!(t.theta().frobenius() <= 3.0 + 1e-12);
        assert_eq!(t.lipschitz_bound(), 3.0);
        assert!(t.theta().operator_norm() <= t.lipschitz_bound());
    }

    #[test]
    fn sequences_use_consecutive_slices() {
        let t = SoftmaxTokenTeacher::random(3, 2, 1.0, 1.0, 0.5, 2).unwrap();
        let eps = gumbel_noise(Seed(4), 10);
        let toks = t.generate_tokens(&[0.1, 0.2], eps.values()).unwrap();
        assert_eq!(toks.len(), 3);
        assert_eq!(toks[1], t.generate_token(&[0.1, 0.2], &eps.values()[3..6]).unwrap());
    }

    #[test]
    fn text_round_trip() {
        let a = Teacher::Token(SoftmaxTokenTeacher::random(4, 3, 2.0, 1.0, 0.7, 8).unwrap());
        assert_eq!(Teacher::from_text(&a.to_text()).unwrap(), a);
        let b = Teacher::Linear(LinearGaussianTeacher::random(2, 5, 0.25, 8).unwrap());
        assert_eq!(Teacher::from_text(&b.to_text()).unwrap(), b);
        assert!(Teacher::from_text("kind = token\nrows = 2\ncols = 2\nmatrix\n1 2 3\n").is_err());
    }
}
