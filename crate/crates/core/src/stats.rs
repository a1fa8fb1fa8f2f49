//! Distribution and independence tests, plus the Monte Carlo check of the
//! softmax-linear Rademacher bound `2 R W sqrt(Y) / sqrt(n)`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{LadsError, Result};
use crate::softmax::{self, Dataset, Params};

/// Significance used by every test in the kit.
pub const SIGNIFICANCE: f64 = 0.01;

pub const KS_MIN_SAMPLES: usize = 100;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub critical_value: f64,
    pub significance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    Uniform01,
    StdNormal,
}

impl Reference {
    pub fn cdf(self, x: f64) -> f64 {
        match self {
            Reference::Uniform01 => x.clamp(0.0, 1.0),
            Reference::StdNormal => std_normal_cdf(x),
        }
    }
}

pub fn std_normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").cdf(x)
}

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 0.2 {
        // series converges too slowly; the value is 1 to double precision
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// `lambda` with `P(K > lambda) = alpha`, by bisection.
pub fn kolmogorov_quantile(alpha: f64) -> f64 {
    let (mut lo, mut hi) = (0.2, 5.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if kolmogorov_survival(mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Two-sided one-sample KS statistic `sup |F_n - F|`.
pub fn ks_statistic(samples: &[f64], reference: Reference) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = reference.cdf(x);
            let above = (i + 1) as f64 / n - f;
            let below = f - i as f64 / n;
            above.max(below)
        })
        .fold(0.0, f64::max)
}

/// KS test against a named reference with the asymptotic Kolmogorov
/// distribution.
pub fn ks_test(samples: &[f64], reference: Reference) -> Result<TestResult> {
    if samples.len() < KS_MIN_SAMPLES {
        return Err(LadsError::TooFewSamples {
            needed: KS_MIN_SAMPLES,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let d = ks_statistic(samples, reference);
    let p = kolmogorov_survival(n.sqrt() * d);
    let critical = kolmogorov_quantile(SIGNIFICANCE) / n.sqrt();
    Ok(TestResult {
        statistic: d,
        p_value: p,
        critical_value: critical,
        significance: SIGNIFICANCE,
        passed: d <= critical,
    })
}

/// Pearson chi-square goodness of fit with `categories - 1` degrees of
/// freedom.
pub fn chi_square_categorical(counts: &[u64], expected_probs: &[f64]) -> Result<TestResult> {
    if counts.len() != expected_probs.len() {
        return Err(LadsError::DimensionMismatch {
            expected: expected_probs.len(),
            got: counts.len(),
        });
    }
    if counts.len() < 2 {
        return Err(LadsError::TooFewSamples {
            needed: 2,
            got: counts.len(),
        });
    }
    let total: u64 = counts.iter().sum();
    let mass: f64 = expected_probs.iter().sum();
    let mut stat = 0.0;
    for (i, (&c, &p)) in counts.iter().zip(expected_probs).enumerate() {
        let e = total as f64 * p / mass;
        if e < 5.0 {
            return Err(LadsError::ExpectedCountTooSmall {
                category: i,
                expected: e,
            });
        }
        stat += (c as f64 - e).powi(2) / e;
    }
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("df >= 1");
    let critical = dist.inverse_cdf(1.0 - SIGNIFICANCE);
    Ok(TestResult {
        statistic: stat,
        p_value: (1.0 - dist.cdf(stat)).clamp(0.0, 1.0),
        critical_value: critical,
        significance: SIGNIFICANCE,
        passed: stat <= critical,
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sample autocorrelation at `lag`.
pub fn autocorrelation(xs: &[f64], lag: usize) -> f64 {
    let m = mean(xs);
    let denom: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    let num: f64 = xs.windows(lag + 1).map(|w| (w[0] - m) * (w[lag] - m)).sum();
    num / denom
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Ordinary least squares `y = intercept + slope x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// One issued noise vector as seen by the correlation report.
#[derive(Debug, Clone)]
pub struct IssuedNoise<'a> {
    pub account: u32,
    pub bucket: u64,
    pub depth: u64,
    pub noise: &'a [f64],
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PairStats {
    pub pairs: usize,
    pub duplicate_rate: f64,
    /// Pearson correlation over all coordinate pairs, pooled.
    pub pooled_correlation: f64,
    /// Mean of per-pair Pearson correlations across coordinates.
    pub mean_pair_correlation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub matched: PairStats,
    pub unmatched: PairStats,
}

fn pair_stats(pairs: &[(&[f64], &[f64])]) -> PairStats {
    if pairs.is_empty() {
        return PairStats::default();
    }
    let dup = pairs
        .iter()
        .filter(|(a, b)| a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()))
        .count();
    let xs: Vec<f64> = pairs.iter().flat_map(|(a, _)| a.iter().copied()).collect();
    let ys: Vec<f64> = pairs.iter().flat_map(|(_, b)| b.iter().copied()).collect();
    let per_pair: Vec<f64> = pairs
        .iter()
        .filter(|(a, _)| a.len() >= 2)
        .map(|(a, b)| {
            let r = pearson(a, b);
            if r.is_nan() {
                1.0
            } else {
                r
            }
        })
        .collect();
    PairStats {
        pairs: pairs.len(),
        duplicate_rate: dup as f64 / pairs.len() as f64,
        pooled_correlation: pearson(&xs, &ys),
        mean_pair_correlation: if per_pair.is_empty() { f64::NAN } else { mean(&per_pair) },
    }
}

/// Compares noise issued to different accounts at equal `(bucket, depth)`
/// with noise issued at unequal cells. Within each cell, records are paired
/// consecutively by account; the control pairs each matched record's first
/// member with the first member of the next cell.
pub fn cross_account_correlation(records: &[IssuedNoise<'_>]) -> Result<CorrelationReport> {
    let mut accounts: Vec<u32> = records.iter().map(|r| r.account).collect();
    accounts.sort_unstable();
    accounts.dedup();
    if accounts.len() < 2 {
        return Err(LadsError::TooFewSamples {
            needed: 2,
            got: accounts.len(),
        });
    }
    let mut cells: HashMap<(u64, u64), Vec<&IssuedNoise<'_>>> = HashMap::new();
    for r in records {
        cells.entry((r.bucket, r.depth)).or_default().push(r);
    }
    let mut keys: Vec<_> = cells.keys().copied().collect();
    keys.sort_unstable();
    let mut matched = Vec::new();
    for key in &keys {
        let mut cell = cells[key].clone();
        cell.sort_by_key(|r| r.account);
        for w in cell.windows(2) {
            if w[0].account != w[1].account {
                matched.push((w[0].noise, w[1].noise));
            }
        }
    }
    let mut unmatched = Vec::new();
    for w in keys.windows(2) {
        let a = cells[&w[0]][0];
        if let Some(b) = cells[&w[1]].iter().find(|r| r.account != a.account) {
            unmatched.push((a.noise, b.noise));
        }
    }
    Ok(CorrelationReport {
        matched: pair_stats(&matched),
        unmatched: pair_stats(&unmatched),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RademacherEstimate {
    pub n: usize,
    pub estimate: f64,
    pub bound: f64,
    pub sign_vectors: usize,
    pub restarts: usize,
}

impl RademacherEstimate {
    pub fn within_bound(&self) -> bool {
        self.estimate <= self.bound
    }
}

/// Closed form `2 R W sqrt(Y) / sqrt(n)`.
pub fn rademacher_bound(r_x: f64, w: f64, vocab: usize, n: usize) -> f64 {
    2.0 * r_x * w * (vocab as f64).sqrt() / (n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RademacherSettings {
    pub sign_vectors: usize,
    pub restarts: usize,
    pub ascent_steps: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for RademacherSettings {
    fn default() -> Self {
        Self {
            sign_vectors: 16,
            restarts: 5,
            ascent_steps: 60,
            step_size: 2.0,
            seed: 0,
        }
    }
}

fn random_ball_point(rows: usize, cols: usize, radius: f64, rng: &mut ChaCha8Rng) -> Params {
    let mut p = Params::zeros(rows, cols);
    for v in p.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    // uniform radius fraction keeps restarts away from a single shell
    let target = radius * rng.gen::<f64>();
    let norm = p.frobenius();
    p.scale(target / norm.max(1e-300));
    p
}

/// Monte Carlo lower estimate of the empirical Rademacher complexity of the
/// softmax-linear cross-entropy class on `data`: for each sign vector,
/// `sup_theta |(1/n) sum sigma_i loss_i(theta)|` is approximated by projected
/// gradient ascent on both signs with random restarts; the estimate is the
/// average of the per-vector maxima.
pub fn rademacher_check(
    data: &Dataset,
    r_x: f64,
    w: f64,
    settings: &RademacherSettings,
) -> Result<RademacherEstimate> {
    let n = data.len();
    if n < 10 {
        return Err(LadsError::TooFewSamples { needed: 10, got: n });
    }
    if settings.restarts < 5 {
        return Err(LadsError::ConfigInvalid("rademacher_check needs at least 5 restarts".into()));
    }
    let vocab = data.vocab();
    let dim = data.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut total = 0.0;
    for _ in 0..settings.sign_vectors {
        let signs: Vec<f64> = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let mut best = 0.0f64;
        for direction in [1.0, -1.0] {
            let weights: Vec<f64> = signs.iter().map(|s| direction * s / n as f64).collect();
            for restart in 0..settings.restarts {
                let mut theta = if restart == 0 {
                    Params::zeros(vocab, dim)
                } else {
                    random_ball_point(vocab, dim, w, &mut rng)
                };
                let mut value = softmax::weighted_loss(&theta, data, &weights);
                for _ in 0..settings.ascent_steps {
                    let (v, grad) = softmax::weighted_loss_and_grad(&theta, data, &weights);
                    if !v.is_finite() {
                        return Err(LadsError::OptimizerDivergence(format!("objective {v}")));
                    }
                    value = value.max(v);
                    theta.axpy(settings.step_size, &grad);
                    theta.project_frobenius(w);
                }
                value = value.max(softmax::weighted_loss(&theta, data, &weights));
                best = best.max(value);
            }
        }
        total += best;
    }
    Ok(RademacherEstimate {
        n,
        estimate: total / settings.sign_vectors as f64,
        bound: rademacher_bound(r_x, w, vocab, n),
        sign_vectors: settings.sign_vectors,
        restarts: settings.restarts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{gaussian_noise, uniform_stream, Seed};

    #[test]
    fn kolmogorov_critical_value() {
        assert!((kolmogorov_quantile(0.01) - 1.627_62).abs() < 1e-4);
        assert!((kolmogorov_quantile(0.05) - 1.358_10).abs() < 1e-4);
    }

    #[test]
    fn ks_accepts_its_own_reference() {
        let u = uniform_stream(Seed(1), 100_000);
        assert!(ks_test(&u, Reference::Uniform01).unwrap().passed);
        let g = gaussian_noise(Seed(2), 100_000).into_values();
        assert!(ks_test(&g, Reference::StdNormal).unwrap().passed);
    }

    #[test]
    fn ks_null_pass_rate() {
        let passes = (0..200)
            .filter(|&s| ks_test(&gaussian_noise(Seed(1000 + s), 2000).into_values(), Reference::StdNormal).unwrap().passed)
            .count();
        // about 99% expected; 95% leaves room for sampling noise over 200 trials
        assert!(passes >= 190, "{passes}/200");
    }

    #[test]
    fn ks_rejects_wrong_distributions() {
        let constant = vec![0.3; 500];
        assert!(!ks_test(&constant, Reference::StdNormal).unwrap().passed);
        let u = uniform_stream(Seed(3), 1000);
        assert!(!ks_test(&u, Reference::StdNormal).unwrap().passed);
        assert!(matches!(
            ks_test(&u[..50], Reference::Uniform01),
            Err(LadsError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn chi_square_examples() {
        let r = chi_square_categorical(&[200, 300, 500], &[0.2, 0.3, 0.5]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!(r.passed);
        assert!(matches!(
            chi_square_categorical(&[100, 2], &[0.99, 0.01]),
            Err(LadsError::ExpectedCountTooSmall { category: 1, .. })
        ));
        let skewed = chi_square_categorical(&[900, 100], &[0.5, 0.5]).unwrap();
        assert!(!skewed.passed);
    }

    #[test]
    fn chi_square_critical_value_matches_table() {
        // chi2_{0.99}(1) = 6.635, chi2_{0.99}(7) = 18.475
        let r1 = chi_square_categorical(&[50, 50], &[0.5, 0.5]).unwrap();
        assert!((r1.critical_value - 6.6349).abs() < 1e-3);
        let r7 = chi_square_categorical(&[10; 8], &[0.125; 8]).unwrap();
        assert!((r7.critical_value - 18.4753).abs() < 1e-3);
    }

    #[test]
    fn autocorrelation_of_alternating_sequence() {
        let xs: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!((autocorrelation(&xs, 1) + 1.0).abs() < 1e-2);
        assert!((autocorrelation(&xs, 2) - 1.0).abs() < 1e-2);
    }

    #[test]
    fn median_and_slope() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 0.5, 0.0, -0.5];
        let (s, b) = ols_slope(&x, &y);
        assert!((s + 0.5).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bound_closed_form() {
        let b = rademacher_bound(1.0, 1.0, 2, 100);
        assert!((b - 0.2828).abs() < 1e-4);
        assert!((rademacher_bound(1.0, 1.0, 2, 400) - b / 2.0).abs() < 1e-15);
    }

    #[test]
    fn correlation_report_needs_two_accounts() {
        let v = vec![1.0, 2.0];
        let recs = vec![IssuedNoise {
            account: 0,
            bucket: 0,
            depth: 1,
            noise: &v,
        }];
        assert!(cross_account_correlation(&recs).is_err());
    }
}
