//! Fluctuation of empirical cluster weights around their population masses.

use serde::{Deserialize, Serialize};

use crate::bucketing::BucketModel;
use crate::error::{LadsError, Result};
use crate::noise::{gaussian_noise, keyed_mix, Seed};
use crate::stats::median;

use super::world::query_from_gaussian;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub repetitions: usize,
    /// Queries per repetition.
    pub m: usize,
    pub centers: usize,
    pub delta: f64,
    /// `max_j |w_j - mu_j|` per repetition.
    pub deviations: Vec<f64>,
    /// Per-center Hoeffding radius `sqrt(log(2N/delta) / (2M))`.
    pub threshold: f64,
    /// Aggregate bound `B N sqrt(log(2N/delta) / (2M))`.
    pub aggregate_bound: f64,
    pub violations: usize,
    pub violation_rate: f64,
}

impl AlignmentReport {
    pub fn median_deviation(&self) -> f64 {
        median(&self.deviations)
    }
}

pub fn hoeffding_radius(centers: usize, m: usize, delta: f64) -> f64 {
    ((2.0 * centers as f64 / delta).ln() / (2.0 * m as f64)).sqrt()
}

/// Empirical weights per repetition from covering assignments (`None` for
/// bad queries, which count toward no center).
pub fn alignment_fluctuation(
    assignments: &[Vec<Option<usize>>],
    masses: &[f64],
    delta: f64,
    loss_bound: f64,
) -> Result<AlignmentReport> {
    if assignments.is_empty() {
        return Err(LadsError::EmptyInput("repetitions"));
    }
    if masses.is_empty() {
        return Err(LadsError::EmptyCenters);
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(LadsError::ConfigInvalid(format!("delta {delta} outside (0, 1)")));
    }
    let m = assignments[0].len();
    if m == 0 || assignments.iter().any(|a| a.len() != m) {
        return Err(LadsError::ConfigInvalid("repetitions must have equal, nonzero size".into()));
    }
    let n = masses.len();
    let threshold = hoeffding_radius(n, m, delta);
    let mut deviations = Vec::with_capacity(assignments.len());
    for rep in assignments {
        let mut counts = vec![0u64; n];
        for j in rep.iter().flatten() {
            if *j >= n {
                return Err(LadsError::DimensionMismatch { expected: n, got: j + 1 });
            }
            counts[*j] += 1;
        }
        let dev = counts
            .iter()
            .zip(masses)
            .map(|(&c, mu)| (c as f64 / m as f64 - mu).abs())
            .fold(0.0, f64::max);
        deviations.push(dev);
    }
    let violations = deviations.iter().filter(|&&d| d > threshold).count();
    Ok(AlignmentReport {
        repetitions: assignments.len(),
        m,
        centers: n,
        delta,
        violation_rate: violations as f64 / assignments.len() as f64,
        deviations,
        threshold,
        aggregate_bound: loss_bound * n as f64 * threshold,
        violations,
    })
}

/// Draws `repetitions` stages of `m` i.i.d. queries from the equal-mass
/// mixture around the model's centers and reports their weight deviations.
pub fn simulate_alignment(
    model: &BucketModel,
    radius: f64,
    m: usize,
    repetitions: usize,
    delta: f64,
    seed: u64,
) -> Result<AlignmentReport> {
    let centers = model.centers();
    if centers.is_empty() {
        return Err(LadsError::EmptyCenters);
    }
    let dim = model.dim();
    let mut assignments = Vec::with_capacity(repetitions);
    for r in 0..repetitions as u64 {
        let key = keyed_mix(r, seed);
        let mut rep = Vec::with_capacity(m);
        for i in 0..m as u64 {
            let g = gaussian_noise(Seed(keyed_mix(i, key)), dim + 1);
            let (_, q) = query_from_gaussian(centers, radius, g.values());
            rep.push(model.good_assignment(&q)?);
        }
        assignments.push(rep);
    }
    let masses = vec![1.0 / centers.len() as f64; centers.len()];
    alignment_fluctuation(&assignments, &masses, delta, 1.0)
}
