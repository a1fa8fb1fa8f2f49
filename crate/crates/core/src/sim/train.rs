use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Regime};
use super::transcript::{build_transcript, effective_sample_size};
use super::world::{Holdout, Probe, World};
use crate::error::{LadsError, Result};
use crate::softmax::{self, Dataset, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub steps: usize,
    pub step_size: f64,
    /// Frobenius projection radius.
    pub radius: f64,
}

impl OptimizerSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            steps: cfg.steps,
            step_size: cfg.step_size,
            radius: cfg.w_bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Student {
    pub theta: Params,
    pub train_loss: f64,
}

/// Projected gradient descent from zero on the weighted empirical risk.
pub fn train_student(data: &Dataset, opt: &OptimizerSettings) -> Result<Student> {
    if data.is_empty() {
        return Err(LadsError::EmptyInput("training set"));
    }
    let mut theta = Params::zeros(data.vocab(), data.dim());
    for step in 0..opt.steps {
        let (loss, grad) = softmax::weighted_loss_and_grad(&theta, data, data.weights());
        if !loss.is_finite() {
            return Err(LadsError::NonFiniteLoss { step });
        }
        theta.axpy(-opt.step_size, &grad);
        theta.project_frobenius(opt.radius);
    }
    let train_loss = softmax::mean_loss(&theta, data);
    if !train_loss.is_finite() || !theta.is_finite() {
        return Err(LadsError::NonFiniteLoss { step: opt.steps });
    }
    Ok(Student { theta, train_loss })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapMeasurement {
    /// Max over the student and the probes.
    pub gap: f64,
    /// Gap at the student alone.
    pub student_gap: f64,
    pub train_loss: f64,
    pub pop_loss: f64,
    pub pop_loss_se: f64,
}

/// `max |train(theta) - population(theta)|` over the trained student and a
/// fixed probe set, a lower estimate of the supremum over the class.
pub fn measure_gap(student: &Student, train: &Dataset, holdout: &Holdout, probes: &[Probe]) -> GapMeasurement {
    let pop = holdout.population_loss(&student.theta);
    let student_gap = (student.train_loss - pop.mean).abs();
    let gap = probes
        .iter()
        .map(|p| (softmax::mean_loss(&p.theta, train) - p.population.mean).abs())
        .fold(student_gap, f64::max);
    GapMeasurement {
        gap,
        student_gap,
        train_loss: student.train_loss,
        pop_loss: pop.mean,
        pop_loss_se: pop.std_error,
    }
}

/// Gap against an explicit evaluation set instead of the population.
pub fn empirical_gap(theta: &Params, train: &Dataset, eval: &Dataset) -> f64 {
    (softmax::mean_loss(theta, train) - softmax::mean_loss(theta, eval)).abs()
}

/// One row of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub regime: Regime,
    #[serde(rename = "K")]
    pub accounts: usize,
    #[serde(rename = "T")]
    pub queries: usize,
    pub alpha: f64,
    pub rep: usize,
    pub train_loss: f64,
    pub pop_loss: f64,
    pub gap: f64,
    pub n_eff: f64,
    pub distinct: usize,
    pub rho: f64,
    pub radius: f64,
    pub duplicate_rate: f64,
    pub student_gap: f64,
    pub pop_loss_se: f64,
    #[serde(skip)]
    pub runtime_ms: u128,
}

pub fn run_repetition(cfg: &ExperimentConfig, world: &World, rep: usize) -> Result<RepOutcome> {
    let started = Instant::now();
    let teacher = world.token_teacher()?;
    let holdout = world
        .holdout
        .as_ref()
        .ok_or_else(|| LadsError::ConfigInvalid("world has no held-out sample".into()))?;
    let transcript = build_transcript(cfg, world, rep)?;
    let data = transcript.dataset(teacher.q_dim(), teacher.vocab())?;
    let student = train_student(&data, &OptimizerSettings::from_config(cfg))?;
    let gap = measure_gap(&student, &data, holdout, &world.probes);
    let profile = transcript.weight_profile(world)?;
    Ok(RepOutcome {
        regime: cfg.regime,
        accounts: cfg.accounts,
        queries: cfg.queries,
        alpha: cfg.alpha.value(),
        rep,
        train_loss: gap.train_loss,
        pop_loss: gap.pop_loss,
        gap: gap.gap,
        n_eff: effective_sample_size(&profile.values())?,
        distinct: transcript.distinct_responses(),
        rho: profile.rho,
        radius: cfg.radius,
        duplicate_rate: transcript.duplicate_rate(),
        student_gap: gap.student_gap,
        pop_loss_se: gap.pop_loss_se,
        runtime_ms: started.elapsed().as_millis(),
    })
}
