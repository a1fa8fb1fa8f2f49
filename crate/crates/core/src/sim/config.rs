use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bucketing::{BucketMode, MAX_LSH_BITS};
use crate::error::{LadsError, Result};
use crate::noise::MixingCoefficient;

/// Smallest held-out sample accepted for population-loss estimates.
pub const MIN_HOLDOUT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Undefended API: every record gets independent noise.
    Iid,
    /// Depth-only coupling through a single implicit bucket.
    LadsSimple,
    /// Bucket-and-depth coupling.
    Lads,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Iid => "iid",
            Regime::LadsSimple => "lads_simple",
            Regime::Lads => "lads",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = LadsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Regime::Iid),
            "lads_simple" => Ok(Regime::LadsSimple),
            "lads" => Ok(Regime::Lads),
            other => Err(LadsError::Parse(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    /// Softmax-linear token sampler (Gumbel-max).
    Token,
    /// `A q + sigma eps`.
    Linear,
}

/// One experiment: a regime, a (K, T) point and the task it runs on.
///
/// Every field has a default, so a config file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub regime: Regime,
    /// `K`.
    pub accounts: usize,
    /// `T`, queries per account.
    pub queries: usize,
    pub alpha: MixingCoefficient,
    pub q_dim: usize,
    /// `Y`.
    pub vocab: usize,
    /// Frobenius radius `W` of the student class (and the PGD projection).
    pub w_bound: f64,
    /// Input bound `R_x`; must dominate `center_norm + radius`.
    pub r_x: f64,
    pub teacher: TeacherKind,
    /// Token teacher norm as a fraction of `W`.
    pub teacher_norm_fraction: f64,
    pub linear_out_dim: usize,
    pub linear_sigma: f64,
    /// `N`, number of equal-mass query clusters.
    pub centers: usize,
    pub center_norm: f64,
    /// Cluster radius `R`: queries lie within `R` of their center.
    pub radius: f64,
    pub bucket_mode: BucketMode,
    pub lsh_bits: u32,
    /// All accounts submit the same query sequence (conditional regime).
    pub shared_queries: bool,
    pub repetitions: usize,
    pub seed: u64,
    pub steps: usize,
    pub step_size: f64,
    pub n_holdout: usize,
    /// Random class members at which the gap is also measured.
    pub n_probes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            regime: Regime::LadsSimple,
            accounts: 16,
            queries: 256,
            alpha: MixingCoefficient::new(1.0).unwrap(),
            q_dim: 8,
            vocab: 8,
            w_bound: 2.0,
            r_x: 4.0,
            teacher: TeacherKind::Token,
            teacher_norm_fraction: 0.8,
            linear_out_dim: 4,
            linear_sigma: 0.5,
            centers: 1,
            center_norm: 3.0,
            radius: 1.0,
            bucket_mode: BucketMode::NearestCenter,
            lsh_bits: 8,
            shared_queries: false,
            repetitions: 20,
            seed: 2024,
            steps: 100,
            step_size: 1.0,
            n_holdout: 100_000,
            n_probes: 32,
        }
    }
}

fn invalid(msg: impl Into<String>) -> LadsError {
    LadsError::ConfigInvalid(msg.into())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.accounts == 0 {
            return Err(invalid("accounts (K) must be at least 1"));
        }
        if self.queries == 0 {
            return Err(invalid("queries (T) must be at least 1"));
        }
        if self.queries as u64 >= 1 << 32 {
            return Err(invalid("queries (T) must stay below 2^32"));
        }
        if self.repetitions == 0 {
            return Err(invalid("repetitions must be at least 1"));
        }
        if self.q_dim == 0 {
            return Err(invalid("q_dim must be at least 1"));
        }
        if self.vocab < 2 {
            return Err(invalid("vocab (Y) must be at least 2"));
        }
        if !(self.w_bound > 0.0 && self.w_bound.is_finite()) {
            return Err(invalid(format!("w_bound must be positive, got {}", self.w_bound)));
        }
        if !(0.0..=1.0).contains(&self.teacher_norm_fraction) {
            return Err(invalid("teacher_norm_fraction must be in [0, 1]"));
        }
        if self.teacher == TeacherKind::Linear && (self.linear_out_dim == 0 || !(self.linear_sigma > 0.0)) {
            return Err(invalid("linear teacher needs linear_out_dim >= 1 and linear_sigma > 0"));
        }
        if self.centers == 0 {
            return Err(invalid("centers (N) must be at least 1"));
        }
        if !(self.center_norm >= 0.0 && self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(invalid("center_norm and radius must be nonnegative"));
        }
        if self.r_x < self.center_norm + self.radius {
            return Err(invalid(format!(
                "r_x = {} does not cover center_norm + radius = {}",
                self.r_x,
                self.center_norm + self.radius
            )));
        }
        if self.bucket_mode == BucketMode::Lsh && !(1..=MAX_LSH_BITS).contains(&self.lsh_bits) {
            return Err(invalid(format!("lsh_bits must be in 1..={MAX_LSH_BITS}")));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(invalid("step_size must be positive"));
        }
        if self.n_holdout < MIN_HOLDOUT {
            return Err(invalid(format!("n_holdout must be at least {MIN_HOLDOUT}")));
        }
        Ok(())
    }

    /// Issued noise: query offset (`q_dim`), center selector (1), then the
    /// response slice (`Y` Gumbel inputs or the linear teacher's `eps`).
    pub fn noise_dim(&self) -> usize {
        self.q_dim + 1 + self.response_dim()
    }

    pub fn response_dim(&self) -> usize {
        match self.teacher {
            TeacherKind::Token => self.vocab,
            TeacherKind::Linear => self.linear_out_dim,
        }
    }

    /// `B = log Y + 2 R_x W`.
    pub fn loss_bound(&self) -> f64 {
        (self.vocab as f64).ln() + 2.0 * self.r_x * self.w_bound
    }

    /// Certified Lipschitz constant of the cross-entropy in its input,
    /// `sqrt(2) (W + R_x)`.
    pub fn loss_lipschitz(&self) -> f64 {
        std::f64::consts::SQRT_2 * (self.w_bound + self.r_x)
    }

    pub fn records(&self) -> usize {
        self.accounts * self.queries
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            ExperimentConfig {
                accounts: 0,
                ..Default::default()
            },
            ExperimentConfig {
                queries: 0,
                ..Default::default()
            },
            ExperimentConfig {
                repetitions: 0,
                ..Default::default()
            },
            ExperimentConfig {
                n_holdout: 9_999,
                ..Default::default()
            },
            ExperimentConfig {
                r_x: 3.5,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(LadsError::ConfigInvalid(_))), "{cfg:?}");
        }
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg: ExperimentConfig = toml::from_str("regime = \"iid\"\naccounts = 3\nalpha = 0.7\n").unwrap();
        assert_eq!(cfg.regime, Regime::Iid);
        assert_eq!(cfg.accounts, 3);
        assert_eq!(cfg.alpha.value(), 0.7);
        assert_eq!(cfg.queries, 256);
        assert!(toml::from_str::<ExperimentConfig>("alpha = 1.5").is_err());
        assert!(toml::from_str::<ExperimentConfig>("bogus = 1").is_err());
    }
}
