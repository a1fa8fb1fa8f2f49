//! Grid sweeps over (regime, R, alpha, K, T), slope fits and assertions.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::info;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Regime};
use super::train::{run_repetition, RepOutcome};
use super::world::{rng_for, World};
use crate::error::{LadsError, Result};
use crate::noise::MixingCoefficient;
use crate::stats::{median, ols_slope};

const TAG_BOOTSTRAP: u64 = 7;
pub const DEFAULT_BOOTSTRAP: usize = 1000;
/// Below these the sweep still runs but the report is flagged.
pub const MIN_AXIS_POINTS: usize = 4;
pub const MIN_REPETITIONS: usize = 20;

/// Axes of the sweep. Empty axes fall back to the experiment's value for
/// `alphas` and `radii`; `regimes`, `accounts` and `queries` must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub regimes: Vec<Regime>,
    pub accounts: Vec<usize>,
    pub queries: Vec<usize>,
    #[serde(default)]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub radii: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    /// Accounts at fixed T.
    K,
    /// Queries per account at fixed K.
    T,
    /// Total records over the whole (K, T) grid.
    KT,
}

/// `|slope - target| <= tolerance` for every matching fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlopeAssertion {
    pub regime: Regime,
    pub axis: Axis,
    /// Fixed value of the other axis; all values when omitted.
    #[serde(default)]
    pub at: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    pub target: f64,
    pub tolerance: f64,
}

/// Median-gap ratio `numerator / denominator` at `accounts`, required to lie
/// in `[min, max]` for every T of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioAssertion {
    pub numerator: Regime,
    pub denominator: Regime,
    pub accounts: usize,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub experiment: ExperimentConfig,
    pub grid: Grid,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default)]
    pub assert_slope: Vec<SlopeAssertion>,
    #[serde(default)]
    pub assert_ratio: Vec<RatioAssertion>,
}

fn default_bootstrap() -> usize {
    DEFAULT_BOOTSTRAP
}

/// A grid point; iid points carry alpha 0 since noise mixing does not apply.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct GridPoint {
    pub regime: Regime,
    pub radius: f64,
    pub alpha: f64,
    pub accounts: usize,
    pub queries: usize,
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LadsError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.regimes.is_empty() || g.accounts.is_empty() || g.queries.is_empty() {
            return Err(LadsError::ConfigInvalid("empty grid".into()));
        }
        for a in &g.alphas {
            MixingCoefficient::new(*a)?;
        }
        for p in self.points() {
            self.config_for(&p).validate()?;
        }
        Ok(())
    }

    fn alphas(&self) -> Vec<f64> {
        if self.grid.alphas.is_empty() {
            vec![self.experiment.alpha.value()]
        } else {
            self.grid.alphas.clone()
        }
    }

    fn radii(&self) -> Vec<f64> {
        if self.grid.radii.is_empty() {
            vec![self.experiment.radius]
        } else {
            self.grid.radii.clone()
        }
    }

    /// Grid points in report order.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &regime in &self.grid.regimes {
            for &radius in &self.radii() {
                let alphas = if regime == Regime::Iid { vec![0.0] } else { self.alphas() };
                for alpha in alphas {
                    for &accounts in &self.grid.accounts {
                        for &queries in &self.grid.queries {
                            out.push(GridPoint {
                                regime,
                                radius,
                                alpha,
                                accounts,
                                queries,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn config_for(&self, p: &GridPoint) -> ExperimentConfig {
        ExperimentConfig {
            regime: p.regime,
            radius: p.radius,
            alpha: MixingCoefficient::new(p.alpha).unwrap_or(self.experiment.alpha),
            accounts: p.accounts,
            queries: p.queries,
            ..self.experiment.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    #[serde(flatten)]
    pub point: GridPoint,
    pub median_gap: f64,
    pub gap_ci: (f64, f64),
    pub median_pop_loss: f64,
    pub median_train_loss: f64,
    pub median_n_eff: f64,
    pub median_distinct: f64,
    pub median_rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeReport {
    pub regime: Regime,
    pub alpha: f64,
    pub radius: f64,
    pub axis: Axis,
    pub at: Option<usize>,
    pub slope: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub points: usize,
    /// Fewer grid points or repetitions than a reliable fit needs.
    pub underpowered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub seed: u64,
    pub repetitions: usize,
    pub bootstrap: usize,
    pub points: Vec<PointSummary>,
    pub slopes: Vec<SlopeReport>,
    pub assertions: Vec<AssertionOutcome>,
}

impl SweepSummary {
    pub fn all_passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn point(&self, regime: Regime, alpha: f64, radius: f64, k: usize, t: usize) -> Option<&PointSummary> {
        self.points.iter().find(|p| {
            p.point.regime == regime
                && p.point.alpha == alpha
                && p.point.radius == radius
                && p.point.accounts == k
                && p.point.queries == t
        })
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<RepOutcome>,
    pub summary: SweepSummary,
}

/// Runs every (grid point, repetition) job on a pool of `parallelism`
/// threads. Output order and content do not depend on the thread count.
pub fn run_sweep(cfg: &SweepConfig, parallelism: usize) -> Result<SweepResult> {
    cfg.validate()?;
    let points = cfg.points();
    let reps = cfg.experiment.repetitions;

    let mut worlds: Vec<(u64, World)> = Vec::new();
    for r in cfg.radii() {
        let exp = ExperimentConfig {
            radius: r,
            ..cfg.experiment.clone()
        };
        worlds.push((r.to_bits(), World::new(&exp)?));
    }
    let world_for = |radius: f64| &worlds.iter().find(|(r, _)| *r == radius.to_bits()).expect("world per radius").1;

    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|p| (0..reps).map(move |r| (p, r))).collect();
    info!("sweep: {} grid points x {} repetitions", points.len(), reps);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| LadsError::ConfigInvalid(format!("thread pool: {e}")))?;
    let rows: Vec<RepOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(p, r)| {
                let pt = &points[p];
                run_repetition(&cfg.config_for(pt), world_for(pt.radius), r)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let summary = summarize(cfg, &points, &rows)?;
    Ok(SweepResult { rows, summary })
}

fn gaps_by_point(points: &[GridPoint], rows: &[RepOutcome], reps: usize) -> Vec<Vec<f64>> {
    // rows are laid out point-major
    points
        .iter()
        .enumerate()
        .map(|(p, _)| rows[p * reps..(p + 1) * reps].iter().map(|r| r.gap).collect())
        .collect()
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn fit(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if ys.iter().any(|y| !(*y > 0.0)) {
        return Err(LadsError::DegenerateGrid("median gap is zero; log-log fit undefined".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    Ok(ols_slope(&lx, &ly).0)
}

pub fn summarize(cfg: &SweepConfig, points: &[GridPoint], rows: &[RepOutcome]) -> Result<SweepSummary> {
    let reps = cfg.experiment.repetitions;
    let gaps = gaps_by_point(points, rows, reps);

    // paired bootstrap: repetitions share keys across grid points, so the
    // same resampled indices are applied to every point
    let mut rng = rng_for(cfg.experiment.seed, TAG_BOOTSTRAP);
    let draws: Vec<Vec<usize>> = (0..cfg.bootstrap)
        .map(|_| (0..reps).map(|_| rng.gen_range(0..reps)).collect())
        .collect();
    let boot_medians: Vec<Vec<f64>> = draws
        .iter()
        .map(|idx| {
            gaps.iter()
                .map(|g| median(&idx.iter().map(|&i| g[i]).collect::<Vec<_>>()))
                .collect()
        })
        .collect();

    let col = |p: usize, f: fn(&RepOutcome) -> f64| -> f64 {
        median(&rows[p * reps..(p + 1) * reps].iter().map(f).collect::<Vec<_>>())
    };
    let mut summaries = Vec::with_capacity(points.len());
    for (p, pt) in points.iter().enumerate() {
        let mut boot: Vec<f64> = boot_medians.iter().map(|b| b[p]).collect();
        boot.sort_by(f64::total_cmp);
        let ci = if boot.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (percentile(&boot, 0.025), percentile(&boot, 0.975))
        };
        summaries.push(PointSummary {
            point: *pt,
            median_gap: median(&gaps[p]),
            gap_ci: ci,
            median_pop_loss: col(p, |r| r.pop_loss),
            median_train_loss: col(p, |r| r.train_loss),
            median_n_eff: col(p, |r| r.n_eff),
            median_distinct: col(p, |r| r.distinct as f64),
            median_rho: col(p, |r| r.rho),
        });
    }

    let slopes = fit_slopes(points, &summaries, &boot_medians, reps)?;
    let mut summary = SweepSummary {
        seed: cfg.experiment.seed,
        repetitions: reps,
        bootstrap: cfg.bootstrap,
        points: summaries,
        slopes,
        assertions: Vec::new(),
    };
    summary.assertions = evaluate_assertions(cfg, &summary);
    Ok(summary)
}

fn fit_slopes(
    points: &[GridPoint],
    summaries: &[PointSummary],
    boot: &[Vec<f64>],
    reps: usize,
) -> Result<Vec<SlopeReport>> {
    // group point indices by (regime, alpha, radius)
    let mut groups: BTreeMap<(Regime, u64, u64), Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        groups
            .entry((p.regime, p.alpha.to_bits(), p.radius.to_bits()))
            .or_default()
            .push(i);
    }
    let mut out = Vec::new();
    for ((regime, alpha, radius), idx) in groups {
        let mut series: Vec<(Axis, Option<usize>, Vec<usize>)> = Vec::new();
        let ks: Vec<usize> = dedup(idx.iter().map(|&i| points[i].accounts));
        let ts: Vec<usize> = dedup(idx.iter().map(|&i| points[i].queries));
        for &t in &ts {
            series.push((Axis::K, Some(t), idx.iter().copied().filter(|&i| points[i].queries == t).collect()));
        }
        for &k in &ks {
            series.push((Axis::T, Some(k), idx.iter().copied().filter(|&i| points[i].accounts == k).collect()));
        }
        series.push((Axis::KT, None, idx.clone()));

        for (axis, at, members) in series {
            let x = |i: usize| -> f64 {
                let p = &points[i];
                match axis {
                    Axis::K => p.accounts as f64,
                    Axis::T => p.queries as f64,
                    Axis::KT => (p.accounts * p.queries) as f64,
                }
            };
            let xs: Vec<f64> = members.iter().map(|&i| x(i)).collect();
            let distinct = dedup(xs.iter().map(|v| v.to_bits())).len();
            if distinct < 2 {
                continue;
            }
            let ys: Vec<f64> = members.iter().map(|&i| summaries[i].median_gap).collect();
            let slope = fit(&xs, &ys)?;
            let mut bs: Vec<f64> = boot
                .iter()
                .filter_map(|b| fit(&xs, &members.iter().map(|&i| b[i]).collect::<Vec<_>>()).ok())
                .collect();
            bs.sort_by(f64::total_cmp);
            let (ci_low, ci_high) = if bs.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                (percentile(&bs, 0.025), percentile(&bs, 0.975))
            };
            out.push(SlopeReport {
                regime,
                alpha: f64::from_bits(alpha),
                radius: f64::from_bits(radius),
                axis,
                at,
                slope,
                ci_low,
                ci_high,
                points: members.len(),
                underpowered: distinct < MIN_AXIS_POINTS || reps < MIN_REPETITIONS,
            });
        }
    }
    if out.is_empty() {
        return Err(LadsError::DegenerateGrid(
            "every axis has a single value; no slope can be fitted".into(),
        ));
    }
    Ok(out)
}

fn dedup<T: Ord>(it: impl Iterator<Item = T>) -> Vec<T> {
    let mut v: Vec<T> = it.collect();
    v.sort();
    v.dedup();
    v
}

fn evaluate_assertions(cfg: &SweepConfig, s: &SweepSummary) -> Vec<AssertionOutcome> {
    let mut out = Vec::new();
    for a in &cfg.assert_slope {
        let fits: Vec<&SlopeReport> = s
            .slopes
            .iter()
            .filter(|r| {
                r.regime == a.regime
                    && r.axis == a.axis
                    && a.at.is_none_or(|v| r.at == Some(v))
                    && a.alpha.is_none_or(|v| r.alpha == v)
            })
            .collect();
        let name = format!(
            "slope {} vs {:?}{} = {} +/- {}",
            a.regime,
            a.axis,
            a.at.map(|v| format!(" at {v}")).unwrap_or_default(),
            a.target,
            a.tolerance
        );
        let passed = !fits.is_empty() && fits.iter().all(|r| (r.slope - a.target).abs() <= a.tolerance);
        let detail = if fits.is_empty() {
            "no matching fit in the grid".to_string()
        } else {
            fits.iter()
                .map(|r| format!("{:.4} [{:.4}, {:.4}]", r.slope, r.ci_low, r.ci_high))
                .collect::<Vec<_>>()
                .join("; ")
        };
        out.push(AssertionOutcome { name, passed, detail });
    }
    for a in &cfg.assert_ratio {
        let mut ratios = Vec::new();
        for num in s.points.iter().filter(|p| p.point.regime == a.numerator && p.point.accounts == a.accounts) {
            let den = s.points.iter().find(|p| {
                p.point.regime == a.denominator
                    && p.point.accounts == a.accounts
                    && p.point.queries == num.point.queries
                    && p.point.radius == num.point.radius
            });
            if let Some(den) = den {
                ratios.push((num.point.queries, num.median_gap / den.median_gap));
            }
        }
        let passed = !ratios.is_empty() && ratios.iter().all(|(_, r)| (a.min..=a.max).contains(r));
        out.push(AssertionOutcome {
            name: format!(
                "gap ratio {}/{} at K={} in [{}, {}]",
                a.numerator, a.denominator, a.accounts, a.min, a.max
            ),
            passed,
            detail: if ratios.is_empty() {
                "no matching grid points".into()
            } else {
                ratios
                    .iter()
                    .map(|(t, r)| format!("T={t}: {r:.3}"))
                    .collect::<Vec<_>>()
                    .join("; ")
            },
        });
    }
    out
}

pub fn write_csv<W: Write>(rows: &[RepOutcome], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| LadsError::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(rows: &[RepOutcome], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_csv(rows, std::io::BufWriter::new(f))
}

/// The preset sweep behind the `prop1` name: the depth-only collapse
/// against i.i.d. sampling on the K x T grid.
pub fn prop1_preset() -> SweepConfig {
    SweepConfig {
        experiment: ExperimentConfig {
            alpha: MixingCoefficient::new(1.0).unwrap(),
            ..ExperimentConfig::default()
        },
        grid: Grid {
            regimes: vec![Regime::Iid, Regime::LadsSimple],
            accounts: vec![1, 4, 16, 64],
            queries: vec![64, 256, 1024],
            alphas: vec![1.0],
            radii: Vec::new(),
        },
        bootstrap: DEFAULT_BOOTSTRAP,
        assert_slope: vec![
            SlopeAssertion {
                regime: Regime::LadsSimple,
                axis: Axis::K,
                at: None,
                alpha: Some(1.0),
                target: 0.0,
                tolerance: 0.1,
            },
            SlopeAssertion {
                regime: Regime::Iid,
                axis: Axis::KT,
                at: None,
                alpha: None,
                target: -0.5,
                tolerance: 0.1,
            },
        ],
        assert_ratio: vec![RatioAssertion {
            numerator: Regime::LadsSimple,
            denominator: Regime::Iid,
            accounts: 16,
            min: 2.0,
            max: 6.4,
        }],
    }
}
