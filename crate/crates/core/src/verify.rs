//! The acceptance suite: one check per criterion, each returning a
//! machine-readable outcome. Used by `lads verify` and the acceptance tests.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bucketing::{audit_transcript, BucketMode, BucketModel};
use crate::error::{LadsError, Result};
use crate::gateway::{AccountId, Gateway, GatewayConfig, GatewayMode};
use crate::noise::{keyed_mix, MixingCoefficient, Seed, SeedGenerator, SeedSpec};
use crate::sim::world::draw_centers;
use crate::sim::{
    build_transcript, effective_sample_size, prop1_preset, query_from_gaussian, run_sweep, simulate_alignment,
    write_csv, Axis, ExperimentConfig, Grid, Regime, SweepConfig, World,
};
use crate::softmax::Dataset;
use crate::stats::{
    autocorrelation, cross_account_correlation, ks_test, rademacher_bound, rademacher_check, IssuedNoise,
    RademacherSettings, Reference,
};

pub const LOSSLESS_ALPHAS: [f64; 4] = [0.0, 0.7, 0.9, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Lossless,
    Coupling,
    Collapse,
    Rademacher,
    Neff,
    Alignment,
    Bias,
    Determinism,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Lossless,
        Suite::Coupling,
        Suite::Collapse,
        Suite::Rademacher,
        Suite::Neff,
        Suite::Alignment,
        Suite::Bias,
        Suite::Determinism,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Lossless => "lossless",
            Suite::Coupling => "coupling",
            Suite::Collapse => "collapse",
            Suite::Rademacher => "rademacher",
            Suite::Neff => "neff",
            Suite::Alignment => "alignment",
            Suite::Bias => "bias",
            Suite::Determinism => "determinism",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = LadsError;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| LadsError::Parse(format!("unknown suite {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    /// Criterion number, 1-based.
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub metrics: BTreeMap<String, f64>,
    pub runtime_ms: u128,
}

impl CheckOutcome {
    fn new(id: u8, name: &str) -> Self {
        Self {
            id,
            name: name.to_string(),
            passed: true,
            detail: String::new(),
            metrics: BTreeMap::new(),
            runtime_ms: 0,
        }
    }

    fn metric(&mut self, key: impl Into<String>, v: f64) {
        self.metrics.insert(key.into(), v);
    }

    /// Records a sub-check; the outcome passes only if every sub-check does.
    fn require(&mut self, ok: bool, what: impl fmt::Display) {
        if !self.detail.is_empty() {
            self.detail.push_str("; ");
        }
        self.detail.push_str(&format!("{}{}", if ok { "" } else { "FAIL " }, what));
        self.passed &= ok;
    }

    pub fn line(&self) -> String {
        format!(
            "criterion {} [{}] {}: {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    pub parallelism: usize,
    /// Served noise coordinates per alpha in the losslessness check.
    pub lossless_samples: usize,
    pub coupling_accounts: usize,
    pub coupling_queries: usize,
    pub rademacher_instances: usize,
    pub alignment_repetitions: usize,
    pub alignment_m: usize,
    pub alignment_delta: f64,
    pub bias_radii: Vec<f64>,
    pub bias_accounts: usize,
    pub bias_queries: usize,
    /// The Proposition 1 sweep; its experiment block is the shared task.
    pub collapse: SweepConfig,
    /// Sweep run twice by the determinism check.
    pub determinism: SweepConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        let mut determinism = prop1_preset();
        determinism.experiment.repetitions = 2;
        determinism.grid.accounts = vec![1, 4];
        determinism.grid.queries = vec![64, 256];
        determinism.bootstrap = 100;
        determinism.assert_slope.clear();
        determinism.assert_ratio.clear();
        Self {
            seed: 2024,
            parallelism: 1,
            lossless_samples: 100_000,
            coupling_accounts: 50,
            coupling_queries: 250,
            rademacher_instances: 50,
            alignment_repetitions: 500,
            alignment_m: 10_000,
            alignment_delta: 0.05,
            bias_radii: vec![0.0, 0.5, 1.0, 2.0],
            bias_accounts: 16,
            bias_queries: 256,
            collapse: prop1_preset(),
            determinism,
        }
    }
}

impl VerifyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LadsError::Parse(e.to_string()))?;
        cfg.collapse.validate()?;
        cfg.determinism.validate()?;
        Ok(cfg)
    }

    /// Replaces the master seed everywhere it appears.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.collapse.experiment.seed = seed;
        self.determinism.experiment.seed = seed;
        self
    }
}

fn timed(id: u8, name: &str, f: impl FnOnce(&mut CheckOutcome) -> Result<()>) -> CheckOutcome {
    let start = Instant::now();
    let mut out = CheckOutcome::new(id, name);
    if let Err(e) = f(&mut out) {
        out.require(false, format!("error: {e}"));
    }
    out.runtime_ms = start.elapsed().as_millis();
    info!("{}", out.line());
    out
}

fn conditional_gateway<S: SeedGenerator>(
    seed_gen: S,
    centers: Vec<Vec<f64>>,
    radius: f64,
    noise_dim: usize,
    alpha: f64,
    fresh_key: u64,
) -> Result<Gateway<S>> {
    Gateway::new(GatewayConfig {
        mode: GatewayMode::Conditional(BucketModel::nearest_center(centers, radius)?),
        seed_gen,
        fresh_key,
        noise_dim,
        alpha: MixingCoefficient::new(alpha)?,
        stage_cap: None,
    })
}

/// Criterion 1: one benign account's served noise is standard normal and
/// serially uncorrelated for every alpha.
pub fn check_lossless(cfg: &VerifyConfig) -> CheckOutcome {
    timed(1, "losslessness", |out| {
        let dim = 10;
        let centers = draw_centers(16, 4, 3.0, keyed_mix(1, cfg.seed));
        for alpha in LOSSLESS_ALPHAS {
            let g = conditional_gateway(
                SeedSpec::keyed(keyed_mix(2, cfg.seed)),
                centers.clone(),
                1.0,
                dim,
                alpha,
                keyed_mix(3, cfg.seed),
            )?;
            let user = AccountId::new("benign")?;
            let mut rng = ChaCha8Rng::seed_from_u64(keyed_mix(4, cfg.seed));
            let mut coords = Vec::with_capacity(cfg.lossless_samples);
            while coords.len() < cfg.lossless_samples {
                let gq = crate::noise::gaussian_noise(Seed(rng.gen()), 5);
                let (_, q) = query_from_gaussian(&centers, 1.0, gq.values());
                coords.extend_from_slice(g.serve_conditional(&user, &q)?.noise.values());
            }
            coords.truncate(cfg.lossless_samples);
            let n = coords.len();
            let ks = ks_test(&coords, Reference::StdNormal)?;
            let band = 3.0 / (n as f64).sqrt();
            let acs: Vec<f64> = (1..=5).map(|lag| autocorrelation(&coords, lag)).collect();
            let worst = acs.iter().fold(0.0f64, |m, a| m.max(a.abs()));
            out.metric(format!("ks_statistic_alpha_{alpha}"), ks.statistic);
            out.metric(format!("ks_p_alpha_{alpha}"), ks.p_value);
            out.metric(format!("max_autocorr_alpha_{alpha}"), worst);
            out.require(ks.passed, format!("alpha {alpha}: KS D={:.5} p={:.3}", ks.statistic, ks.p_value));
            out.require(worst <= band, format!("alpha {alpha}: max |acf 1..5| {worst:.5} <= {band:.5}"));
        }
        Ok(())
    })
}

/// Matched-cell noise across accounts: exact duplicates at alpha 1, Pearson
/// correlation alpha at alpha < 1, and distinct seeds for distinct cells.
pub fn coupling_report<S: SeedGenerator + Clone>(
    seed_gen: S,
    cfg: &VerifyConfig,
    out: &mut CheckOutcome,
) -> Result<()> {
    let centers = draw_centers(4, 4, 3.0, keyed_mix(5, cfg.seed));
    for alpha in [1.0, 0.7] {
        let g = conditional_gateway(seed_gen.clone(), centers.clone(), 1.0, 8, alpha, keyed_mix(6, cfg.seed))?;
        let ids: Vec<AccountId> = (0..cfg.coupling_accounts)
            .map(|k| AccountId::new(format!("acct-{k}")))
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(keyed_mix(7, cfg.seed));
        let mut issued = Vec::new();
        for _ in 0..cfg.coupling_queries {
            for (k, id) in ids.iter().enumerate() {
                let gq = crate::noise::gaussian_noise(Seed(rng.gen()), 5);
                let (_, q) = query_from_gaussian(&centers, 1.0, gq.values());
                let o = g.serve_conditional(id, &q)?;
                issued.push((k as u32, o));
            }
        }
        let records: Vec<IssuedNoise<'_>> = issued
            .iter()
            .map(|(k, o)| IssuedNoise {
                account: *k,
                bucket: o.bucket.0,
                depth: o.depth,
                noise: o.noise.values(),
            })
            .collect();
        let report = cross_account_correlation(&records)?;
        let m = &report.matched;
        if alpha == 1.0 {
            let mut seeds: HashMap<(u64, u64), Seed> = HashMap::new();
            let mut consistent = true;
            for (_, o) in &issued {
                consistent &= *seeds.entry((o.bucket.0, o.depth)).or_insert(o.seed) == o.seed;
            }
            let distinct: HashSet<Seed> = seeds.values().copied().collect();
            out.metric("alpha1_duplicate_rate", m.duplicate_rate);
            out.metric("alpha1_pairs", m.pairs as f64);
            out.require(
                m.duplicate_rate == 1.0 && consistent,
                format!("alpha 1: duplicate rate {} over {} matched pairs", m.duplicate_rate, m.pairs),
            );
            out.require(
                distinct.len() == seeds.len(),
                format!("{} cells, {} distinct seeds", seeds.len(), distinct.len()),
            );
            out.require(
                report.unmatched.duplicate_rate == 0.0,
                format!("unmatched duplicate rate {}", report.unmatched.duplicate_rate),
            );
        } else {
            out.metric("alpha07_correlation", m.pooled_correlation);
            out.metric("alpha07_pairs", m.pairs as f64);
            out.require(
                m.pairs >= 10_000 && (m.pooled_correlation - 0.7).abs() <= 0.05,
                format!("alpha 0.7: correlation {:.4} over {} pairs", m.pooled_correlation, m.pairs),
            );
        }
    }
    Ok(())
}

/// Criterion 2 with the real seed generator.
pub fn check_coupling(cfg: &VerifyConfig) -> CheckOutcome {
    timed(2, "coupling exactness", |out| {
        coupling_report(SeedSpec::keyed(keyed_mix(8, cfg.seed)), cfg, out)
    })
}

/// A deliberately non-injective generator that ignores the depth, for
/// showing that the coupling check can fail.
#[derive(Debug, Clone, Copy)]
pub struct DepthBlindSeeds(pub SeedSpec);

impl SeedGenerator for DepthBlindSeeds {
    fn seed(&self, bucket: u64, _depth: u64) -> Result<Seed> {
        self.0.seed(bucket, 1)
    }
}

/// Criteria 3 and 4 share one sweep.
pub fn check_collapse(cfg: &VerifyConfig) -> (CheckOutcome, CheckOutcome) {
    let mut ratio_check = CheckOutcome::new(4, "sqrt(K) separation");
    let sweep_cfg = &cfg.collapse;
    let collapse = timed(3, "effective sample size collapse", |out| {
        let exp = &sweep_cfg.experiment;
        let world = World::new(exp)?;
        for &t in &sweep_cfg.grid.queries {
            let c = ExperimentConfig {
                regime: Regime::LadsSimple,
                accounts: 50,
                queries: t,
                alpha: MixingCoefficient::new(1.0)?,
                ..exp.clone()
            };
            let distinct = build_transcript(&c, &world, 0)?.distinct_responses();
            out.metric(format!("distinct_K50_T{t}"), distinct as f64);
            out.require(distinct == t, format!("K=50 T={t}: {distinct} distinct responses"));
        }
        let result = run_sweep(sweep_cfg, cfg.parallelism)?;
        let s = &result.summary;
        for fit in s.slopes.iter() {
            let key = format!(
                "slope_{}_{:?}{}",
                fit.regime,
                fit.axis,
                fit.at.map(|v| format!("_{v}")).unwrap_or_default()
            );
            out.metric(key, fit.slope);
        }
        for a in s.assertions.iter().filter(|a| a.name.starts_with("slope")) {
            out.require(a.passed, format!("{}: {}", a.name, a.detail));
        }
        if !s.slopes.iter().any(|f| f.regime == Regime::Iid && f.axis == Axis::KT) {
            out.require(false, "no iid KT fit in the grid");
        }
        for a in s.assertions.iter().filter(|a| a.name.starts_with("gap ratio")) {
            ratio_check.require(a.passed, format!("{}: {}", a.name, a.detail));
        }
        for p in s.points.iter().filter(|p| p.point.accounts == 16) {
            if p.point.regime == Regime::LadsSimple {
                if let Some(iid) = s.point(Regime::Iid, 0.0, p.point.radius, 16, p.point.queries) {
                    ratio_check.metric(format!("ratio_T{}", p.point.queries), p.median_gap / iid.median_gap);
                }
            }
        }
        Ok(())
    });
    if ratio_check.detail.is_empty() {
        ratio_check.require(false, "collapse sweep produced no ratio");
    }
    ratio_check.runtime_ms = 0;
    info!("{}", ratio_check.line());
    (collapse, ratio_check)
}

/// Criterion 5.
pub fn check_rademacher(cfg: &VerifyConfig) -> CheckOutcome {
    timed(5, "Rademacher bound", |out| {
        let closed = rademacher_bound(1.0, 1.0, 2, 100);
        out.metric("bound_R1_W1_Y2_n100", closed);
        out.require((closed - 0.2828).abs() <= 1e-4, format!("closed form {closed:.6}"));
        let mut rng = ChaCha8Rng::seed_from_u64(keyed_mix(9, cfg.seed));
        let sizes = [25, 100, 400];
        let mut within = 0;
        let mut worst_ratio = 0.0f64;
        for i in 0..cfg.rademacher_instances {
            let n = sizes[i % sizes.len()];
            let vocab = rng.gen_range(2..=8);
            let dim = rng.gen_range(2..=8);
            let r_x = rng.gen_range(0.5..2.0);
            let w = rng.gen_range(0.5..3.0);
            let mut data = Dataset::new(dim, vocab);
            for _ in 0..n {
                let g = crate::noise::gaussian_noise(Seed(rng.gen()), dim);
                let norm = g.values().iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = r_x * rng.gen::<f64>().powf(1.0 / dim as f64) / norm;
                let x: Vec<f64> = g.values().iter().map(|v| v * scale).collect();
                data.push(&x, rng.gen_range(0..vocab), 1.0 / n as f64);
            }
            let est = rademacher_check(
                &data,
                r_x,
                w,
                &RademacherSettings {
                    seed: rng.gen(),
                    ..RademacherSettings::default()
                },
            )?;
            within += est.within_bound() as usize;
            worst_ratio = worst_ratio.max(est.estimate / est.bound);
        }
        out.metric("within_bound", within as f64);
        out.metric("worst_estimate_to_bound", worst_ratio);
        out.require(
            within == cfg.rademacher_instances,
            format!(
                "{within}/{} instances within bound (worst ratio {worst_ratio:.3})",
                cfg.rademacher_instances
            ),
        );
        Ok(())
    })
}

/// `n_eff` straight from pairwise cell coincidences, independent of the
/// profile code: `sum_c (n_c / M)^2 = #{(i, i') in the same cell} / M^2`.
pub fn brute_force_n_eff(cells: &[Option<(u64, u64)>]) -> f64 {
    let m = cells.len() as f64;
    let mut same = 0u64;
    for a in cells.iter().flatten() {
        for b in cells.iter().flatten() {
            same += (a == b) as u64;
        }
    }
    m * m / same as f64
}

/// Criterion 6.
pub fn check_neff(cfg: &VerifyConfig) -> CheckOutcome {
    timed(6, "n_eff and compression", |out| {
        let base = ExperimentConfig {
            n_holdout: 10_000,
            n_probes: 0,
            seed: cfg.seed,
            r_x: 5.0,
            ..ExperimentConfig::default()
        };
        let mut cases = Vec::new();
        for (n, radius, mode) in [
            (1, 0.0, BucketMode::NearestCenter),
            (4, 1.0, BucketMode::NearestCenter),
            (8, 2.0, BucketMode::NearestCenter),
            (4, 1.0, BucketMode::Lsh),
            (8, 2.0, BucketMode::Lsh),
        ] {
            for (k, t) in [(8, 16), (20, 40)] {
                cases.push(ExperimentConfig {
                    regime: Regime::Lads,
                    centers: n,
                    radius,
                    bucket_mode: mode,
                    lsh_bits: 3,
                    accounts: k,
                    queries: t,
                    ..base.clone()
                });
            }
        }
        cases.push(ExperimentConfig {
            regime: Regime::LadsSimple,
            accounts: 30,
            queries: 50,
            ..base.clone()
        });
        let (mut worst_rel, mut audited, mut max_rho) = (0.0f64, 0usize, 0.0f64);
        let (mut compression_ok, mut ceiling_ok) = (true, true);
        for (i, c) in cases.iter().enumerate() {
            let world = World::new(c)?;
            let tr = build_transcript(c, &world, i)?;
            let profile = tr.weight_profile(&world)?;
            let n_eff = effective_sample_size(&profile.values())?;
            let cells: Vec<Option<(u64, u64)>> = tr
                .records
                .iter()
                .map(|r| match c.regime {
                    Regime::LadsSimple => Ok(Some((0, r.depth))),
                    _ => world
                        .bucket_model
                        .good_assignment(&r.query)
                        .map(|a| a.map(|j| (j as u64, r.depth))),
                })
                .collect::<Result<_>>()?;
            let bf = brute_force_n_eff(&cells);
            worst_rel = worst_rel.max(((n_eff - bf) / bf).abs());
            ceiling_ok &= n_eff <= profile.n_eff_ceiling();
            max_rho = max_rho.max(profile.rho);
            if c.regime == Regime::Lads {
                let queries: Vec<Vec<f64>> = tr.records.iter().map(|r| r.query.clone()).collect();
                let audit = audit_transcript(&world.bucket_model, &queries)?;
                compression_ok &= audit.compression_holds() && audit.occupied_buckets <= c.centers + audit.bad_queries;
                audited += 1;
            }
        }
        out.metric("worst_relative_error", worst_rel);
        out.metric("profiles", cases.len() as f64);
        out.metric("max_rho", max_rho);
        out.require(worst_rel <= 1e-12, format!("worst relative error {worst_rel:.2e} over {} profiles", cases.len()));
        out.require(compression_ok, format!("|B_task| <= N + M_bad on {audited} audited transcripts"));
        out.require(ceiling_ok, format!("n_eff <= NT/(1-rho)^2 on all profiles (max rho {max_rho:.3})"));
        Ok(())
    })
}

/// Criterion 7.
pub fn check_alignment(cfg: &VerifyConfig) -> CheckOutcome {
    timed(7, "alignment fluctuation", |out| {
        let centers = draw_centers(4, 8, 3.0, keyed_mix(10, cfg.seed));
        let model = BucketModel::nearest_center(centers, 1.0)?;
        let r = simulate_alignment(
            &model,
            1.0,
            cfg.alignment_m,
            cfg.alignment_repetitions,
            cfg.alignment_delta,
            keyed_mix(11, cfg.seed),
        )?;
        let limit = cfg.alignment_delta + 0.02;
        out.metric("violation_rate", r.violation_rate);
        out.metric("threshold", r.threshold);
        out.metric("median_deviation", r.median_deviation());
        out.require(
            r.violation_rate <= limit,
            format!(
                "{} of {} repetitions exceed {:.5} (rate {:.4} <= {limit})",
                r.violations, r.repetitions, r.threshold, r.violation_rate
            ),
        );
        Ok(())
    })
}

/// Criterion 8: held-out loss of the conditional-regime student over the
/// radius grid, and the one-point reduction to the depth-only regime.
pub fn check_bias(cfg: &VerifyConfig) -> CheckOutcome {
    timed(8, "bias term visibility", |out| {
        let r_max = cfg.bias_radii.iter().copied().fold(0.0, f64::max);
        let task = ExperimentConfig {
            centers: 1,
            r_x: cfg.collapse.experiment.center_norm + r_max,
            alpha: MixingCoefficient::new(1.0)?,
            ..cfg.collapse.experiment.clone()
        };
        let radius_sweep = SweepConfig {
            experiment: task.clone(),
            grid: Grid {
                regimes: vec![Regime::Lads, Regime::Iid],
                accounts: vec![cfg.bias_accounts],
                queries: vec![cfg.bias_queries, cfg.bias_queries * 2],
                alphas: vec![1.0],
                radii: cfg.bias_radii.clone(),
            },
            bootstrap: 200,
            assert_slope: vec![],
            assert_ratio: vec![],
        };
        let s = run_sweep(&radius_sweep, cfg.parallelism)?.summary;
        let mut losses = Vec::new();
        for &r in &cfg.bias_radii {
            let lads = s
                .point(Regime::Lads, 1.0, r, cfg.bias_accounts, cfg.bias_queries)
                .ok_or_else(|| LadsError::DegenerateGrid("missing radius point".into()))?;
            let iid = s
                .point(Regime::Iid, 0.0, r, cfg.bias_accounts, cfg.bias_queries)
                .ok_or_else(|| LadsError::DegenerateGrid("missing radius point".into()))?;
            let bayes = World::new(&radius_sweep.config_for(&lads.point))?
                .holdout
                .as_ref()
                .map_or(f64::NAN, |h| h.bayes_loss());
            out.metric(format!("heldout_lads_R{r}"), lads.median_pop_loss);
            // diagnostic only: how much of the trend is the task getting easier
            out.metric(format!("excess_over_bayes_R{r}"), lads.median_pop_loss - bayes);
            out.metric(format!("margin_over_iid_R{r}"), lads.median_pop_loss - iid.median_pop_loss);
            losses.push(lads.median_pop_loss);
        }
        let monotone = losses.windows(2).all(|w| w[1] >= w[0]);
        out.require(
            monotone,
            format!(
                "median held-out loss over R {:?}: {}",
                cfg.bias_radii,
                losses.iter().map(|l| format!("{l:.5}")).collect::<Vec<_>>().join(", ")
            ),
        );

        // one center, zero radius: the conditional pipeline against the
        // depth-only pipeline on the collapse grid
        let reduction = SweepConfig {
            experiment: ExperimentConfig { radius: 0.0, ..task },
            grid: Grid {
                regimes: vec![Regime::LadsSimple, Regime::Lads],
                accounts: cfg.collapse.grid.accounts.clone(),
                queries: cfg.collapse.grid.queries.clone(),
                alphas: vec![1.0],
                radii: vec![0.0],
            },
            bootstrap: 200,
            assert_slope: vec![],
            assert_ratio: vec![],
        };
        let s = run_sweep(&reduction, cfg.parallelism)?.summary;
        let mut within = 0;
        let mut total = 0;
        for p in s.points.iter().filter(|p| p.point.regime == Regime::Lads) {
            let simple = s
                .point(Regime::LadsSimple, 1.0, 0.0, p.point.accounts, p.point.queries)
                .ok_or_else(|| LadsError::DegenerateGrid("missing reduction point".into()))?;
            total += 1;
            within += (p.median_gap >= simple.gap_ci.0 && p.median_gap <= simple.gap_ci.1) as usize;
        }
        out.metric("reduction_points_within_ci", within as f64);
        out.require(
            total > 0 && within == total,
            format!("N=1, R=0: {within}/{total} grid points within the depth-only CI"),
        );
        Ok(())
    })
}

/// Criterion 9, in-process: two sweeps with the same config give identical
/// CSV bytes.
pub fn check_determinism(cfg: &VerifyConfig) -> CheckOutcome {
    timed(9, "determinism", |out| {
        let mut bytes = Vec::new();
        for _ in 0..2 {
            let r = run_sweep(&cfg.determinism, cfg.parallelism)?;
            let mut buf = Vec::new();
            write_csv(&r.rows, &mut buf)?;
            bytes.push(buf);
        }
        out.metric("csv_bytes", bytes[0].len() as f64);
        out.require(bytes[0] == bytes[1], format!("two runs, {} CSV bytes each, identical", bytes[0].len()));
        Ok(())
    })
}

/// Runs the selected suites (all when `only` is empty) in criterion order.
pub fn run_suites(cfg: &VerifyConfig, only: &[Suite]) -> Vec<CheckOutcome> {
    let wanted = |s: Suite| only.is_empty() || only.contains(&s);
    let mut out = Vec::new();
    if wanted(Suite::Lossless) {
        out.push(check_lossless(cfg));
    }
    if wanted(Suite::Coupling) {
        out.push(check_coupling(cfg));
    }
    if wanted(Suite::Collapse) {
        let (a, b) = check_collapse(cfg);
        out.push(a);
        out.push(b);
    }
    if wanted(Suite::Rademacher) {
        out.push(check_rademacher(cfg));
    }
    if wanted(Suite::Neff) {
        out.push(check_neff(cfg));
    }
    if wanted(Suite::Alignment) {
        out.push(check_alignment(cfg));
    }
    if wanted(Suite::Bias) {
        out.push(check_bias(cfg));
    }
    if wanted(Suite::Determinism) {
        out.push(check_determinism(cfg));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.as_str().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn brute_force_matches_closed_form_on_small_case() {
        let cells = [Some((0, 1)), Some((0, 1)), Some((1, 1)), None];
        // weights 2/4 and 1/4
        let expected = 1.0 / (0.25 + 0.0625);
        assert!((brute_force_n_eff(&cells) - expected).abs() < 1e-12);
    }

    #[test]
    fn depth_blind_generator_breaks_coupling() {
        let cfg = VerifyConfig {
            coupling_accounts: 5,
            coupling_queries: 20,
            ..VerifyConfig::default()
        };
        let mut out = CheckOutcome::new(2, "sabotage");
        coupling_report(DepthBlindSeeds(SeedSpec::keyed(1)), &cfg, &mut out).unwrap();
        assert!(!out.passed, "{}", out.detail);
    }
}
