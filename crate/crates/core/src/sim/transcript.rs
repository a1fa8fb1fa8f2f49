//! Multi-account transcripts under each regime.
//!
//! Requests are interleaved `t` outer, `k` inner, so the gateway sees every
//! account's `t`-th request before anyone's `(t+1)`-th.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Regime};
use super::world::{derive_seed, query_from_gaussian, TaskTeacher, World, TAG_REPETITION};
use crate::error::{LadsError, Result};
use crate::gateway::{AccountId, Gateway, GatewayConfig, GatewayMode};
use crate::noise::{gaussian_noise, keyed_mix, NoiseVector, Seed, SeedSpec};
use crate::softmax::Dataset;
use crate::stats::IssuedNoise;

/// Keys of one repetition, derived from the master seed and the repetition
/// index only.
#[derive(Debug, Clone, Copy)]
pub struct RepetitionKeys {
    pub seed_spec: SeedSpec,
    pub fresh_key: u64,
    pub iid_key: u64,
    pub distiller_key: u64,
}

impl RepetitionKeys {
    pub fn new(master: u64, rep: usize) -> Self {
        let base = keyed_mix(rep as u64, derive_seed(master, TAG_REPETITION));
        Self {
            seed_spec: SeedSpec::keyed(keyed_mix(1, base)),
            fresh_key: keyed_mix(2, base),
            iid_key: keyed_mix(3, base),
            distiller_key: keyed_mix(4, base),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Response {
    Token(usize),
    Sample(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub account: u32,
    pub query: Vec<f64>,
    /// Cluster the query was drawn from.
    pub source_center: usize,
    pub bucket: u64,
    pub depth: u64,
    pub seed: Seed,
    pub noise: NoiseVector,
    pub response: Response,
}

impl Record {
    fn key(&self) -> (Vec<u64>, ResponseKey) {
        (self.query.iter().map(|v| v.to_bits()).collect(), ResponseKey::of(&self.response))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum ResponseKey {
    Token(usize),
    Sample(Vec<u64>),
}

impl ResponseKey {
    fn of(r: &Response) -> Self {
        match r {
            Response::Token(t) => ResponseKey::Token(*t),
            Response::Sample(x) => ResponseKey::Sample(x.iter().map(|v| v.to_bits()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub regime: Regime,
    pub accounts: usize,
    pub queries: usize,
    pub records: Vec<Record>,
}

/// Cell weights `w_{j,s} = n_{j,s} / M` over (center, depth) and the bad
/// fraction `rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightProfile {
    pub weights: BTreeMap<(u64, u64), f64>,
    pub rho: f64,
    /// Largest possible number of cells (`N T` for the coupled regimes).
    pub capacity: u64,
}

impl WeightProfile {
    pub fn values(&self) -> Vec<f64> {
        self.weights.values().copied().collect()
    }

    /// `capacity / (1 - rho)^2`, the Cauchy-Schwarz ceiling on `n_eff`.
    pub fn n_eff_ceiling(&self) -> f64 {
        self.capacity as f64 / ((1.0 - self.rho) * (1.0 - self.rho))
    }
}

/// `n_eff = 1 / sum w^2`.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(LadsError::ConfigInvalid("weights must be finite and nonnegative".into()));
    }
    let s: f64 = weights.iter().map(|w| w * w).sum();
    if s == 0.0 {
        return Err(LadsError::ZeroWeights);
    }
    Ok(1.0 / s)
}

impl Transcript {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct (query, response) pairs.
    pub fn distinct_responses(&self) -> usize {
        self.records.iter().map(Record::key).collect::<HashSet<_>>().len()
    }

    /// Distinct issued noise vectors, bitwise.
    pub fn distinct_noise(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.noise.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect::<HashSet<_>>()
            .len()
    }

    /// Fraction of records whose (query, response) pair also appears in
    /// another account's records.
    pub fn duplicate_rate(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let mut owners: HashMap<_, HashSet<u32>> = HashMap::new();
        for r in &self.records {
            owners.entry(r.key()).or_default().insert(r.account);
        }
        let dup = self
            .records
            .iter()
            .filter(|r| owners[&r.key()].len() > 1)
            .count();
        dup as f64 / self.records.len() as f64
    }

    pub fn issued_noise(&self) -> Vec<IssuedNoise<'_>> {
        self.records
            .iter()
            .map(|r| IssuedNoise {
                account: r.account,
                bucket: r.bucket,
                depth: r.depth,
                noise: r.noise.values(),
            })
            .collect()
    }

    /// Training set with exact duplicates merged; the weighted objective is
    /// the plain average over all `K T` records.
    pub fn dataset(&self, q_dim: usize, vocab: usize) -> Result<Dataset> {
        let mut points = Vec::with_capacity(self.records.len());
        for r in &self.records {
            match r.response {
                Response::Token(y) => points.push((r.query.clone(), y)),
                Response::Sample(_) => {
                    return Err(LadsError::ConfigInvalid("student training needs token responses".into()))
                }
            }
        }
        if points.is_empty() {
            return Err(LadsError::EmptyInput("transcript"));
        }
        Ok(Dataset::from_points_merged(q_dim, vocab, &points))
    }

    /// Cells are (bucket-local center, depth) for the coupled regimes and
    /// single records for `iid`.
    pub fn weight_profile(&self, world: &World) -> Result<WeightProfile> {
        let m = self.records.len();
        if m == 0 {
            return Err(LadsError::EmptyInput("transcript"));
        }
        let mut counts: BTreeMap<(u64, u64), u64> = BTreeMap::new();
        let mut bad = 0usize;
        let capacity = match self.regime {
            Regime::Iid => {
                for (i, _) in self.records.iter().enumerate() {
                    counts.insert((i as u64, 0), 1);
                }
                m as u64
            }
            Regime::LadsSimple => {
                for r in &self.records {
                    *counts.entry((0, r.depth)).or_default() += 1;
                }
                self.queries as u64
            }
            Regime::Lads => {
                for r in &self.records {
                    match world.bucket_model.good_assignment(&r.query)? {
                        Some(j) => *counts.entry((j as u64, r.depth)).or_default() += 1,
                        None => bad += 1,
                    }
                }
                (world.centers.len() * self.queries) as u64
            }
        };
        let weights = counts.into_iter().map(|(k, c)| (k, c as f64 / m as f64)).collect();
        Ok(WeightProfile {
            weights,
            rho: bad as f64 / m as f64,
            capacity,
        })
    }
}

fn respond(world: &World, cfg: &ExperimentConfig, query: &[f64], noise: &[f64]) -> Result<Response> {
    let tail = &noise[cfg.q_dim + 1..];
    Ok(match &world.teacher {
        TaskTeacher::Token(t) => Response::Token(t.generate_token_from_gaussian(query, tail)?),
        TaskTeacher::Linear(t) => Response::Sample(t.generate_continuous(query, tail)?),
    })
}

/// Generates the `K T` records of one repetition.
///
/// `iid` and `lads_simple` model an unconditional generator: the query and
/// the response both come from the issued noise. `lads` models a
/// conditional API: the distiller picks its queries, the gateway buckets
/// them and issues noise, and only the response slice of the noise is used.
/// With one center and zero radius the two coupled regimes coincide.
pub fn build_transcript(cfg: &ExperimentConfig, world: &World, rep: usize) -> Result<Transcript> {
    cfg.validate()?;
    let keys = RepetitionKeys::new(cfg.seed, rep);
    let dim = cfg.noise_dim();
    let (k_total, t_total) = (cfg.accounts, cfg.queries);
    let mut records = Vec::with_capacity(k_total * t_total);

    let gateway = match cfg.regime {
        Regime::Iid => None,
        Regime::LadsSimple => Some(GatewayMode::Simple),
        Regime::Lads => Some(GatewayMode::Conditional(world.bucket_model.clone())),
    }
    .map(|mode| {
        Gateway::new(GatewayConfig {
            mode,
            seed_gen: keys.seed_spec,
            fresh_key: keys.fresh_key,
            noise_dim: dim,
            alpha: cfg.alpha,
            stage_cap: None,
        })
    })
    .transpose()?;
    let ids: Vec<AccountId> = (0..k_total)
        .map(|k| AccountId::new(format!("acct-{k}")))
        .collect::<Result<_>>()?;

    for t in 0..t_total {
        for (k, id) in ids.iter().enumerate() {
            let record = match (cfg.regime, &gateway) {
                (Regime::Iid, _) => {
                    let seed = Seed(keyed_mix((t * k_total + k) as u64, keys.iid_key));
                    let noise = gaussian_noise(seed, dim);
                    let (j, q) = query_from_gaussian(&world.centers, cfg.radius, &noise.values()[..cfg.q_dim + 1]);
                    Record {
                        account: k as u32,
                        response: respond(world, cfg, &q, noise.values())?,
                        query: q,
                        source_center: j,
                        bucket: 0,
                        depth: t as u64 + 1,
                        seed,
                        noise,
                    }
                }
                (Regime::LadsSimple, Some(g)) => {
                    let out = g.serve_simple(id)?;
                    let (j, q) = query_from_gaussian(&world.centers, cfg.radius, &out.noise.values()[..cfg.q_dim + 1]);
                    Record {
                        account: k as u32,
                        response: respond(world, cfg, &q, out.noise.values())?,
                        query: q,
                        source_center: j,
                        bucket: out.bucket.0,
                        depth: out.depth,
                        seed: out.seed,
                        noise: out.noise,
                    }
                }
                (Regime::Lads, Some(g)) => {
                    let index = if cfg.shared_queries { t } else { t * k_total + k };
                    let draw = gaussian_noise(Seed(keyed_mix(index as u64, keys.distiller_key)), cfg.q_dim + 1);
                    let (j, q) = query_from_gaussian(&world.centers, cfg.radius, draw.values());
                    let out = g.serve_conditional(id, &q)?;
                    Record {
                        account: k as u32,
                        response: respond(world, cfg, &q, out.noise.values())?,
                        query: q,
                        source_center: j,
                        bucket: out.bucket.0,
                        depth: out.depth,
                        seed: out.seed,
                        noise: out.noise,
                    }
                }
                _ => unreachable!("coupled regimes always have a gateway"),
            };
            records.push(record);
        }
    }
    Ok(Transcript {
        regime: cfg.regime,
        accounts: k_total,
        queries: t_total,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::MixingCoefficient;
    use crate::sim::config::TeacherKind;

    fn cfg(regime: Regime, k: usize, t: usize) -> ExperimentConfig {
        ExperimentConfig {
            regime,
            accounts: k,
            queries: t,
            n_holdout: 10_000,
            n_probes: 0,
            ..Default::default()
        }
    }

    #[test]
    fn lads_simple_has_exactly_t_distinct_responses() {
        let c = cfg(Regime::LadsSimple, 50, 100);
        let w = World::new(&c).unwrap();
        let tr = build_transcript(&c, &w, 0).unwrap();
        assert_eq!(tr.len(), 5000);
        assert_eq!(tr.distinct_responses(), 100);
        assert_eq!(tr.distinct_noise(), 100);
        assert_eq!(tr.duplicate_rate(), 1.0);
        let ds = tr.dataset(8, 8).unwrap();
        assert_eq!(ds.len(), 100);
        assert!(ds.weights().iter().all(|&w| (w - 0.01).abs() < 1e-15));
    }

    #[test]
    fn iid_continuous_noise_is_all_distinct() {
        let c = ExperimentConfig {
            teacher: TeacherKind::Linear,
            ..cfg(Regime::Iid, 50, 100)
        };
        let w = World::new(&c).unwrap();
        let tr = build_transcript(&c, &w, 0).unwrap();
        assert_eq!(tr.distinct_noise(), 5000);
        assert_eq!(tr.distinct_responses(), 5000);
        assert_eq!(tr.duplicate_rate(), 0.0);
    }

    #[test]
    fn lads_with_shared_queries_duplicates_everything() {
        let c = ExperimentConfig {
            shared_queries: true,
            centers: 5,
            radius: 0.8,
            r_x: 4.0,
            ..cfg(Regime::Lads, 6, 40)
        };
        let w = World::new(&c).unwrap();
        let tr = build_transcript(&c, &w, 2).unwrap();
        assert_eq!(tr.duplicate_rate(), 1.0);
        assert_eq!(tr.distinct_responses(), 40);
    }

    #[test]
    fn conditional_reduces_to_simple_at_one_point_center() {
        let base = ExperimentConfig {
            radius: 0.0,
            centers: 1,
            ..cfg(Regime::Lads, 7, 30)
        };
        let w = World::new(&base).unwrap();
        for alpha in [1.0, 0.7] {
            let a = ExperimentConfig {
                alpha: MixingCoefficient::new(alpha).unwrap(),
                ..base.clone()
            };
            let s = ExperimentConfig {
                regime: Regime::LadsSimple,
                ..a.clone()
            };
            let ta = build_transcript(&a, &w, 3).unwrap();
            let ts = build_transcript(&s, &w, 3).unwrap();
            assert_eq!(ta.records, ts.records);
        }
    }

    #[test]
    fn weight_profiles() {
        let c = cfg(Regime::LadsSimple, 4, 25);
        let w = World::new(&c).unwrap();
        let p = build_transcript(&c, &w, 0).unwrap().weight_profile(&w).unwrap();
        assert_eq!(p.weights.len(), 25);
        assert!((effective_sample_size(&p.values()).unwrap() - 25.0).abs() < 1e-9);

        let c = cfg(Regime::Iid, 4, 25);
        let p = build_transcript(&c, &w, 0).unwrap().weight_profile(&w).unwrap();
        assert!((effective_sample_size(&p.values()).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn n_eff_examples() {
        assert!((effective_sample_size(&[0.5, 0.5]).unwrap() - 2.0).abs() < 1e-15);
        assert!((effective_sample_size(&[0.5, 0.25, 0.25]).unwrap() - 8.0 / 3.0).abs() < 1e-15);
        let nt = 37;
        let u = vec![1.0 / nt as f64; nt];
        assert!((effective_sample_size(&u).unwrap() - nt as f64).abs() < 1e-9);
        assert!(matches!(effective_sample_size(&[0.0, 0.0]), Err(LadsError::ZeroWeights)));
        assert!(effective_sample_size(&[-0.1]).is_err());
    }

    #[test]
    fn transcripts_are_deterministic() {
        let c = ExperimentConfig {
            alpha: MixingCoefficient::new(0.9).unwrap(),
            centers: 3,
            ..cfg(Regime::Lads, 3, 20)
        };
        let w = World::new(&c).unwrap();
        assert_eq!(build_transcript(&c, &w, 1).unwrap(), build_transcript(&c, &w, 1).unwrap());
        assert_ne!(build_transcript(&c, &w, 1).unwrap(), build_transcript(&c, &w, 2).unwrap());
    }
}
