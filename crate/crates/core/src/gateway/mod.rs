//! The stateful request path: per-account bucket ledgers, stage resets,
//! seed and noise issuance, and crash-consistent snapshots.
//!
//! Concurrency: the account map sits behind a reader-writer lock and each
//! ledger behind its own mutex. Serving takes the read side plus the
//! account's mutex, so different accounts proceed in parallel while
//! requests for one account are totally ordered. Stage resets and snapshots
//! take the write side and therefore see no half-applied request.

pub mod service;
mod snapshot;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::bucketing::{BucketId, BucketModel};
use crate::error::{LadsError, Result};
use crate::noise::{gaussian_noise, keyed_mix, mix_noise, MixingCoefficient, NoiseVector, Seed, SeedGenerator, SeedSpec};

pub use snapshot::{SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

pub const MAX_ACCOUNT_ID_BYTES: usize = 128;

/// Implicit bucket used by simple (depth-only) serving.
pub const SIMPLE_BUCKET: u64 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AccountId(String);

impl AccountId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(LadsError::InvalidAccount("empty".into()));
        }
        if id.len() > MAX_ACCOUNT_ID_BYTES {
            return Err(LadsError::InvalidAccount(format!(
                "{} bytes exceeds {MAX_ACCOUNT_ID_BYTES}",
                id.len()
            )));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for AccountId {
    type Error = LadsError;
    fn try_from(s: String) -> Result<Self> {
        Self::new(s)
    }
}

impl From<AccountId> for String {
    fn from(a: AccountId) -> String {
        a.0
    }
}

impl fmt::Display for AccountId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Sparse bucket-count array for one account within the current stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountLedger {
    counts: BTreeMap<u64, u64>,
    total_requests: u64,
}

impl AccountLedger {
    pub fn count(&self, bucket: u64) -> u64 {
        self.counts.get(&bucket).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &BTreeMap<u64, u64> {
        &self.counts
    }

    pub fn total_requests(&self) -> u64 {
        self.total_requests
    }

    pub(crate) fn from_parts(counts: BTreeMap<u64, u64>, total_requests: u64) -> Self {
        Self { counts, total_requests }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GatewayMode {
    /// Single implicit bucket; the seed depends on the access index only.
    Simple,
    Conditional(BucketModel),
}

#[derive(Debug, Clone)]
pub struct GatewayConfig<S = SeedSpec> {
    pub mode: GatewayMode,
    pub seed_gen: S,
    /// Key of the per-request independent noise stream.
    pub fresh_key: u64,
    pub noise_dim: usize,
    pub alpha: MixingCoefficient,
    /// Optional per-account request cap within a stage.
    pub stage_cap: Option<u64>,
}

/// Everything a caller needs to generate and audit one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeOutcome {
    pub bucket: BucketId,
    pub depth: u64,
    pub seed: Seed,
    pub noise: NoiseVector,
}

pub struct Gateway<S = SeedSpec> {
    mode: GatewayMode,
    seed_gen: S,
    fresh_key: u64,
    noise_dim: usize,
    alpha: MixingCoefficient,
    stage_cap: Option<u64>,
    ledgers: RwLock<HashMap<AccountId, Arc<Mutex<AccountLedger>>>>,
    stage_id: AtomicU64,
    fresh_counter: AtomicU64,
}

impl<S> fmt::Debug for Gateway<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("mode", &self.mode)
            .field("noise_dim", &self.noise_dim)
            .field("alpha", &self.alpha)
            .field("stage_id", &self.stage_id.load(Ordering::SeqCst))
            .field("accounts", &self.ledgers.read().len())
            .finish()
    }
}

impl<S: SeedGenerator> Gateway<S> {
    pub fn new(config: GatewayConfig<S>) -> Result<Self> {
        if config.noise_dim == 0 {
            return Err(LadsError::ConfigInvalid("noise_dim must be at least 1".into()));
        }
        if config.stage_cap == Some(0) {
            return Err(LadsError::ConfigInvalid("stage_cap must be positive".into()));
        }
        Ok(Self {
            mode: config.mode,
            seed_gen: config.seed_gen,
            fresh_key: config.fresh_key,
            noise_dim: config.noise_dim,
            alpha: config.alpha,
            stage_cap: config.stage_cap,
            ledgers: RwLock::new(HashMap::new()),
            stage_id: AtomicU64::new(0),
            fresh_counter: AtomicU64::new(0),
        })
    }

    pub fn mode(&self) -> &GatewayMode {
        &self.mode
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn alpha(&self) -> MixingCoefficient {
        self.alpha
    }

    pub fn stage_id(&self) -> u64 {
        self.stage_id.load(Ordering::SeqCst)
    }

    pub fn account_count(&self) -> usize {
        self.ledgers.read().len()
    }

    pub fn ledger(&self, account: &AccountId) -> Option<AccountLedger> {
        self.ledgers.read().get(account).map(|l| l.lock().clone())
    }

    /// Depth-only serving: the `t`-th request of any account gets
    /// `SG(0, t)`.
    pub fn serve_simple(&self, account: &AccountId) -> Result<ServeOutcome> {
        if self.mode != GatewayMode::Simple {
            return Err(LadsError::WrongMode { expected: "simple" });
        }
        self.issue(account, SIMPLE_BUCKET)
    }

    /// Bucketed serving: `i = h(q)`, `a[i] += 1`, seed `SG(i, a[i])`.
    pub fn serve_conditional(&self, account: &AccountId, query: &[f64]) -> Result<ServeOutcome> {
        let bucket = match &self.mode {
            GatewayMode::Conditional(model) => model.bucket(query)?,
            GatewayMode::Simple => return Err(LadsError::WrongMode { expected: "conditional" }),
        };
        self.issue(account, bucket.0)
    }

    fn ledger_handle(&self, account: &AccountId) -> Arc<Mutex<AccountLedger>> {
        if let Some(l) = self.ledgers.read().get(account) {
            return Arc::clone(l);
        }
        let mut map = self.ledgers.write();
        Arc::clone(map.entry(account.clone()).or_default())
    }

    fn issue(&self, account: &AccountId, bucket: u64) -> Result<ServeOutcome> {
        let (depth, seed, fresh_index) = {
            // hold the read side for the whole mutation so resets and
            // snapshots never observe a partial request
            let map = self.ledgers.read();
            let handle = match map.get(account) {
                Some(l) => Arc::clone(l),
                None => {
                    drop(map);
                    self.ledger_handle(account);
                    return self.issue(account, bucket);
                }
            };
            let mut ledger = handle.lock();
            if let Some(cap) = self.stage_cap {
                if ledger.total_requests >= cap {
                    return Err(LadsError::QuotaExceeded {
                        account: account.to_string(),
                        cap,
                    });
                }
            }
            let depth = ledger.count(bucket) + 1;
            let seed = self.seed_gen.seed(bucket, depth)?;
            *ledger.counts.entry(bucket).or_insert(0) = depth;
            ledger.total_requests += 1;
            let fresh_index = self.fresh_counter.fetch_add(1, Ordering::SeqCst);
            drop(ledger);
            drop(map);
            (depth, seed, fresh_index)
        };
        let noise = self.realize(seed, fresh_index)?;
        Ok(ServeOutcome {
            bucket: BucketId(bucket),
            depth,
            seed,
            noise,
        })
    }

    /// Seed of the `index`-th per-request independent draw.
    pub fn fresh_seed(&self, index: u64) -> Seed {
        Seed(keyed_mix(index, self.fresh_key))
    }

    fn realize(&self, seed: Seed, fresh_index: u64) -> Result<NoiseVector> {
        let shared = gaussian_noise(seed, self.noise_dim);
        if self.alpha.value() == 1.0 {
            return Ok(shared);
        }
        let fresh = gaussian_noise(self.fresh_seed(fresh_index), self.noise_dim);
        mix_noise(&shared, &fresh, self.alpha)
    }

    /// Clears every ledger and starts a new stage.
    pub fn reset_stage(&self) -> u64 {
        let mut map = self.ledgers.write();
        map.clear();
        self.stage_id.fetch_add(1, Ordering::SeqCst) + 1
    }
}

impl Gateway<SeedSpec> {
    pub fn seed_spec(&self) -> &SeedSpec {
        &self.seed_gen
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::pearson;

    fn simple(alpha: f64) -> Gateway {
        Gateway::new(GatewayConfig {
            mode: GatewayMode::Simple,
            seed_gen: SeedSpec::keyed(0x5eed),
            fresh_key: 0xf00d,
            noise_dim: 16,
            alpha: MixingCoefficient::new(alpha).unwrap(),
            stage_cap: None,
        })
        .unwrap()
    }

    fn conditional(alpha: f64, cap: Option<u64>) -> Gateway {
        let centers: Vec<Vec<f64>> = (0..12).map(|j| vec![j as f64, 0.0]).collect();
        Gateway::new(GatewayConfig {
            mode: GatewayMode::Conditional(BucketModel::nearest_center(centers, 0.4).unwrap()),
            seed_gen: SeedSpec::keyed(0xabc),
            fresh_key: 0x123,
            noise_dim: 8,
            alpha: MixingCoefficient::new(alpha).unwrap(),
            stage_cap: cap,
        })
        .unwrap()
    }

    fn acct(s: &str) -> AccountId {
        AccountId::new(s).unwrap()
    }

    #[test]
    fn account_id_validation() {
        assert!(AccountId::new("").is_err());
        assert!(AccountId::new("x".repeat(129)).is_err());
        assert!(AccountId::new("x".repeat(128)).is_ok());
    }

    #[test]
    fn simple_mode_couples_equal_access_indices() {
        let g = simple(1.0);
        let a = g.serve_simple(&acct("a")).unwrap();
        let b = g.serve_simple(&acct("b")).unwrap();
        assert_eq!(a.depth, 1);
        assert!(a.noise.bit_eq(&b.noise));
        let a2 = g.serve_simple(&acct("a")).unwrap();
        assert_eq!(a2.depth, 2);
        assert_ne!(a2.seed, a.seed);
        assert!(g.serve_conditional(&acct("a"), &[0.0]).is_err());
    }

    #[test]
    fn simple_mode_alpha_zero_decorrelates() {
        let g = simple(0.0);
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for _ in 0..10_000 / 16 + 1 {
            xs.extend_from_slice(g.serve_simple(&acct("a")).unwrap().noise.values());
            ys.extend_from_slice(g.serve_simple(&acct("b")).unwrap().noise.values());
        }
        let r = pearson(&xs, &ys);
        assert!(r.abs() < 3.0 / (xs.len() as f64).sqrt(), "r = {r}");
    }

    #[test]
    fn first_queries_in_a_bucket_are_coupled() {
        let g = conditional(1.0, None);
        let q = [7.1, 0.0];
        let a = g.serve_conditional(&acct("A"), &q).unwrap();
        let b = g.serve_conditional(&acct("B"), &[6.9, 0.1]).unwrap();
        assert_eq!(a.bucket, BucketId(7));
        assert_eq!((a.bucket, a.depth, a.seed), (b.bucket, b.depth, b.seed));
        assert!(a.noise.bit_eq(&b.noise));
    }

    #[test]
    fn depth_counts_per_bucket() {
        let g = conditional(1.0, None);
        let a = acct("A");
        let first = g.serve_conditional(&a, &[3.0, 0.0]).unwrap();
        let second = g.serve_conditional(&a, &[3.0, 0.1]).unwrap();
        assert_eq!((first.depth, second.depth), (1, 2));
        assert_ne!(first.seed, second.seed);
        let other = g.serve_conditional(&a, &[9.0, 0.0]).unwrap();
        assert_eq!(other.depth, 1);
        assert_ne!(other.seed, first.seed);
        let ledger = g.ledger(&a).unwrap();
        assert_eq!(ledger.count(3), 2);
        assert_eq!(ledger.count(9), 1);
        assert_eq!(ledger.total_requests(), 3);
        assert!(matches!(
            g.serve_conditional(&a, &[1.0]),
            Err(LadsError::DimensionMismatch { .. })
        ));
        assert_eq!(g.ledger(&a).unwrap().total_requests(), 3);
    }

    #[test]
    fn reset_restarts_depths_and_reproduces_seeds() {
        let g = conditional(1.0, None);
        let run = |g: &Gateway| -> Vec<Seed> {
            [[1.0, 0.0], [1.0, 0.0], [4.0, 0.0]]
                .iter()
                .map(|q| g.serve_conditional(&acct("A"), q).unwrap().seed)
                .collect()
        };
        let first = run(&g);
        assert_eq!(g.stage_id(), 0);
        assert_eq!(g.reset_stage(), 1);
        let second = run(&g);
        assert_eq!(first, second);
        assert_eq!(g.reset_stage(), 2);
        assert_eq!(g.serve_conditional(&acct("Z"), &[5.0, 0.0]).unwrap().depth, 1);
    }

    #[test]
    fn stage_cap_is_enforced() {
        let g = conditional(1.0, Some(2));
        let a = acct("A");
        g.serve_conditional(&a, &[0.0, 0.0]).unwrap();
        g.serve_conditional(&a, &[1.0, 0.0]).unwrap();
        assert!(matches!(
            g.serve_conditional(&a, &[1.0, 0.0]),
            Err(LadsError::QuotaExceeded { cap: 2, .. })
        ));
        assert!(g.serve_conditional(&acct("B"), &[1.0, 0.0]).is_ok());
        g.reset_stage();
        assert!(g.serve_conditional(&a, &[1.0, 0.0]).is_ok());
    }

    #[test]
    fn concurrent_requests_keep_exact_counts() {
        let g = Arc::new(conditional(0.5, None));
        let threads: Vec<_> = (0..4)
            .map(|t| {
                let g = Arc::clone(&g);
                std::thread::spawn(move || {
                    let shared = acct("shared");
                    let own = acct(&format!("own{t}"));
                    let mut depths = Vec::new();
                    for i in 0..200 {
                        depths.push(g.serve_conditional(&shared, &[2.0, 0.0]).unwrap().depth);
                        g.serve_conditional(&own, &[(i % 3) as f64, 0.0]).unwrap();
                    }
                    depths
                })
            })
            .collect();
        let mut all: Vec<u64> = threads.into_iter().flat_map(|h| h.join().unwrap()).collect();
        all.sort_unstable();
        assert_eq!(all, (1..=800).collect::<Vec<_>>());
        assert_eq!(g.ledger(&acct("own0")).unwrap().total_requests(), 200);
    }
}
