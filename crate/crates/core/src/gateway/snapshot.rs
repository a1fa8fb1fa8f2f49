//! Binary snapshot format.
//!
//! ```text
//! magic   8 bytes  "LADSSNAP"
//! version u32 LE
//! length  u64 LE   payload bytes
//! sha256  32 bytes of the payload
//! payload          little-endian fields, see `write_payload`
//! ```
//!
//! Floats are stored as raw bits so a restored gateway is bit-identical.

use std::collections::{BTreeMap, HashMap};
use std::io::{Cursor, Read};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use parking_lot::{Mutex, RwLock};
use sha2::{Digest, Sha256};

use super::{AccountId, AccountLedger, Gateway, GatewayMode};
use crate::bucketing::{BucketMode, BucketModel};
use crate::error::{LadsError, Result};
use crate::noise::{MixingCoefficient, Permutation, SeedSpec};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"LADSSNAP";
pub const SNAPSHOT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 32;

fn corrupt(msg: impl Into<String>) -> LadsError {
    LadsError::CorruptSnapshot(msg.into())
}

impl Gateway<SeedSpec> {
    /// Consistent point-in-time image: the write lock excludes in-flight
    /// serves for its whole duration.
    pub fn snapshot(&self) -> Vec<u8> {
        let map = self.ledgers.write();
        let mut payload = Vec::new();
        self.write_payload(&map, &mut payload);
        drop(map);

        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.write_u32::<LE>(SNAPSHOT_VERSION).unwrap();
        out.write_u64::<LE>(payload.len() as u64).unwrap();
        out.extend_from_slice(&Sha256::digest(&payload));
        out.extend_from_slice(&payload);
        out
    }

    fn write_payload(&self, map: &HashMap<AccountId, Arc<Mutex<AccountLedger>>>, out: &mut Vec<u8>) {
        // Vec<u8> writes are infallible
        let w = out;
        w.write_u64::<LE>(self.seed_gen.secret_key).unwrap();
        w.write_u64::<LE>(self.seed_gen.permutation.id()).unwrap();
        w.write_u64::<LE>(self.fresh_key).unwrap();
        w.write_u64::<LE>(self.noise_dim as u64).unwrap();
        w.write_u64::<LE>(self.alpha.value().to_bits()).unwrap();
        match self.stage_cap {
            Some(cap) => {
                w.write_u8(1).unwrap();
                w.write_u64::<LE>(cap).unwrap();
            }
            None => w.write_u8(0).unwrap(),
        }
        w.write_u64::<LE>(self.stage_id.load(Ordering::SeqCst)).unwrap();
        w.write_u64::<LE>(self.fresh_counter.load(Ordering::SeqCst)).unwrap();
        write_mode(&self.mode, w);

        let mut accounts: Vec<_> = map.iter().collect();
        accounts.sort_by(|a, b| a.0.cmp(b.0));
        w.write_u64::<LE>(accounts.len() as u64).unwrap();
        for (id, ledger) in accounts {
            let ledger = ledger.lock();
            write_bytes(id.as_str().as_bytes(), w);
            w.write_u64::<LE>(ledger.total_requests).unwrap();
            w.write_u64::<LE>(ledger.counts.len() as u64).unwrap();
            for (&bucket, &count) in &ledger.counts {
                w.write_u64::<LE>(bucket).unwrap();
                w.write_u64::<LE>(count).unwrap();
            }
        }
    }

    pub fn restore(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..8] != SNAPSHOT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(LadsError::VersionMismatch {
                found: version,
                expected: SNAPSHOT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let payload = &bytes[HEADER_LEN..];
        if payload.len() as u64 != len {
            return Err(corrupt(format!("payload is {} bytes, header says {len}", payload.len())));
        }
        if Sha256::digest(payload).as_slice() != &bytes[20..52] {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Cursor::new(payload);
        let gw = read_payload(&mut r).map_err(|e| match e {
            LadsError::Io(e) => corrupt(e.to_string()),
            other => other,
        })?;
        if r.position() != len {
            return Err(corrupt("trailing bytes after payload"));
        }
        Ok(gw)
    }
}

fn read_payload(r: &mut Cursor<&[u8]>) -> Result<Gateway<SeedSpec>> {
    let secret_key = r.read_u64::<LE>()?;
    let permutation = Permutation::from_id(r.read_u64::<LE>()?)?;
    let fresh_key = r.read_u64::<LE>()?;
    let noise_dim = to_usize(r.read_u64::<LE>()?)?;
    let alpha = MixingCoefficient::new(f64::from_bits(r.read_u64::<LE>()?))?;
    let stage_cap = match r.read_u8()? {
        0 => None,
        1 => Some(r.read_u64::<LE>()?),
        t => return Err(corrupt(format!("bad stage-cap tag {t}"))),
    };
    let stage_id = r.read_u64::<LE>()?;
    let fresh_counter = r.read_u64::<LE>()?;
    let mode = read_mode(r)?;

    let n_accounts = r.read_u64::<LE>()?;
    let mut ledgers = HashMap::new();
    for _ in 0..n_accounts {
        let id = String::from_utf8(read_bytes(r)?).map_err(|_| corrupt("account id is not UTF-8"))?;
        let id = AccountId::new(id)?;
        let total = r.read_u64::<LE>()?;
        let n = r.read_u64::<LE>()?;
        let mut counts = BTreeMap::new();
        for _ in 0..n {
            let bucket = r.read_u64::<LE>()?;
            counts.insert(bucket, r.read_u64::<LE>()?);
        }
        if counts.values().sum::<u64>() != total {
            return Err(corrupt(format!("ledger of {id} does not sum to its total")));
        }
        let ledger = AccountLedger::from_parts(counts, total);
        if ledgers.insert(id, Arc::new(Mutex::new(ledger))).is_some() {
            return Err(corrupt("duplicate account"));
        }
    }

    if noise_dim == 0 {
        return Err(corrupt("zero noise dimension"));
    }
    Ok(Gateway {
        mode,
        seed_gen: SeedSpec {
            secret_key,
            permutation,
        },
        fresh_key,
        noise_dim,
        alpha,
        stage_cap,
        ledgers: RwLock::new(ledgers),
        stage_id: AtomicU64::new(stage_id),
        fresh_counter: AtomicU64::new(fresh_counter),
    })
}

fn write_mode(mode: &GatewayMode, w: &mut Vec<u8>) {
    let model = match mode {
        GatewayMode::Simple => {
            w.write_u8(0).unwrap();
            return;
        }
        GatewayMode::Conditional(m) => m,
    };
    w.write_u8(1).unwrap();
    w.write_u8(match model.mode() {
        BucketMode::NearestCenter => 0,
        BucketMode::Lsh => 1,
    })
    .unwrap();
    w.write_u64::<LE>(model.dim() as u64).unwrap();
    w.write_u64::<LE>(model.radius().to_bits()).unwrap();
    w.write_u32::<LE>(model.lsh_bits()).unwrap();
    w.write_u64::<LE>(model.seed()).unwrap();
    w.write_u64::<LE>(model.centers().len() as u64).unwrap();
    for c in model.centers() {
        for v in c {
            w.write_u64::<LE>(v.to_bits()).unwrap();
        }
    }
}

fn read_mode(r: &mut Cursor<&[u8]>) -> Result<GatewayMode> {
    match r.read_u8()? {
        0 => return Ok(GatewayMode::Simple),
        1 => {}
        t => return Err(corrupt(format!("bad mode tag {t}"))),
    }
    let kind = r.read_u8()?;
    let dim = to_usize(r.read_u64::<LE>()?)?;
    let radius = f64::from_bits(r.read_u64::<LE>()?);
    let bits = r.read_u32::<LE>()?;
    let seed = r.read_u64::<LE>()?;
    let n = to_usize(r.read_u64::<LE>()?)?;
    let remaining = r.get_ref().len() as u64 - r.position();
    if (n as u64).saturating_mul(dim as u64).saturating_mul(8) > remaining {
        return Err(corrupt("center table runs past the payload"));
    }
    let mut centers = Vec::with_capacity(n);
    for _ in 0..n {
        let mut c = Vec::with_capacity(dim);
        for _ in 0..dim {
            c.push(f64::from_bits(r.read_u64::<LE>()?));
        }
        centers.push(c);
    }
    let model = match kind {
        0 => BucketModel::nearest_center(centers, radius)?,
        1 => BucketModel::lsh(dim, bits, seed, centers, radius)?,
        t => return Err(corrupt(format!("bad bucket-mode tag {t}"))),
    };
    Ok(GatewayMode::Conditional(model))
}

fn write_bytes(b: &[u8], w: &mut Vec<u8>) {
    w.write_u32::<LE>(b.len() as u32).unwrap();
    w.extend_from_slice(b);
}

fn read_bytes(r: &mut Cursor<&[u8]>) -> Result<Vec<u8>> {
    let n = r.read_u32::<LE>()? as usize;
    let remaining = (r.get_ref().len() as u64 - r.position()) as usize;
    if n > remaining {
        return Err(corrupt("string runs past the payload"));
    }
    let mut buf = vec![0; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn to_usize(v: u64) -> Result<usize> {
    usize::try_from(v).map_err(|_| corrupt(format!("{v} does not fit in usize")))
}

#[cfg(test)]
mod tests {
    use super::super::{GatewayConfig, ServeOutcome};
    use super::*;

    fn gateway(alpha: f64, conditional: bool) -> Gateway {
        let mode = if conditional {
            let centers = (0..5).map(|j| vec![j as f64, 1.0, -0.5]).collect();
            GatewayMode::Conditional(BucketModel::nearest_center(centers, 0.3).unwrap())
        } else {
            GatewayMode::Simple
        };
        Gateway::new(GatewayConfig {
            mode,
            seed_gen: SeedSpec::keyed(77),
            fresh_key: 99,
            noise_dim: 6,
            alpha: MixingCoefficient::new(alpha).unwrap(),
            stage_cap: Some(1000),
        })
        .unwrap()
    }

    fn drive(g: &Gateway, n: usize) -> Vec<ServeOutcome> {
        (0..n)
            .map(|i| {
                let a = AccountId::new(format!("acct-{}", i % 3)).unwrap();
                match g.mode() {
                    GatewayMode::Simple => g.serve_simple(&a).unwrap(),
                    GatewayMode::Conditional(_) => {
                        g.serve_conditional(&a, &[(i % 5) as f64 + 0.01 * i as f64, 1.0, -0.5]).unwrap()
                    }
                }
            })
            .collect()
    }

    #[test]
    fn restore_then_serve_matches_uninterrupted() {
        for (alpha, conditional) in [(1.0, true), (0.7, true), (0.0, false), (0.9, false)] {
            let live = gateway(alpha, conditional);
            drive(&live, 20);
            live.reset_stage();
            drive(&live, 11);
            let restored = Gateway::restore(&live.snapshot()).unwrap();
            assert_eq!(restored.stage_id(), live.stage_id());
            let a = drive(&live, 15);
            let b = drive(&restored, 15);
            for (x, y) in a.iter().zip(&b) {
                assert_eq!((x.bucket, x.depth, x.seed), (y.bucket, y.depth, y.seed));
                assert!(x.noise.bit_eq(&y.noise));
            }
        }
    }

    #[test]
    fn empty_gateway_round_trips() {
        let g = gateway(1.0, true);
        let bytes = g.snapshot();
        let r = Gateway::restore(&bytes).unwrap();
        assert_eq!(r.account_count(), 0);
        assert_eq!(r.snapshot(), bytes);
    }

    #[test]
    fn truncation_and_tampering_are_detected() {
        let g = gateway(1.0, true);
        drive(&g, 7);
        let bytes = g.snapshot();
        for cut in [0, 10, HEADER_LEN, bytes.len() - 1] {
            assert!(matches!(
                Gateway::restore(&bytes[..cut]),
                Err(LadsError::CorruptSnapshot(_))
            ));
        }
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(Gateway::restore(&flipped), Err(LadsError::CorruptSnapshot(_))));

        let mut future = bytes.clone();
        future[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Gateway::restore(&future),
            Err(LadsError::VersionMismatch { found: 2, expected: 1 })
        ));
    }
}
