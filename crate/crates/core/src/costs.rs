//! Primitive cost table and the per-message computation model.
//!
//! Simulated computation time is `Σ count_op × cost_op` over the operations a
//! receiver performed, divided by the messages it processed. Costs either come
//! from [`CostTable::nominal`] (fixed, so reports are reproducible) or from
//! [`benchmark`] on the host.

use std::collections::BTreeMap;
use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{gmac, hkdf, sha256, sign, verify, SigningKeyPair, TrustedAuthority, Validity};
use crate::revocation::{RevocationFilter, RevocationId};
use crate::verifier::OpCounts;

pub const SIGN: &str = "sign";
pub const SIG_VERIFY: &str = "sig_verify";
pub const CERT_VERIFY: &str = "cert_verify";
pub const GMAC: &str = "gmac";
pub const HASH: &str = "hash";
pub const HKDF: &str = "hkdf";
pub const BLOOM_QUERY: &str = "bloom_query";
pub const BLOOM_QUERY_SMALL: &str = "bloom_query_n1e3";
pub const BLOOM_QUERY_LARGE: &str = "bloom_query_n1e6";

/// Entries the computation model needs.
pub const MODEL_ENTRIES: [&str; 6] = [SIG_VERIFY, CERT_VERIFY, GMAC, HASH, HKDF, BLOOM_QUERY];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("cost table has no entry for `{0}`")]
    MissingEntry(String),
    #[error("cost table: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveCost {
    pub median_us: f64,
    pub p95_us: f64,
    pub iterations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    /// `nominal` or `measured`.
    pub source: String,
    pub entries: BTreeMap<String, PrimitiveCost>,
}

impl CostTable {
    /// Fixed costs in microseconds, roughly a desktop core.
    pub fn nominal() -> Self {
        let fixed = |us: f64| PrimitiveCost {
            median_us: us,
            p95_us: us,
            iterations: 0,
        };
        let entries = [
            (SIGN, 25.0),
            (SIG_VERIFY, 90.0),
            (CERT_VERIFY, 90.0),
            (GMAC, 0.8),
            (HASH, 0.3),
            (HKDF, 1.6),
            (BLOOM_QUERY, 0.4),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), fixed(v)))
        .collect();
        CostTable {
            source: "nominal".into(),
            entries,
        }
    }

    pub fn median_us(&self, name: &str) -> Result<f64, CostError> {
        self.entries
            .get(name)
            .map(|c| c.median_us)
            .ok_or_else(|| CostError::MissingEntry(name.to_string()))
    }

    /// Checks every entry the computation model uses is present.
    pub fn validate(&self) -> Result<(), CostError> {
        for name in MODEL_ENTRIES {
            self.median_us(name)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, CostError> {
        let table: CostTable = serde_json::from_str(text).map_err(|e| CostError::Parse(e.to_string()))?;
        table.validate()?;
        Ok(table)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost table serializes")
    }
}

/// Total modeled time in microseconds for `ops`.
pub fn total_us(ops: &OpCounts, costs: &CostTable) -> Result<f64, CostError> {
    Ok(ops.sig_verify as f64 * costs.median_us(SIG_VERIFY)?
        + ops.cert_verify as f64 * costs.median_us(CERT_VERIFY)?
        + ops.gmac as f64 * costs.median_us(GMAC)?
        + ops.hash as f64 * costs.median_us(HASH)?
        + ops.hkdf as f64 * costs.median_us(HKDF)?
        + ops.bloom_query as f64 * costs.median_us(BLOOM_QUERY)?)
}

/// Average modeled computation per message in milliseconds.
pub fn computation_model(costs: &CostTable, ops: &OpCounts, messages: u64) -> Result<f64, CostError> {
    if messages == 0 {
        costs.validate()?;
        return Ok(0.0);
    }
    Ok(total_us(ops, costs)? / messages as f64 / 1000.0)
}

fn summarize(mut samples: Vec<f64>, iterations: u64) -> PrimitiveCost {
    samples.sort_by(|a, b| a.total_cmp(b));
    let at = |q: f64| samples[((samples.len() - 1) as f64 * q).round() as usize];
    PrimitiveCost {
        median_us: at(0.5),
        p95_us: at(0.95),
        iterations,
    }
}

/// Times `op` in batches of `batch` calls; each sample is the per-call mean
/// of one batch.
fn time_op(iters: u64, batch: u64, mut op: impl FnMut(u64)) -> PrimitiveCost {
    let batches = (iters / batch).max(1);
    let mut samples = Vec::with_capacity(batches as usize);
    let mut i = 0u64;
    for _ in 0..batches {
        let start = Instant::now();
        for _ in 0..batch {
            op(i);
            i += 1;
        }
        samples.push(start.elapsed().as_secs_f64() * 1e6 / batch as f64);
    }
    summarize(samples, batches * batch)
}

/// Measures every primitive the model uses on this host. Signature
/// operations run `iters / 10` times (at least 100) because they are slow.
pub fn benchmark(iters: u64) -> CostTable {
    let iters = iters.max(100);
    let slow = (iters / 10).max(100);
    let keys = SigningKeyPair::from_seed(1);
    let msg = [0x5au8; 32];
    let sig = sign(&keys, &msg);
    let ta = TrustedAuthority::from_seed(2);
    let cert = ta.certify(keys.public(), keys.public(), Validity::new(0, 1 << 30).expect("valid"));
    let payload = [7u8; 300];
    let aad = [1u8; 26];
    let key = [3u8; 16];
    let iv = [4u8; 12];

    let mut entries = BTreeMap::new();
    entries.insert(
        SIGN.to_string(),
        time_op(slow, 1, |i| {
            black_box(sign(&keys, &i.to_be_bytes()));
        }),
    );
    entries.insert(
        SIG_VERIFY.to_string(),
        time_op(slow, 1, |_| {
            black_box(verify(keys.public(), black_box(&msg), &sig));
        }),
    );
    entries.insert(
        CERT_VERIFY.to_string(),
        time_op(slow, 1, |_| {
            black_box(cert.verify(ta.public()));
        }),
    );
    entries.insert(
        GMAC.to_string(),
        time_op(iters, 16, |_| {
            black_box(gmac(&key, &iv, black_box(&aad), black_box(&payload)).expect("valid sizes"));
        }),
    );
    entries.insert(
        HASH.to_string(),
        time_op(iters, 16, |i| {
            black_box(sha256(&[&key, &i.to_be_bytes()]));
        }),
    );
    entries.insert(
        HKDF.to_string(),
        time_op(iters, 16, |i| {
            black_box(hkdf(&key, &i.to_be_bytes()));
        }),
    );
    let (small, large) = bloom_query_costs(iters);
    entries.insert(BLOOM_QUERY.to_string(), small);
    entries.insert(BLOOM_QUERY_SMALL.to_string(), small);
    entries.insert(BLOOM_QUERY_LARGE.to_string(), large);
    CostTable {
        source: "measured".into(),
        entries,
    }
}

/// Query cost at n = 10³ and n = 10⁶ (p = 0.001), with random non-member ids.
pub fn bloom_query_costs(iters: u64) -> (PrimitiveCost, PrimitiveCost) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let probes: Vec<RevocationId> = (0..4096).map(|_| RevocationId(rng.gen())).collect();
    let mut run = |n: u64| {
        let mut f = RevocationFilter::new(n, 0.001).expect("valid parameters");
        for _ in 0..n {
            f.insert(&RevocationId(rng.gen()));
        }
        time_op(iters, 16, |i| {
            black_box(f.contains(&probes[(i % 4096) as usize]));
        })
    };
    (run(1_000), run(1_000_000))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nominal_table_is_complete() {
        CostTable::nominal().validate().unwrap();
    }

    #[test]
    fn missing_entry_is_reported() {
        let mut t = CostTable::nominal();
        t.entries.remove(GMAC);
        assert_eq!(t.validate(), Err(CostError::MissingEntry("gmac".into())));
        let ops = OpCounts {
            gmac: 1,
            ..OpCounts::default()
        };
        assert!(computation_model(&t, &ops, 1).is_err());
    }

    #[test]
    fn mac_only_mix_costs_one_mac() {
        let t = CostTable::nominal();
        let ops = OpCounts {
            gmac: 1000,
            ..OpCounts::default()
        };
        let ms = computation_model(&t, &ops, 1000).unwrap();
        assert!((ms * 1000.0 - t.median_us(GMAC).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn signature_only_mix_costs_full_path() {
        let t = CostTable::nominal();
        let ops = OpCounts {
            sig_verify: 10,
            cert_verify: 10,
            ..OpCounts::default()
        };
        let expect = t.median_us(SIG_VERIFY).unwrap() + t.median_us(CERT_VERIFY).unwrap();
        assert!((computation_model(&t, &ops, 10).unwrap() * 1000.0 - expect).abs() < 1e-9);
    }

    #[test]
    fn json_round_trip() {
        let t = CostTable::nominal();
        assert_eq!(CostTable::from_json(&t.to_json()).unwrap(), t);
        assert!(matches!(CostTable::from_json("{"), Err(CostError::Parse(_))));
    }

    #[test]
    fn quick_benchmark_has_every_entry() {
        let t = benchmark(200);
        t.validate().unwrap();
        assert!(t.entries.values().all(|c| c.median_us > 0.0 && c.p95_us >= c.median_us));
    }
}
