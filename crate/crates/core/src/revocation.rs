//! Bloom-filter revocation list.
//!
//! Revoked pseudonyms are identified by `rid = Trunc128(H(pk_V ‖ σ))` where σ
//! is the per-epoch salt carried in anchors. The filter is sized with the
//! classic optimum `m = -n ln p / (ln 2)^2`, `k = (m / n) ln 2`, and its k
//! probe positions come from double hashing over SHA-256(rid).
//!
//! Serialized layout (big-endian integers):
//!
//! ```text
//! "SVBF" | version u8 | m u64 | k u8 | n u64 | bits[ceil(m / 8)]
//! ```
//!
//! Bit `j` lives in byte `j / 8` at mask `1 << (j % 8)`.

use thiserror::Error;

use crate::crypto::{sha256, truncate, PublicKey};

pub const FILTER_MAGIC: &[u8; 4] = b"SVBF";
pub const FILTER_VERSION: u8 = 1;
pub const FILTER_HEADER_LEN: usize = 4 + 1 + 8 + 1 + 8;
pub const MAX_HASH_COUNT: u8 = 32;
pub const RID_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("target false-positive rate must lie in (0, 1), got {0}")]
    InvalidFpr(f64),
    #[error("expected entry count must be at least 1")]
    ZeroEntries,
    #[error("filter needs {needed} bytes, only {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("bad filter magic")]
    BadMagic,
    #[error("unsupported filter version {0}")]
    UnsupportedVersion(u8),
    #[error("invalid filter parameters m={m} k={k}")]
    InvalidParams { m: u64, k: u8 },
    #[error("{0} trailing bytes after filter")]
    TrailingBytes(usize),
}

/// 128-bit revocation identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RevocationId(pub [u8; RID_LEN]);

impl RevocationId {
    pub fn from_hex(s: &str) -> Option<Self> {
        let s = s.trim();
        if s.len() != RID_LEN * 2 {
            return None;
        }
        let mut out = [0u8; RID_LEN];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let hexpair = std::str::from_utf8(chunk).ok()?;
            out[i] = u8::from_str_radix(hexpair, 16).ok()?;
        }
        Some(RevocationId(out))
    }

    pub fn to_hex(&self) -> String {
        crate::crypto::hex_str(&self.0)
    }
}

/// `Trunc128(H(pk_V ‖ σ))`.
pub fn derive_rid(pk_v: &PublicKey, sigma: &[u8; 16]) -> RevocationId {
    RevocationId(truncate(&sha256(&[pk_v.as_bytes(), sigma])))
}

/// Optimal `(m, k)` for `n` entries at false-positive rate `p`.
pub fn optimal_params(n: u64, p: f64) -> Result<(u64, u8), FilterError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(FilterError::InvalidFpr(p));
    }
    if n == 0 {
        return Err(FilterError::ZeroEntries);
    }
    let ln2 = std::f64::consts::LN_2;
    let m = (-(n as f64) * p.ln() / (ln2 * ln2)).ceil().max(1.0) as u64;
    let k = ((m as f64 / n as f64) * ln2).round();
    let k = k.clamp(1.0, MAX_HASH_COUNT as f64) as u8;
    Ok((m, k))
}

#[derive(Debug, Clone)]
pub struct RevocationFilter {
    bit_count: u64,
    hash_count: u8,
    entry_count: u64,
    /// Only known for filters built locally; not part of the wire format.
    target_fpr: Option<f64>,
    bits: Vec<u8>,
}

impl PartialEq for RevocationFilter {
    fn eq(&self, other: &Self) -> bool {
        self.bit_count == other.bit_count
            && self.hash_count == other.hash_count
            && self.entry_count == other.entry_count
            && self.bits == other.bits
    }
}

impl Eq for RevocationFilter {}

impl RevocationFilter {
    /// Empty filter sized for `expected` entries at rate `p`.
    pub fn new(expected: u64, p: f64) -> Result<Self, FilterError> {
        let (m, k) = optimal_params(expected, p)?;
        let mut f = Self::with_params(m, k)?;
        f.target_fpr = Some(p);
        Ok(f)
    }

    pub fn with_params(bit_count: u64, hash_count: u8) -> Result<Self, FilterError> {
        if bit_count == 0 || hash_count == 0 || hash_count > MAX_HASH_COUNT {
            return Err(FilterError::InvalidParams {
                m: bit_count,
                k: hash_count,
            });
        }
        Ok(RevocationFilter {
            bit_count,
            hash_count,
            entry_count: 0,
            target_fpr: None,
            bits: vec![0; bit_count.div_ceil(8) as usize],
        })
    }

    pub fn bit_count(&self) -> u64 {
        self.bit_count
    }

    pub fn hash_count(&self) -> u8 {
        self.hash_count
    }

    pub fn entry_count(&self) -> u64 {
        self.entry_count
    }

    pub fn target_fpr(&self) -> Option<f64> {
        self.target_fpr
    }

    /// Size of the bit array in bytes.
    pub fn byte_len(&self) -> usize {
        self.bits.len()
    }

    /// Standard estimate `(1 - e^{-kn/m})^k` for the current load.
    pub fn expected_fpr(&self) -> f64 {
        let k = self.hash_count as f64;
        let exponent = -k * self.entry_count as f64 / self.bit_count as f64;
        (1.0 - exponent.exp()).powf(k)
    }

    fn probes(&self, rid: &RevocationId) -> impl Iterator<Item = u64> {
        let h = sha256(&[&rid.0]);
        let h1 = u64::from_be_bytes(h[..8].try_into().expect("8 bytes")) as u128;
        let h2 = u64::from_be_bytes(h[8..16].try_into().expect("8 bytes")) as u128;
        let m = self.bit_count as u128;
        (0..self.hash_count as u128).map(move |i| ((h1 + i * h2) % m) as u64)
    }

    pub fn insert(&mut self, rid: &RevocationId) {
        let positions: Vec<u64> = self.probes(rid).collect();
        for j in positions {
            self.bits[(j / 8) as usize] |= 1 << (j % 8);
        }
        self.entry_count += 1;
    }

    pub fn contains(&self, rid: &RevocationId) -> bool {
        self.probes(rid)
            .all(|j| self.bits[(j / 8) as usize] & (1 << (j % 8)) != 0)
    }

    pub fn encoded_len(&self) -> usize {
        FILTER_HEADER_LEN + self.bits.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.reserve(self.encoded_len());
        out.extend_from_slice(FILTER_MAGIC);
        out.push(FILTER_VERSION);
        out.extend_from_slice(&self.bit_count.to_be_bytes());
        out.push(self.hash_count);
        out.extend_from_slice(&self.entry_count.to_be_bytes());
        out.extend_from_slice(&self.bits);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    /// Decodes a filter that must span the whole buffer.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FilterError> {
        let (filter, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(FilterError::TrailingBytes(bytes.len() - used));
        }
        Ok(filter)
    }

    /// Decodes a filter at the start of `bytes`, returning it and the number
    /// of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize), FilterError> {
        if bytes.len() < FILTER_HEADER_LEN {
            return Err(FilterError::Truncated {
                needed: FILTER_HEADER_LEN,
                available: bytes.len(),
            });
        }
        if &bytes[..4] != FILTER_MAGIC {
            return Err(FilterError::BadMagic);
        }
        if bytes[4] != FILTER_VERSION {
            return Err(FilterError::UnsupportedVersion(bytes[4]));
        }
        let m = u64::from_be_bytes(bytes[5..13].try_into().expect("8 bytes"));
        let k = bytes[13];
        let n = u64::from_be_bytes(bytes[14..22].try_into().expect("8 bytes"));
        if m == 0 || k == 0 || k > MAX_HASH_COUNT {
            return Err(FilterError::InvalidParams { m, k });
        }
        let body = m.div_ceil(8);
        let needed = (FILTER_HEADER_LEN as u64).saturating_add(body);
        if (bytes.len() as u64) < needed {
            return Err(FilterError::Truncated {
                needed: needed.min(usize::MAX as u64) as usize,
                available: bytes.len(),
            });
        }
        let needed = needed as usize;
        Ok((
            RevocationFilter {
                bit_count: m,
                hash_count: k,
                entry_count: n,
                target_fpr: None,
                bits: bytes[FILTER_HEADER_LEN..needed].to_vec(),
            },
            needed,
        ))
    }
}
