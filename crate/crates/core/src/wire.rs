//! Byte layouts for the four protocol frames.
//!
//! Every integer is fixed-width big-endian. Frame layouts:
//!
//! ```text
//! DATA   0x01 | meta(26) | c_i(16) | iv(12) | tag(12) | len u16 | payload
//! BOOT   0x02 | epoch u32 | slot u32 | L(32) | cert(146) | sig(64)
//! REVEAL 0x03 | epoch u32 | oldest_slot u32 | w u8 | w x key(16) | vrf_len u16 | vrf
//! ANCHOR 0x04 | timestamp u64 | epoch u32 | T_s u16 | d u8 | drift u16 | sigma(16)
//!             | policy u8 | valid_from u64 | valid_to u64 | filter | cert(146) | sig(64)
//!
//! meta = epoch u32 | slot u32 | cell_id u16 | counter u32 | psid u32 | est(8)
//! ```
//!
//! The anchor signature covers every byte before it.

use std::sync::Arc;

use thiserror::Error;

use crate::crypto::{
    sha256, truncate, MacTag, PseudonymCert, PublicKey, Signature, CERT_LEN, DIGEST_LEN, IV_LEN, MAC_KEY_LEN,
    MAC_TAG_LEN, SIGNATURE_LEN,
};
use crate::keysched::{Commitment, SlotKey, COMMITMENT_LEN};
use crate::revocation::{FilterError, RevocationFilter};

pub const TYPE_DATA: u8 = 0x01;
pub const TYPE_BOOT: u8 = 0x02;
pub const TYPE_REVEAL: u8 = 0x03;
pub const TYPE_ANCHOR: u8 = 0x04;

pub const META_LEN: usize = 4 + 4 + 2 + 4 + 4 + 8;
pub const EST_LEN: usize = 8;
/// Everything in a DATA frame except the payload bytes.
pub const DATA_OVERHEAD: usize = 1 + META_LEN + COMMITMENT_LEN + IV_LEN + MAC_TAG_LEN + 2;
pub const BOOT_LEN: usize = 1 + 4 + 4 + DIGEST_LEN + CERT_LEN + SIGNATURE_LEN;
pub const MAX_REVEAL_KEYS: u8 = 8;

pub type Est = [u8; EST_LEN];
pub type Iv = [u8; IV_LEN];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WireError {
    #[error("buffer truncated: {needed} more bytes needed at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("unknown frame type 0x{0:02x}")]
    UnknownFrameType(u8),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: &'static str },
    #[error("embedded revocation filter: {0}")]
    Filter(#[from] FilterError),
}

/// Replay-relevant metadata authenticated as GMAC AAD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Meta {
    pub epoch: u32,
    pub slot: u32,
    pub cell_id: u16,
    pub counter: u32,
    pub psid: u32,
    pub est: Est,
}

impl Meta {
    pub fn to_bytes(&self) -> [u8; META_LEN] {
        let mut out = [0u8; META_LEN];
        out[0..4].copy_from_slice(&self.epoch.to_be_bytes());
        out[4..8].copy_from_slice(&self.slot.to_be_bytes());
        out[8..10].copy_from_slice(&self.cell_id.to_be_bytes());
        out[10..14].copy_from_slice(&self.counter.to_be_bytes());
        out[14..18].copy_from_slice(&self.psid.to_be_bytes());
        out[18..26].copy_from_slice(&self.est);
        out
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Meta {
            epoch: r.u32()?,
            slot: r.u32()?,
            cell_id: r.u16()?,
            counter: r.u32()?,
            psid: r.u32()?,
            est: r.array()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataFrame {
    pub meta: Meta,
    pub commitment: Commitment,
    pub iv: Iv,
    pub tag: MacTag,
    pub payload: Vec<u8>,
}

impl DataFrame {
    pub fn encoded_len(&self) -> usize {
        DATA_OVERHEAD + self.payload.len()
    }

    /// `L = H(payload ‖ c_i ‖ tag ‖ IV)`, the digest a BOOT signs.
    pub fn boot_digest(&self) -> [u8; DIGEST_LEN] {
        sha256(&[&self.payload, &self.commitment, &self.tag.0, &self.iv])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootFrame {
    pub epoch: u32,
    pub slot: u32,
    pub digest: [u8; DIGEST_LEN],
    pub cert: PseudonymCert,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevealFrame {
    pub epoch: u32,
    pub oldest_slot: u32,
    /// Keys for `oldest_slot ..= oldest_slot + keys.len() - 1`.
    pub keys: Vec<SlotKey>,
    pub vrf_blob: Vec<u8>,
}

impl RevealFrame {
    pub fn slot_keys(&self) -> impl Iterator<Item = (u32, &SlotKey)> {
        self.keys
            .iter()
            .enumerate()
            .map(move |(i, k)| (self.oldest_slot.wrapping_add(i as u32), k))
    }

    pub fn encoded_len(&self) -> usize {
        1 + 4 + 4 + 1 + MAC_KEY_LEN * self.keys.len() + 2 + self.vrf_blob.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Normal,
    /// Frames from pseudonyms without an observed valid BOOT are never
    /// finally accepted.
    Strict,
}

impl Policy {
    pub fn to_byte(self) -> u8 {
        match self {
            Policy::Normal => 0,
            Policy::Strict => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Policy::Normal),
            1 => Some(Policy::Strict),
            _ => None,
        }
    }
}

/// Anchor validity in microseconds, half-open `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorValidity {
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorFrame {
    /// Microseconds.
    pub timestamp: u64,
    pub epoch: u32,
    pub slot_len_ms: u16,
    pub disclosure_delay: u8,
    pub drift_bound_ms: u16,
    pub sigma: [u8; 16],
    pub policy: Policy,
    pub validity: AnchorValidity,
    pub filter: Arc<RevocationFilter>,
    pub rsu_cert: PseudonymCert,
    pub rsu_signature: Signature,
}

impl AnchorFrame {
    /// Every encoded byte before the RSU signature.
    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(TYPE_ANCHOR);
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        out.extend_from_slice(&self.epoch.to_be_bytes());
        out.extend_from_slice(&self.slot_len_ms.to_be_bytes());
        out.push(self.disclosure_delay);
        out.extend_from_slice(&self.drift_bound_ms.to_be_bytes());
        out.extend_from_slice(&self.sigma);
        out.push(self.policy.to_byte());
        out.extend_from_slice(&self.validity.start.to_be_bytes());
        out.extend_from_slice(&self.validity.end.to_be_bytes());
        self.filter.encode_into(&mut out);
        out.extend_from_slice(&self.rsu_cert.to_bytes());
        out
    }

    pub fn encoded_len(&self) -> usize {
        1 + 8 + 4 + 2 + 1 + 2 + 16 + 1 + 16 + self.filter.encoded_len() + CERT_LEN + SIGNATURE_LEN
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Data(DataFrame),
    Boot(BootFrame),
    Reveal(RevealFrame),
    Anchor(AnchorFrame),
}

impl Frame {
    pub fn frame_type(&self) -> u8 {
        match self {
            Frame::Data(_) => TYPE_DATA,
            Frame::Boot(_) => TYPE_BOOT,
            Frame::Reveal(_) => TYPE_REVEAL,
            Frame::Anchor(_) => TYPE_ANCHOR,
        }
    }

    pub fn encoded_len(&self) -> usize {
        match self {
            Frame::Data(f) => f.encoded_len(),
            Frame::Boot(_) => BOOT_LEN,
            Frame::Reveal(f) => f.encoded_len(),
            Frame::Anchor(f) => f.encoded_len(),
        }
    }
}

pub fn encode(frame: &Frame) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(frame.encoded_len());
    match frame {
        Frame::Data(f) => {
            let len = u16::try_from(f.payload.len()).map_err(|_| WireError::InvalidField {
                field: "payload",
                reason: "longer than 65535 bytes",
            })?;
            out.push(TYPE_DATA);
            out.extend_from_slice(&f.meta.to_bytes());
            out.extend_from_slice(&f.commitment);
            out.extend_from_slice(&f.iv);
            out.extend_from_slice(&f.tag.0);
            out.extend_from_slice(&len.to_be_bytes());
            out.extend_from_slice(&f.payload);
        }
        Frame::Boot(f) => {
            out.push(TYPE_BOOT);
            out.extend_from_slice(&f.epoch.to_be_bytes());
            out.extend_from_slice(&f.slot.to_be_bytes());
            out.extend_from_slice(&f.digest);
            out.extend_from_slice(&f.cert.to_bytes());
            out.extend_from_slice(&f.signature.0);
        }
        Frame::Reveal(f) => {
            if f.keys.is_empty() || f.keys.len() > MAX_REVEAL_KEYS as usize {
                return Err(WireError::InvalidField {
                    field: "key_count",
                    reason: "must be between 1 and 8",
                });
            }
            let vrf_len = u16::try_from(f.vrf_blob.len()).map_err(|_| WireError::InvalidField {
                field: "vrf_blob",
                reason: "longer than 65535 bytes",
            })?;
            out.push(TYPE_REVEAL);
            out.extend_from_slice(&f.epoch.to_be_bytes());
            out.extend_from_slice(&f.oldest_slot.to_be_bytes());
            out.push(f.keys.len() as u8);
            for k in &f.keys {
                out.extend_from_slice(k);
            }
            out.extend_from_slice(&vrf_len.to_be_bytes());
            out.extend_from_slice(&f.vrf_blob);
        }
        Frame::Anchor(f) => {
            out = f.signed_bytes();
            out.extend_from_slice(&f.rsu_signature.0);
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Frame, WireError> {
    let mut r = Reader::new(bytes);
    let frame = match r.u8()? {
        TYPE_DATA => {
            let meta = Meta::read(&mut r)?;
            let commitment = r.array()?;
            let iv = r.array()?;
            let tag = MacTag(r.array()?);
            let len = r.u16()? as usize;
            let payload = r.take(len)?.to_vec();
            Frame::Data(DataFrame {
                meta,
                commitment,
                iv,
                tag,
                payload,
            })
        }
        TYPE_BOOT => Frame::Boot(BootFrame {
            epoch: r.u32()?,
            slot: r.u32()?,
            digest: r.array()?,
            cert: r.cert()?,
            signature: Signature(r.array()?),
        }),
        TYPE_REVEAL => {
            let epoch = r.u32()?;
            let oldest_slot = r.u32()?;
            let count = r.u8()?;
            if count == 0 || count > MAX_REVEAL_KEYS {
                return Err(WireError::InvalidField {
                    field: "key_count",
                    reason: "must be between 1 and 8",
                });
            }
            let keys = (0..count).map(|_| r.array()).collect::<Result<Vec<_>, _>>()?;
            let vrf_len = r.u16()? as usize;
            let vrf_blob = r.take(vrf_len)?.to_vec();
            Frame::Reveal(RevealFrame {
                epoch,
                oldest_slot,
                keys,
                vrf_blob,
            })
        }
        TYPE_ANCHOR => {
            let timestamp = r.u64()?;
            let epoch = r.u32()?;
            let slot_len_ms = r.u16()?;
            let disclosure_delay = r.u8()?;
            let drift_bound_ms = r.u16()?;
            let sigma = r.array()?;
            let policy = Policy::from_byte(r.u8()?).ok_or(WireError::InvalidField {
                field: "policy",
                reason: "must be 0 (normal) or 1 (strict)",
            })?;
            let validity = AnchorValidity {
                start: r.u64()?,
                end: r.u64()?,
            };
            let (filter, used) = RevocationFilter::decode_prefix(r.rest())?;
            r.take(used)?;
            Frame::Anchor(AnchorFrame {
                timestamp,
                epoch,
                slot_len_ms,
                disclosure_delay,
                drift_bound_ms,
                sigma,
                policy,
                validity,
                filter: Arc::new(filter),
                rsu_cert: r.cert()?,
                rsu_signature: Signature(r.array()?),
            })
        }
        other => return Err(WireError::UnknownFrameType(other)),
    };
    if r.remaining() != 0 {
        return Err(WireError::TrailingBytes(r.remaining()));
    }
    Ok(frame)
}

/// `Trunc96(H(e ‖ i ‖ counter ‖ est))`.
pub fn compute_iv(epoch: u32, slot: u32, counter: u32, est: &Est) -> Iv {
    truncate(&sha256(&[
        &epoch.to_be_bytes(),
        &slot.to_be_bytes(),
        &counter.to_be_bytes(),
        est,
    ]))
}

/// Ephemeral session tag `Trunc64(H(pk_V ‖ σ ‖ e))`.
pub fn compute_est(pk_v: &PublicKey, sigma: &[u8; 16], epoch: u32) -> Est {
    truncate(&sha256(&[pk_v.as_bytes(), sigma, &epoch.to_be_bytes()]))
}

/// Pseudonym hint `Trunc32(H(Cert_P))`.
pub fn compute_psid(cert: &PseudonymCert) -> u32 {
    u32::from_be_bytes(truncate(&cert.digest()))
}

/// Bounds-checked cursor used by the frame decoders.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub(crate) fn cert(&mut self) -> Result<PseudonymCert, WireError> {
        PseudonymCert::from_bytes(self.take(CERT_LEN)?).map_err(|_| WireError::InvalidField {
            field: "cert",
            reason: "malformed certificate",
        })
    }
}
