//! Epoch/slot key derivation and d-iterated hash commitments.

use thiserror::Error;

use crate::crypto::{hkdf, sha256, truncate, DIGEST_LEN, MAC_KEY_LEN};

pub const COMMITMENT_LEN: usize = 16;

/// Slots disclose their key this many slots later unless configured otherwise.
pub const DEFAULT_DISCLOSURE_DELAY: u8 = 2;

pub type SlotKey = [u8; MAC_KEY_LEN];
pub type Commitment = [u8; COMMITMENT_LEN];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum KeySchedError {
    #[error("hash-chain depth must be at least 1")]
    ZeroDepth,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct EpochKey {
    pub epoch: u32,
    pub domain_id: u32,
    pub key: [u8; MAC_KEY_LEN],
}

impl std::fmt::Debug for EpochKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EpochKey")
            .field("epoch", &self.epoch)
            .field("domain_id", &self.domain_id)
            .finish_non_exhaustive()
    }
}

/// `HKDF(seed, "epoch" ‖ e ‖ domain_id)`.
pub fn derive_epoch_key(seed: &[u8; 32], epoch: u32, domain_id: u32) -> EpochKey {
    let mut info = [0u8; 13];
    info[..5].copy_from_slice(b"epoch");
    info[5..9].copy_from_slice(&epoch.to_be_bytes());
    info[9..].copy_from_slice(&domain_id.to_be_bytes());
    EpochKey {
        epoch,
        domain_id,
        key: hkdf(seed, &info),
    }
}

/// Default slot-key context: `cell_id ‖ domain_id`.
pub fn slot_context(cell_id: u16, domain_id: u32) -> [u8; 6] {
    let mut ctx = [0u8; 6];
    ctx[..2].copy_from_slice(&cell_id.to_be_bytes());
    ctx[2..].copy_from_slice(&domain_id.to_be_bytes());
    ctx
}

/// `HKDF(ek, "slot" ‖ i ‖ context)`.
pub fn derive_slot_key(ek: &EpochKey, slot: u32, context: &[u8]) -> SlotKey {
    let mut info = Vec::with_capacity(8 + context.len());
    info.extend_from_slice(b"slot");
    info.extend_from_slice(&slot.to_be_bytes());
    info.extend_from_slice(context);
    hkdf(&ek.key, &info)
}

/// `Trunc128(H^depth(key))`. Intermediate links keep the full 32-byte digest.
pub fn commit(key: &SlotKey, depth: u8) -> Result<Commitment, KeySchedError> {
    if depth == 0 {
        return Err(KeySchedError::ZeroDepth);
    }
    let mut link: [u8; DIGEST_LEN] = sha256(&[key]);
    for _ in 1..depth {
        link = sha256(&[&link]);
    }
    Ok(truncate(&link))
}

pub fn verify_commitment(key: &SlotKey, commitment: &Commitment, depth: u8) -> bool {
    commit(key, depth).is_ok_and(|c| &c == commitment)
}

/// Key and commitment for one slot.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct SlotKeyMaterial {
    pub slot: u32,
    pub key: SlotKey,
    pub commitment: Commitment,
    pub depth: u8,
}

impl SlotKeyMaterial {
    pub fn derive(ek: &EpochKey, slot: u32, context: &[u8], depth: u8) -> Result<Self, KeySchedError> {
        let key = derive_slot_key(ek, slot, context);
        Ok(SlotKeyMaterial {
            slot,
            key,
            commitment: commit(&key, depth)?,
            depth,
        })
    }
}

impl std::fmt::Debug for SlotKeyMaterial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SlotKeyMaterial")
            .field("slot", &self.slot)
            .field("depth", &self.depth)
            .finish_non_exhaustive()
    }
}
