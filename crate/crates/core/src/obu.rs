//! Sender side: per-slot MAC keys, DATA frames with per-slot counters,
//! periodic BOOT signatures and delayed REVEAL of used slot keys.

use std::collections::{BTreeSet, VecDeque};

use thiserror::Error;

use crate::crypto::{gmac, sign, CryptoError, Pseudonym};
use crate::keysched::{
    derive_epoch_key, slot_context, EpochKey, KeySchedError, SlotKeyMaterial, DEFAULT_DISCLOSURE_DELAY,
};
use crate::wire::{
    compute_est, compute_iv, compute_psid, BootFrame, DataFrame, Est, Frame, Meta, RevealFrame, MAX_REVEAL_KEYS,
};

pub const MAX_PAYLOAD: usize = 2048;
pub const DEFAULT_BOOT_PERIOD: u32 = 10;
pub const DEFAULT_REVEAL_WINDOW: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SenderError {
    #[error("slot {requested} does not advance past current slot {current}")]
    NonMonotonicSlot { current: u32, requested: u32 },
    #[error("no slot has started yet")]
    NoSlot,
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    PayloadTooLarge(usize),
    #[error("pseudonym batch exhausted")]
    PseudonymsExhausted,
    #[error("invalid sender configuration: {0}")]
    Config(&'static str),
    #[error(transparent)]
    KeySched(#[from] KeySchedError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SenderConfig {
    pub domain_id: u32,
    pub cell_id: u16,
    /// A BOOT accompanies every `boot_period`-th message.
    pub boot_period: u32,
    pub disclosure_delay: u8,
    pub reveal_window: u8,
}

impl Default for SenderConfig {
    fn default() -> Self {
        SenderConfig {
            domain_id: 0,
            cell_id: 0,
            boot_period: DEFAULT_BOOT_PERIOD,
            disclosure_delay: DEFAULT_DISCLOSURE_DELAY,
            reveal_window: DEFAULT_REVEAL_WINDOW,
        }
    }
}

impl SenderConfig {
    pub fn validate(&self) -> Result<(), SenderError> {
        if self.boot_period == 0 {
            return Err(SenderError::Config("boot_period must be positive"));
        }
        if self.disclosure_delay == 0 {
            return Err(SenderError::Config("disclosure_delay must be positive"));
        }
        if self.reveal_window == 0 || self.reveal_window > MAX_REVEAL_KEYS {
            return Err(SenderError::Config("reveal_window must be in 1..=8"));
        }
        Ok(())
    }
}

/// Tracks which used slot keys still await disclosure.
///
/// Keys become due `delay` slots after their slot.
#[derive(Debug, Clone)]
pub(crate) struct DisclosureQueue {
    delay: u8,
    window: u8,
    /// Slots with traffic whose keys are not yet due, oldest first.
    pending: VecDeque<u32>,
    /// Due but not yet revealed.
    due: BTreeSet<u32>,
}

impl DisclosureQueue {
    pub(crate) fn new(delay: u8, window: u8) -> Self {
        DisclosureQueue {
            delay,
            window,
            pending: VecDeque::new(),
            due: BTreeSet::new(),
        }
    }

    pub(crate) fn mark_used(&mut self, slot: u32) {
        if self.pending.back() != Some(&slot) {
            self.pending.push_back(slot);
        }
    }

    pub(crate) fn advance(&mut self, current: u32) {
        while let Some(&s) = self.pending.front() {
            if s.saturating_add(self.delay as u32) > current {
                break;
            }
            self.due.insert(s);
            self.pending.pop_front();
        }
    }

    /// Consecutive slot range to disclose now: the newest due slot and the
    /// `window - 1` slots before it. Due slots older than that are dropped.
    pub(crate) fn take(&mut self) -> Option<std::ops::RangeInclusive<u32>> {
        let newest = *self.due.last()?;
        self.due.clear();
        Some(newest.saturating_sub(self.window as u32 - 1)..=newest)
    }

    pub(crate) fn clear(&mut self) {
        self.pending.clear();
        self.due.clear();
    }

    pub(crate) fn pending_slots(&self) -> impl Iterator<Item = u32> + '_ {
        self.pending.iter().copied()
    }

    pub(crate) fn due_slots(&self) -> impl Iterator<Item = u32> + '_ {
        self.due.iter().copied()
    }
}

/// Frames emitted for one transmission opportunity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxBundle {
    pub data: DataFrame,
    pub boot: Option<BootFrame>,
    pub reveal: Option<RevealFrame>,
}

impl TxBundle {
    /// DATA, then BOOT, then REVEAL.
    pub fn frames(&self) -> Vec<Frame> {
        let mut out = vec![Frame::Data(self.data.clone())];
        out.extend(self.boot.clone().map(Frame::Boot));
        out.extend(self.reveal.clone().map(Frame::Reveal));
        out
    }
}

pub struct SenderState {
    seed: [u8; 32],
    config: SenderConfig,
    epoch_key: EpochKey,
    sigma: [u8; 16],
    pseudonyms: Vec<Pseudonym>,
    pseudonym_index: usize,
    est: Est,
    psid: u32,
    current_slot: Option<u32>,
    slot_counter: u32,
    current_key: Option<SlotKeyMaterial>,
    message_index: u64,
    disclosure: DisclosureQueue,
}

impl std::fmt::Debug for SenderState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SenderState")
            .field("epoch", &self.epoch_key.epoch)
            .field("current_slot", &self.current_slot)
            .field("slot_counter", &self.slot_counter)
            .field("pseudonym_index", &self.pseudonym_index)
            .field("message_index", &self.message_index)
            .finish_non_exhaustive()
    }
}

impl SenderState {
    pub fn new(
        seed: [u8; 32],
        pseudonyms: Vec<Pseudonym>,
        epoch: u32,
        sigma: [u8; 16],
        config: SenderConfig,
    ) -> Result<Self, SenderError> {
        config.validate()?;
        if pseudonyms.is_empty() {
            return Err(SenderError::PseudonymsExhausted);
        }
        let epoch_key = derive_epoch_key(&seed, epoch, config.domain_id);
        let mut state = SenderState {
            seed,
            config,
            epoch_key,
            sigma,
            pseudonyms,
            pseudonym_index: 0,
            est: [0; 8],
            psid: 0,
            current_slot: None,
            slot_counter: 0,
            current_key: None,
            message_index: 0,
            disclosure: DisclosureQueue::new(config.disclosure_delay, config.reveal_window),
        };
        state.refresh_identity();
        Ok(state)
    }

    fn refresh_identity(&mut self) {
        let p = &self.pseudonyms[self.pseudonym_index];
        self.est = compute_est(&p.cert.pk_v, &self.sigma, self.epoch_key.epoch);
        self.psid = compute_psid(&p.cert);
    }

    pub fn config(&self) -> &SenderConfig {
        &self.config
    }

    pub fn epoch(&self) -> u32 {
        self.epoch_key.epoch
    }

    pub fn current_slot(&self) -> Option<u32> {
        self.current_slot
    }

    pub fn slot_counter(&self) -> u32 {
        self.slot_counter
    }

    pub fn est(&self) -> Est {
        self.est
    }

    pub fn psid(&self) -> u32 {
        self.psid
    }

    pub fn pseudonym_index(&self) -> usize {
        self.pseudonym_index
    }

    pub fn pseudonym(&self) -> &Pseudonym {
        &self.pseudonyms[self.pseudonym_index]
    }

    pub fn messages_sent(&self) -> u64 {
        self.message_index
    }

    /// Slots whose keys are queued but not yet due.
    pub fn pending_slots(&self) -> Vec<u32> {
        self.disclosure.pending_slots().collect()
    }

    /// Slots whose keys are due and will go into the next REVEAL.
    pub fn revealable_slots(&self) -> Vec<u32> {
        self.disclosure.due_slots().collect()
    }

    fn context(&self) -> [u8; 6] {
        slot_context(self.config.cell_id, self.config.domain_id)
    }

    pub fn slot_material(&self, slot: u32) -> Result<SlotKeyMaterial, SenderError> {
        Ok(SlotKeyMaterial::derive(
            &self.epoch_key,
            slot,
            &self.context(),
            self.config.disclosure_delay,
        )?)
    }

    pub fn on_slot_tick(&mut self, slot: u32) -> Result<(), SenderError> {
        if let Some(current) = self.current_slot {
            if slot <= current {
                return Err(SenderError::NonMonotonicSlot {
                    current,
                    requested: slot,
                });
            }
        }
        self.current_slot = Some(slot);
        self.slot_counter = 0;
        self.current_key = None;
        self.disclosure.advance(slot);
        Ok(())
    }

    /// Re-keys for a new epoch with its salt. Keys of the old epoch that are
    /// not yet disclosed are dropped.
    pub fn start_epoch(&mut self, epoch: u32, sigma: [u8; 16]) {
        self.epoch_key = derive_epoch_key(&self.seed, epoch, self.config.domain_id);
        self.sigma = sigma;
        self.current_slot = None;
        self.current_key = None;
        self.slot_counter = 0;
        self.disclosure.clear();
        self.refresh_identity();
    }

    pub fn rotate_pseudonym(&mut self) -> Result<(), SenderError> {
        if self.pseudonym_index + 1 >= self.pseudonyms.len() {
            return Err(SenderError::PseudonymsExhausted);
        }
        self.pseudonym_index += 1;
        self.refresh_identity();
        Ok(())
    }

    pub fn send_message(&mut self, payload: &[u8], emergency: bool) -> Result<TxBundle, SenderError> {
        let slot = self.current_slot.ok_or(SenderError::NoSlot)?;
        if payload.len() > MAX_PAYLOAD {
            return Err(SenderError::PayloadTooLarge(payload.len()));
        }
        let material = match self.current_key {
            Some(m) => m,
            None => {
                let m = self.slot_material(slot)?;
                self.current_key = Some(m);
                m
            }
        };
        let counter = self.slot_counter;
        self.slot_counter += 1;

        let meta = Meta {
            epoch: self.epoch_key.epoch,
            slot,
            cell_id: self.config.cell_id,
            counter,
            psid: self.psid,
            est: self.est,
        };
        let iv = compute_iv(meta.epoch, slot, counter, &self.est);
        let tag = gmac(&material.key, &iv, &meta.to_bytes(), payload)?;
        let data = DataFrame {
            meta,
            commitment: material.commitment,
            iv,
            tag,
            payload: payload.to_vec(),
        };
        self.disclosure.mark_used(slot);

        let boot = (emergency || self.message_index % self.config.boot_period as u64 == 0).then(|| {
            let digest = data.boot_digest();
            let pseudonym = &self.pseudonyms[self.pseudonym_index];
            BootFrame {
                epoch: meta.epoch,
                slot,
                digest,
                cert: pseudonym.cert,
                signature: sign(&pseudonym.sk_p, &digest),
            }
        });
        self.message_index += 1;

        Ok(TxBundle {
            data,
            boot,
            reveal: self.take_reveal()?,
        })
    }

    /// REVEAL for keys that are due, if any.
    pub fn take_reveal(&mut self) -> Result<Option<RevealFrame>, SenderError> {
        let Some(range) = self.disclosure.take() else {
            return Ok(None);
        };
        let oldest_slot = *range.start();
        let keys = range
            .map(|s| self.slot_material(s).map(|m| m.key))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Some(RevealFrame {
            epoch: self.epoch_key.epoch,
            oldest_slot,
            keys,
            vrf_blob: Vec::new(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{issue_pseudonym_batch, verify, SigningKeyPair, Validity};
    use crate::keysched::verify_commitment;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn sender_with(batch: usize, config: SenderConfig) -> SenderState {
        let ta = SigningKeyPair::from_seed(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps = issue_pseudonym_batch(batch, &ta, Validity::new(0, 1 << 40).unwrap(), &mut rng).unwrap();
        SenderState::new([7; 32], ps, 0, [9; 16], config).unwrap()
    }

    fn sender() -> SenderState {
        sender_with(3, SenderConfig::default())
    }

    #[test]
    fn tick_makes_key_revealable_after_delay() {
        let mut s = sender();
        s.on_slot_tick(4).unwrap();
        s.send_message(b"x", false).unwrap();
        s.on_slot_tick(5).unwrap();
        assert!(s.revealable_slots().is_empty());
        assert_eq!(s.pending_slots(), vec![4]);
        s.on_slot_tick(6).unwrap();
        assert_eq!(s.revealable_slots(), vec![4]);
        let r = s.take_reveal().unwrap().unwrap();
        assert_eq!((r.oldest_slot, r.keys.len()), (2, 3));
        assert!(verify_commitment(
            &r.keys[2],
            &s.slot_material(4).unwrap().commitment,
            2
        ));
        assert!(s.take_reveal().unwrap().is_none());
    }

    #[test]
    fn first_tick_has_nothing_to_reveal() {
        let mut s = sender();
        s.on_slot_tick(0).unwrap();
        assert!(s.pending_slots().is_empty());
        assert!(s.take_reveal().unwrap().is_none());
    }

    #[test]
    fn non_monotonic_tick_is_rejected() {
        let mut s = sender();
        s.on_slot_tick(5).unwrap();
        assert_eq!(
            s.on_slot_tick(5),
            Err(SenderError::NonMonotonicSlot {
                current: 5,
                requested: 5
            })
        );
        assert!(s.on_slot_tick(3).is_err());
    }

    #[test]
    fn missed_opportunities_bundle_window() {
        // One transmission per slot over 0..10 except slots 5, 6 and 7.
        let mut s = sender();
        let mut reveals = Vec::new();
        for slot in 0..10u32 {
            s.on_slot_tick(slot).unwrap();
            if (5..=7).contains(&slot) {
                continue;
            }
            if let Some(r) = s.send_message(&[slot as u8], false).unwrap().reveal {
                reveals.push((slot, r.oldest_slot, r.keys.len()));
            }
        }
        // Hand computation with d = 2, w = 3: the reveal at slot i carries
        // slots max(0, i-4)..=i-2; after the gap, slot 8 carries 2..=4.
        assert_eq!(reveals, vec![(2, 0, 1), (3, 0, 2), (4, 0, 3), (8, 2, 3)]);
    }

    #[test]
    fn boot_every_r_messages() {
        let mut s = sender();
        let mut with_boot = Vec::new();
        for i in 0..20u32 {
            s.on_slot_tick(i * 10).unwrap();
            if s.send_message(b"bsm", false).unwrap().boot.is_some() {
                with_boot.push(i);
            }
        }
        assert_eq!(with_boot, vec![0, 10]);
    }

    #[test]
    fn emergency_forces_boot_without_resetting_cadence() {
        let mut s = sender();
        let mut with_boot = Vec::new();
        for i in 0..12u32 {
            s.on_slot_tick(i * 10).unwrap();
            if s.send_message(b"bsm", i == 3).unwrap().boot.is_some() {
                with_boot.push(i);
            }
        }
        assert_eq!(with_boot, vec![0, 3, 10]);
    }

    #[test]
    fn boot_binds_companion_data() {
        let mut s = sender();
        s.on_slot_tick(1).unwrap();
        let tx = s.send_message(&[1, 2, 3], false).unwrap();
        let boot = tx.boot.unwrap();
        assert_eq!(boot.digest, tx.data.boot_digest());
        assert!(verify(&boot.cert.pk_p, &boot.digest, &boot.signature));
        assert_eq!(compute_psid(&boot.cert), tx.data.meta.psid);
    }

    #[test]
    fn counters_restart_each_slot() {
        let mut s = sender();
        for slot in [3u32, 4, 9] {
            s.on_slot_tick(slot).unwrap();
            let counters: Vec<u32> = (0..5)
                .map(|_| s.send_message(b"m", false).unwrap().data.meta.counter)
                .collect();
            assert_eq!(counters, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn payload_limit() {
        let mut s = sender();
        s.on_slot_tick(0).unwrap();
        assert!(s.send_message(&vec![0; MAX_PAYLOAD], false).is_ok());
        assert_eq!(
            s.send_message(&vec![0; MAX_PAYLOAD + 1], false),
            Err(SenderError::PayloadTooLarge(MAX_PAYLOAD + 1))
        );
        let mut fresh = sender();
        assert_eq!(fresh.send_message(b"x", false), Err(SenderError::NoSlot));
    }

    #[test]
    fn tags_verify_under_slot_key() {
        let mut s = sender();
        s.on_slot_tick(12).unwrap();
        let tx = s.send_message(b"payload", false).unwrap();
        let key = s.slot_material(12).unwrap().key;
        let d = &tx.data;
        assert_eq!(d.iv, compute_iv(d.meta.epoch, d.meta.slot, d.meta.counter, &d.meta.est));
        assert_eq!(gmac(&key, &d.iv, &d.meta.to_bytes(), &d.payload).unwrap(), d.tag);
    }

    #[test]
    fn rotation_changes_est_and_is_bounded() {
        let mut s = sender_with(1000, SenderConfig::default());
        let mut ests = HashSet::new();
        ests.insert(s.est());
        for _ in 0..999 {
            let before = s.est();
            s.rotate_pseudonym().unwrap();
            assert_ne!(before, s.est());
            assert!(ests.insert(s.est()));
        }
        assert_eq!(s.rotate_pseudonym(), Err(SenderError::PseudonymsExhausted));
        s.on_slot_tick(0).unwrap();
        let tx = s.send_message(b"x", false).unwrap();
        assert_eq!(tx.boot.unwrap().cert, s.pseudonym().cert);
    }

    #[test]
    fn iv_unique_per_key_over_an_epoch_run() {
        let mut s = sender();
        let mut seen = HashSet::new();
        for slot in 0..2500u32 {
            s.on_slot_tick(slot).unwrap();
            for _ in 0..4 {
                let tx = s.send_message(b"p", false).unwrap();
                assert!(seen.insert((tx.data.commitment, tx.data.iv)));
            }
        }
        assert_eq!(seen.len(), 10_000);
    }

    #[test]
    fn every_used_key_disclosed_once_d_slots_later() {
        let mut s = sender_with(
            1,
            SenderConfig {
                reveal_window: 1,
                ..SenderConfig::default()
            },
        );
        let mut disclosed = Vec::new();
        let mut used = Vec::new();
        for slot in 0..300u32 {
            s.on_slot_tick(slot).unwrap();
            if let Some(r) = s.take_reveal().unwrap() {
                for (revealed, key) in r.slot_keys() {
                    assert_eq!(slot, revealed + 2);
                    let c = s.slot_material(revealed).unwrap().commitment;
                    assert!(verify_commitment(key, &c, 2));
                    disclosed.push(revealed);
                }
            }
            if slot % 7 == 0 && slot < 290 {
                s.send_message(b"bsm", false).unwrap();
                used.push(slot);
            }
        }
        assert_eq!(disclosed, used);
    }

    #[test]
    fn boot_fraction_is_one_in_r() {
        let mut s = sender();
        let n = 1000u32;
        let boots = (0..n)
            .filter(|i| {
                s.on_slot_tick(i * 10).unwrap();
                s.send_message(b"bsm", false).unwrap().boot.is_some()
            })
            .count() as i64;
        assert!((boots - n as i64 / 10).abs() <= 1);
    }

    #[test]
    fn config_validation() {
        let ta = SigningKeyPair::from_seed(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps = issue_pseudonym_batch(1, &ta, Validity::new(0, 10).unwrap(), &mut rng).unwrap();
        for bad in [
            SenderConfig {
                boot_period: 0,
                ..SenderConfig::default()
            },
            SenderConfig {
                disclosure_delay: 0,
                ..SenderConfig::default()
            },
            SenderConfig {
                reveal_window: 9,
                ..SenderConfig::default()
            },
        ] {
            assert!(matches!(
                SenderState::new([0; 32], ps.clone(), 0, [0; 16], bad),
                Err(SenderError::Config(_))
            ));
        }
        assert_eq!(
            SenderState::new([0; 32], vec![], 0, [0; 16], SenderConfig::default()).unwrap_err(),
            SenderError::PseudonymsExhausted
        );
    }
}
