//! Road-side unit: anchor construction and the slotted time model.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::crypto::PublicKey;
use crate::crypto::{hkdf, sign, PseudonymCert, SigningKeyPair, TrustedAuthority, Validity};
use crate::keysched::DEFAULT_DISCLOSURE_DELAY;
use crate::revocation::{derive_rid, RevocationFilter};
use crate::wire::{AnchorFrame, AnchorValidity, Policy};
use crate::Timestamp;

pub const DEFAULT_SLOT_LEN_MS: u16 = 10;
pub const DEFAULT_EPOCH_LEN_S: u64 = 3600;
pub const DEFAULT_DRIFT_BOUND_MS: u16 = 10;
pub const DEFAULT_ANCHOR_VALIDITY_US: u64 = 2_000_000;

/// Slot length, epoch length and the clock drift bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeModel {
    pub slot_len_ms: u16,
    pub epoch_len_s: u64,
    pub drift_bound_ms: u16,
}

impl Default for TimeModel {
    fn default() -> Self {
        TimeModel {
            slot_len_ms: DEFAULT_SLOT_LEN_MS,
            epoch_len_s: DEFAULT_EPOCH_LEN_S,
            drift_bound_ms: DEFAULT_DRIFT_BOUND_MS,
        }
    }
}

impl TimeModel {
    pub fn slot_len_us(&self) -> u64 {
        self.slot_len_ms as u64 * 1000
    }

    /// `floor((t + drift) / T_s)`; slots count from time zero across epochs.
    pub fn slot_of(&self, drift_us: i64, wall_us: Timestamp) -> u32 {
        let t = (wall_us as i128 + drift_us as i128).max(0) as u64;
        (t / self.slot_len_us()).min(u32::MAX as u64) as u32
    }

    pub fn epoch_of(&self, drift_us: i64, wall_us: Timestamp) -> u32 {
        let t = (wall_us as i128 + drift_us as i128).max(0) as u64;
        (t / (self.epoch_len_s * 1_000_000)) as u32
    }

    /// Worst-case disagreement in slot index between two clocks within the bound.
    pub fn max_slot_disagreement(&self) -> u32 {
        (2 * self.drift_bound_ms as u32).div_ceil(self.slot_len_ms as u32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorParams {
    pub time: TimeModel,
    pub disclosure_delay: u8,
    pub policy: Policy,
    pub validity_us: u64,
    pub anchor_hz: u32,
}

impl Default for AnchorParams {
    fn default() -> Self {
        AnchorParams {
            time: TimeModel::default(),
            disclosure_delay: DEFAULT_DISCLOSURE_DELAY,
            policy: Policy::Normal,
            validity_us: DEFAULT_ANCHOR_VALIDITY_US,
            anchor_hz: 1,
        }
    }
}

impl AnchorParams {
    pub fn period_us(&self) -> u64 {
        1_000_000 / self.anchor_hz.max(1) as u64
    }
}

pub struct Rsu {
    keys: SigningKeyPair,
    cert: PseudonymCert,
    randomness: [u8; 32],
    params: AnchorParams,
    filter: Arc<RevocationFilter>,
}

impl std::fmt::Debug for Rsu {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Rsu")
            .field("params", &self.params)
            .field("filter_bits", &self.filter.bit_count())
            .finish_non_exhaustive()
    }
}

impl Rsu {
    /// Creates an RSU whose key pair and salt source derive from `seed`.
    pub fn new(ta: &TrustedAuthority, seed: u64, params: AnchorParams, cert_validity: Validity) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let keys = SigningKeyPair::generate(&mut rng);
        let cert = ta.certify(keys.public(), keys.public(), cert_validity);
        let mut randomness = [0u8; 32];
        rand::RngCore::fill_bytes(&mut rng, &mut randomness);
        Rsu {
            keys,
            cert,
            randomness,
            params,
            filter: Arc::new(RevocationFilter::new(1, 0.01).expect("valid default filter")),
        }
    }

    pub fn params(&self) -> &AnchorParams {
        &self.params
    }

    pub fn cert(&self) -> &PseudonymCert {
        &self.cert
    }

    pub fn filter(&self) -> &Arc<RevocationFilter> {
        &self.filter
    }

    pub fn set_filter(&mut self, filter: RevocationFilter) {
        self.filter = Arc::new(filter);
    }

    /// Per-epoch public salt σ.
    pub fn sigma_for_epoch(&self, epoch: u32) -> [u8; 16] {
        let mut info = [0u8; 9];
        info[..5].copy_from_slice(b"sigma");
        info[5..].copy_from_slice(&epoch.to_be_bytes());
        hkdf(&self.randomness, &info)
    }

    /// Builds a filter listing the given pseudonyms for `epoch`.
    pub fn revocation_filter(&self, epoch: u32, revoked: &[PublicKey], fpr: f64) -> RevocationFilter {
        let sigma = self.sigma_for_epoch(epoch);
        let mut filter =
            RevocationFilter::new((revoked.len() as u64).max(1), fpr).expect("caller supplies a valid fpr");
        for pk in revoked {
            filter.insert(&derive_rid(pk, &sigma));
        }
        filter
    }

    pub fn build_anchor(&self, now: Timestamp, epoch: u32) -> AnchorFrame {
        let p = &self.params;
        let mut frame = AnchorFrame {
            timestamp: now,
            epoch,
            slot_len_ms: p.time.slot_len_ms,
            disclosure_delay: p.disclosure_delay,
            drift_bound_ms: p.time.drift_bound_ms,
            sigma: self.sigma_for_epoch(epoch),
            policy: p.policy,
            validity: AnchorValidity {
                start: now,
                end: now + p.validity_us,
            },
            filter: Arc::clone(&self.filter),
            rsu_cert: self.cert,
            rsu_signature: crate::crypto::Signature([0; 64]),
        };
        frame.rsu_signature = sign(&self.keys, &frame.signed_bytes());
        frame
    }

    /// Anchors emitted at the configured cadence over `[start, end)`.
    pub fn schedule(&self, start: Timestamp, end: Timestamp) -> impl Iterator<Item = Timestamp> {
        let period = self.params.period_us();
        (0..).map(move |i| start + i * period).take_while(move |t| *t < end)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verifier::{AnchorOutcome, Receiver, ReceiverConfig};

    fn rsu() -> (TrustedAuthority, Rsu) {
        let ta = TrustedAuthority::from_seed(10);
        let r = Rsu::new(&ta, 3, AnchorParams::default(), Validity::new(0, 1 << 30).unwrap());
        (ta, r)
    }

    #[test]
    fn slot_mapping() {
        let t = TimeModel::default();
        assert_eq!(t.slot_of(0, 0), 0);
        assert_eq!(t.slot_of(0, 25_000), 2);
        assert_eq!(t.slot_of(10_000, 95_000), 10);
        assert_eq!(t.slot_of(0, 95_000), 9);
        assert_eq!(t.slot_of(-10_000, 5_000), 0);
        assert_eq!(t.epoch_of(0, 3_600_000_000), 1);
    }

    #[test]
    fn drift_grid_disagreement_is_bounded() {
        let t = TimeModel::default();
        let bound = t.max_slot_disagreement();
        assert_eq!(bound, 2);
        let drifts: Vec<i64> = (-10..=10).map(|ms| ms * 1000).collect();
        let mut worst = 0;
        for wall in (0..200_000).step_by(500) {
            for &a in &drifts {
                for &b in &drifts {
                    let d = t.slot_of(a, wall).abs_diff(t.slot_of(b, wall));
                    worst = worst.max(d);
                }
            }
        }
        assert!(worst <= bound);
        // The cache window d + w + 1 must exceed it.
        assert!(DEFAULT_DISCLOSURE_DELAY as u32 + 3 + 1 > bound);
    }

    #[test]
    fn anchor_verifies_and_is_adopted() {
        let (ta, r) = rsu();
        let mut rx = Receiver::new(*ta.public(), ReceiverConfig::default());
        let a = r.build_anchor(0, 0);
        assert_eq!(rx.on_anchor(&a, 0), Ok(AnchorOutcome::Adopted));
        assert_eq!(rx.anchor().unwrap().sigma, r.sigma_for_epoch(0));
    }

    #[test]
    fn one_hertz_over_ten_seconds() {
        let (_, r) = rsu();
        assert_eq!(r.schedule(0, 10_000_000).count(), 10);
    }

    #[test]
    fn consecutive_validity_windows_overlap() {
        let (_, r) = rsu();
        let times: Vec<_> = r.schedule(0, 10_000_000).collect();
        for w in times.windows(2) {
            let a = r.build_anchor(w[0], 0);
            let b = r.build_anchor(w[1], 0);
            assert!(b.validity.start < a.validity.end);
        }
    }

    #[test]
    fn sigma_differs_per_epoch() {
        let (_, r) = rsu();
        assert_ne!(r.sigma_for_epoch(0), r.sigma_for_epoch(1));
        assert_eq!(r.sigma_for_epoch(4), r.sigma_for_epoch(4));
    }
}
