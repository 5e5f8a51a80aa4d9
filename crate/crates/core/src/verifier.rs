//! Receiver pipeline.
//!
//! BOOT frames establish whitelist entries keyed by the sender's ephemeral
//! session tag, DATA frames are buffered per `(epoch, slot)` and marked
//! immediately authenticated when their tag is whitelisted, and REVEAL frames
//! disclose slot keys that move buffered frames to their final status.
//!
//! Every status change is appended to an event stream (see
//! [`Receiver::drain_events`]) so that callers can account for each frame
//! without holding on to it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{gmac, sha256, PublicKey, Signature};
use crate::keysched::{commit, Commitment, SlotKey};
use crate::obu::DEFAULT_REVEAL_WINDOW;
use crate::revocation::{derive_rid, RevocationFilter, RevocationId};
use crate::wire::{compute_est, compute_iv, compute_psid, AnchorFrame, BootFrame, DataFrame, Est, Policy, RevealFrame};
use crate::Timestamp;

/// Default whitelist lifetime T_w.
pub const DEFAULT_WHITELIST_TTL_US: u64 = 2_000_000;

/// Signature verification backend.
///
/// The simulator swaps in [`MemoizedCheck`] so that many receivers checking
/// the same broadcast signature share one computation; operation counts are
/// kept per receiver regardless.
pub trait SignatureCheck: Send + Sync {
    fn verify(&self, public: &PublicKey, message: &[u8], signature: &Signature) -> bool;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct DirectCheck;

impl SignatureCheck for DirectCheck {
    fn verify(&self, public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
        crate::crypto::verify(public, message, signature)
    }
}

/// Caches verification results keyed by a digest of (key, signature, message).
#[derive(Debug, Default)]
pub struct MemoizedCheck {
    results: Mutex<HashMap<[u8; 32], bool>>,
}

impl MemoizedCheck {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.results.lock().expect("memo lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SignatureCheck for MemoizedCheck {
    fn verify(&self, public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
        let key = sha256(&[public.as_bytes(), &signature.0, message]);
        if let Some(&hit) = self.results.lock().expect("memo lock").get(&key) {
            return hit;
        }
        let ok = crate::crypto::verify(public, message, signature);
        self.results.lock().expect("memo lock").insert(key, ok);
        ok
    }
}

/// Injectable VRF check invoked for REVEAL frames carrying a VRF blob. The
/// second argument is the sender's pk_V when it is known.
pub type VrfHook = Box<dyn Fn(&RevealFrame, Option<&PublicKey>) -> bool + Send + Sync>;

/// Cryptographic and lookup operations performed, for the cost model.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub sig_verify: u64,
    pub cert_verify: u64,
    pub gmac: u64,
    pub hash: u64,
    pub hkdf: u64,
    pub bloom_query: u64,
}

impl std::ops::AddAssign for OpCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.sig_verify += rhs.sig_verify;
        self.cert_verify += rhs.cert_verify;
        self.gmac += rhs.gmac;
        self.hash += rhs.hash;
        self.hkdf += rhs.hkdf;
        self.bloom_query += rhs.bloom_query;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameStatus {
    Pending,
    ImmediateAuth,
    StrongAuth,
    /// MAC verified but the Strict policy saw no BOOT for the pseudonym.
    StrictHold,
    Rejected,
}

impl FrameStatus {
    pub fn is_final(self) -> bool {
        matches!(
            self,
            FrameStatus::StrongAuth | FrameStatus::StrictHold | FrameStatus::Rejected
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Error)]
pub enum RejectReason {
    #[error("no anchor adopted")]
    NoAnchor,
    #[error("duplicate counter within slot")]
    ReplayDetected,
    #[error("frame addressed to another cell")]
    WrongCell,
    #[error("frame from another epoch")]
    WrongEpoch,
    #[error("slot outside the acceptance window")]
    StaleSlot,
    #[error("slot key already disclosed")]
    KeyDisclosed,
    #[error("MAC tag mismatch")]
    TagMismatch,
    #[error("no key disclosed before expiry")]
    Expired,
    #[error("malformed frame")]
    Malformed,
    #[error("certificate invalid")]
    CertInvalid,
    #[error("signature invalid")]
    SigInvalid,
    #[error("sender revoked")]
    Revoked,
}

impl RejectReason {
    pub fn name(self) -> &'static str {
        match self {
            RejectReason::NoAnchor => "no_anchor",
            RejectReason::ReplayDetected => "replay",
            RejectReason::WrongCell => "wrong_cell",
            RejectReason::WrongEpoch => "wrong_epoch",
            RejectReason::StaleSlot => "stale_slot",
            RejectReason::KeyDisclosed => "key_disclosed",
            RejectReason::TagMismatch => "tag_mismatch",
            RejectReason::Expired => "expired",
            RejectReason::Malformed => "malformed",
            RejectReason::CertInvalid => "cert_invalid",
            RejectReason::SigInvalid => "sig_invalid",
            RejectReason::Revoked => "revoked",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    /// Provisionally accepted on arrival (whitelisted EST or signature).
    Immediate,
    /// Final acceptance.
    Strong,
    /// Final, neither accepted nor rejected.
    Held,
    /// Final rejection.
    Rejected(RejectReason),
}

impl Verdict {
    pub fn is_terminal(self) -> bool {
        !matches!(self, Verdict::Immediate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictEvent {
    pub frame: FrameId,
    pub psid: u32,
    pub received_at: Timestamp,
    pub at: Timestamp,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AnchorError {
    #[error("anchor rejected: {0}")]
    AnchorRejected(&'static str),
    #[error("anchor outside its validity window or older than the adopted one")]
    AnchorStale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum BootError {
    #[error("no anchor adopted")]
    NoAnchor,
    #[error("BOOT from another epoch")]
    WrongEpoch,
    #[error("pseudonym certificate invalid")]
    CertInvalid,
    #[error("pseudonym revoked")]
    Revoked,
    #[error("signature over digest invalid")]
    SigInvalid,
    #[error("companion DATA frame not buffered")]
    MissingCompanion,
    #[error("digest does not bind the companion DATA frame")]
    DigestMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RevealError {
    #[error("disclosed key matches no buffered commitment")]
    CommitmentMismatch,
    #[error("VRF check failed")]
    VrfInvalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorOutcome {
    Adopted,
    /// Same anchor as the one already adopted.
    Unchanged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BootAccepted {
    pub est: Est,
    pub psid: u32,
    pub valid_until: Timestamp,
    /// Companion frame promoted to immediate authentication, if buffered.
    pub companion: Option<FrameId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataAccepted {
    pub id: FrameId,
    pub status: FrameStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RevealReport {
    pub frames: Vec<(FrameId, FrameStatus)>,
    pub key_errors: Vec<(u32, RevealError)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WhitelistEntry {
    pub est: Est,
    pub valid_until: Timestamp,
    pub psid: u32,
    rid: RevocationId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageCacheEntry {
    pub id: FrameId,
    pub frame: DataFrame,
    pub received_at: Timestamp,
    pub status: FrameStatus,
    pub had_boot: bool,
}

/// Per-slot record of (psid, counter) pairs already delivered.
#[derive(Debug, Default, Clone)]
pub struct ReplayLedger {
    slots: BTreeMap<(u32, u32), HashMap<u32, SlotCounters>>,
    entries: usize,
}

#[derive(Debug, Default, Clone)]
struct SlotCounters {
    highest: u32,
    seen: Vec<u32>,
}

impl ReplayLedger {
    /// Records the counter; `false` when it was already seen.
    fn record(&mut self, epoch: u32, slot: u32, psid: u32, counter: u32) -> bool {
        let counters = self.slots.entry((epoch, slot)).or_default().entry(psid).or_default();
        if counters.seen.contains(&counter) {
            return false;
        }
        counters.highest = counters.highest.max(counter);
        counters.seen.push(counter);
        self.entries += 1;
        true
    }

    fn prune_before(&mut self, epoch: u32, slot: u32) {
        let keep = self.slots.split_off(&(epoch, slot));
        let dropped = std::mem::replace(&mut self.slots, keep);
        for per_psid in dropped.values() {
            for c in per_psid.values() {
                self.entries -= c.seen.len();
            }
        }
    }

    fn clear(&mut self) {
        self.slots.clear();
        self.entries = 0;
    }

    pub fn len(&self) -> usize {
        self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries == 0
    }

    pub fn highest_counter(&self, epoch: u32, slot: u32, psid: u32) -> Option<u32> {
        self.slots.get(&(epoch, slot))?.get(&psid).map(|c| c.highest)
    }
}

/// Parameters adopted from the latest valid anchor.
#[derive(Debug, Clone)]
pub struct AdoptedAnchor {
    pub timestamp: Timestamp,
    pub epoch: u32,
    pub slot_len_us: u64,
    pub disclosure_delay: u8,
    pub drift_bound_us: u64,
    pub sigma: [u8; 16],
    pub policy: Policy,
    pub filter: Arc<RevocationFilter>,
    signature: Signature,
}

#[derive(Debug, Clone, Copy)]
pub struct ReceiverConfig {
    pub cell_id: u16,
    pub whitelist_ttl_us: u64,
    pub reveal_window: u8,
    /// This receiver's clock offset from true time.
    pub clock_offset_us: i64,
    /// Skip re-verifying a pseudonym certificate already verified once.
    pub cache_verified_certs: bool,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        ReceiverConfig {
            cell_id: 0,
            whitelist_ttl_us: DEFAULT_WHITELIST_TTL_US,
            reveal_window: DEFAULT_REVEAL_WINDOW,
            clock_offset_us: 0,
            cache_verified_certs: true,
        }
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiverStats {
    pub retroactive_rejections: u64,
    pub commitment_mismatches: u64,
    pub boots_accepted: u64,
    pub boots_rejected: u64,
    pub cache_high_water: usize,
    pub whitelist_high_water: usize,
    pub ledger_high_water: usize,
}

/// Certificate chain, signature, parameter and validity checks shared by
/// every receiver that consumes anchors.
pub fn check_anchor(
    ta: &PublicKey,
    checker: &dyn SignatureCheck,
    frame: &AnchorFrame,
    now: Timestamp,
    ops: &mut OpCounts,
) -> Result<(), AnchorError> {
    let rsu = frame.rsu_cert;
    if !rsu.validity.contains(now / 1_000_000) {
        return Err(AnchorError::AnchorRejected("RSU certificate outside its validity"));
    }
    ops.cert_verify += 1;
    let signed = crate::crypto::PseudonymCert::signed_bytes(&rsu.pk_p, &rsu.pk_v, &rsu.validity);
    if !checker.verify(ta, &signed, &rsu.ta_signature) {
        return Err(AnchorError::AnchorRejected(
            "RSU certificate does not verify under the TA key",
        ));
    }
    ops.sig_verify += 1;
    if !checker.verify(&rsu.pk_p, &frame.signed_bytes(), &frame.rsu_signature) {
        return Err(AnchorError::AnchorRejected("RSU signature invalid"));
    }
    if frame.slot_len_ms == 0 || frame.disclosure_delay == 0 {
        return Err(AnchorError::AnchorRejected("zero slot length or disclosure delay"));
    }
    if now < frame.validity.start || now >= frame.validity.end {
        return Err(AnchorError::AnchorStale);
    }
    Ok(())
}

pub struct Receiver {
    config: ReceiverConfig,
    ta: PublicKey,
    checker: Arc<dyn SignatureCheck>,
    vrf_hook: Option<VrfHook>,
    anchor: Option<AdoptedAnchor>,
    whitelist: HashMap<Est, WhitelistEntry>,
    cache: BTreeMap<(u32, u32), Vec<MessageCacheEntry>>,
    cached: usize,
    ledger: ReplayLedger,
    booted: HashSet<u32>,
    verified_certs: HashSet<[u8; 32]>,
    disclosed: BTreeMap<(u32, u32), Vec<Commitment>>,
    next_id: u64,
    events: Vec<VerdictEvent>,
    ops: OpCounts,
    anchor_ops: OpCounts,
    stats: ReceiverStats,
}

impl std::fmt::Debug for Receiver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Receiver")
            .field("config", &self.config)
            .field("anchor_epoch", &self.anchor.as_ref().map(|a| a.epoch))
            .field("whitelist", &self.whitelist.len())
            .field("cached", &self.cached)
            .finish_non_exhaustive()
    }
}

impl Receiver {
    pub fn new(ta: PublicKey, config: ReceiverConfig) -> Self {
        Self::with_checker(ta, config, Arc::new(DirectCheck))
    }

    pub fn with_checker(ta: PublicKey, config: ReceiverConfig, checker: Arc<dyn SignatureCheck>) -> Self {
        Receiver {
            config,
            ta,
            checker,
            vrf_hook: None,
            anchor: None,
            whitelist: HashMap::new(),
            cache: BTreeMap::new(),
            cached: 0,
            ledger: ReplayLedger::default(),
            booted: HashSet::new(),
            verified_certs: HashSet::new(),
            disclosed: BTreeMap::new(),
            next_id: 0,
            events: Vec::new(),
            ops: OpCounts::default(),
            anchor_ops: OpCounts::default(),
            stats: ReceiverStats::default(),
        }
    }

    pub fn set_vrf_hook(&mut self, hook: VrfHook) {
        self.vrf_hook = Some(hook);
    }

    pub fn config(&self) -> &ReceiverConfig {
        &self.config
    }

    pub fn anchor(&self) -> Option<&AdoptedAnchor> {
        self.anchor.as_ref()
    }

    /// Operations spent on DATA, BOOT and REVEAL processing.
    pub fn ops(&self) -> OpCounts {
        self.ops
    }

    /// Operations spent verifying anchors.
    pub fn anchor_ops(&self) -> OpCounts {
        self.anchor_ops
    }

    pub fn stats(&self) -> ReceiverStats {
        self.stats
    }

    pub fn whitelist_entry(&self, est: &Est) -> Option<&WhitelistEntry> {
        self.whitelist.get(est)
    }

    pub fn whitelist_len(&self) -> usize {
        self.whitelist.len()
    }

    pub fn cache_len(&self) -> usize {
        self.cached
    }

    pub fn ledger(&self) -> &ReplayLedger {
        &self.ledger
    }

    pub fn cache_entry(&self, id: FrameId) -> Option<&MessageCacheEntry> {
        self.cache.values().flatten().find(|e| e.id == id)
    }

    pub fn drain_events(&mut self) -> Vec<VerdictEvent> {
        std::mem::take(&mut self.events)
    }

    fn emit(&mut self, id: FrameId, psid: u32, received_at: Timestamp, at: Timestamp, verdict: Verdict) {
        self.events.push(VerdictEvent {
            frame: id,
            psid,
            received_at,
            at,
            verdict,
        });
    }

    pub fn next_frame_id(&self) -> FrameId {
        FrameId(self.next_id)
    }

    fn fresh_id(&mut self) -> FrameId {
        let id = FrameId(self.next_id);
        self.next_id += 1;
        id
    }

    /// Slot index on this receiver's (drifting) clock.
    pub fn local_slot(&self, now: Timestamp) -> Option<u32> {
        let a = self.anchor.as_ref()?;
        let local = (now as i128 + self.config.clock_offset_us as i128).max(0) as u64;
        Some((local / a.slot_len_us).min(u32::MAX as u64) as u32)
    }

    fn drift_slots(a: &AdoptedAnchor) -> u32 {
        (2 * a.drift_bound_us).div_ceil(a.slot_len_us) as u32
    }

    fn verify_sig(&mut self, pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
        self.ops.sig_verify += 1;
        self.checker.verify(pk, msg, sig)
    }

    fn verify_cert(&mut self, cert: &crate::crypto::PseudonymCert, now: Timestamp) -> bool {
        if !cert.validity.contains(now / 1_000_000) {
            return false;
        }
        let digest = cert.digest();
        self.ops.hash += 1;
        if self.config.cache_verified_certs && self.verified_certs.contains(&digest) {
            return true;
        }
        self.ops.cert_verify += 1;
        let signed = crate::crypto::PseudonymCert::signed_bytes(&cert.pk_p, &cert.pk_v, &cert.validity);
        let ta = self.ta;
        let ok = self.checker.verify(&ta, &signed, &cert.ta_signature);
        if ok && self.config.cache_verified_certs {
            self.verified_certs.insert(digest);
        }
        ok
    }

    pub fn on_anchor(&mut self, frame: &AnchorFrame, now: Timestamp) -> Result<AnchorOutcome, AnchorError> {
        if let Some(a) = &self.anchor {
            if a.signature == frame.rsu_signature {
                return Ok(AnchorOutcome::Unchanged);
            }
        }
        check_anchor(&self.ta, &*self.checker, frame, now, &mut self.anchor_ops)?;
        if self.anchor.as_ref().is_some_and(|a| frame.timestamp < a.timestamp) {
            return Err(AnchorError::AnchorStale);
        }

        let epoch_changed = self.anchor.as_ref().map_or(true, |a| a.epoch != frame.epoch);
        let filter_changed = self.anchor.as_ref().map_or(true, |a| {
            !Arc::ptr_eq(&a.filter, &frame.filter) && *a.filter != *frame.filter
        });
        let sigma_changed = self.anchor.as_ref().map_or(true, |a| a.sigma != frame.sigma);
        self.anchor = Some(AdoptedAnchor {
            timestamp: frame.timestamp,
            epoch: frame.epoch,
            slot_len_us: frame.slot_len_ms as u64 * 1000,
            disclosure_delay: frame.disclosure_delay,
            drift_bound_us: frame.drift_bound_ms as u64 * 1000,
            sigma: frame.sigma,
            policy: frame.policy,
            filter: Arc::clone(&frame.filter),
            signature: frame.rsu_signature,
        });
        if epoch_changed || sigma_changed {
            // Whitelist entries and replay state are bound to the epoch salt.
            self.whitelist.clear();
            self.booted.clear();
            self.ledger.clear();
        } else if filter_changed {
            let filter = Arc::clone(&frame.filter);
            let before = self.whitelist.len();
            self.whitelist.retain(|_, e| !filter.contains(&e.rid));
            self.anchor_ops.bloom_query += before as u64;
        }
        Ok(AnchorOutcome::Adopted)
    }

    pub fn on_data(&mut self, frame: DataFrame, now: Timestamp) -> Result<DataAccepted, RejectReason> {
        let id = self.fresh_id();
        let psid = frame.meta.psid;
        match self.admit_data(&frame, now) {
            Ok(status) => {
                if status == FrameStatus::ImmediateAuth {
                    self.emit(id, psid, now, now, Verdict::Immediate);
                }
                let key = (frame.meta.epoch, frame.meta.slot);
                let had_boot = self.booted.contains(&psid);
                self.cache.entry(key).or_default().push(MessageCacheEntry {
                    id,
                    frame,
                    received_at: now,
                    status,
                    had_boot,
                });
                self.cached += 1;
                self.stats.cache_high_water = self.stats.cache_high_water.max(self.cached);
                self.stats.ledger_high_water = self.stats.ledger_high_water.max(self.ledger.len());
                Ok(DataAccepted { id, status })
            }
            Err(reason) => {
                self.emit(id, psid, now, now, Verdict::Rejected(reason));
                Err(reason)
            }
        }
    }

    /// Replay checks, then whitelist lookup.
    fn admit_data(&mut self, frame: &DataFrame, now: Timestamp) -> Result<FrameStatus, RejectReason> {
        let local_slot = self.local_slot(now).ok_or(RejectReason::NoAnchor)?;
        let a = self.anchor.as_ref().expect("anchor checked by local_slot");
        let m = &frame.meta;
        if m.epoch != a.epoch {
            return Err(RejectReason::WrongEpoch);
        }
        if m.cell_id != self.config.cell_id {
            return Err(RejectReason::WrongCell);
        }
        let window = a.disclosure_delay as u32 + self.config.reveal_window as u32;
        let drift = Self::drift_slots(a);
        if m.slot.saturating_add(window) < local_slot || m.slot > local_slot.saturating_add(drift) {
            return Err(RejectReason::StaleSlot);
        }
        if self
            .disclosed
            .get(&(m.epoch, m.slot))
            .is_some_and(|cs| cs.contains(&frame.commitment))
        {
            return Err(RejectReason::KeyDisclosed);
        }
        if !self.ledger.record(m.epoch, m.slot, m.psid, m.counter) {
            return Err(RejectReason::ReplayDetected);
        }
        let immediate = self
            .whitelist
            .get(&m.est)
            .is_some_and(|e| now < e.valid_until && e.psid == m.psid);
        Ok(if immediate {
            FrameStatus::ImmediateAuth
        } else {
            FrameStatus::Pending
        })
    }

    /// Verifies a BOOT against its companion DATA frame found in the cache.
    pub fn on_boot(&mut self, boot: &BootFrame, now: Timestamp) -> Result<BootAccepted, BootError> {
        self.process_boot(boot, None, now)
    }

    /// Verifies a BOOT against an explicitly supplied companion frame.
    pub fn on_boot_with(
        &mut self,
        boot: &BootFrame,
        companion: &DataFrame,
        now: Timestamp,
    ) -> Result<BootAccepted, BootError> {
        self.process_boot(boot, Some(companion), now)
    }

    fn process_boot(
        &mut self,
        boot: &BootFrame,
        companion: Option<&DataFrame>,
        now: Timestamp,
    ) -> Result<BootAccepted, BootError> {
        let result = self.check_boot(boot, companion, now);
        match result {
            Ok(_) => self.stats.boots_accepted += 1,
            Err(_) => self.stats.boots_rejected += 1,
        }
        result
    }

    fn check_boot(
        &mut self,
        boot: &BootFrame,
        companion: Option<&DataFrame>,
        now: Timestamp,
    ) -> Result<BootAccepted, BootError> {
        let (epoch, sigma, filter) = match &self.anchor {
            Some(a) => (a.epoch, a.sigma, Arc::clone(&a.filter)),
            None => return Err(BootError::NoAnchor),
        };
        if boot.epoch != epoch {
            return Err(BootError::WrongEpoch);
        }
        // Certificate, then revocation filter, then signature.
        if !self.verify_cert(&boot.cert, now) {
            return Err(BootError::CertInvalid);
        }
        let rid = derive_rid(&boot.cert.pk_v, &sigma);
        self.ops.hash += 1;
        self.ops.bloom_query += 1;
        if filter.contains(&rid) {
            return Err(BootError::Revoked);
        }
        if !self.verify_sig(&boot.cert.pk_p, &boot.digest, &boot.signature) {
            return Err(BootError::SigInvalid);
        }

        let psid = compute_psid(&boot.cert);
        let est = compute_est(&boot.cert.pk_v, &sigma, epoch);
        self.ops.hash += 2;

        let binds = |d: &DataFrame| d.meta.psid == psid && d.meta.est == est && d.meta.slot == boot.slot;
        let companion_id = match companion {
            Some(d) => {
                self.ops.hash += 1;
                if !binds(d) || d.boot_digest() != boot.digest {
                    return Err(BootError::DigestMismatch);
                }
                self.cache
                    .get(&(boot.epoch, boot.slot))
                    .and_then(|es| es.iter().find(|e| &e.frame == d))
                    .map(|e| e.id)
            }
            None => {
                let entries = self
                    .cache
                    .get(&(boot.epoch, boot.slot))
                    .map(|es| es.iter().filter(|e| e.frame.meta.psid == psid).collect::<Vec<_>>())
                    .unwrap_or_default();
                if entries.is_empty() {
                    return Err(BootError::MissingCompanion);
                }
                self.ops.hash += entries.len() as u64;
                match entries
                    .iter()
                    .find(|e| binds(&e.frame) && e.frame.boot_digest() == boot.digest)
                {
                    Some(e) => Some(e.id),
                    None => return Err(BootError::DigestMismatch),
                }
            }
        };

        let valid_until = now + self.config.whitelist_ttl_us;
        self.whitelist.insert(
            est,
            WhitelistEntry {
                est,
                valid_until,
                psid,
                rid,
            },
        );
        self.stats.whitelist_high_water = self.stats.whitelist_high_water.max(self.whitelist.len());
        self.booted.insert(psid);

        let mut promoted = None;
        if let Some(id) = companion_id {
            let mut upgrade = None;
            if let Some(e) = self
                .cache
                .get_mut(&(boot.epoch, boot.slot))
                .and_then(|es| es.iter_mut().find(|e| e.id == id))
            {
                e.had_boot = true;
                if e.status == FrameStatus::Pending {
                    e.status = FrameStatus::ImmediateAuth;
                    upgrade = Some(e.received_at);
                }
            }
            if let Some(received_at) = upgrade {
                self.emit(id, psid, received_at, now, Verdict::Immediate);
                promoted = Some(id);
            }
        }
        Ok(BootAccepted {
            est,
            psid,
            valid_until,
            companion: promoted,
        })
    }

    pub fn on_reveal(&mut self, frame: &RevealFrame, now: Timestamp) -> RevealReport {
        let mut report = RevealReport::default();
        let Some(a) = &self.anchor else {
            for (slot, _) in frame.slot_keys() {
                report.key_errors.push((slot, RevealError::CommitmentMismatch));
            }
            return report;
        };
        let depth = a.disclosure_delay;
        let strict = a.policy == Policy::Strict;
        for (slot, key) in frame.slot_keys() {
            // Windows are contiguous, so keys for slots with nothing buffered
            // are routine and skipped without hashing.
            let live = self
                .cache
                .get(&(frame.epoch, slot))
                .is_some_and(|es| es.iter().any(|e| !e.status.is_final()));
            if !live {
                continue;
            }
            match self.apply_key(frame, frame.epoch, slot, key, depth, strict, now, &mut report) {
                Ok(()) => {}
                Err(e) => {
                    if e == RevealError::CommitmentMismatch {
                        self.stats.commitment_mismatches += 1;
                    }
                    report.key_errors.push((slot, e));
                }
            }
        }
        report
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_key(
        &mut self,
        frame: &RevealFrame,
        epoch: u32,
        slot: u32,
        key: &SlotKey,
        depth: u8,
        strict: bool,
        now: Timestamp,
        report: &mut RevealReport,
    ) -> Result<(), RevealError> {
        let commitment = commit(key, depth).map_err(|_| RevealError::CommitmentMismatch)?;
        self.ops.hash += depth as u64;
        let matches = self.cache[&(epoch, slot)]
            .iter()
            .any(|e| e.frame.commitment == commitment);
        if !matches {
            return Err(RevealError::CommitmentMismatch);
        }
        if !frame.vrf_blob.is_empty() {
            if let Some(hook) = &self.vrf_hook {
                // REVEAL frames do not identify the sender, so pk_V is unknown.
                if !hook(frame, None) {
                    return Err(RevealError::VrfInvalid);
                }
            }
        }
        let disclosed = self.disclosed.entry((epoch, slot)).or_default();
        if !disclosed.contains(&commitment) {
            disclosed.push(commitment);
        }

        let mut changes = Vec::new();
        let mut work = OpCounts::default();
        let booted = &self.booted;
        for e in self
            .cache
            .get_mut(&(epoch, slot))
            .expect("slot checked above")
            .iter_mut()
            .filter(|e| e.frame.commitment == commitment && !e.status.is_final())
        {
            let m = &e.frame.meta;
            work.hash += 1;
            work.gmac += 1;
            let iv_ok = compute_iv(m.epoch, m.slot, m.counter, &m.est) == e.frame.iv;
            let tag_ok = gmac(key, &e.frame.iv, &m.to_bytes(), &e.frame.payload).is_ok_and(|t| t == e.frame.tag);
            let was_immediate = e.status == FrameStatus::ImmediateAuth;
            e.had_boot |= booted.contains(&m.psid);
            let verdict = if iv_ok && tag_ok {
                if strict && !e.had_boot {
                    e.status = FrameStatus::StrictHold;
                    Verdict::Held
                } else {
                    e.status = FrameStatus::StrongAuth;
                    Verdict::Strong
                }
            } else {
                e.status = FrameStatus::Rejected;
                Verdict::Rejected(RejectReason::TagMismatch)
            };
            changes.push((e.id, m.psid, e.received_at, e.status, verdict, was_immediate));
        }
        self.ops += work;
        for (id, psid, received_at, status, verdict, was_immediate) in changes {
            if was_immediate && status == FrameStatus::Rejected {
                self.stats.retroactive_rejections += 1;
            }
            self.emit(id, psid, received_at, now, verdict);
            report.frames.push((id, status));
        }
        Ok(())
    }

    /// Expires whitelist entries and finalizes cache slots that can no longer
    /// receive their key.
    pub fn gc(&mut self, now: Timestamp) {
        self.whitelist.retain(|_, e| now < e.valid_until);
        let Some(local_slot) = self.local_slot(now) else {
            return;
        };
        let a = self.anchor.as_ref().expect("anchor present");
        let horizon = a.disclosure_delay as u32 + self.config.reveal_window as u32 + 1;
        let Some(oldest_live) = local_slot.checked_sub(horizon) else {
            return;
        };
        self.evict_slots_before(oldest_live, now);
    }

    /// Finalizes everything still buffered, e.g. at the end of a run.
    pub fn flush(&mut self, now: Timestamp) {
        self.evict_slots_before(u32::MAX, now);
    }

    fn evict_slots_before(&mut self, oldest_live: u32, now: Timestamp) {
        let expired: Vec<(u32, u32)> = self
            .cache
            .keys()
            .filter(|(_, slot)| *slot < oldest_live)
            .copied()
            .collect();
        for key in expired {
            let entries = self.cache.remove(&key).expect("key listed above");
            self.cached -= entries.len();
            for e in entries {
                match e.status {
                    FrameStatus::Pending | FrameStatus::ImmediateAuth => {
                        if e.status == FrameStatus::ImmediateAuth {
                            self.stats.retroactive_rejections += 1;
                        }
                        self.emit(
                            e.id,
                            e.frame.meta.psid,
                            e.received_at,
                            now,
                            Verdict::Rejected(RejectReason::Expired),
                        );
                    }
                    FrameStatus::StrongAuth | FrameStatus::StrictHold | FrameStatus::Rejected => {}
                }
            }
        }
        self.disclosed.retain(|(_, slot), _| *slot >= oldest_live);
        if let Some(epoch) = self.anchor.as_ref().map(|a| a.epoch) {
            if oldest_live != u32::MAX {
                self.ledger.prune_before(epoch, oldest_live);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{issue_pseudonym_batch, SigningKeyPair, TrustedAuthority, Validity};
    use crate::obu::{SenderConfig, SenderState, TxBundle};
    use crate::rsu::{AnchorParams, Rsu};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SLOT: u64 = 10_000;

    struct Fixture {
        ta: TrustedAuthority,
        rsu: Rsu,
        sender: SenderState,
        receiver: Receiver,
    }

    fn fixture_with(policy: Policy, revoked: bool) -> Fixture {
        let ta = TrustedAuthority::from_seed(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps = issue_pseudonym_batch(2, ta.keys(), Validity::new(0, 1 << 30).unwrap(), &mut rng).unwrap();
        let params = AnchorParams {
            policy,
            ..AnchorParams::default()
        };
        let mut rsu = Rsu::new(&ta, 77, params, Validity::new(0, 1 << 30).unwrap());
        let sigma = rsu.sigma_for_epoch(0);
        let mut filter = RevocationFilter::new(16, 0.01).unwrap();
        if revoked {
            filter.insert(&derive_rid(&ps[0].cert.pk_v, &sigma));
        }
        rsu.set_filter(filter);
        let sender = SenderState::new([4; 32], ps, 0, sigma, SenderConfig::default()).unwrap();
        let mut receiver = Receiver::new(*ta.public(), ReceiverConfig::default());
        receiver.on_anchor(&rsu.build_anchor(0, 0), 0).unwrap();
        Fixture {
            ta,
            rsu,
            sender,
            receiver,
        }
    }

    fn fixture() -> Fixture {
        fixture_with(Policy::Normal, false)
    }

    fn deliver(r: &mut Receiver, tx: &TxBundle, now: Timestamp) -> Result<DataAccepted, RejectReason> {
        let out = r.on_data(tx.data.clone(), now);
        if let Some(b) = &tx.boot {
            let _ = r.on_boot(b, now);
        }
        if let Some(rv) = &tx.reveal {
            r.on_reveal(rv, now);
        }
        out
    }

    #[test]
    fn anchor_round_trip_and_tampering() {
        let f = fixture();
        let mut r = Receiver::new(*f.ta.public(), ReceiverConfig::default());
        let mut anchor = f.rsu.build_anchor(0, 0);
        anchor.rsu_signature.0[10] ^= 1;
        assert_eq!(
            r.on_anchor(&anchor, 0),
            Err(AnchorError::AnchorRejected("RSU signature invalid"))
        );
        assert!(r.anchor().is_none());
        let good = f.rsu.build_anchor(0, 0);
        assert_eq!(r.on_anchor(&good, 0), Ok(AnchorOutcome::Adopted));
        assert_eq!(r.on_anchor(&good, 1), Ok(AnchorOutcome::Unchanged));
        let before = r.anchor().unwrap().timestamp;
        assert!(r.on_anchor(&anchor, 0).is_err());
        assert_eq!(r.anchor().unwrap().timestamp, before);
    }

    #[test]
    fn anchor_from_foreign_rsu_rejected() {
        let f = fixture();
        let rogue_ta = TrustedAuthority::from_seed(999);
        let rogue = Rsu::new(
            &rogue_ta,
            5,
            AnchorParams::default(),
            Validity::new(0, 1 << 30).unwrap(),
        );
        let mut r = Receiver::new(*f.ta.public(), ReceiverConfig::default());
        assert!(matches!(
            r.on_anchor(&rogue.build_anchor(0, 0), 0),
            Err(AnchorError::AnchorRejected(_))
        ));
    }

    #[test]
    fn expired_anchor_is_stale() {
        let f = fixture();
        let mut r = Receiver::new(*f.ta.public(), ReceiverConfig::default());
        let anchor = f.rsu.build_anchor(0, 0);
        let end = anchor.validity.end;
        assert_eq!(r.on_anchor(&anchor, end + 1_000_000), Err(AnchorError::AnchorStale));
        assert_eq!(r.on_anchor(&anchor, end), Err(AnchorError::AnchorStale));
        assert!(r.on_anchor(&anchor, end - 1).is_ok());
    }

    #[test]
    fn honest_boot_whitelists_and_promotes_companion() {
        let mut f = fixture();
        f.sender.on_slot_tick(1).unwrap();
        let tx = f.sender.send_message(b"hello", false).unwrap();
        let now = SLOT;
        let d = f.receiver.on_data(tx.data.clone(), now).unwrap();
        assert_eq!(d.status, FrameStatus::Pending);
        let acc = f.receiver.on_boot(tx.boot.as_ref().unwrap(), now).unwrap();
        assert_eq!(acc.companion, Some(d.id));
        assert_eq!(acc.est, f.sender.est());
        assert_eq!(
            f.receiver.whitelist_entry(&acc.est).unwrap().valid_until,
            now + DEFAULT_WHITELIST_TTL_US
        );

        f.sender.on_slot_tick(11).unwrap();
        let tx2 = f.sender.send_message(b"next", false).unwrap();
        assert_eq!(
            f.receiver.on_data(tx2.data, 11 * SLOT).unwrap().status,
            FrameStatus::ImmediateAuth
        );
    }

    #[test]
    fn revoked_boot_rejected_before_signature() {
        let mut f = fixture_with(Policy::Normal, true);
        f.sender.on_slot_tick(1).unwrap();
        let tx = f.sender.send_message(b"hello", false).unwrap();
        f.receiver.on_data(tx.data.clone(), SLOT).unwrap();
        let before = f.receiver.ops();
        assert_eq!(
            f.receiver.on_boot(tx.boot.as_ref().unwrap(), SLOT),
            Err(BootError::Revoked)
        );
        assert_eq!(f.receiver.ops().sig_verify, before.sig_verify);
        assert_eq!(f.receiver.whitelist_len(), 0);
    }

    #[test]
    fn digest_mismatch_and_missing_companion() {
        let mut f = fixture();
        f.sender.on_slot_tick(1).unwrap();
        let tx = f.sender.send_message(b"hello", false).unwrap();
        let boot = tx.boot.clone().unwrap();
        assert_eq!(f.receiver.on_boot(&boot, SLOT), Err(BootError::MissingCompanion));
        let mut other = tx.data.clone();
        other.payload = b"jello".to_vec();
        assert_eq!(
            f.receiver.on_boot_with(&boot, &other, SLOT),
            Err(BootError::DigestMismatch)
        );
        f.receiver.on_data(other, SLOT).unwrap();
        assert_eq!(f.receiver.on_boot(&boot, SLOT), Err(BootError::DigestMismatch));
    }

    #[test]
    fn bad_cert_and_bad_signature() {
        let mut f = fixture();
        f.sender.on_slot_tick(1).unwrap();
        let tx = f.sender.send_message(b"hello", false).unwrap();
        f.receiver.on_data(tx.data.clone(), SLOT).unwrap();
        let mut boot = tx.boot.clone().unwrap();
        boot.cert.ta_signature.0[5] ^= 1;
        assert_eq!(f.receiver.on_boot(&boot, SLOT), Err(BootError::CertInvalid));
        let mut boot = tx.boot.clone().unwrap();
        boot.signature.0[5] ^= 1;
        assert_eq!(f.receiver.on_boot(&boot, SLOT), Err(BootError::SigInvalid));
    }

    #[test]
    fn duplicate_delivery_is_a_replay() {
        let mut f = fixture();
        f.sender.on_slot_tick(1).unwrap();
        let tx = f.sender.send_message(b"hello", false).unwrap();
        assert!(f.receiver.on_data(tx.data.clone(), SLOT).is_ok());
        assert_eq!(f.receiver.on_data(tx.data, SLOT + 5), Err(RejectReason::ReplayDetected));
    }

    #[test]
    fn whitelist_expiry_boundary() {
        let mut f = fixture();
        f.sender.on_slot_tick(1).unwrap();
        let tx = f.sender.send_message(b"a", false).unwrap();
        deliver(&mut f.receiver, &tx, SLOT).unwrap();
        let until = f.receiver.whitelist_entry(&f.sender.est()).unwrap().valid_until;
        // Two frames in the slot right at expiry; the receiver clock is
        // aligned so the slot is current.
        let slot = (until / SLOT) as u32;
        f.sender.on_slot_tick(slot).unwrap();
        let tx = f.sender.send_message(b"b", false).unwrap();
        assert_eq!(
            f.receiver.on_data(tx.data, until - 1).unwrap().status,
            FrameStatus::ImmediateAuth
        );
        let tx = f.sender.send_message(b"c", false).unwrap();
        assert_eq!(f.receiver.on_data(tx.data, until).unwrap().status, FrameStatus::Pending);
        f.receiver.gc(until);
        assert!(f.receiver.whitelist_entry(&f.sender.est()).is_none());
    }

    #[test]
    fn forged_reveal_key_changes_nothing() {
        let mut f = fixture();
        f.sender.on_slot_tick(1).unwrap();
        let tx = f.sender.send_message(b"a", false).unwrap();
        f.receiver.on_data(tx.data.clone(), SLOT).unwrap();
        let forged = RevealFrame {
            epoch: 0,
            oldest_slot: 1,
            keys: vec![[0x42; 16]],
            vrf_blob: vec![],
        };
        let report = f.receiver.on_reveal(&forged, 3 * SLOT);
        assert!(report.frames.is_empty());
        assert_eq!(report.key_errors, vec![(1, RevealError::CommitmentMismatch)]);
        f.receiver.drain_events();
        f.sender.on_slot_tick(3).unwrap();
        let honest = f.sender.take_reveal().unwrap().unwrap();
        let report = f.receiver.on_reveal(&honest, 3 * SLOT);
        assert_eq!(report.frames.len(), 1);
        assert_eq!(report.frames[0].1, FrameStatus::StrongAuth);
    }

    #[test]
    fn late_data_after_disclosure_is_rejected() {
        let mut f = fixture();
        f.sender.on_slot_tick(1).unwrap();
        let a = f.sender.send_message(b"a", false).unwrap();
        let b = f.sender.send_message(b"b", false).unwrap();
        f.receiver.on_data(a.data, SLOT).unwrap();
        f.sender.on_slot_tick(3).unwrap();
        f.receiver
            .on_reveal(&f.sender.take_reveal().unwrap().unwrap(), 3 * SLOT);
        assert_eq!(f.receiver.on_data(b.data, 3 * SLOT), Err(RejectReason::KeyDisclosed));
    }

    #[test]
    fn strict_policy_holds_frames_without_boot() {
        let mut f = fixture_with(Policy::Strict, false);
        f.sender.on_slot_tick(1).unwrap();
        let tx = f.sender.send_message(b"a", false).unwrap();
        // BOOT dropped.
        f.receiver.on_data(tx.data, SLOT).unwrap();
        f.sender.on_slot_tick(3).unwrap();
        let report = f
            .receiver
            .on_reveal(&f.sender.take_reveal().unwrap().unwrap(), 3 * SLOT);
        assert_eq!(report.frames[0].1, FrameStatus::StrictHold);
    }

    #[test]
    fn pending_frames_expire_without_reveal() {
        let mut f = fixture();
        f.sender.on_slot_tick(1).unwrap();
        let tx = f.sender.send_message(b"a", false).unwrap();
        let id = f.receiver.on_data(tx.data, SLOT).unwrap().id;
        f.receiver.drain_events();
        f.receiver.gc(7 * SLOT);
        assert_eq!(f.receiver.cache_len(), 1);
        f.receiver.gc(8 * SLOT);
        assert_eq!(f.receiver.cache_len(), 0);
        let events = f.receiver.drain_events();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].frame, id);
        assert_eq!(events[0].verdict, Verdict::Rejected(RejectReason::Expired));
    }

    #[test]
    fn wrong_cell_and_epoch() {
        let mut f = fixture();
        f.sender.on_slot_tick(1).unwrap();
        let tx = f.sender.send_message(b"a", false).unwrap();
        let mut d = tx.data.clone();
        d.meta.cell_id = 9;
        assert_eq!(f.receiver.on_data(d, SLOT), Err(RejectReason::WrongCell));
        let mut d = tx.data.clone();
        d.meta.epoch = 1;
        assert_eq!(f.receiver.on_data(d, SLOT), Err(RejectReason::WrongEpoch));
        let mut fresh = Receiver::new(*f.ta.public(), ReceiverConfig::default());
        assert_eq!(fresh.on_data(tx.data, SLOT), Err(RejectReason::NoAnchor));
    }

    #[test]
    fn old_slot_outside_window_is_stale() {
        let mut f = fixture();
        f.sender.on_slot_tick(1).unwrap();
        let tx = f.sender.send_message(b"a", false).unwrap();
        assert_eq!(f.receiver.on_data(tx.data, 50 * SLOT), Err(RejectReason::StaleSlot));
    }

    #[test]
    fn memoized_checker_agrees() {
        let k = SigningKeyPair::from_seed(3);
        let sig = crate::crypto::sign(&k, b"m");
        let memo = MemoizedCheck::new();
        assert!(memo.verify(k.public(), b"m", &sig));
        assert!(memo.verify(k.public(), b"m", &sig));
        assert!(!memo.verify(k.public(), b"n", &sig));
        assert_eq!(memo.len(), 2);
    }

    #[test]
    fn vrf_hook_can_veto() {
        let mut f = fixture();
        f.receiver.set_vrf_hook(Box::new(|_, pk| pk.is_some()));
        f.sender.on_slot_tick(1).unwrap();
        let tx = f.sender.send_message(b"a", false).unwrap();
        f.receiver.on_data(tx.data, SLOT).unwrap();
        f.sender.on_slot_tick(3).unwrap();
        let mut reveal = f.sender.take_reveal().unwrap().unwrap();
        let plain = reveal.clone();
        reveal.vrf_blob = vec![1, 2, 3];
        let report = f.receiver.on_reveal(&reveal, 3 * SLOT);
        assert!(report.key_errors.contains(&(1, RevealError::VrfInvalid)));
        // Without a blob the hook is not consulted.
        let report = f.receiver.on_reveal(&plain, 3 * SLOT);
        assert_eq!(report.frames.len(), 1);
    }
}
