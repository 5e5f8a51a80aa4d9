//! Comparison schemes: per-message ECDSA, pure TESLA-style delayed
//! authentication, and VAST (periodic signatures over a TESLA stream).
//!
//! All three share [`BaselineReceiver`], which accepts signed frames on
//! arrival and buffers TESLA frames until their slot key is disclosed.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use thiserror::Error;

use crate::crypto::{
    gmac, sign, MacTag, Pseudonym, PseudonymCert, PublicKey, Signature, SigningKeyPair, CERT_LEN, IV_LEN, MAC_TAG_LEN,
    SIGNATURE_LEN,
};
use crate::keysched::{commit, derive_epoch_key, slot_context, Commitment, EpochKey, SlotKeyMaterial, COMMITMENT_LEN};
use crate::obu::{DisclosureQueue, SenderError, MAX_PAYLOAD};
use crate::revocation::{derive_rid, RevocationFilter};
use crate::scheme::{Packet, SchemeError, SchemeParams, SchemeReceiver, SchemeSender};
use crate::verifier::{
    check_anchor, FrameId, OpCounts, ReceiverConfig, ReceiverStats, RejectReason, SignatureCheck, Verdict, VerdictEvent,
};
use crate::wire::{compute_iv, compute_psid, AnchorFrame, Iv, Reader, RevealFrame, WireError};
use crate::Timestamp;

/// epoch ‖ slot ‖ cell_id ‖ psid
pub const TESLA_META_LEN: usize = 4 + 4 + 2 + 4;
pub const TESLA_DATA_OVERHEAD: usize = TESLA_META_LEN + COMMITMENT_LEN + IV_LEN + MAC_TAG_LEN + 2;

pub const TYPE_SIGNED: u8 = 0x05;
/// type ‖ generation time
pub const SIGNED_HEADER_LEN: usize = 1 + 8;
pub const SIGNED_OVERHEAD: usize = SIGNED_HEADER_LEN + CERT_LEN + SIGNATURE_LEN;

/// Signed frames older than this are refused.
pub const SIGNED_FRESHNESS_US: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TeslaMeta {
    pub epoch: u32,
    pub slot: u32,
    pub cell_id: u16,
    pub psid: u32,
}

impl TeslaMeta {
    pub fn to_bytes(&self) -> [u8; TESLA_META_LEN] {
        let mut out = [0u8; TESLA_META_LEN];
        out[0..4].copy_from_slice(&self.epoch.to_be_bytes());
        out[4..8].copy_from_slice(&self.slot.to_be_bytes());
        out[8..10].copy_from_slice(&self.cell_id.to_be_bytes());
        out[10..14].copy_from_slice(&self.psid.to_be_bytes());
        out
    }
}

/// TESLA DATA frame: no type byte, no per-slot counter and no session tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeslaData {
    pub meta: TeslaMeta,
    pub commitment: Commitment,
    pub iv: Iv,
    pub tag: MacTag,
    pub payload: Vec<u8>,
}

impl TeslaData {
    pub fn encoded_len(&self) -> usize {
        TESLA_DATA_OVERHEAD + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.meta.to_bytes());
        out.extend_from_slice(&self.commitment);
        out.extend_from_slice(&self.iv);
        out.extend_from_slice(&self.tag.0);
        out.extend_from_slice(&(self.payload.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let meta = TeslaMeta {
            epoch: r.u32()?,
            slot: r.u32()?,
            cell_id: r.u16()?,
            psid: r.u32()?,
        };
        let commitment = r.array()?;
        let iv = r.array()?;
        let tag = MacTag(r.array()?);
        let len = r.u16()? as usize;
        let payload = r.take(len)?.to_vec();
        if r.remaining() != 0 {
            return Err(WireError::TrailingBytes(r.remaining()));
        }
        Ok(TeslaData {
            meta,
            commitment,
            iv,
            tag,
            payload,
        })
    }
}

/// Per-message signed frame: type ‖ gen_time ‖ cert ‖ signature ‖ payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EcdsaFrame {
    pub gen_time: u64,
    pub cert: PseudonymCert,
    pub signature: Signature,
    pub payload: Vec<u8>,
}

impl EcdsaFrame {
    pub fn encoded_len(&self) -> usize {
        SIGNED_OVERHEAD + self.payload.len()
    }

    pub fn signed_bytes(gen_time: u64, cert: &PseudonymCert, payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(SIGNED_HEADER_LEN + CERT_LEN + payload.len());
        out.push(TYPE_SIGNED);
        out.extend_from_slice(&gen_time.to_be_bytes());
        out.extend_from_slice(&cert.to_bytes());
        out.extend_from_slice(payload);
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(TYPE_SIGNED);
        out.extend_from_slice(&self.gen_time.to_be_bytes());
        out.extend_from_slice(&self.cert.to_bytes());
        out.extend_from_slice(&self.signature.0);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let t = r.u8()?;
        if t != TYPE_SIGNED {
            return Err(WireError::UnknownFrameType(t));
        }
        Ok(EcdsaFrame {
            gen_time: r.u64()?,
            cert: r.cert()?,
            signature: Signature(r.array()?),
            payload: r.rest().to_vec(),
        })
    }
}

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("sender needs at least one pseudonym")]
    NoPseudonym,
}

impl From<BaselineError> for SchemeError {
    fn from(_: BaselineError) -> Self {
        SchemeError::Sender(SenderError::PseudonymsExhausted)
    }
}

pub struct TeslaSender {
    epoch_key: EpochKey,
    context: [u8; 6],
    params: SchemeParams,
    psid: u32,
    current_slot: Option<u32>,
    counter: u32,
    current: Option<SlotKeyMaterial>,
    disclosure: DisclosureQueue,
}

impl TeslaSender {
    pub fn new(
        seed: [u8; 32],
        pseudonyms: &[Pseudonym],
        epoch: u32,
        params: SchemeParams,
    ) -> Result<Self, SchemeError> {
        let p = pseudonyms.first().ok_or(BaselineError::NoPseudonym)?;
        crate::obu::SenderConfig::from(params).validate()?;
        Ok(TeslaSender {
            epoch_key: derive_epoch_key(&seed, epoch, params.domain_id),
            context: slot_context(params.cell_id, params.domain_id),
            params,
            psid: compute_psid(&p.cert),
            current_slot: None,
            counter: 0,
            current: None,
            disclosure: DisclosureQueue::new(params.disclosure_delay, params.reveal_window),
        })
    }

    fn tick(&mut self, slot: u32) {
        if self.current_slot.map_or(true, |c| slot > c) {
            self.current_slot = Some(slot);
            self.counter = 0;
            self.current = None;
            self.disclosure.advance(slot);
        }
    }

    fn material(&self, slot: u32) -> Result<SlotKeyMaterial, SchemeError> {
        SlotKeyMaterial::derive(&self.epoch_key, slot, &self.context, self.params.disclosure_delay)
            .map_err(|e| SchemeError::Sender(e.into()))
    }

    pub fn data(&mut self, slot: u32, payload: &[u8]) -> Result<TeslaData, SchemeError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(SchemeError::PayloadTooLarge(payload.len()));
        }
        self.tick(slot);
        let material = match self.current {
            Some(m) => m,
            None => {
                let m = self.material(slot)?;
                self.current = Some(m);
                m
            }
        };
        let meta = TeslaMeta {
            epoch: self.epoch_key.epoch,
            slot,
            cell_id: self.params.cell_id,
            psid: self.psid,
        };
        let mut nonce_src = [0u8; 8];
        nonce_src[..4].copy_from_slice(&self.psid.to_be_bytes());
        let iv = compute_iv(meta.epoch, slot, self.counter, &nonce_src);
        self.counter += 1;
        let tag = gmac(&material.key, &iv, &meta.to_bytes(), payload).map_err(|e| SchemeError::Sender(e.into()))?;
        self.disclosure.mark_used(slot);
        Ok(TeslaData {
            meta,
            commitment: material.commitment,
            iv,
            tag,
            payload: payload.to_vec(),
        })
    }

    pub fn reveal(&mut self, slot: u32) -> Result<Option<RevealFrame>, SchemeError> {
        self.tick(slot);
        let Some(range) = self.disclosure.take() else {
            return Ok(None);
        };
        let oldest_slot = *range.start();
        let keys = range
            .map(|s| self.material(s).map(|m| m.key))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Some(RevealFrame {
            epoch: self.epoch_key.epoch,
            oldest_slot,
            keys,
            vrf_blob: Vec::new(),
        }))
    }
}

impl SchemeSender for TeslaSender {
    fn send(&mut self, slot: u32, payload: &[u8], _now: Timestamp) -> Result<Vec<Packet>, SchemeError> {
        Ok(vec![Packet::TeslaData(self.data(slot, payload)?)])
    }

    fn reveal_tick(&mut self, slot: u32) -> Result<Option<Packet>, SchemeError> {
        Ok(self.reveal(slot)?.map(Packet::TeslaReveal))
    }

    fn psid(&self) -> u32 {
        self.psid
    }
}

pub struct EcdsaSender {
    cert: PseudonymCert,
    key: SigningKeyPair,
    psid: u32,
}

impl EcdsaSender {
    pub fn new(pseudonyms: &[Pseudonym]) -> Result<Self, SchemeError> {
        let p = pseudonyms.first().ok_or(BaselineError::NoPseudonym)?;
        Ok(EcdsaSender {
            cert: p.cert,
            key: p.sk_p.clone(),
            psid: compute_psid(&p.cert),
        })
    }

    pub fn frame(&self, payload: &[u8], now: Timestamp) -> Result<EcdsaFrame, SchemeError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(SchemeError::PayloadTooLarge(payload.len()));
        }
        let signature = sign(&self.key, &EcdsaFrame::signed_bytes(now, &self.cert, payload));
        Ok(EcdsaFrame {
            gen_time: now,
            cert: self.cert,
            signature,
            payload: payload.to_vec(),
        })
    }
}

impl SchemeSender for EcdsaSender {
    fn send(&mut self, _slot: u32, payload: &[u8], now: Timestamp) -> Result<Vec<Packet>, SchemeError> {
        Ok(vec![Packet::Signed(self.frame(payload, now)?)])
    }

    fn reveal_tick(&mut self, _slot: u32) -> Result<Option<Packet>, SchemeError> {
        Ok(None)
    }

    fn psid(&self) -> u32 {
        self.psid
    }
}

/// Every `boot_period`-th message is signed, the rest go out as TESLA frames.
pub struct VastSender {
    tesla: TeslaSender,
    signer: EcdsaSender,
    period: u32,
    index: u64,
}

impl VastSender {
    pub fn new(
        seed: [u8; 32],
        pseudonyms: &[Pseudonym],
        epoch: u32,
        params: SchemeParams,
    ) -> Result<Self, SchemeError> {
        Ok(VastSender {
            tesla: TeslaSender::new(seed, pseudonyms, epoch, params)?,
            signer: EcdsaSender::new(pseudonyms)?,
            period: params.boot_period,
            index: 0,
        })
    }
}

impl SchemeSender for VastSender {
    fn send(&mut self, slot: u32, payload: &[u8], now: Timestamp) -> Result<Vec<Packet>, SchemeError> {
        let signed = self.index % self.period as u64 == 0;
        self.index += 1;
        if signed {
            self.tesla.tick(slot);
            Ok(vec![Packet::Signed(self.signer.frame(payload, now)?)])
        } else {
            Ok(vec![Packet::TeslaData(self.tesla.data(slot, payload)?)])
        }
    }

    fn reveal_tick(&mut self, slot: u32) -> Result<Option<Packet>, SchemeError> {
        Ok(self.tesla.reveal(slot)?.map(Packet::TeslaReveal))
    }

    fn psid(&self) -> u32 {
        self.signer.psid
    }
}

#[derive(Debug, Clone)]
struct AnchorView {
    timestamp: Timestamp,
    epoch: u32,
    slot_len_us: u64,
    disclosure_delay: u8,
    drift_bound_us: u64,
    sigma: [u8; 16],
    filter: Arc<RevocationFilter>,
    signature: Signature,
}

#[derive(Debug, Clone)]
struct Buffered {
    id: FrameId,
    frame: TeslaData,
    received_at: Timestamp,
    done: bool,
}

/// Receiver for the ECDSA, TESLA and VAST baselines.
pub struct BaselineReceiver {
    config: ReceiverConfig,
    ta: PublicKey,
    checker: Arc<dyn SignatureCheck>,
    anchor: Option<AnchorView>,
    cache: BTreeMap<(u32, u32), Vec<Buffered>>,
    cached: usize,
    disclosed: BTreeMap<(u32, u32), Vec<Commitment>>,
    seen_ivs: BTreeMap<(u32, u32), HashSet<(u32, Iv)>>,
    seen_sigs: BTreeMap<u64, Vec<Signature>>,
    next_id: u64,
    events: Vec<VerdictEvent>,
    ops: OpCounts,
    anchor_ops: OpCounts,
    stats: ReceiverStats,
}

impl BaselineReceiver {
    pub fn new(ta: PublicKey, config: ReceiverConfig, checker: Arc<dyn SignatureCheck>) -> Self {
        BaselineReceiver {
            config,
            ta,
            checker,
            anchor: None,
            cache: BTreeMap::new(),
            cached: 0,
            disclosed: BTreeMap::new(),
            seen_ivs: BTreeMap::new(),
            seen_sigs: BTreeMap::new(),
            next_id: 0,
            events: Vec::new(),
            ops: OpCounts::default(),
            anchor_ops: OpCounts::default(),
            stats: ReceiverStats::default(),
        }
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

    fn fresh_id(&mut self) -> FrameId {
        let id = FrameId(self.next_id);
        self.next_id += 1;
        id
    }

    fn local_slot(&self, now: Timestamp) -> Option<u32> {
        let a = self.anchor.as_ref()?;
        let local = (now as i128 + self.config.clock_offset_us as i128).max(0) as u64;
        Some((local / a.slot_len_us).min(u32::MAX as u64) as u32)
    }

    pub fn cache_len(&self) -> usize {
        self.cached
    }

    pub fn on_signed(&mut self, frame: &EcdsaFrame, now: Timestamp) -> Result<(), RejectReason> {
        let id = self.fresh_id();
        self.ops.hash += 1;
        let psid = compute_psid(&frame.cert);
        match self.check_signed(frame, now) {
            Ok(()) => {
                self.emit(id, psid, now, now, Verdict::Immediate);
                self.emit(id, psid, now, now, Verdict::Strong);
                Ok(())
            }
            Err(reason) => {
                self.emit(id, psid, now, now, Verdict::Rejected(reason));
                Err(reason)
            }
        }
    }

    fn check_signed(&mut self, frame: &EcdsaFrame, now: Timestamp) -> Result<(), RejectReason> {
        let a = self.anchor.as_ref().ok_or(RejectReason::NoAnchor)?;
        let (sigma, filter, slack) = (a.sigma, Arc::clone(&a.filter), 2 * a.drift_bound_us);
        if frame.gen_time + SIGNED_FRESHNESS_US < now || frame.gen_time > now + slack {
            return Err(RejectReason::StaleSlot);
        }
        if self
            .seen_sigs
            .get(&frame.gen_time)
            .is_some_and(|sigs| sigs.contains(&frame.signature))
        {
            return Err(RejectReason::ReplayDetected);
        }
        let cert = &frame.cert;
        if !cert.validity.contains(now / 1_000_000) {
            return Err(RejectReason::CertInvalid);
        }
        self.ops.cert_verify += 1;
        let signed = PseudonymCert::signed_bytes(&cert.pk_p, &cert.pk_v, &cert.validity);
        if !self.checker.verify(&self.ta, &signed, &cert.ta_signature) {
            return Err(RejectReason::CertInvalid);
        }
        self.ops.hash += 1;
        self.ops.bloom_query += 1;
        if filter.contains(&derive_rid(&cert.pk_v, &sigma)) {
            return Err(RejectReason::Revoked);
        }
        self.ops.sig_verify += 1;
        let msg = EcdsaFrame::signed_bytes(frame.gen_time, cert, &frame.payload);
        if !self.checker.verify(&cert.pk_p, &msg, &frame.signature) {
            return Err(RejectReason::SigInvalid);
        }
        self.seen_sigs.entry(frame.gen_time).or_default().push(frame.signature);
        Ok(())
    }

    pub fn on_tesla_data(&mut self, frame: &TeslaData, now: Timestamp) -> Result<FrameId, RejectReason> {
        let id = self.fresh_id();
        let psid = frame.meta.psid;
        match self.admit_tesla(frame, now) {
            Ok(()) => {
                let key = (frame.meta.epoch, frame.meta.slot);
                self.cache.entry(key).or_default().push(Buffered {
                    id,
                    frame: frame.clone(),
                    received_at: now,
                    done: false,
                });
                self.cached += 1;
                self.stats.cache_high_water = self.stats.cache_high_water.max(self.cached);
                Ok(id)
            }
            Err(reason) => {
                self.emit(id, psid, now, now, Verdict::Rejected(reason));
                Err(reason)
            }
        }
    }

    fn admit_tesla(&mut self, frame: &TeslaData, now: Timestamp) -> Result<(), RejectReason> {
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
        let drift = (2 * a.drift_bound_us).div_ceil(a.slot_len_us) as u32;
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
        if !self
            .seen_ivs
            .entry((m.epoch, m.slot))
            .or_default()
            .insert((m.psid, frame.iv))
        {
            return Err(RejectReason::ReplayDetected);
        }
        Ok(())
    }

    pub fn on_reveal(&mut self, frame: &RevealFrame, now: Timestamp) {
        let Some(depth) = self.anchor.as_ref().map(|a| a.disclosure_delay) else {
            return;
        };
        for (slot, key) in frame.slot_keys() {
            let k = (frame.epoch, slot);
            if !self.cache.get(&k).is_some_and(|es| es.iter().any(|e| !e.done)) {
                continue;
            }
            let Ok(commitment) = commit(key, depth) else {
                continue;
            };
            self.ops.hash += depth as u64;
            let mut changes = Vec::new();
            for e in self
                .cache
                .get_mut(&k)
                .expect("checked above")
                .iter_mut()
                .filter(|e| !e.done && e.frame.commitment == commitment)
            {
                let f = &e.frame;
                let ok = gmac(key, &f.iv, &f.meta.to_bytes(), &f.payload).is_ok_and(|t| t == f.tag);
                e.done = true;
                let verdict = if ok {
                    Verdict::Strong
                } else {
                    Verdict::Rejected(RejectReason::TagMismatch)
                };
                changes.push((e.id, f.meta.psid, e.received_at, verdict));
            }
            if changes.is_empty() {
                self.stats.commitment_mismatches += 1;
                continue;
            }
            let disclosed = self.disclosed.entry(k).or_default();
            if !disclosed.contains(&commitment) {
                disclosed.push(commitment);
            }
            self.ops.gmac += changes.len() as u64;
            for (id, psid, received_at, verdict) in changes {
                self.emit(id, psid, received_at, now, verdict);
            }
        }
    }

    fn evict_before(&mut self, oldest_live: u32, now: Timestamp) {
        let expired: Vec<(u32, u32)> = self.cache.keys().filter(|(_, s)| *s < oldest_live).copied().collect();
        for key in expired {
            let entries = self.cache.remove(&key).expect("listed above");
            self.cached -= entries.len();
            for e in entries.into_iter().filter(|e| !e.done) {
                self.emit(
                    e.id,
                    e.frame.meta.psid,
                    e.received_at,
                    now,
                    Verdict::Rejected(RejectReason::Expired),
                );
            }
        }
        self.disclosed.retain(|(_, s), _| *s >= oldest_live);
        self.seen_ivs.retain(|(_, s), _| *s >= oldest_live);
    }
}

impl SchemeReceiver for BaselineReceiver {
    fn on_anchor(&mut self, frame: &AnchorFrame, now: Timestamp) {
        if self.anchor.as_ref().is_some_and(|a| a.signature == frame.rsu_signature) {
            return;
        }
        if check_anchor(&self.ta, &*self.checker, frame, now, &mut self.anchor_ops).is_err() {
            return;
        }
        if self.anchor.as_ref().is_some_and(|a| frame.timestamp < a.timestamp) {
            return;
        }
        self.anchor = Some(AnchorView {
            timestamp: frame.timestamp,
            epoch: frame.epoch,
            slot_len_us: frame.slot_len_ms as u64 * 1000,
            disclosure_delay: frame.disclosure_delay,
            drift_bound_us: frame.drift_bound_ms as u64 * 1000,
            sigma: frame.sigma,
            filter: Arc::clone(&frame.filter),
            signature: frame.rsu_signature,
        });
    }

    fn on_packet(&mut self, packet: &Packet, now: Timestamp) {
        match packet {
            Packet::Signed(f) => {
                let _ = self.on_signed(f, now);
            }
            Packet::TeslaData(d) => {
                let _ = self.on_tesla_data(d, now);
            }
            Packet::TeslaReveal(r) => self.on_reveal(r, now),
            Packet::Saltv(crate::wire::Frame::Anchor(a)) => SchemeReceiver::on_anchor(self, a, now),
            Packet::Saltv(_) => {}
        }
    }

    fn next_frame_id(&self) -> FrameId {
        FrameId(self.next_id)
    }

    fn gc(&mut self, now: Timestamp) {
        self.seen_sigs = self.seen_sigs.split_off(&now.saturating_sub(2 * SIGNED_FRESHNESS_US));
        let Some(local_slot) = self.local_slot(now) else {
            return;
        };
        let a = self.anchor.as_ref().expect("anchor present");
        let horizon = a.disclosure_delay as u32 + self.config.reveal_window as u32 + 1;
        if let Some(oldest_live) = local_slot.checked_sub(horizon) {
            self.evict_before(oldest_live, now);
        }
    }

    fn flush(&mut self, now: Timestamp) {
        self.evict_before(u32::MAX, now);
    }

    fn drain_events(&mut self) -> Vec<VerdictEvent> {
        std::mem::take(&mut self.events)
    }

    fn ops(&self) -> OpCounts {
        self.ops
    }

    fn anchor_ops(&self) -> OpCounts {
        self.anchor_ops
    }

    fn stats(&self) -> ReceiverStats {
        self.stats
    }
}
