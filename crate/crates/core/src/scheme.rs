//! Scheme-agnostic sender/receiver interface used by the simulator.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{BaselineReceiver, EcdsaFrame, EcdsaSender, TeslaData, TeslaSender, VastSender};
use crate::crypto::{Pseudonym, PublicKey};
use crate::obu::{SenderConfig, SenderError, SenderState};
use crate::verifier::{FrameId, OpCounts, Receiver, ReceiverConfig, ReceiverStats, SignatureCheck, VerdictEvent};
use crate::wire::{AnchorFrame, Frame, RevealFrame};
use crate::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeId {
    SaltV,
    Ecdsa,
    Tesla,
    Vast,
}

impl SchemeId {
    pub const ALL: [SchemeId; 4] = [SchemeId::SaltV, SchemeId::Ecdsa, SchemeId::Tesla, SchemeId::Vast];

    pub fn name(self) -> &'static str {
        match self {
            SchemeId::SaltV => "saltv",
            SchemeId::Ecdsa => "ecdsa",
            SchemeId::Tesla => "tesla",
            SchemeId::Vast => "vast",
        }
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown scheme `{0}` (expected saltv, ecdsa, tesla or vast)")]
pub struct UnknownScheme(pub String);

impl FromStr for SchemeId {
    type Err = UnknownScheme;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "saltv" | "salt-v" => Ok(SchemeId::SaltV),
            "ecdsa" => Ok(SchemeId::Ecdsa),
            "tesla" => Ok(SchemeId::Tesla),
            "vast" => Ok(SchemeId::Vast),
            _ => Err(UnknownScheme(s.to_string())),
        }
    }
}

/// Anything one scheme puts on the air.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Saltv(Frame),
    TeslaData(TeslaData),
    TeslaReveal(RevealFrame),
    Signed(EcdsaFrame),
}

impl Packet {
    pub fn encoded_len(&self) -> usize {
        match self {
            Packet::Saltv(f) => f.encoded_len(),
            Packet::TeslaData(d) => d.encoded_len(),
            Packet::TeslaReveal(r) => r.encoded_len(),
            Packet::Signed(s) => s.encoded_len(),
        }
    }

    /// Whether the packet carries an application payload (and so ends in a
    /// verdict at every receiver that gets it).
    pub fn is_message(&self) -> bool {
        matches!(
            self,
            Packet::Saltv(Frame::Data(_)) | Packet::TeslaData(_) | Packet::Signed(_)
        )
    }

    pub fn payload_mut(&mut self) -> Option<&mut Vec<u8>> {
        match self {
            Packet::Saltv(Frame::Data(d)) => Some(&mut d.payload),
            Packet::TeslaData(d) => Some(&mut d.payload),
            Packet::Signed(s) => Some(&mut s.payload),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum SchemeError {
    #[error(transparent)]
    Sender(#[from] SenderError),
    #[error("payload of {0} bytes exceeds the frame limit")]
    PayloadTooLarge(usize),
}

/// Sender-side parameters common to all schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchemeParams {
    pub domain_id: u32,
    pub cell_id: u16,
    pub boot_period: u32,
    pub disclosure_delay: u8,
    pub reveal_window: u8,
}

impl Default for SchemeParams {
    fn default() -> Self {
        let c = SenderConfig::default();
        SchemeParams {
            domain_id: c.domain_id,
            cell_id: c.cell_id,
            boot_period: c.boot_period,
            disclosure_delay: c.disclosure_delay,
            reveal_window: c.reveal_window,
        }
    }
}

impl From<SchemeParams> for SenderConfig {
    fn from(p: SchemeParams) -> Self {
        SenderConfig {
            domain_id: p.domain_id,
            cell_id: p.cell_id,
            boot_period: p.boot_period,
            disclosure_delay: p.disclosure_delay,
            reveal_window: p.reveal_window,
        }
    }
}

pub trait SchemeSender: Send {
    /// Packets for one application message sent in `slot` at time `now`.
    fn send(&mut self, slot: u32, payload: &[u8], now: Timestamp) -> Result<Vec<Packet>, SchemeError>;

    /// Standalone key disclosure at the start of `slot`, if any key is due.
    fn reveal_tick(&mut self, slot: u32) -> Result<Option<Packet>, SchemeError>;

    /// psid receivers will report for this sender's messages.
    fn psid(&self) -> u32;
}

pub trait SchemeReceiver: Send {
    fn on_anchor(&mut self, anchor: &AnchorFrame, now: Timestamp);
    fn on_packet(&mut self, packet: &Packet, now: Timestamp);
    /// Id the next message packet will be assigned.
    fn next_frame_id(&self) -> FrameId;
    fn gc(&mut self, now: Timestamp);
    /// Finalizes every buffered message.
    fn flush(&mut self, now: Timestamp);
    fn drain_events(&mut self) -> Vec<VerdictEvent>;
    fn ops(&self) -> OpCounts;
    fn anchor_ops(&self) -> OpCounts;
    fn stats(&self) -> ReceiverStats;
}

pub struct SaltvSender {
    state: SenderState,
}

impl SaltvSender {
    pub fn new(state: SenderState) -> Self {
        SaltvSender { state }
    }

    pub fn state(&self) -> &SenderState {
        &self.state
    }

    fn tick(&mut self, slot: u32) -> Result<(), SenderError> {
        if self.state.current_slot().map_or(true, |c| slot > c) {
            self.state.on_slot_tick(slot)?;
        }
        Ok(())
    }
}

impl SchemeSender for SaltvSender {
    fn send(&mut self, slot: u32, payload: &[u8], _now: Timestamp) -> Result<Vec<Packet>, SchemeError> {
        self.tick(slot)?;
        let tx = self.state.send_message(payload, false)?;
        Ok(tx.frames().into_iter().map(Packet::Saltv).collect())
    }

    fn reveal_tick(&mut self, slot: u32) -> Result<Option<Packet>, SchemeError> {
        self.tick(slot)?;
        Ok(self.state.take_reveal()?.map(|r| Packet::Saltv(Frame::Reveal(r))))
    }

    fn psid(&self) -> u32 {
        self.state.psid()
    }
}

impl SchemeReceiver for Receiver {
    fn on_anchor(&mut self, anchor: &AnchorFrame, now: Timestamp) {
        let _ = Receiver::on_anchor(self, anchor, now);
    }

    fn on_packet(&mut self, packet: &Packet, now: Timestamp) {
        match packet {
            Packet::Saltv(Frame::Data(d)) => {
                let _ = self.on_data(d.clone(), now);
            }
            Packet::Saltv(Frame::Boot(b)) => {
                let _ = self.on_boot(b, now);
            }
            Packet::Saltv(Frame::Reveal(r)) => {
                self.on_reveal(r, now);
            }
            Packet::Saltv(Frame::Anchor(a)) => {
                let _ = Receiver::on_anchor(self, a, now);
            }
            _ => {}
        }
    }

    fn next_frame_id(&self) -> FrameId {
        Receiver::next_frame_id(self)
    }

    fn gc(&mut self, now: Timestamp) {
        Receiver::gc(self, now)
    }

    fn flush(&mut self, now: Timestamp) {
        Receiver::flush(self, now)
    }

    fn drain_events(&mut self) -> Vec<VerdictEvent> {
        Receiver::drain_events(self)
    }

    fn ops(&self) -> OpCounts {
        Receiver::ops(self)
    }

    fn anchor_ops(&self) -> OpCounts {
        Receiver::anchor_ops(self)
    }

    fn stats(&self) -> ReceiverStats {
        Receiver::stats(self)
    }
}

/// Builds the sender half of `scheme`.
pub fn make_sender(
    scheme: SchemeId,
    seed: [u8; 32],
    pseudonyms: Vec<Pseudonym>,
    epoch: u32,
    sigma: [u8; 16],
    params: SchemeParams,
) -> Result<Box<dyn SchemeSender>, SchemeError> {
    Ok(match scheme {
        SchemeId::SaltV => Box::new(SaltvSender::new(SenderState::new(
            seed,
            pseudonyms,
            epoch,
            sigma,
            params.into(),
        )?)),
        SchemeId::Tesla => Box::new(TeslaSender::new(seed, &pseudonyms, epoch, params)?),
        SchemeId::Ecdsa => Box::new(EcdsaSender::new(&pseudonyms)?),
        SchemeId::Vast => Box::new(VastSender::new(seed, &pseudonyms, epoch, params)?),
    })
}

/// Builds the receiver half of `scheme`.
pub fn make_receiver(
    scheme: SchemeId,
    ta: PublicKey,
    config: ReceiverConfig,
    checker: Arc<dyn SignatureCheck>,
) -> Box<dyn SchemeReceiver> {
    match scheme {
        SchemeId::SaltV => Box::new(Receiver::with_checker(ta, config, checker)),
        _ => Box::new(BaselineReceiver::new(ta, config, checker)),
    }
}
