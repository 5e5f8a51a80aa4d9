//! Slot-keyed broadcast authentication for V2X safety messages.
//!
//! Senders MAC each message with a per-slot key committed in advance and
//! disclosed a few slots later. Periodic signed BOOT frames place the sender's
//! ephemeral session tag on receivers' whitelists so that subsequent frames
//! can be accepted on arrival and confirmed once the key is revealed.

pub mod baselines;
pub mod config;
pub mod costs;
pub mod crypto;
pub mod keysched;
pub mod obu;
pub mod report;
pub mod revocation;
pub mod rsu;
pub mod scheme;
pub mod sim;
pub mod verifier;
pub mod wire;

/// Microseconds of simulated or wall time.
pub type Timestamp = u64;

pub use config::{Attack, ScenarioConfig};
pub use costs::CostTable;
pub use crypto::{PseudonymCert, PublicKey, Signature, SigningKeyPair, TrustedAuthority, Validity};
pub use keysched::{Commitment, SlotKey};
pub use obu::{SenderConfig, SenderState, TxBundle};
pub use report::ReportDocument;
pub use revocation::{RevocationFilter, RevocationId};
pub use rsu::{AnchorParams, Rsu, TimeModel};
pub use scheme::{Packet, SchemeId};
pub use sim::MetricsReport;
pub use verifier::{FrameStatus, Receiver, ReceiverConfig, RejectReason, Verdict, VerdictEvent};
pub use wire::{decode, encode, AnchorFrame, BootFrame, DataFrame, Frame, Policy, RevealFrame};
