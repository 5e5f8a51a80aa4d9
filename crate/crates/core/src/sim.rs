//! Deterministic discrete-event simulation of a single broadcast domain.
//!
//! N vehicles broadcast fixed-size messages at a fixed rate, aligned to their
//! own (drifting) slot boundaries. One RSU emits anchors. A set of observer
//! receivers hears every vehicle through an i.i.d. Bernoulli loss channel and
//! feeds its verdict events into a [`Collector`]. Everything random is drawn
//! from ChaCha streams seeded by the scenario seed, and the event queue is
//! ordered by `(time, sequence)`, so a given config always yields the same
//! report.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Attack, ConfigError, ScenarioConfig};
use crate::costs::{self, CostError, CostTable};
use crate::crypto::{issue_pseudonym_batch, CryptoError, TrustedAuthority, Validity};
use crate::rsu::{AnchorParams, Rsu, TimeModel};
use crate::scheme::{
    make_receiver, make_sender, Packet, SchemeError, SchemeId, SchemeParams, SchemeReceiver, SchemeSender,
};
use crate::verifier::{FrameId, MemoizedCheck, OpCounts, ReceiverConfig, Verdict, VerdictEvent};
use crate::wire::Frame;
use crate::Timestamp;

/// How often receivers garbage-collect.
pub const GC_PERIOD_US: u64 = 50_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("scheme setup failed: {0}")]
    Scheme(#[from] SchemeError),
    #[error("credential setup failed: {0}")]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub min: f64,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
}

impl Distribution {
    fn of(mut xs: Vec<f64>) -> Self {
        if xs.is_empty() {
            return Distribution {
                min: 0.0,
                median: 0.0,
                mean: 0.0,
                max: 0.0,
            };
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        Distribution {
            min: xs[0],
            median: xs[xs.len() / 2],
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
            max: xs[xs.len() - 1],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryHighWater {
    pub cache_entries: usize,
    pub whitelist_entries: usize,
    pub ledger_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub behavior: Attack,
    /// Attack packets delivered to observers.
    pub attack_frames: u64,
    /// Attack messages that reached final acceptance, or forged disclosures
    /// that authenticated anything.
    pub attack_frames_accepted: u64,
    /// Attack messages that were provisionally accepted on arrival at some
    /// point (and later rejected or confirmed).
    pub attack_frames_provisional: u64,
    pub victim_messages: u64,
    pub victim_immediate_ratio: f64,
    pub boots_rejected: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scheme: SchemeId,
    pub vehicles: u32,
    pub observers: u32,
    pub messages_sent: u64,
    pub frames_sent: u64,
    pub boot_frames: u64,
    pub reveal_frames: u64,
    pub avg_message_frame_bytes: f64,
    pub avg_bytes_per_message: f64,
    pub deliveries: u64,
    pub dropped_by_loss: u64,
    pub strong: u64,
    pub held: u64,
    pub rejected: BTreeMap<String, u64>,
    /// Deliveries without exactly one terminal verdict (always 0).
    pub unaccounted: u64,
    pub immediate_ratio: f64,
    pub avg_auth_delay_ms: f64,
    pub mean_disclosure_wait_ms: f64,
    pub retroactive_rejections: u64,
    pub avg_computation_ms: f64,
    pub per_receiver_computation_ms: Distribution,
    pub ops: OpCounts,
    pub anchor_ops: OpCounts,
    pub memory: MemoryHighWater,
    pub attack: Option<AttackReport>,
}

/// Folds verdict events into integer aggregates.
#[derive(Debug, Default)]
pub struct Collector {
    warmup_us: Timestamp,
    victim_psid: Option<u32>,
    /// Per observer: frames provisionally accepted, with the time.
    open: Vec<HashMap<FrameId, Timestamp>>,
    /// Per observer: ids of attack messages.
    attack_ids: Vec<HashSet<FrameId>>,
    pub terminals: u64,
    pub strong: u64,
    pub held: u64,
    pub rejected: BTreeMap<&'static str, u64>,
    pub eligible: u64,
    pub eligible_immediate: u64,
    pub delay_sum_us: u64,
    pub delay_count: u64,
    pub wait_sum_us: u64,
    pub wait_count: u64,
    pub retroactive: u64,
    pub attack_accepted: u64,
    pub attack_provisional: u64,
    pub victim_total: u64,
    pub victim_immediate: u64,
}

impl Collector {
    pub fn new(observers: usize, warmup_us: Timestamp, victim_psid: Option<u32>) -> Self {
        Collector {
            warmup_us,
            victim_psid,
            open: vec![HashMap::new(); observers],
            attack_ids: vec![HashSet::new(); observers],
            ..Collector::default()
        }
    }

    pub fn mark_attack(&mut self, observer: usize, id: FrameId) {
        self.attack_ids[observer].insert(id);
    }

    pub fn record(&mut self, observer: usize, e: &VerdictEvent) {
        let attack = self.attack_ids[observer].contains(&e.frame);
        if e.verdict == Verdict::Immediate {
            self.open[observer].insert(e.frame, e.at);
            if attack {
                self.attack_provisional += 1;
            }
            return;
        }
        self.terminals += 1;
        let immediate_at = self.open[observer].remove(&e.frame);
        if attack {
            self.attack_ids[observer].remove(&e.frame);
        }
        let was_immediate = immediate_at == Some(e.received_at);
        match e.verdict {
            Verdict::Strong => {
                self.strong += 1;
                if attack {
                    self.attack_accepted += 1;
                }
            }
            Verdict::Held => self.held += 1,
            Verdict::Rejected(reason) => {
                *self.rejected.entry(reason.name()).or_default() += 1;
                if immediate_at.is_some() {
                    self.retroactive += 1;
                }
            }
            Verdict::Immediate => unreachable!("handled above"),
        }
        if attack {
            return;
        }
        if self.victim_psid == Some(e.psid) {
            self.victim_total += 1;
            self.victim_immediate += was_immediate as u64;
        }
        if e.received_at < self.warmup_us {
            return;
        }
        self.eligible += 1;
        self.eligible_immediate += was_immediate as u64;
        if e.verdict == Verdict::Strong {
            let accepted_at = immediate_at.unwrap_or(e.at);
            self.delay_sum_us += accepted_at - e.received_at;
            self.delay_count += 1;
            if !was_immediate {
                self.wait_sum_us += e.at - e.received_at;
                self.wait_count += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Anchor,
    Gc,
    Send { vehicle: u32, slot: u32 },
    Reveal { vehicle: u32, slot: u32 },
    Inject { index: usize },
}

struct Vehicle {
    sender: Box<dyn SchemeSender>,
    drift_us: i64,
}

struct World<'a> {
    cfg: &'a ScenarioConfig,
    time: TimeModel,
    queue: BinaryHeap<Reverse<(Timestamp, u64, Event)>>,
    seq: u64,
    vehicles: Vec<Vehicle>,
    observers: Vec<Box<dyn SchemeReceiver>>,
    collector: Collector,
    channel: ChaCha20Rng,
    adversary: ChaCha20Rng,
    injections: Vec<Option<Packet>>,
    rsu: Rsu,
    messages_sent: u64,
    frames_sent: u64,
    bytes_sent: u64,
    message_bytes: u64,
    boot_frames: u64,
    reveal_frames: u64,
    deliveries: u64,
    dropped: u64,
    attack_frames: u64,
    replay_round: u64,
}

impl<'a> World<'a> {
    fn schedule(&mut self, at: Timestamp, event: Event) {
        self.queue.push(Reverse((at, self.seq, event)));
        self.seq += 1;
    }

    /// True time at which a clock with `drift_us` reads the start of `slot`.
    fn slot_start(&self, slot: u32, drift_us: i64) -> Timestamp {
        (slot as i64 * self.time.slot_len_us() as i64 - drift_us).max(0) as Timestamp
    }

    fn broadcast(&mut self, packet: &Packet, now: Timestamp, attack: bool) {
        let message = packet.is_message();
        for j in 0..self.observers.len() {
            if self.channel.gen::<f64>() < self.cfg.loss_rate {
                if message && !attack {
                    self.dropped += 1;
                }
                continue;
            }
            if message {
                self.deliveries += 1;
                if attack {
                    let id = self.observers[j].next_frame_id();
                    self.collector.mark_attack(j, id);
                }
            }
            if attack {
                self.attack_frames += 1;
            }
            self.observers[j].on_packet(packet, now);
            let events = self.observers[j].drain_events();
            for e in &events {
                // Disclosures carry no frame id of their own; a forged one
                // that authenticates anything counts as a successful attack.
                if attack && !message && e.verdict == Verdict::Strong {
                    self.collector.attack_accepted += 1;
                }
                self.collector.record(j, e);
            }
        }
    }

    fn transmit(&mut self, packet: Packet, now: Timestamp, vehicle: u32) {
        let len = packet.encoded_len() as u64;
        self.frames_sent += 1;
        self.bytes_sent += len;
        match &packet {
            Packet::Saltv(Frame::Boot(_)) => self.boot_frames += 1,
            Packet::Saltv(Frame::Reveal(_)) | Packet::TeslaReveal(_) => self.reveal_frames += 1,
            _ => {}
        }
        if packet.is_message() {
            self.messages_sent += 1;
            self.message_bytes += len;
        }
        let victim = vehicle == 0;
        match (self.cfg.attack, victim) {
            (Attack::Tamper, true) if packet.is_message() => {
                let mut forged = packet;
                let payload = forged.payload_mut().expect("message packets carry a payload");
                let bit = self.adversary.gen_range(0..payload.len() * 8);
                payload[bit / 8] ^= 1 << (bit % 8);
                self.broadcast(&forged, now, true);
            }
            (Attack::Replay, true) if packet.is_message() => {
                self.broadcast(&packet, now, false);
                // Same slot, a few slots later, and long after.
                let delay = [0, 30_000, 200_000][(self.replay_round % 3) as usize];
                self.replay_round += 1;
                self.injections.push(Some(packet));
                let index = self.injections.len() - 1;
                self.schedule(now + delay, Event::Inject { index });
            }
            (Attack::ForgeKey, true) if is_reveal(&packet) => {
                let forged = forge_reveal(&packet, &mut self.adversary);
                self.broadcast(&forged, now, true);
                self.broadcast(&packet, now, false);
            }
            _ => self.broadcast(&packet, now, false),
        }
    }

    fn payload(&self, vehicle: u32, slot: u32) -> Vec<u8> {
        let mut p = vec![0u8; self.cfg.payload_bytes as usize];
        for (i, b) in vehicle
            .to_be_bytes()
            .iter()
            .chain(slot.to_be_bytes().iter())
            .enumerate()
        {
            if i < p.len() {
                p[i] = *b;
            }
        }
        p
    }

    fn step(&mut self, now: Timestamp, event: Event, end: Timestamp, sends_until: Timestamp) -> Result<(), SimError> {
        match event {
            Event::Anchor => {
                let anchor = self.rsu.build_anchor(now, 0);
                self.broadcast(&Packet::Saltv(Frame::Anchor(anchor)), now, false);
                let next = now + self.rsu.params().period_us();
                if next < end {
                    self.schedule(next, Event::Anchor);
                }
            }
            Event::Gc => {
                for j in 0..self.observers.len() {
                    self.observers[j].gc(now);
                    for e in self.observers[j].drain_events() {
                        self.collector.record(j, &e);
                    }
                }
                if now + GC_PERIOD_US < end {
                    self.schedule(now + GC_PERIOD_US, Event::Gc);
                }
            }
            Event::Send { vehicle, slot } => {
                let payload = self.payload(vehicle, slot);
                let packets = self.vehicles[vehicle as usize].sender.send(slot, &payload, now)?;
                for p in packets {
                    self.transmit(p, now, vehicle);
                }
                let drift = self.vehicles[vehicle as usize].drift_us;
                if self.cfg.scheme != SchemeId::Ecdsa {
                    let due = slot + self.cfg.disclosure_delay as u32;
                    let at = self.slot_start(due, drift);
                    self.schedule(at, Event::Reveal { vehicle, slot: due });
                }
                let next = slot + period_slots(self.cfg);
                let at = self.slot_start(next, drift);
                if at < sends_until {
                    self.schedule(at, Event::Send { vehicle, slot: next });
                }
            }
            Event::Reveal { vehicle, slot } => {
                if let Some(p) = self.vehicles[vehicle as usize].sender.reveal_tick(slot)? {
                    self.transmit(p, now, vehicle);
                }
            }
            Event::Inject { index } => {
                if let Some(p) = self.injections[index].take() {
                    self.broadcast(&p, now, true);
                }
            }
        }
        Ok(())
    }
}

fn is_reveal(p: &Packet) -> bool {
    matches!(p, Packet::Saltv(Frame::Reveal(_)) | Packet::TeslaReveal(_))
}

fn forge_reveal(p: &Packet, rng: &mut ChaCha20Rng) -> Packet {
    let mut forge = |r: &crate::wire::RevealFrame| {
        let mut f = r.clone();
        for k in f.keys.iter_mut() {
            *k = rng.gen();
        }
        f
    };
    match p {
        Packet::Saltv(Frame::Reveal(r)) => Packet::Saltv(Frame::Reveal(forge(r))),
        Packet::TeslaReveal(r) => Packet::TeslaReveal(forge(r)),
        other => other.clone(),
    }
}

fn period_slots(cfg: &ScenarioConfig) -> u32 {
    1000 / cfg.rate_hz / cfg.slot_ms as u32
}

fn derive_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs the scenario with the nominal cost table.
pub fn run(cfg: &ScenarioConfig) -> Result<MetricsReport, SimError> {
    run_with_costs(cfg, &CostTable::nominal())
}

pub fn run_with_costs(cfg: &ScenarioConfig, cost_table: &CostTable) -> Result<MetricsReport, SimError> {
    cfg.validate()?;
    cost_table.validate()?;
    let mut setup = derive_rng(cfg.seed, 0);
    let time = TimeModel {
        slot_len_ms: cfg.slot_ms,
        epoch_len_s: 3600,
        drift_bound_ms: cfg.drift_ms,
    };
    let slot_us = time.slot_len_us();
    let ta = TrustedAuthority::from_seed(setup.gen());
    let forever = Validity::new(0, 1 << 32)?;
    let params = AnchorParams {
        time,
        disclosure_delay: cfg.disclosure_delay,
        policy: cfg.policy,
        validity_us: 2_000_000 / cfg.anchor_hz as u64,
        anchor_hz: cfg.anchor_hz,
    };
    let params = AnchorParams {
        validity_us: params.validity_us.max(2 * params.period_us()),
        ..params
    };
    let mut rsu = Rsu::new(&ta, setup.gen(), params, forever);
    let sigma = rsu.sigma_for_epoch(0);
    let scheme_params = SchemeParams {
        domain_id: 1,
        cell_id: 0,
        boot_period: cfg.boot_period,
        disclosure_delay: cfg.disclosure_delay,
        reveal_window: cfg.reveal_window,
    };

    let drift_range = cfg.drift_ms as i64 * 1000;
    let mut vehicles = Vec::with_capacity(cfg.vehicles as usize);
    let mut revoked = Vec::new();
    let revoked_count = match cfg.attack {
        Attack::RevokedSender => cfg.revoked_count.max(1),
        _ => cfg.revoked_count,
    };
    for v in 0..cfg.vehicles {
        let pseudonyms = issue_pseudonym_batch(1, ta.keys(), forever, &mut setup)?;
        if v < revoked_count {
            revoked.push(pseudonyms[0].cert.pk_v);
        }
        let seed: [u8; 32] = setup.gen();
        let sender = make_sender(cfg.scheme, seed, pseudonyms, 0, sigma, scheme_params)?;
        let drift_us = setup.gen_range(-drift_range..=drift_range);
        vehicles.push(Vehicle { sender, drift_us });
    }
    rsu.set_filter(rsu.revocation_filter(0, &revoked, cfg.bloom_fpr));

    let checker = Arc::new(MemoizedCheck::new());
    let observers: Vec<Box<dyn SchemeReceiver>> = (0..cfg.observers)
        .map(|_| {
            let rc = ReceiverConfig {
                cell_id: 0,
                whitelist_ttl_us: cfg.whitelist_ms * 1000,
                reveal_window: cfg.reveal_window,
                clock_offset_us: setup.gen_range(-drift_range..=drift_range),
                cache_verified_certs: true,
            };
            make_receiver(cfg.scheme, *ta.public(), rc, checker.clone())
        })
        .collect();

    let victim_psid = match cfg.attack {
        Attack::None => None,
        _ => Some(vehicles[0].sender.psid()),
    };
    let warmup_us = (cfg.warmup_s * 1e6) as Timestamp;
    let sends_until = (cfg.duration_s * 1e6) as Timestamp;
    let tail = (cfg.disclosure_delay as u64 + cfg.reveal_window as u64 + 3) * slot_us + 200_000;
    let end = sends_until + tail;

    let mut world = World {
        cfg,
        time,
        queue: BinaryHeap::new(),
        seq: 0,
        vehicles,
        observers,
        collector: Collector::new(cfg.observers as usize, warmup_us, victim_psid),
        channel: derive_rng(cfg.seed, 1),
        adversary: derive_rng(cfg.seed, 2),
        injections: Vec::new(),
        rsu,
        messages_sent: 0,
        frames_sent: 0,
        bytes_sent: 0,
        message_bytes: 0,
        boot_frames: 0,
        reveal_frames: 0,
        deliveries: 0,
        dropped: 0,
        attack_frames: 0,
        replay_round: 0,
    };

    world.schedule(0, Event::Anchor);
    world.schedule(GC_PERIOD_US, Event::Gc);
    let period = period_slots(cfg);
    // Start one slot past the drift bound so no send lands before time zero.
    let first = time.max_slot_disagreement() + 1;
    for v in 0..cfg.vehicles {
        let phase = setup.gen_range(0..period);
        let slot = first + phase;
        let at = world.slot_start(slot, world.vehicles[v as usize].drift_us);
        world.schedule(at, Event::Send { vehicle: v, slot });
    }

    let mut last = 0;
    while let Some(Reverse((at, _, event))) = world.queue.pop() {
        debug_assert!(at >= last, "event clock went backwards");
        last = at;
        world.step(at, event, end, sends_until)?;
    }
    for j in 0..world.observers.len() {
        world.observers[j].flush(end);
        for e in world.observers[j].drain_events() {
            world.collector.record(j, &e);
        }
    }

    let mut ops = OpCounts::default();
    let mut anchor_ops = OpCounts::default();
    let mut memory = MemoryHighWater::default();
    let mut boots_rejected = 0;
    let mut per_receiver = Vec::with_capacity(world.observers.len());
    let per_observer_deliveries = world.deliveries as f64 / world.observers.len() as f64;
    for rx in &world.observers {
        let o = rx.ops();
        ops += o;
        anchor_ops += rx.anchor_ops();
        let s = rx.stats();
        boots_rejected += s.boots_rejected;
        memory.cache_entries = memory.cache_entries.max(s.cache_high_water);
        memory.whitelist_entries = memory.whitelist_entries.max(s.whitelist_high_water);
        memory.ledger_entries = memory.ledger_entries.max(s.ledger_high_water);
        per_receiver.push(costs::total_us(&o, cost_table)? / per_observer_deliveries.max(1.0) / 1000.0);
    }

    let c = &world.collector;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let attack = (cfg.attack != Attack::None).then(|| AttackReport {
        behavior: cfg.attack,
        attack_frames: world.attack_frames,
        attack_frames_accepted: c.attack_accepted,
        attack_frames_provisional: c.attack_provisional,
        victim_messages: c.victim_total,
        victim_immediate_ratio: ratio(c.victim_immediate, c.victim_total),
        boots_rejected,
    });
    Ok(MetricsReport {
        scheme: cfg.scheme,
        vehicles: cfg.vehicles,
        observers: cfg.observers,
        messages_sent: world.messages_sent,
        frames_sent: world.frames_sent,
        boot_frames: world.boot_frames,
        reveal_frames: world.reveal_frames,
        avg_message_frame_bytes: ratio(world.message_bytes, world.messages_sent),
        avg_bytes_per_message: ratio(world.bytes_sent, world.messages_sent),
        deliveries: world.deliveries,
        dropped_by_loss: world.dropped,
        strong: c.strong,
        held: c.held,
        rejected: c.rejected.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        unaccounted: world.deliveries.abs_diff(c.terminals),
        immediate_ratio: ratio(c.eligible_immediate, c.eligible),
        avg_auth_delay_ms: ratio(c.delay_sum_us, c.delay_count) / 1000.0,
        mean_disclosure_wait_ms: ratio(c.wait_sum_us, c.wait_count) / 1000.0,
        retroactive_rejections: c.retroactive,
        avg_computation_ms: costs::computation_model(cost_table, &ops, world.deliveries)?,
        per_receiver_computation_ms: Distribution::of(per_receiver),
        ops,
        anchor_ops,
        memory,
        attack,
    })
}
