//! Slot-based packet queue with a delivery window.
//!
//! Timing convention: packets that arrive during slot `a` are enqueued after
//! that slot's scheduling decision, so the earliest transmission is in slot
//! `a + 1`. A packet sent in slot `t` has delay `t − a` ms. Delivery is valid
//! only inside `[d_min, d_max]`; packets decoded early are held and released
//! at exactly `d_min`. A packet still queued once its delay exceeds `d_max`
//! is dropped as a delay violation. Retransmissions are not allowed, so a
//! decoding failure is terminal.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 200-byte packets.
pub const DEFAULT_PACKET_BITS: u32 = 1600;
/// Floor applied to arrival rates so the Poisson law stays well defined.
pub const MIN_RATE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pending,
    Delivered,
    DelayViolation,
    DecodeFailure,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Pending => "pending",
            Outcome::Delivered => "delivered",
            Outcome::DelayViolation => "delay_violation",
            Outcome::DecodeFailure => "decode_failure",
        }
    }

    pub fn is_loss(self) -> bool {
        matches!(self, Outcome::DelayViolation | Outcome::DecodeFailure)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Packet {
    pub id: u64,
    pub arrival_slot: u64,
    pub size_bits: u32,
    pub delivered_slot: Option<u64>,
    pub outcome: Outcome,
}

/// Delay window and reliability target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QosTarget {
    pub d_min_ms: u64,
    pub d_max_ms: u64,
    pub epsilon_max: f64,
}

impl Default for QosTarget {
    fn default() -> Self {
        Self {
            d_min_ms: 9,
            d_max_ms: 11,
            epsilon_max: 1e-5,
        }
    }
}

impl QosTarget {
    pub fn validate(&self) -> Result<()> {
        if self.d_min_ms >= self.d_max_ms {
            return Err(Error::Config(format!(
                "d_min ({}) must be below d_max ({})",
                self.d_min_ms, self.d_max_ms
            )));
        }
        if !(self.epsilon_max > 0.0 && self.epsilon_max < 1.0) {
            return Err(Error::Config("epsilon_max must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Terminal record of one packet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PacketEvent {
    pub packet_id: u64,
    pub arrival_slot: u64,
    pub terminal_slot: u64,
    pub outcome: Outcome,
}

/// What happens to the head-of-line packet this slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TransmitDecision {
    Idle,
    Transmit {
        decode_success: bool,
        /// Extra processing delay (ms) added after decoding; 0 in the ideal model.
        extra_jitter_ms: u64,
    },
}

impl TransmitDecision {
    pub fn send(decode_success: bool) -> Self {
        TransmitDecision::Transmit {
            decode_success,
            extra_jitter_ms: 0,
        }
    }
}

/// FIFO queue of one user.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueState {
    fifo: VecDeque<Packet>,
    current_slot: u64,
    next_id: u64,
    packet_bits: u32,
    qos: QosTarget,
}

impl QueueState {
    pub fn new(qos: QosTarget, packet_bits: u32) -> Self {
        Self {
            fifo: VecDeque::new(),
            current_slot: 0,
            next_id: 0,
            packet_bits,
            qos,
        }
    }

    pub fn current_slot(&self) -> u64 {
        self.current_slot
    }

    pub fn len(&self) -> usize {
        self.fifo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.is_empty()
    }

    pub fn packets(&self) -> impl Iterator<Item = &Packet> {
        self.fifo.iter()
    }

    pub fn packet_bits(&self) -> u32 {
        self.packet_bits
    }

    pub fn qos(&self) -> &QosTarget {
        &self.qos
    }

    /// Packets created so far.
    pub fn arrivals(&self) -> u64 {
        self.next_id
    }

    /// Delay (ms) the head packet would have if sent in the current slot.
    pub fn head_delay(&self) -> Option<u64> {
        self.fifo.front().map(|p| self.current_slot - p.arrival_slot)
    }

    fn finish(&mut self, mut packet: Packet, outcome: Outcome, terminal_slot: u64) -> PacketEvent {
        packet.outcome = outcome;
        if outcome == Outcome::Delivered {
            packet.delivered_slot = Some(terminal_slot);
        }
        PacketEvent {
            packet_id: packet.id,
            arrival_slot: packet.arrival_slot,
            terminal_slot,
            outcome,
        }
    }

    /// Drops every packet whose delay already exceeds `d_max`.
    fn expire(&mut self, events: &mut Vec<PacketEvent>) {
        let now = self.current_slot;
        while let Some(head) = self.fifo.front() {
            if now - head.arrival_slot <= self.qos.d_max_ms {
                break;
            }
            let p = self.fifo.pop_front().unwrap();
            let ev = self.finish(p, Outcome::DelayViolation, now);
            events.push(ev);
        }
    }

    /// Drops stale packets for the current slot and returns their events.
    /// [`QueueState::step`] does this itself; calling it first lets the
    /// observer see the post-expiry queue.
    pub fn expire_now(&mut self) -> Vec<PacketEvent> {
        let mut events = Vec::new();
        self.expire(&mut events);
        events
    }

    /// Packets that would be dropped at the start of the current slot.
    pub fn expiring_now(&self) -> usize {
        self.fifo
            .iter()
            .take_while(|p| self.current_slot - p.arrival_slot > self.qos.d_max_ms)
            .count()
    }

    /// Advances one slot: expire, serve the head packet per `decision`,
    /// enqueue `new_arrivals`.
    pub fn step(&mut self, new_arrivals: u32, decision: TransmitDecision) -> Result<Vec<PacketEvent>> {
        let mut events = Vec::new();
        self.expire(&mut events);
        if let TransmitDecision::Transmit {
            decode_success,
            extra_jitter_ms,
        } = decision
        {
            let p = self
                .fifo
                .pop_front()
                .ok_or_else(|| Error::Logic(format!("transmit from empty queue in slot {}", self.current_slot)))?;
            let delay = self.current_slot - p.arrival_slot;
            let arrival = p.arrival_slot;
            let ev = if !decode_success {
                self.finish(p, Outcome::DecodeFailure, self.current_slot)
            } else if delay + extra_jitter_ms > self.qos.d_max_ms {
                self.finish(p, Outcome::DelayViolation, self.current_slot + extra_jitter_ms)
            } else {
                let released = (delay + extra_jitter_ms).max(self.qos.d_min_ms);
                self.finish(p, Outcome::Delivered, arrival + released)
            };
            events.push(ev);
        }
        for _ in 0..new_arrivals {
            self.fifo.push_back(Packet {
                id: self.next_id,
                arrival_slot: self.current_slot,
                size_bits: self.packet_bits,
                delivered_slot: None,
                outcome: Outcome::Pending,
            });
            self.next_id += 1;
        }
        self.current_slot += 1;
        Ok(events)
    }
}

/// Free-function form of [`QueueState::step`].
pub fn queue_step(
    state: &QueueState,
    new_arrivals: u32,
    decision: TransmitDecision,
) -> Result<(QueueState, Vec<PacketEvent>)> {
    let mut next = state.clone();
    let events = next.step(new_arrivals, decision)?;
    Ok((next, events))
}

/// Packet count for one slot of a Poisson stream with `rate_pkts_per_s`.
pub fn poisson_arrivals<R: Rng + ?Sized>(rate_pkts_per_s: f64, slot_ms: f64, rng: &mut R) -> u32 {
    let mean = rate_pkts_per_s.max(MIN_RATE) * slot_ms / 1000.0;
    let dist = Poisson::new(mean).expect("positive mean");
    let k: f64 = dist.sample(rng);
    k as u32
}

/// Arrival law per user.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "law")]
pub enum ArrivalProcess {
    Poisson { rate_pkts_per_s: f64 },
    /// One packet every `period_slots` slots, starting at `offset`.
    Deterministic { period_slots: u64, offset: u64 },
}

impl ArrivalProcess {
    pub fn sample<R: Rng + ?Sized>(&self, slot: u64, rng: &mut R) -> u32 {
        match *self {
            ArrivalProcess::Poisson { rate_pkts_per_s } => poisson_arrivals(rate_pkts_per_s, 1.0, rng),
            ArrivalProcess::Deterministic { period_slots, offset } => {
                u32::from(slot >= offset && (slot - offset) % period_slots.max(1) == 0)
            }
        }
    }

    pub fn rate_per_slot(&self) -> f64 {
        match *self {
            ArrivalProcess::Poisson { rate_pkts_per_s } => rate_pkts_per_s / 1000.0,
            ArrivalProcess::Deterministic { period_slots, .. } => 1.0 / period_slots.max(1) as f64,
        }
    }
}

/// Loss ratios over terminal packets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub delay_violation: f64,
    pub decoding_error: f64,
    pub overall: f64,
    pub packets: u64,
}

/// Streaming counts of terminal outcomes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossCounts {
    pub delivered: u64,
    pub delay_violation: u64,
    pub decode_failure: u64,
}

impl LossCounts {
    pub fn record(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::Delivered => self.delivered += 1,
            Outcome::DelayViolation => self.delay_violation += 1,
            Outcome::DecodeFailure => self.decode_failure += 1,
            Outcome::Pending => {}
        }
    }

    pub fn total(&self) -> u64 {
        self.delivered + self.delay_violation + self.decode_failure
    }

    pub fn lost(&self) -> u64 {
        self.delay_violation + self.decode_failure
    }

    pub fn merge(&mut self, other: &LossCounts) {
        self.delivered += other.delivered;
        self.delay_violation += other.delay_violation;
        self.decode_failure += other.decode_failure;
    }

    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let total = self.total();
        if total == 0 {
            return Err(Error::InsufficientData("no terminal packets".into()));
        }
        let t = total as f64;
        Ok(LossBreakdown {
            delay_violation: self.delay_violation as f64 / t,
            decoding_error: self.decode_failure as f64 / t,
            overall: self.lost() as f64 / t,
            packets: total,
        })
    }
}

/// Loss ratios from a raw event log.
pub fn loss_breakdown(events: &[PacketEvent]) -> Result<LossBreakdown> {
    let mut counts = LossCounts::default();
    for e in events {
        counts.record(e.outcome);
    }
    counts.breakdown()
}

/// Writes `packet_id,arrival_slot,terminal_slot,outcome` rows.
pub fn write_event_log<W: Write>(events: &[PacketEvent], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["packet_id", "arrival_slot", "terminal_slot", "outcome"])?;
    for e in events {
        w.write_record(&[
            e.packet_id.to_string(),
            e.arrival_slot.to_string(),
            e.terminal_slot.to_string(),
            e.outcome.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn queue() -> QueueState {
        QueueState::new(QosTarget::default(), DEFAULT_PACKET_BITS)
    }

    /// Queue holding one packet whose delay in the current slot is `delay`.
    fn queue_with_delay(delay: u64) -> QueueState {
        let mut q = queue();
        q.step(1, TransmitDecision::Idle).unwrap();
        for _ in 1..delay {
            q.step(0, TransmitDecision::Idle).unwrap();
        }
        assert_eq!(q.head_delay(), Some(delay));
        q
    }

    #[test]
    fn empty_idle_step_has_no_events() {
        let q = queue();
        let (next, events) = queue_step(&q, 0, TransmitDecision::Idle).unwrap();
        assert!(events.is_empty());
        assert!(next.is_empty());
        assert_eq!(next.current_slot(), 1);
    }

    #[test]
    fn decode_inside_window_is_delivered() {
        let mut q = queue_with_delay(10);
        let ev = q.step(0, TransmitDecision::send(true)).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].outcome, Outcome::Delivered);
        assert_eq!(ev[0].terminal_slot - ev[0].arrival_slot, 10);
    }

    #[test]
    fn early_decode_is_released_at_d_min() {
        let mut q = queue_with_delay(2);
        let ev = q.step(0, TransmitDecision::send(true)).unwrap();
        assert_eq!(ev[0].outcome, Outcome::Delivered);
        assert_eq!(ev[0].terminal_slot - ev[0].arrival_slot, 9);
    }

    #[test]
    fn stale_packet_is_delay_violation() {
        let mut q = queue_with_delay(11);
        // still queued when its delay reaches 12
        let ev = q.step(0, TransmitDecision::Idle).unwrap();
        assert!(ev.is_empty());
        let ev = q.step(0, TransmitDecision::Idle).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].outcome, Outcome::DelayViolation);
        assert_eq!(ev[0].terminal_slot - ev[0].arrival_slot, 12);
        assert!(q.is_empty());
    }

    #[test]
    fn decode_failure_is_terminal() {
        let mut q = queue_with_delay(3);
        let ev = q.step(0, TransmitDecision::send(false)).unwrap();
        assert_eq!(ev[0].outcome, Outcome::DecodeFailure);
        assert!(q.is_empty());
    }

    #[test]
    fn jitter_past_deadline_is_violation() {
        let mut q = queue_with_delay(10);
        let ev = q
            .step(0, TransmitDecision::Transmit { decode_success: true, extra_jitter_ms: 2 })
            .unwrap();
        assert_eq!(ev[0].outcome, Outcome::DelayViolation);
        let mut q = queue_with_delay(10);
        let ev = q
            .step(0, TransmitDecision::Transmit { decode_success: true, extra_jitter_ms: 1 })
            .unwrap();
        assert_eq!(ev[0].outcome, Outcome::Delivered);
    }

    #[test]
    fn transmit_from_empty_is_logic_error() {
        let mut q = queue();
        assert!(matches!(q.step(0, TransmitDecision::send(true)), Err(Error::Logic(_))));
    }

    #[test]
    fn breakdown_counts() {
        let mut events = Vec::new();
        let mk = |id, outcome| PacketEvent { packet_id: id, arrival_slot: 0, terminal_slot: 9, outcome };
        events.push(mk(0, Outcome::DelayViolation));
        events.push(mk(1, Outcome::DecodeFailure));
        for i in 2..10 {
            events.push(mk(i, Outcome::Delivered));
        }
        let b = loss_breakdown(&events).unwrap();
        assert_eq!(b.delay_violation, 0.1);
        assert_eq!(b.decoding_error, 0.1);
        assert_eq!(b.overall, 0.2);
        let all: Vec<_> = (0..5).map(|i| mk(i, Outcome::Delivered)).collect();
        let b = loss_breakdown(&all).unwrap();
        assert_eq!((b.delay_violation, b.decoding_error, b.overall), (0.0, 0.0, 0.0));
        assert!(matches!(loss_breakdown(&[]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn poisson_mean_and_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let slots = 10_000_000u64;
        let (mut sum, mut two_plus) = (0u64, 0u64);
        for _ in 0..slots {
            let k = poisson_arrivals(100.0, 1.0, &mut rng);
            sum += k as u64;
            if k >= 2 {
                two_plus += 1;
            }
        }
        let mean = sum as f64 / slots as f64;
        assert!((0.099..=0.101).contains(&mean), "{mean}");
        let p2 = two_plus as f64 / slots as f64;
        let expected = 1.0 - (-0.1f64).exp() * 1.1;
        assert!((p2 - expected).abs() < 1e-4, "{p2} vs {expected}");
    }

    #[test]
    fn vanishing_rate_gives_no_arrivals() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100_000).all(|_| poisson_arrivals(0.0, 1.0, &mut rng) == 0));
    }

    #[test]
    fn qos_validation() {
        assert!(QosTarget { d_min_ms: 12, d_max_ms: 11, epsilon_max: 1e-5 }.validate().is_err());
        assert!(QosTarget::default().validate().is_ok());
    }

    #[test]
    fn event_log_csv_header() {
        let mut buf = Vec::new();
        let ev = PacketEvent { packet_id: 3, arrival_slot: 1, terminal_slot: 10, outcome: Outcome::Delivered };
        write_event_log(&[ev], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "packet_id,arrival_slot,terminal_slot,outcome\n3,1,10,delivered\n"
        );
    }
}
