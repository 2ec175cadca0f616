use proptest::prelude::*;
use urllc_lab::queue::{loss_breakdown, Outcome, PacketEvent, QosTarget, QueueState, TransmitDecision};

#[derive(Clone, Debug)]
struct SlotPlan {
    arrivals: u32,
    send: bool,
    success: bool,
    jitter: u64,
}

fn plan(jitter: bool) -> impl Strategy<Value = Vec<SlotPlan>> {
    let j = if jitter { 0u64..4 } else { 0u64..1 };
    prop::collection::vec(
        (0u32..3, any::<bool>(), prop::bool::weighted(0.9), j)
            .prop_map(|(arrivals, send, success, jitter)| SlotPlan { arrivals, send, success, jitter }),
        1..400,
    )
}

fn qos() -> impl Strategy<Value = QosTarget> {
    (0u64..6, 1u64..8).prop_map(|(lo, span)| QosTarget { d_min_ms: lo, d_max_ms: lo + span, epsilon_max: 1e-5 })
}

fn run(qos: QosTarget, plan: &[SlotPlan]) -> (QueueState, Vec<PacketEvent>) {
    let mut q = QueueState::new(qos, 1600);
    let mut events = Vec::new();
    for s in plan {
        // expire first so the decision sees the queue `step` will serve
        events.extend(q.expire_now());
        let d = if s.send && !q.is_empty() {
            TransmitDecision::Transmit { decode_success: s.success, extra_jitter_ms: s.jitter }
        } else {
            TransmitDecision::Idle
        };
        events.extend(q.step(s.arrivals, d).unwrap());
    }
    (q, events)
}

proptest! {
    #[test]
    fn packets_are_conserved(qos in qos(), plan in plan(true)) {
        let (q, events) = run(qos, &plan);
        let arrived: u64 = plan.iter().map(|s| s.arrivals as u64).sum();
        prop_assert_eq!(q.arrivals(), arrived);
        prop_assert_eq!(events.len() as u64 + q.len() as u64, arrived);
        let mut ids: Vec<u64> = events.iter().map(|e| e.packet_id).chain(q.packets().map(|p| p.id)).collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len() as u64, arrived);
        prop_assert!(events.iter().all(|e| e.outcome != Outcome::Pending));
    }

    #[test]
    fn deliveries_respect_the_window(qos in qos(), plan in plan(true)) {
        let (_, events) = run(qos, &plan);
        for e in events.iter().filter(|e| e.outcome == Outcome::Delivered) {
            let d = e.terminal_slot - e.arrival_slot;
            prop_assert!(d >= qos.d_min_ms && d <= qos.d_max_ms, "{e:?}");
        }
    }

    #[test]
    fn queued_packets_are_never_stale(qos in qos(), plan in plan(false)) {
        let mut q = QueueState::new(qos, 1600);
        for s in &plan {
            q.expire_now();
            if let Some(d) = q.head_delay() {
                prop_assert!(d <= qos.d_max_ms);
            }
            let d = if s.send && !q.is_empty() { TransmitDecision::send(s.success) } else { TransmitDecision::Idle };
            q.step(s.arrivals, d).unwrap();
        }
    }

    // Without jitter, service is first-in first-out: packets leave the
    // queue in arrival order.
    #[test]
    fn fifo_without_jitter(qos in qos(), plan in plan(false)) {
        let (_, events) = run(qos, &plan);
        let ids: Vec<u64> = events.iter().map(|e| e.packet_id).collect();
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]), "{ids:?}");
        let deliveries: Vec<u64> = events.iter().filter(|e| e.outcome == Outcome::Delivered).map(|e| e.terminal_slot).collect();
        prop_assert!(deliveries.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn breakdown_sums(qos in qos(), plan in plan(true)) {
        let (_, events) = run(qos, &plan);
        if let Ok(b) = loss_breakdown(&events) {
            prop_assert!((b.delay_violation + b.decoding_error - b.overall).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&b.overall));
            prop_assert_eq!(b.packets as usize, events.len());
        }
    }
}

#[test]
fn transmit_from_empty_queue_is_an_error() {
    let mut q = QueueState::new(QosTarget::default(), 1600);
    assert!(q.step(0, TransmitDecision::send(true)).is_err());
}
