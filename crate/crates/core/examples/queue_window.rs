//! One user's queue with a [d_min, d_max] delivery window, served by a
//! hand-written rule, with a per-outcome loss breakdown.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urllc_lab::queue::{loss_breakdown, poisson_arrivals, QosTarget, QueueState, TransmitDecision};

fn main() -> urllc_lab::error::Result<()> {
    let qos = QosTarget::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for serve_prob in [0.05, 0.2, 0.6] {
        let mut q = QueueState::new(qos, 1600);
        let mut events = Vec::new();
        for _ in 0..200_000 {
            events.extend(q.expire_now());
            let decision = if !q.is_empty() && rng.gen::<f64>() < serve_prob {
                TransmitDecision::send(rng.gen::<f64>() > 1e-3)
            } else {
                TransmitDecision::Idle
            };
            let arrivals = poisson_arrivals(100.0, 1.0, &mut rng);
            events.extend(q.step(arrivals, decision)?);
        }
        let b = loss_breakdown(&events)?;
        println!(
            "serve w.p. {serve_prob:.2}: {} packets, delay {:.3e}, decode {:.3e}, overall {:.3e}",
            b.packets, b.delay_violation, b.decoding_error, b.overall
        );
    }
    Ok(())
}
