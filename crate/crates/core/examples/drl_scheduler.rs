//! Short actor-critic pretraining on the two-user scheduler, compared with a
//! threshold rule. A few episodes only; `urllc-lab scheduler` runs the full
//! schedule.

use urllc_lab::scheduler::{evaluate, pretrain, DrlConfig, SchedulerEnvConfig, ThresholdPolicy};

fn main() -> urllc_lab::error::Result<()> {
    let env = SchedulerEnvConfig::default();
    let cfg = DrlConfig { episodes: 10, ..DrlConfig::default() };
    let (agent, log) = pretrain(&env, &cfg, 1)?;
    for l in log.iter().step_by(3) {
        println!("{l:?}");
    }
    let drl = evaluate(&agent.actor, &env, 50_000, 99, 1)?;
    let rule = evaluate(&ThresholdPolicy { snr_min: 0.0, urgent_ms: 9 }, &env, 50_000, 99, 1)?;
    println!("actor after {} episodes: overall loss {:.3e} ({} packets)", cfg.episodes, drl.overall, drl.packets);
    println!("serve-at-9ms rule:        overall loss {:.3e}", rule.overall);
    Ok(())
}
