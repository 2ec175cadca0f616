//! Config handling: partial TOML resolves against defaults, contradictions
//! and typos are rejected with the offending key named.

use urllc_lab::experiments::{exit_code, parse_config};

fn main() {
    let partial = "seed = 11\n[scheduler]\neval_packets = 200000\n";
    let cfg = parse_config(partial).expect("valid partial config");
    println!("seed {} | eval packets {} | qos window [{}, {}] ms", cfg.seed, cfg.scheduler.eval_packets,
        cfg.scheduler.env.qos.d_min_ms, cfg.scheduler.env.qos.d_max_ms);

    for bad in [
        "[scheduler.env.qos]\nd_min_ms = 12\nd_max_ms = 11\n",
        "[mobility]\nhorizon = 5\n",
    ] {
        match parse_config(bad) {
            Ok(_) => println!("unexpectedly accepted"),
            Err(e) => println!("exit {}: {e}", exit_code(&e)),
        }
    }

    let text = cfg.to_toml().expect("serializable");
    println!("resolved config: {} lines, e.g.\n{}", text.lines().count(), text.lines().take(4).collect::<Vec<_>>().join("\n"));
}
