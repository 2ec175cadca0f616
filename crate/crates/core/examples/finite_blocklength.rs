//! Short-packet decoding error under the normal approximation: a 200-byte
//! packet over one 1 ms slot at several bandwidths.

use urllc_lab::radio::{decoding_error_prob, shannon_rate, snr_for_error, CodingConfig, RadioLink};

fn main() -> urllc_lab::error::Result<()> {
    let bits = 1600;
    println!("{:>10} {:>8} {:>12} {:>14}", "bandwidth", "n", "snr(1e-5)", "eps @ 10 dB");
    for bw in [0.5e6, 1e6, 2.5e6, 5e6] {
        let n = (bw * 1e-3) as u64;
        let need = snr_for_error(1e-5, n as f64, bits as f64);
        let eps = decoding_error_prob(10.0, CodingConfig::new(n, bits)?)?;
        println!("{:>9.1}M {n:>8} {:>9.2} dB {eps:>14.3e}", bw / 1e6, 10.0 * need.log10());
    }

    // At the capacity-matched SNR the argument of Q is zero.
    let (n, l) = (500u64, 1600u64);
    let snr = (l as f64 / n as f64).exp2() - 1.0;
    println!("capacity point: eps = {}", decoding_error_prob(snr, CodingConfig::new(n, l)?)?);

    let link = RadioLink::at_distance(240.0, 0.1, 5e6)?;
    println!(
        "240 m, 100 mW, 5 MHz: mean snr {:.1} dB, Shannon rate {:.1} Mbit/s",
        10.0 * link.mean_snr().log10(),
        shannon_rate(5e6, link.mean_snr()) / 1e6
    );
    Ok(())
}
