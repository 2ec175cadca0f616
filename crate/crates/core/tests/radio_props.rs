use proptest::prelude::*;
use urllc_lab::radio::{capacity_nats, decoding_error_prob, dispersion, q_function, snr_for_error, CodingConfig};

proptest! {
    #[test]
    fn error_prob_is_a_probability(snr in 1e-4f64..1e4, n in 1u64..5000, l in 1u64..5000) {
        let e = decoding_error_prob(snr, CodingConfig::new(n, l).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn more_snr_never_hurts(snr in 1e-3f64..1e3, factor in 1.0f64..4.0, n in 10u64..3000, l in 1u64..3000) {
        let c = CodingConfig::new(n, l).unwrap();
        prop_assert!(decoding_error_prob(snr * factor, c).unwrap() <= decoding_error_prob(snr, c).unwrap());
    }

    #[test]
    fn more_bits_never_help(snr in 1e-3f64..1e3, n in 10u64..3000, l in 1u64..3000, extra in 0u64..500) {
        let a = decoding_error_prob(snr, CodingConfig::new(n, l).unwrap()).unwrap();
        let b = decoding_error_prob(snr, CodingConfig::new(n, l + extra).unwrap()).unwrap();
        prop_assert!(b >= a);
    }

    #[test]
    fn q_reflection(x in -30.0f64..30.0) {
        prop_assert!((q_function(x) + q_function(-x) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dispersion_in_unit_interval(snr in 1e-6f64..1e6) {
        let v = dispersion(snr);
        prop_assert!(v > 0.0 && v < 1.0);
        prop_assert!(capacity_nats(snr) > 0.0);
    }

    #[test]
    fn snr_for_error_inverts(target in 1e-9f64..0.4, n in 50u64..2000, l in 16u64..2000) {
        let snr = snr_for_error(target, n as f64, l as f64);
        let c = CodingConfig::new(n, l).unwrap();
        prop_assert!(decoding_error_prob(snr, c).unwrap() <= target);
        prop_assert!(decoding_error_prob(snr * (1.0 - 1e-9), c).unwrap() >= target * (1.0 - 1e-6));
    }
}

#[test]
fn rejects_bad_inputs() {
    assert!(CodingConfig::new(0, 10).is_err());
    assert!(CodingConfig::new(10, 0).is_err());
    let c = CodingConfig::new(100, 100).unwrap();
    for snr in [0.0, -1.0, f64::NAN, f64::INFINITY] {
        assert!(decoding_error_prob(snr, c).is_err(), "{snr}");
    }
}

#[test]
fn q_known_values() {
    // Q(0) = 1/2, Q(1.959963984540054) = 0.025, Q(6) = 9.865876450376981e-10
    assert_eq!(q_function(0.0), 0.5);
    assert!((q_function(1.959963984540054) / 0.025 - 1.0).abs() < 1e-14);
    assert!((q_function(6.0) / 9.865876450376981e-10 - 1.0).abs() < 1e-14);
}
