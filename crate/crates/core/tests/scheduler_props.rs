use proptest::prelude::*;
use urllc_lab::scheduler::{allocate, evaluate, Action, IdlePolicy, SchedulerEnv, SchedulerEnvConfig, ThresholdPolicy};

fn raw_value() -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => -2.0f64..3.0,
        1 => Just(f64::NAN),
        1 => Just(f64::INFINITY),
        1 => Just(f64::NEG_INFINITY),
    ]
}

proptest! {
    #[test]
    fn projected_actions_are_feasible(raw in prop::collection::vec(raw_value(), 1..6)) {
        let (a, clamped) = Action::from_raw(&raw);
        prop_assert!(a.is_feasible(), "{a:?}");
        prop_assert_eq!(a.shares.len(), raw.len());
        if raw.iter().all(|v| (0.0..=1.0).contains(v)) {
            prop_assert!(!clamped);
        }
    }

    #[test]
    fn feasible_actions_pass_through(raw in prop::collection::vec(0.0f64..1.0, 1..6)) {
        let s: f64 = raw.iter().sum();
        let shares: Vec<f64> = raw.iter().map(|v| v / s.max(1.0)).collect();
        let (a, _) = Action::from_raw(&shares);
        for (x, y) in a.shares.iter().zip(&shares) {
            prop_assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn allocation_uses_the_whole_band(shares in prop::collection::vec(0.0f64..1.0, 1..6), serving in prop::collection::vec(any::<bool>(), 6)) {
        let serving = &serving[..shares.len()];
        let granted = allocate(&shares, serving);
        let requested: f64 = shares.iter().zip(serving).filter(|(_, &s)| s).map(|(b, _)| b).sum();
        let total: f64 = granted.iter().sum();
        if requested > 0.0 {
            prop_assert!((total - 1.0).abs() < 1e-12);
        } else {
            prop_assert_eq!(total, 0.0);
        }
        for ((g, &s), &b) in granted.iter().zip(serving).zip(&shares) {
            prop_assert!(*g >= 0.0);
            if !s || b == 0.0 {
                prop_assert_eq!(*g, 0.0);
            }
        }
    }
}

#[test]
fn environment_is_seeded() {
    let cfg = SchedulerEnvConfig::default();
    let trace = |seed| {
        let mut env = SchedulerEnv::new(cfg.clone(), seed).unwrap();
        let a = Action { shares: vec![0.5, 0.5] };
        (0..500).map(|_| env.step(&a).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(trace(5), trace(5));
    assert_ne!(trace(5), trace(6));
}

#[test]
fn idle_policy_loses_everything_to_delay() {
    let b = evaluate(&IdlePolicy, &SchedulerEnvConfig::default(), 2_000, 3, 1).unwrap();
    assert_eq!(b.overall, 1.0);
    assert_eq!(b.delay_violation, 1.0);
    assert_eq!(b.decoding_error, 0.0);
}

#[test]
fn evaluation_is_independent_of_jobs() {
    let p = ThresholdPolicy { snr_min: 0.0, urgent_ms: 9 };
    let cfg = SchedulerEnvConfig::default();
    let one = evaluate(&p, &cfg, 20_000, 9, 1).unwrap();
    let three = evaluate(&p, &cfg, 20_000, 9, 3).unwrap();
    assert_eq!(one, three);
    assert!(one.packets >= 20_000);
}

#[test]
fn invalid_config_is_rejected() {
    let mut cfg = SchedulerEnvConfig::default();
    cfg.distances_m.clear();
    assert!(SchedulerEnv::new(cfg, 0).is_err());
}
