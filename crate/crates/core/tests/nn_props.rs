use proptest::prelude::*;
use urllc_lab::nn::{Activation, ActivationConfig, FreezeMask, Gradients, MlpParams, OutputActivation};

fn arch() -> impl Strategy<Value = (Vec<usize>, bool, u8, u64)> {
    (
        prop::collection::vec(1usize..12, 2..6),
        any::<bool>(),
        0u8..3,
        any::<u64>(),
    )
}

fn build((sizes, relu, out, seed): (Vec<usize>, bool, u8, u64)) -> MlpParams {
    let hidden = if relu { Activation::Relu } else { Activation::Tanh };
    let output = match out {
        0 => OutputActivation::Identity,
        1 => OutputActivation::Sigmoid,
        _ => OutputActivation::Softmax { group: 1 },
    };
    MlpParams::init(&sizes, ActivationConfig::new(hidden, output), seed).unwrap()
}

proptest! {
    #[test]
    fn bytes_roundtrip_is_exact(a in arch()) {
        let net = build(a);
        let back = MlpParams::from_bytes(&net.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), net.to_bytes());
        prop_assert_eq!(back, net);
    }

    #[test]
    fn forward_is_pure(a in arch(), xs in prop::collection::vec(-3.0f64..3.0, 12)) {
        let net = build(a);
        let before = net.clone();
        let x = &xs[..net.input_dim()];
        let y1 = net.forward(x).unwrap();
        let y2 = net.forward(x).unwrap();
        prop_assert_eq!(&y1, &y2);
        prop_assert_eq!(&net, &before);
        prop_assert_eq!(y1.len(), net.output_dim());
        prop_assert!(y1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradients_are_shape_congruent(a in arch(), xs in prop::collection::vec(-3.0f64..3.0, 12)) {
        let net = build(a);
        let x = &xs[..net.input_dim()];
        let g = net.backward(x, &vec![1.0; net.output_dim()]).unwrap();
        prop_assert_eq!(g.layers.len(), net.num_layers());
        prop_assert_eq!(g.values().count(), net.param_count());
    }

    #[test]
    fn frozen_layers_never_move(a in arch(), xs in prop::collection::vec(-3.0f64..3.0, 12), k in 0usize..5) {
        let net = build(a);
        let x = &xs[..net.input_dim()];
        let g = net.backward(x, &vec![1.0; net.output_dim()]).unwrap();
        let mask = FreezeMask::last_k(&net, k);
        let next = net.apply_update(&g, 0.1, &mask).unwrap();
        for (l, (a, b)) in net.layers().iter().zip(next.layers()).enumerate() {
            if !mask.is_trainable(l) {
                prop_assert_eq!(a, b);
            }
        }
        prop_assert_eq!(net.apply_update(&g, 0.1, &FreezeMask::all_frozen(&net)).unwrap(), net.clone());
        prop_assert_eq!(net.apply_update(&Gradients::zeros_like(&net), 0.1, &FreezeMask::all_trainable(&net)).unwrap(), net);
    }

    #[test]
    fn softmax_heads_are_distributions(seed in any::<u64>(), groups in 1usize..4, width in 1usize..5, xs in prop::collection::vec(-5.0f64..5.0, 4)) {
        let act = ActivationConfig::new(Activation::Tanh, OutputActivation::Softmax { group: width });
        let net = MlpParams::init(&[4, 8, groups * width], act, seed).unwrap();
        let y = net.forward(&xs).unwrap();
        for head in y.chunks(width) {
            prop_assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(head.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn truncated_file_is_rejected() {
    let act = ActivationConfig::new(Activation::Relu, OutputActivation::Identity);
    let bytes = MlpParams::init(&[3, 4, 2], act, 1).unwrap().to_bytes();
    for cut in [0, 3, 8, bytes.len() - 1] {
        assert!(MlpParams::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn save_load_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let act = ActivationConfig::new(Activation::Tanh, OutputActivation::Sigmoid);
    let net = MlpParams::init(&[5, 7, 7, 3], act, 9).unwrap();
    let p = dir.path().join("net.mlp");
    net.save(&p).unwrap();
    assert_eq!(MlpParams::load(&p).unwrap(), net);
}
