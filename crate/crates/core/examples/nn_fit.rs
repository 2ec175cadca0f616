//! Fits a small tanh network to `sin(x)` and spot-checks one gradient entry
//! against a central difference.

use urllc_lab::nn::{fit, Activation, ActivationConfig, FitConfig, FreezeMask, Loss, MlpParams, OutputActivation};

fn main() -> urllc_lab::error::Result<()> {
    let act = ActivationConfig::new(Activation::Tanh, OutputActivation::Identity);
    let mut net = MlpParams::init(&[1, 32, 32, 1], act, 7)?;

    let xs: Vec<Vec<f64>> = (0..512).map(|i| vec![-3.0 + 6.0 * i as f64 / 511.0]).collect();
    let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0].sin()]).collect();
    let cfg = FitConfig { epochs: 200, learning_rate: 0.02, ..FitConfig::default() };
    let mask = FreezeMask::all_trainable(&net);
    let log = fit(&mut net, &xs, &ys, Loss::Mse, &cfg, &mask)?;
    println!("mse: epoch 1 {:.4e}, epoch {} {:.4e}", log[0].loss, log.len(), log.last().unwrap().loss);
    for x in [-2.0, 0.5, 2.5] {
        println!("f({x:+.1}) = {:+.4}  sin = {:+.4}", net.forward(&[x])?[0], f64::sin(x));
    }

    // d y / d w for the first weight of the first layer
    let x = [0.3];
    let g = net.backward(&x, &[1.0])?.layers[0].weights[0];
    let h = 1e-5;
    let mut probe = net.clone();
    probe.layers_mut()[0].weights[0] += h;
    let up = probe.forward(&x)?[0];
    probe.layers_mut()[0].weights[0] -= 2.0 * h;
    let down = probe.forward(&x)?[0];
    println!("backward {g:.10e}, central difference {:.10e}", (up - down) / (2.0 * h));
    Ok(())
}
