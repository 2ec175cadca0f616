//! Newton (least-squares quadratic) versus a trained MLP forecaster on a
//! synthetic hand trajectory. Small budget; the CLI runs the full table.

use urllc_lab::mobility::{
    eval_error_table, gen_trajectory, sample_windows, train_mlp_predictor, Predictor, PredictorTrainConfig,
    TrajectoryKind,
};
use urllc_lab::nn::FitConfig;

fn main() -> urllc_lab::error::Result<()> {
    let kind = TrajectoryKind::smooth_random();
    let train = gen_trajectory(&kind, 100_000, 5e-4, 1)?;
    let test = gen_trajectory(&kind, 200_000, 5e-4, 2)?;

    let cfg = PredictorTrainConfig {
        fit: FitConfig { epochs: 10, ..PredictorTrainConfig::default().fit },
        ..PredictorTrainConfig::default()
    };
    let windows = sample_windows(&train, 50, cfg.future_slots, 5_000, 3)?;
    let (mlp, log) = train_mlp_predictor(&windows, &cfg)?;
    println!("MLP trained: final scaled mse {:.4}", log.last().unwrap().loss);

    let horizons = [5, 10, 20];
    let acc = [0.02, 0.005];
    for p in [Predictor::newton(), Predictor::Mlp(mlp)] {
        for c in eval_error_table(&p, &test, &horizons, &acc, 1)? {
            println!(
                "{:<12} h={:>2} ms  acc={:>4.1} cm  P(err)={:.3e}",
                p.name(),
                c.horizon_ms,
                c.accuracy_m * 100.0,
                c.probability
            );
        }
    }
    Ok(())
}
