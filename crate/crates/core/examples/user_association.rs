//! Offloading/association for 5 URLLC + 5 delay-tolerant users: exhaustive
//! optimum, Highest-SNR baseline and a small DNN trained on oracle labels.

use urllc_lab::assoc::{
    build_dataset, evaluate_assignment, evaluate_dnn, exhaustive_optimal, gen_instance, highest_snr_baseline,
    mean_gap, train_assoc_dnn, within, AssocConfig, AssocTrainConfig, FeatureScale, RegionRatio,
};

fn main() -> urllc_lab::error::Result<()> {
    let cfg = AssocConfig::default();
    let inst = gen_instance(&cfg, RegionRatio::BALANCED, 5)?;
    let (best, opt) = exhaustive_optimal(&inst)?;
    let hs = evaluate_assignment(&inst, &highest_snr_baseline(&inst))?;
    println!("optimal {:?}\n  max energy/bit {:.4e} J", best.0, opt.objective);
    println!("highest-snr: {:.4e} J (feasible: {})", hs.objective, hs.feasible);

    let scale = FeatureScale::default();
    let train = build_dataset(&cfg, RegionRatio::BALANCED, 1_000, &scale, 1, 1)?;
    let test = build_dataset(&cfg, RegionRatio::BALANCED, 100, &scale, 2, 1)?;
    let mut tc = AssocTrainConfig::default();
    tc.fit.epochs = 10;
    let (net, _) = train_assoc_dnn(&train, &tc)?;
    let trials = evaluate_dnn(&net, &test, &scale, 0)?;
    println!(
        "DNN on 100 fresh instances: mean gap {:.3}, within 5% on {:.0}%",
        mean_gap(&trials),
        100.0 * within(&trials, 0.05)
    );
    Ok(())
}
