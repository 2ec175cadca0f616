//! One two-tier averaging round: three phones in each of two cells, then
//! the cell models into a global one. The result equals flat averaging
//! over all six.

use urllc_lab::federated::{aggregate, compute_weights, hierarchical_round, ModelSet};
use urllc_lab::nn::{Activation, ActivationConfig, MlpParams, OutputActivation};

fn main() -> urllc_lab::error::Result<()> {
    let act = ActivationConfig::new(Activation::Tanh, OutputActivation::Identity);
    let locals: Vec<MlpParams> = (0..6).map(|s| MlpParams::init(&[6, 16, 3], act, s)).collect::<Result<_, _>>()?;
    let counts = [120u64, 80, 300, 50, 50, 400];

    let cells = [
        ModelSet::new(locals[..3].to_vec(), counts[..3].to_vec())?,
        ModelSet::new(locals[3..].to_vec(), counts[3..].to_vec())?,
    ];
    let round = hierarchical_round(&cells)?;
    println!("edge sample counts {:?}", round.edge_counts);

    let flat = aggregate(&ModelSet::new(locals, counts.to_vec())?, &compute_weights(&counts)?)?;
    let diff = round.global.params().zip(flat.params()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("max |two-tier − flat| = {diff:.1e}");
    Ok(())
}
