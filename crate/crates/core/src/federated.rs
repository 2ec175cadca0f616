//! Hierarchical federated averaging: local models → edge model per cell →
//! global model.
//!
//! Every aggregated parameter is a weighted sum of the corresponding input
//! parameters. The addends are summed in sorted order, so the result depends
//! only on the multiset of `(model, weight)` pairs and not on their order,
//! and it is clamped to the input range so rounding never leaves the convex
//! hull.

use std::collections::HashMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::MlpParams;

/// Shape-congruent models with their training-sample counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSet {
    models: Vec<MlpParams>,
    sample_counts: Vec<u64>,
}

impl ModelSet {
    pub fn new(models: Vec<MlpParams>, sample_counts: Vec<u64>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Shape("model set is empty".into()));
        }
        if models.len() != sample_counts.len() {
            return Err(Error::Shape(format!(
                "{} models but {} sample counts",
                models.len(),
                sample_counts.len()
            )));
        }
        if let Some(i) = models.iter().position(|m| !m.same_architecture(&models[0])) {
            return Err(Error::Shape(format!("model {i} differs in architecture from model 0")));
        }
        Ok(Self { models, sample_counts })
    }

    pub fn models(&self) -> &[MlpParams] {
        &self.models
    }

    pub fn sample_counts(&self) -> &[u64] {
        &self.sample_counts
    }

    pub fn total_samples(&self) -> u64 {
        self.sample_counts.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

/// Nonnegative weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Domain("no weights".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Domain("weights must be finite and nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// How per-model weights are derived from sample counts.
pub trait WeightPolicy {
    fn weights(&self, sample_counts: &[u64]) -> Result<AggregationWeights>;
}

/// `w_k = n_k / Σ n` (FedAvg).
#[derive(Clone, Copy, Debug, Default)]
pub struct CountProportional;

impl WeightPolicy for CountProportional {
    fn weights(&self, sample_counts: &[u64]) -> Result<AggregationWeights> {
        compute_weights(sample_counts)
    }
}

/// Equal weights regardless of counts.
#[derive(Clone, Copy, Debug, Default)]
pub struct Uniform;

impl WeightPolicy for Uniform {
    fn weights(&self, sample_counts: &[u64]) -> Result<AggregationWeights> {
        if sample_counts.is_empty() {
            return Err(Error::Domain("no models to weight".into()));
        }
        let n = sample_counts.len() as f64;
        Ok(AggregationWeights(vec![1.0 / n; sample_counts.len()]))
    }
}

/// Count-proportional weights.
pub fn compute_weights(sample_counts: &[u64]) -> Result<AggregationWeights> {
    let total: u64 = sample_counts.iter().sum();
    if total == 0 {
        return Err(Error::Domain("sample counts sum to zero".into()));
    }
    let t = total as f64;
    Ok(AggregationWeights(sample_counts.iter().map(|&c| c as f64 / t).collect()))
}

/// `Σ_k w_k θ_k` for every parameter.
pub fn aggregate(set: &ModelSet, weights: &AggregationWeights) -> Result<MlpParams> {
    if weights.0.len() != set.models.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} models",
            weights.0.len(),
            set.models.len()
        )));
    }
    let columns: Vec<Vec<f64>> = set.models.iter().map(|m| m.params().collect()).collect();
    let mut out = set.models[0].clone();
    let mut terms = Vec::with_capacity(columns.len());
    for (p, slot) in out.params_mut().enumerate() {
        terms.clear();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (col, &w) in columns.iter().zip(&weights.0) {
            let v = col[p];
            lo = lo.min(v);
            hi = hi.max(v);
            terms.push(w * v);
        }
        terms.sort_by(|a, b| a.total_cmp(b));
        let sum: f64 = terms.iter().sum();
        *slot = sum.clamp(lo, hi);
    }
    Ok(out)
}

/// Both tiers of one federation round.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalResult {
    pub edge_models: Vec<MlpParams>,
    pub edge_counts: Vec<u64>,
    pub global: MlpParams,
}

/// Count-proportional round: locals → edges within each cell, then edges →
/// global weighted by each cell's total sample count.
pub fn hierarchical_round(cells: &[ModelSet]) -> Result<HierarchicalResult> {
    hierarchical_round_with(cells, &CountProportional, &CountProportional)
}

pub fn hierarchical_round_with(
    cells: &[ModelSet],
    local_policy: &dyn WeightPolicy,
    edge_policy: &dyn WeightPolicy,
) -> Result<HierarchicalResult> {
    let first = cells
        .first()
        .ok_or_else(|| Error::Shape("no cells to aggregate".into()))?;
    let reference = &first.models[0];
    let mut edge_models = Vec::with_capacity(cells.len());
    let mut edge_counts = Vec::with_capacity(cells.len());
    for (l, cell) in cells.iter().enumerate() {
        if !cell.models[0].same_architecture(reference) {
            return Err(Error::Shape(format!("cell {l} has a different model architecture")));
        }
        let w = local_policy.weights(&cell.sample_counts)?;
        edge_models.push(aggregate(cell, &w)?);
        edge_counts.push(cell.total_samples());
    }
    let edge_set = ModelSet::new(edge_models.clone(), edge_counts.clone())?;
    let global = aggregate(&edge_set, &edge_policy.weights(&edge_counts)?)?;
    Ok(HierarchicalResult {
        edge_models,
        edge_counts,
        global,
    })
}

/// Reads a `model,count` CSV. Keys are matched against model paths as
/// produced by [`load_cell`] (`<cell dir>/<file>`), or against bare file
/// names when those are unique.
pub fn read_counts<R: Read>(reader: R) -> Result<HashMap<String, u64>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = HashMap::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Parse(format!("counts row {} needs 2 columns", line + 2)));
        }
        let count = rec[1]
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::Parse(format!("counts row {}: {:?} is not a count", line + 2, &rec[1])))?;
        out.insert(rec[0].trim().to_string(), count);
    }
    Ok(out)
}

/// Every `*.mlp` file of `dir`, sorted by file name.
pub fn cell_model_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mlp"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Shape(format!("cell {} contains no .mlp models", dir.display())));
    }
    Ok(paths)
}

/// Loads a cell's models with their counts looked up in `counts`.
pub fn load_cell(dir: &Path, counts: &HashMap<String, u64>) -> Result<ModelSet> {
    let mut models = Vec::new();
    let mut n = Vec::new();
    for p in cell_model_paths(dir)? {
        let full = p.display().to_string();
        let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let count = counts
            .get(&full)
            .or_else(|| counts.get(&name))
            .copied()
            .ok_or_else(|| Error::Config(format!("no sample count for model {full}")))?;
        models.push(MlpParams::load(&p)?);
        n.push(count);
    }
    ModelSet::new(models, n).map_err(|e| Error::Shape(format!("cell {}: {e}", dir.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ActivationConfig, OutputActivation};

    fn scalar(v: f64) -> MlpParams {
        MlpParams::from_parts(
            &[1, 1],
            vec![vec![v]],
            vec![vec![0.0]],
            vec![],
            OutputActivation::Identity,
        )
        .unwrap()
    }

    #[test]
    fn count_weights() {
        assert_eq!(compute_weights(&[100, 300]).unwrap().as_slice(), &[0.25, 0.75]);
        let w = compute_weights(&[7, 7, 7]).unwrap();
        assert!(w.as_slice().iter().all(|&x| x == 1.0 / 3.0));
        assert!(matches!(compute_weights(&[0, 0]), Err(Error::Domain(_))));
    }

    #[test]
    fn two_scalar_models() {
        let set = ModelSet::new(vec![scalar(0.0), scalar(2.0)], vec![1, 3]).unwrap();
        let out = aggregate(&set, &compute_weights(&[1, 3]).unwrap()).unwrap();
        assert_eq!(out.layers()[0].weights[0], 1.5);
    }

    #[test]
    fn shape_mismatch_names_cell() {
        let act = ActivationConfig::new(Activation::Tanh, OutputActivation::Identity);
        let a = MlpParams::init(&[2, 3, 1], act, 0).unwrap();
        let b = MlpParams::init(&[2, 4, 1], act, 0).unwrap();
        assert!(ModelSet::new(vec![a.clone(), b.clone()], vec![1, 1]).is_err());
        let cells = vec![
            ModelSet::new(vec![a], vec![1]).unwrap(),
            ModelSet::new(vec![b], vec![1]).unwrap(),
        ];
        match hierarchical_round(&cells) {
            Err(Error::Shape(msg)) => assert!(msg.contains("cell 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_cell_single_model_is_global() {
        let act = ActivationConfig::new(Activation::Tanh, OutputActivation::Identity);
        let a = MlpParams::init(&[3, 5, 2], act, 4).unwrap();
        let r = hierarchical_round(&[ModelSet::new(vec![a.clone()], vec![10]).unwrap()]).unwrap();
        assert_eq!(r.global, a);
    }

    #[test]
    fn uniform_policy_ignores_counts() {
        let w = Uniform.weights(&[1, 1000]).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn counts_file_parsing() {
        let text = "model,count\ncellA/a.mlp,10\nb.mlp, 5\n";
        let c = read_counts(text.as_bytes()).unwrap();
        assert_eq!(c["cellA/a.mlp"], 10);
        assert_eq!(c["b.mlp"], 5);
        assert!(read_counts("model,count\nx,-1\n".as_bytes()).is_err());
    }
}
