//! Seeded end-to-end pipelines behind the `urllc-lab` binary: config
//! loading and validation, the four experiments, and report emission.
//!
//! Every pipeline derives its random streams from the single config seed,
//! writes metric files whose bytes depend only on (config, seed), and keeps
//! wall-clock numbers in `run_report.json` alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::assoc::{
    self, augment_class_permutations, build_dataset, decision_accuracy, default_shift_fit, evaluate_dnn,
    exhaustive_optimal, fine_tune_on_shift, mean_gap, read_dataset_csv, train_assoc_dnn,
    train_assoc_dnn_on, within, AssocConfig, AssocSample, AssocTrainConfig, AssocTrial, FeatureScale, FineTuneMode,
    RegionRatio,
};
use crate::error::{Error, Result};
use crate::federated::{self, compute_weights, hierarchical_round, ModelSet};
use crate::mobility::{
    continue_training, dataset_mse, eval_error_table, gen_trajectory, sample_windows, train_mlp_predictor,
    ErrorCell, MlpPredictor, PredictionSpec, Predictor, PredictorTrainConfig, TrajectoryKind, MAX_HORIZON_MS,
    MIN_EVAL_WINDOWS,
};
use crate::nn::{FitConfig, MlpParams};
use crate::parallel::sub_seed;
use crate::queue::LossBreakdown;
use crate::scheduler::{
    check_breakdown, evaluate, fine_tune, pretrain, AgentPair, DrlConfig, EpisodeLog, FineTuneConfig,
    MismatchConfig, SchedulerEnvConfig,
};

// Seed streams, one per independent random source.
const S_MOB_TRAIN: u64 = 10;
const S_MOB_WINDOWS: u64 = 11;
const S_MOB_TEST: u64 = 12;
const S_SCHED_PRETRAIN: u64 = 20;
const S_SCHED_FINETUNE: u64 = 21;
const S_SCHED_EVAL: u64 = 22;
const S_ASSOC_TRAIN: u64 = 30;
const S_ASSOC_TEST: u64 = 31;
const S_ASSOC_SHIFT_TRAIN: u64 = 32;
const S_ASSOC_SHIFT_TEST: u64 = 33;
const S_ASSOC_SCRATCH: u64 = 34;
const S_FED_SHARD: u64 = 40;
const S_FED_TEST: u64 = 41;

/// The report carrying timings and the config echo (which names the output
/// directory). Every other output file is a deterministic function of the
/// resolved config minus `out_dir`.
pub const RUN_REPORT: &str = "run_report.json";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// Whether `name` is a metric file covered by the determinism contract.
pub fn is_metric_file(name: &str) -> bool {
    name != RUN_REPORT && name != RESOLVED_CONFIG
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub mobility: MobilityExperiment,
    pub scheduler: SchedulerExperiment,
    pub assoc: AssocExperiment,
    pub fed: FedExperiment,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("urllc-out"),
            mobility: MobilityExperiment::default(),
            scheduler: SchedulerExperiment::default(),
            assoc: AssocExperiment::default(),
            fed: FedExperiment::default(),
        }
    }
}

/// Predictor comparison on a synthetic trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MobilityExperiment {
    pub trajectory: TrajectoryKind,
    /// Measurement noise per coordinate (m).
    pub noise_std_m: f64,
    pub history_ms: usize,
    pub horizons_ms: Vec<usize>,
    pub accuracies_m: Vec<f64>,
    pub train_slots: usize,
    pub train_windows: usize,
    pub test_slots: usize,
    pub predictor: PredictorTrainConfig,
}

impl Default for MobilityExperiment {
    fn default() -> Self {
        Self {
            trajectory: TrajectoryKind::smooth_random(),
            noise_std_m: 5e-4,
            history_ms: 50,
            // the horizons and accuracies of the predictor table
            horizons_ms: vec![5, 10, 20],
            accuracies_m: vec![0.02, 0.005],
            train_slots: 200_000,
            train_windows: 10_000,
            test_slots: 2_000_000,
            predictor: PredictorTrainConfig::default(),
        }
    }
}

impl MobilityExperiment {
    pub fn validate(&self) -> Result<()> {
        if self.horizons_ms.is_empty() || self.accuracies_m.is_empty() {
            return Err(Error::Config("horizons_ms and accuracies_m must be nonempty".into()));
        }
        for &h in &self.horizons_ms {
            for &a in &self.accuracies_m {
                PredictionSpec {
                    history_ms: self.history_ms,
                    horizon_ms: h,
                    accuracy_m: a,
                }
                .validate()?;
            }
        }
        let max_h = *self.horizons_ms.iter().max().unwrap_or(&0);
        if self.predictor.future_slots < max_h || self.predictor.future_slots > MAX_HORIZON_MS {
            return Err(Error::Config(format!(
                "predictor.future_slots must lie in {max_h}..={MAX_HORIZON_MS}"
            )));
        }
        if !(self.noise_std_m >= 0.0) {
            return Err(Error::Config("noise_std_m must be >= 0".into()));
        }
        if self.train_windows == 0 || self.train_slots < self.history_ms + self.predictor.future_slots {
            return Err(Error::Config("train_slots/train_windows too small for one window".into()));
        }
        if self.test_slots + 1 < self.history_ms + max_h + MIN_EVAL_WINDOWS {
            return Err(Error::Config(format!(
                "test_slots must leave at least {MIN_EVAL_WINDOWS} evaluation windows"
            )));
        }
        Ok(())
    }
}

/// Pretrain in the ideal environment, then evaluate and adapt under mismatch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerExperiment {
    /// Ideal environment; `mismatch` below describes the deployed one.
    pub env: SchedulerEnvConfig,
    pub mismatch: MismatchConfig,
    pub drl: DrlConfig,
    pub fine_tune: FineTuneConfig,
    pub eval_packets: u64,
}

impl Default for SchedulerExperiment {
    fn default() -> Self {
        Self {
            env: SchedulerEnvConfig::default(),
            mismatch: MismatchConfig::default(),
            drl: DrlConfig::default(),
            fine_tune: FineTuneConfig::default(),
            eval_packets: 1_000_000,
        }
    }
}

impl SchedulerExperiment {
    pub fn validate(&self) -> Result<()> {
        if self.env.mismatch.is_some() {
            return Err(Error::Config(
                "env.mismatch must stay unset; the deployed environment is configured under [scheduler.mismatch]".into(),
            ));
        }
        ctx("env", self.env.validate())?;
        ctx("mismatch", self.mismatch.validate())?;
        ctx("drl", self.drl.validate())?;
        if !(self.fine_tune.lr_scale > 0.0) || !(self.fine_tune.exploration_std >= 0.0) {
            return Err(Error::Config("fine_tune: lr_scale must be > 0, exploration_std >= 0".into()));
        }
        if self.eval_packets == 0 {
            return Err(Error::Config("eval_packets must be positive".into()));
        }
        Ok(())
    }

    fn mismatch_env(&self) -> SchedulerEnvConfig {
        self.env.with_mismatch(self.mismatch)
    }
}

/// Oracle-labelled association learning with a region-ratio shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssocExperiment {
    pub instance: AssocConfig,
    pub features: FeatureScale,
    pub train: AssocTrainConfig,
    pub base_ratio: RegionRatio,
    pub shift_ratio: RegionRatio,
    pub train_samples: usize,
    pub test_samples: usize,
    pub shift_samples: usize,
    pub shift_test_samples: usize,
    pub shift_fit: FitConfig,
    pub fine_tune_mode: FineTuneMode,
    /// Extra within-class relabelled copies of every base/scratch training
    /// sample.
    pub augment_copies: usize,
    /// Same, for the fine-tuning samples.
    pub shift_augment_copies: usize,
    /// Also train an 8000-sample net from scratch on the shifted ratio.
    pub scratch_baseline: bool,
    pub gap_tolerance: f64,
    /// How many training labels to re-verify by a fresh enumeration.
    pub label_recheck: usize,
}

impl Default for AssocExperiment {
    fn default() -> Self {
        Self {
            instance: AssocConfig::default(),
            features: FeatureScale::default(),
            train: AssocTrainConfig::default(),
            base_ratio: RegionRatio::BALANCED,
            shift_ratio: RegionRatio::SKEWED,
            train_samples: 8000,
            test_samples: 500,
            shift_samples: 500,
            shift_test_samples: 500,
            shift_fit: default_shift_fit(),
            fine_tune_mode: FineTuneMode::AllLayers,
            augment_copies: 3,
            shift_augment_copies: 15,
            scratch_baseline: true,
            gap_tolerance: 0.05,
            label_recheck: 100,
        }
    }
}

impl AssocExperiment {
    pub fn validate(&self) -> Result<()> {
        ctx("instance", self.instance.validate())?;
        for r in [self.base_ratio, self.shift_ratio] {
            if r.total() != self.instance.num_users() {
                return Err(Error::Config(format!(
                    "ratio {r} does not add up to {} users",
                    self.instance.num_users()
                )));
            }
        }
        if self.train_samples == 0 || self.test_samples == 0 || self.shift_test_samples == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if self.train.hidden.is_empty() || self.train.hidden.contains(&0) {
            return Err(Error::Config("train.hidden must list positive layer widths".into()));
        }
        if !(self.gap_tolerance >= 0.0) {
            return Err(Error::Config("gap_tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

/// Two-tier federated averaging of mobility forecasters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedExperiment {
    pub cells: usize,
    pub locals_per_cell: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    /// Local `k` trains on `base_windows · (1 + k mod 3)` windows.
    pub base_windows: usize,
    pub shard_slots: usize,
    pub test_windows: usize,
    pub trajectory: TrajectoryKind,
    pub noise_std_m: f64,
    pub history_ms: usize,
    pub predictor: PredictorTrainConfig,
}

impl Default for FedExperiment {
    fn default() -> Self {
        let mut predictor = PredictorTrainConfig {
            hidden: vec![64, 64],
            ..Default::default()
        };
        predictor.fit.lr_decay = 1.0;
        Self {
            cells: 2,
            locals_per_cell: 3,
            rounds: 5,
            local_epochs: 4,
            base_windows: 500,
            shard_slots: 50_000,
            test_windows: 2000,
            trajectory: TrajectoryKind::smooth_random(),
            noise_std_m: 5e-4,
            history_ms: 50,
            predictor,
        }
    }
}

impl FedExperiment {
    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 || self.locals_per_cell == 0 || self.rounds == 0 || self.local_epochs == 0 {
            return Err(Error::Config("cells, locals_per_cell, rounds, local_epochs must be positive".into()));
        }
        if self.base_windows == 0 || self.test_windows == 0 {
            return Err(Error::Config("base_windows and test_windows must be positive".into()));
        }
        if self.history_ms < 3 || self.shard_slots < self.history_ms + self.predictor.future_slots {
            return Err(Error::Config("shard_slots too short for one window".into()));
        }
        if self.predictor.future_slots == 0 || self.predictor.future_slots > MAX_HORIZON_MS {
            return Err(Error::Config(format!("predictor.future_slots must lie in 1..={MAX_HORIZON_MS}")));
        }
        Ok(())
    }
}

/// Prefixes a config error with the key path of the section it came from,
/// joining nested paths with dots (`scheduler.env.qos: ...`).
fn ctx<T>(path: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) => {
            let nested = m.split_once(": ").filter(|(head, _)| {
                !head.is_empty() && head.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.')
            });
            match nested {
                Some((head, rest)) => Error::Config(format!("{path}.{head}: {rest}")),
                None => Error::Config(format!("{path}: {m}")),
            }
        }
        other => other,
    })
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        ctx("mobility", self.mobility.validate())?;
        ctx("scheduler", self.scheduler.validate())?;
        ctx("assoc", self.assoc.validate())?;
        ctx("fed", self.fed.validate())
    }

    /// The fully resolved config as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

/// Parses TOML text; missing keys take defaults, unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads, resolves and validates a config file.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Which experiment a report belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Mobility,
    Scheduler,
    Assoc,
    Fed,
    All,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub kind: ExperimentKind,
    pub version: String,
    pub config: ExperimentConfig,
    pub metrics: serde_json::Value,
    pub files: Vec<String>,
    pub wall_clock_s: f64,
}

/// Collects output files and the metrics JSON of one run.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, bytes)?;
        Ok(())
    }

    fn json(&mut self, name: &str, value: &serde_json::Value) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }
}

fn finish(
    kind: ExperimentKind,
    config: &ExperimentConfig,
    mut out: Outputs,
    metrics: serde_json::Value,
    started: Instant,
) -> Result<RunReport> {
    out.write(RESOLVED_CONFIG, config.to_toml()?.as_bytes())?;
    let report = RunReport {
        kind,
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        metrics,
        files: out.files.clone(),
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    let mut s = serde_json::to_string_pretty(&report)?;
    s.push('\n');
    fs::write(out.dir.join(RUN_REPORT), s)?;
    Ok(report)
}

fn invariant(name: &str, ok: bool, detail: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Invariant(format!("{name}: {}", detail())))
    }
}

// ---------------------------------------------------------------- mobility

/// Default parameters for a trajectory family named on the command line.
pub fn trajectory_preset(name: &str) -> Result<TrajectoryKind> {
    Ok(match name {
        "smooth_random" => TrajectoryKind::smooth_random(),
        "const_accel" => TrajectoryKind::ConstAccel {
            start: [0.0; 3],
            velocity: [1.0, 0.5, 0.0],
            acceleration: [0.2, -0.1, 0.0],
        },
        "sinusoid" => TrajectoryKind::Sinusoid {
            amplitude: [0.5, 0.3, 0.1],
            period_ms: [2000.0, 3100.0, 1700.0],
            phase: [0.0; 3],
        },
        _ => {
            return Err(Error::Config(format!(
                "unknown trajectory kind {name:?} (smooth_random, const_accel, sinusoid)"
            )))
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table1Row {
    pub predictor: String,
    pub horizon_ms: usize,
    pub accuracy_m: f64,
    pub windows: usize,
    pub errors: usize,
    pub probability: f64,
}

pub struct MobilityOutcome {
    pub rows: Vec<Table1Row>,
    pub predictor: MlpPredictor,
    pub final_train_loss: f64,
}

/// Trains the MLP forecaster and tabulates both predictors' error
/// probabilities.
pub fn mobility_pipeline(cfg: &MobilityExperiment, seed: u64, jobs: usize) -> Result<MobilityOutcome> {
    cfg.validate()?;
    let train = gen_trajectory(&cfg.trajectory, cfg.train_slots, cfg.noise_std_m, sub_seed(seed, S_MOB_TRAIN))?;
    let windows = sample_windows(
        &train,
        cfg.history_ms,
        cfg.predictor.future_slots,
        cfg.train_windows,
        sub_seed(seed, S_MOB_WINDOWS),
    )?;
    let (mlp, log) = train_mlp_predictor(&windows, &cfg.predictor)?;
    invariant("mlp_finite", mlp.net.is_finite(), || "trained forecaster has non-finite parameters".into())?;
    let test = gen_trajectory(&cfg.trajectory, cfg.test_slots, cfg.noise_std_m, sub_seed(seed, S_MOB_TEST))?;
    let newton = Predictor::Newton(crate::mobility::NewtonPredictor::new(cfg.history_ms, cfg.predictor.future_slots));
    let model = Predictor::Mlp(mlp.clone());
    let mut rows = Vec::new();
    for p in [&newton, &model] {
        let cells = eval_error_table(p, &test, &cfg.horizons_ms, &cfg.accuracies_m, jobs)?;
        for c in cells {
            check_cell(&c)?;
            rows.push(Table1Row {
                predictor: p.name().to_string(),
                horizon_ms: c.horizon_ms,
                accuracy_m: c.accuracy_m,
                windows: c.windows,
                errors: c.errors,
                probability: c.probability,
            });
        }
    }
    Ok(MobilityOutcome {
        rows,
        predictor: mlp,
        final_train_loss: log.last().map_or(f64::NAN, |e| e.loss),
    })
}

fn check_cell(c: &ErrorCell) -> Result<()> {
    invariant(
        "error_probability_range",
        c.errors <= c.windows && c.probability == c.errors as f64 / c.windows as f64,
        || format!("{c:?}"),
    )
}

fn write_table1(out: &mut Outputs, rows: &[Table1Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(out.path("table1.csv"))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn run_mobility(config: &ExperimentConfig, jobs: usize) -> Result<RunReport> {
    let started = Instant::now();
    let mut out = Outputs::new(&config.out_dir)?;
    let metrics = mobility_into(config, jobs, &mut out)?;
    finish(ExperimentKind::Mobility, config, out, metrics, started)
}

fn mobility_into(config: &ExperimentConfig, jobs: usize, out: &mut Outputs) -> Result<serde_json::Value> {
    let m = mobility_pipeline(&config.mobility, config.seed, jobs)?;
    write_table1(out, &m.rows)?;
    m.predictor.net.save(out.path("mobility_mlp.mlp"))?;
    let metrics = json!({ "table1": m.rows, "final_train_loss": m.final_train_loss });
    out.json("mobility.json", &metrics)?;
    Ok(metrics)
}

// --------------------------------------------------------------- scheduler

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchedulerPhase {
    Pretrain,
    Evaluate,
    Finetune,
    All,
}

impl std::str::FromStr for SchedulerPhase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pretrain" => Self::Pretrain,
            "evaluate" => Self::Evaluate,
            "finetune" => Self::Finetune,
            "all" => Self::All,
            _ => return Err(Error::Config(format!("unknown scheduler phase {s:?}"))),
        })
    }
}

#[derive(Clone, Debug)]
pub struct SchedulerArgs {
    pub phase: SchedulerPhase,
    pub agent_in: Option<PathBuf>,
    pub agent_out: Option<PathBuf>,
}

impl Default for SchedulerArgs {
    fn default() -> Self {
        Self {
            phase: SchedulerPhase::All,
            agent_in: None,
            agent_out: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table2 {
    pub ideal: LossBreakdown,
    pub pretrained_mismatch: LossBreakdown,
    pub finetuned_mismatch: LossBreakdown,
}

fn write_episode_log(out: &mut Outputs, name: &str, log: &[EpisodeLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(out.path(name))?;
    for l in log {
        w.serialize(l)?;
    }
    w.flush()?;
    Ok(())
}

fn checked_eval(policy: &MlpParams, env: &SchedulerEnvConfig, cfg: &SchedulerExperiment, seed: u64, jobs: usize) -> Result<LossBreakdown> {
    let b = evaluate(policy, env, cfg.eval_packets, sub_seed(seed, S_SCHED_EVAL), jobs)?;
    check_breakdown(&b)?;
    Ok(b)
}

fn need_agent(path: &Option<PathBuf>, phase: &str) -> Result<AgentPair> {
    let p = path
        .as_ref()
        .ok_or_else(|| Error::Config(format!("--agent-in is required for --phase {phase}")))?;
    AgentPair::load_dir(p)
}

pub fn run_scheduler(config: &ExperimentConfig, args: &SchedulerArgs, jobs: usize) -> Result<RunReport> {
    let started = Instant::now();
    let mut out = Outputs::new(&config.out_dir)?;
    let metrics = scheduler_into(config, args, jobs, &mut out)?;
    finish(ExperimentKind::Scheduler, config, out, metrics, started)
}

fn scheduler_into(config: &ExperimentConfig, args: &SchedulerArgs, jobs: usize, out: &mut Outputs) -> Result<serde_json::Value> {
    let cfg = &config.scheduler;
    cfg.validate()?;
    let seed = config.seed;
    let ideal = &cfg.env;
    let mismatch = cfg.mismatch_env();
    let agent_out = |default: &str| {
        args.agent_out
            .clone()
            .unwrap_or_else(|| config.out_dir.join(default))
    };
    match args.phase {
        SchedulerPhase::Pretrain => {
            let (agent, log) = pretrain(ideal, &cfg.drl, sub_seed(seed, S_SCHED_PRETRAIN))?;
            agent.save_dir(agent_out("agent_pretrained"))?;
            write_episode_log(out, "pretrain_log.csv", &log)?;
            Ok(json!({ "episodes": log.len() }))
        }
        SchedulerPhase::Finetune => {
            let agent = need_agent(&args.agent_in, "finetune")?;
            let (tuned, log) = fine_tune(&agent, &mismatch, &cfg.drl, &cfg.fine_tune, sub_seed(seed, S_SCHED_FINETUNE))?;
            tuned.save_dir(agent_out("agent_finetuned"))?;
            write_episode_log(out, "finetune_log.csv", &log)?;
            Ok(json!({ "episodes": log.len() }))
        }
        SchedulerPhase::Evaluate => {
            let agent = need_agent(&args.agent_in, "evaluate")?;
            let metrics = json!({
                "ideal": checked_eval(&agent.actor, ideal, cfg, seed, jobs)?,
                "mismatch": checked_eval(&agent.actor, &mismatch, cfg, seed, jobs)?,
            });
            out.json("scheduler_eval.json", &metrics)?;
            Ok(metrics)
        }
        SchedulerPhase::All => {
            let (agent, log) = pretrain(ideal, &cfg.drl, sub_seed(seed, S_SCHED_PRETRAIN))?;
            agent.save_dir(agent_out("agent_pretrained"))?;
            write_episode_log(out, "pretrain_log.csv", &log)?;
            let (tuned, ft_log) = fine_tune(&agent, &mismatch, &cfg.drl, &cfg.fine_tune, sub_seed(seed, S_SCHED_FINETUNE))?;
            tuned.save_dir(config.out_dir.join("agent_finetuned"))?;
            write_episode_log(out, "finetune_log.csv", &ft_log)?;
            let table = Table2 {
                ideal: checked_eval(&agent.actor, ideal, cfg, seed, jobs)?,
                pretrained_mismatch: checked_eval(&agent.actor, &mismatch, cfg, seed, jobs)?,
                finetuned_mismatch: checked_eval(&tuned.actor, &mismatch, cfg, seed, jobs)?,
            };
            let metrics = serde_json::to_value(&table)?;
            out.json("table2.json", &metrics)?;
            Ok(metrics)
        }
    }
}

// ------------------------------------------------------------------- assoc

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssocPhase {
    Dataset,
    Train,
    Eval,
    Shift,
    All,
}

impl std::str::FromStr for AssocPhase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dataset" => Self::Dataset,
            "train" => Self::Train,
            "eval" => Self::Eval,
            "shift" => Self::Shift,
            "all" => Self::All,
            _ => return Err(Error::Config(format!("unknown assoc phase {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct AssocArgs {
    pub phase: Option<AssocPhase>,
    /// Overrides the phase's ratio (base for dataset/train/eval, shift for shift).
    pub ratio: Option<RegionRatio>,
    pub dataset: Option<PathBuf>,
    pub model_in: Option<PathBuf>,
    pub model_out: Option<PathBuf>,
}

/// One line of the per-trial association report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fig4Row {
    pub phase: String,
    pub trial: usize,
    pub ratio: String,
    pub optimal: f64,
    pub dnn: f64,
    pub dnn_feasible: bool,
    pub highest_snr: f64,
    pub highest_snr_feasible: bool,
    pub gap: f64,
}

fn rows(phase: &str, trials: &[AssocTrial]) -> Vec<Fig4Row> {
    trials
        .iter()
        .map(|t| Fig4Row {
            phase: phase.to_string(),
            trial: t.trial,
            ratio: t.ratio.clone(),
            optimal: t.optimal,
            dnn: t.dnn,
            dnn_feasible: t.dnn_feasible,
            highest_snr: t.highest_snr,
            highest_snr_feasible: t.highest_snr_feasible,
            gap: t.gap,
        })
        .collect()
}

fn write_fig4(out: &mut Outputs, name: &str, rows: &[Fig4Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(out.path(name))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// The oracle must beat the baseline on every trial; labels must survive a
/// fresh enumeration.
fn check_oracle(trials: &[AssocTrial], samples: &[AssocSample], recheck: usize) -> Result<()> {
    for t in trials {
        let hs = if t.highest_snr_feasible { t.highest_snr } else { f64::INFINITY };
        invariant("oracle_dominance", t.optimal <= hs, || {
            format!("trial {}: optimal {} > highest-SNR {}", t.trial, t.optimal, hs)
        })?;
    }
    for (i, s) in samples.iter().take(recheck).enumerate() {
        let (a, r) = exhaustive_optimal(&s.instance)?;
        invariant("label_validity", a == s.label && r.objective == s.objective, || {
            format!("sample {i} label does not re-verify")
        })?;
    }
    Ok(())
}

fn summary_of(trials: &[AssocTrial], tol: f64) -> serde_json::Value {
    let hs_gap = trials
        .iter()
        .map(|t| {
            let r = assoc::EnergyReport {
                energies: vec![],
                violations: vec![],
                objective: t.highest_snr,
                feasible: t.highest_snr_feasible,
            };
            assoc::optimality_gap(&r, t.optimal)
        })
        .sum::<f64>()
        / trials.len().max(1) as f64;
    json!({
        "trials": trials.len(),
        "mean_gap": mean_gap(trials),
        "within_tolerance": within(trials, tol),
        "dnn_infeasible": trials.iter().filter(|t| !t.dnn_feasible).count(),
        "highest_snr_mean_gap": hs_gap,
    })
}

/// Full association study.
pub struct AssocOutcome {
    pub rows: Vec<Fig4Row>,
    pub metrics: serde_json::Value,
    pub base_net: MlpParams,
    pub tuned_net: MlpParams,
}

pub fn assoc_pipeline(cfg: &AssocExperiment, seed: u64, jobs: usize) -> Result<AssocOutcome> {
    cfg.validate()?;
    let inst = &cfg.instance;
    let tol = cfg.gap_tolerance;
    let train = build_dataset(inst, cfg.base_ratio, cfg.train_samples, &cfg.features, sub_seed(seed, S_ASSOC_TRAIN), jobs)?;
    let test = build_dataset(inst, cfg.base_ratio, cfg.test_samples, &cfg.features, sub_seed(seed, S_ASSOC_TEST), jobs)?;
    let augment = |set: &[AssocSample], copies: usize, stream: u64| {
        augment_class_permutations(set, copies, &cfg.features, sub_seed(seed, stream + 100))
    };
    let (net, log) = train_assoc_dnn(&augment(&train, cfg.augment_copies, S_ASSOC_TRAIN)?, &cfg.train)?;
    let base = evaluate_dnn(&net, &test, &cfg.features, 0)?;
    check_oracle(&base, &train, cfg.label_recheck)?;

    let shift_train = build_dataset(
        inst,
        cfg.shift_ratio,
        cfg.shift_samples,
        &cfg.features,
        sub_seed(seed, S_ASSOC_SHIFT_TRAIN),
        jobs,
    )?;
    let shift_test = build_dataset(
        inst,
        cfg.shift_ratio,
        cfg.shift_test_samples,
        &cfg.features,
        sub_seed(seed, S_ASSOC_SHIFT_TEST),
        jobs,
    )?;
    let offset = base.len();
    let unadapted = evaluate_dnn(&net, &shift_test, &cfg.features, offset)?;
    let (tuned, _) = fine_tune_on_shift(
        &net,
        &augment(&shift_train, cfg.shift_augment_copies, S_ASSOC_SHIFT_TRAIN)?,
        cfg.fine_tune_mode,
        &cfg.shift_fit,
    )?;
    let adapted = evaluate_dnn(&tuned, &shift_test, &cfg.features, offset)?;
    check_oracle(&adapted, &shift_train, cfg.label_recheck)?;

    let mut all_rows = rows("base", &base);
    all_rows.extend(rows("shift_unadapted", &unadapted));
    all_rows.extend(rows("shift_finetuned", &adapted));
    let mut metrics = json!({
        "base_ratio": cfg.base_ratio.to_string(),
        "shift_ratio": cfg.shift_ratio.to_string(),
        "train_accuracy": decision_accuracy(&net, &train)?,
        "test_accuracy": decision_accuracy(&net, &test)?,
        "final_train_loss": log.last().map_or(f64::NAN, |e| e.loss),
        "base": summary_of(&base, tol),
        "shift_unadapted": summary_of(&unadapted, tol),
        "shift_finetuned": summary_of(&adapted, tol),
    });
    if cfg.scratch_baseline {
        let scratch_train = build_dataset(
            inst,
            cfg.shift_ratio,
            cfg.train_samples,
            &cfg.features,
            sub_seed(seed, S_ASSOC_SCRATCH),
            jobs,
        )?;
        let (scratch, _) = train_assoc_dnn(&augment(&scratch_train, cfg.augment_copies, S_ASSOC_SCRATCH)?, &cfg.train)?;
        let s = evaluate_dnn(&scratch, &shift_test, &cfg.features, offset)?;
        all_rows.extend(rows("shift_scratch", &s));
        metrics["shift_scratch"] = summary_of(&s, tol);
    }
    Ok(AssocOutcome {
        rows: all_rows,
        metrics,
        base_net: net,
        tuned_net: tuned,
    })
}

pub fn run_assoc(config: &ExperimentConfig, args: &AssocArgs, jobs: usize) -> Result<RunReport> {
    let started = Instant::now();
    let mut out = Outputs::new(&config.out_dir)?;
    let metrics = assoc_into(config, args, jobs, &mut out)?;
    finish(ExperimentKind::Assoc, config, out, metrics, started)
}

fn load_model(path: &Option<PathBuf>, phase: &str) -> Result<MlpParams> {
    let p = path
        .as_ref()
        .ok_or_else(|| Error::Config(format!("--model-in is required for --phase {phase}")))?;
    MlpParams::load(p)
}

fn assoc_into(config: &ExperimentConfig, args: &AssocArgs, jobs: usize, out: &mut Outputs) -> Result<serde_json::Value> {
    let cfg = &config.assoc;
    cfg.validate()?;
    let seed = config.seed;
    let model_out = |default: &str| {
        args.model_out
            .clone()
            .unwrap_or_else(|| config.out_dir.join(default))
    };
    let base = args.ratio.unwrap_or(cfg.base_ratio);
    match args.phase.unwrap_or(AssocPhase::All) {
        AssocPhase::Dataset => {
            let ds = build_dataset(&cfg.instance, base, cfg.train_samples, &cfg.features, sub_seed(seed, S_ASSOC_TRAIN), jobs)?;
            let name = format!("assoc_dataset_{}.csv", base.to_string().replace(':', "-"));
            assoc::write_dataset_csv(&ds, fs::File::create(out.path(&name))?)?;
            Ok(json!({ "dataset": name, "samples": ds.len() }))
        }
        AssocPhase::Train => {
            let (net, log) = match &args.dataset {
                Some(path) => {
                    let rows = read_dataset_csv(fs::File::open(path)?)?;
                    let (x, y): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
                    train_assoc_dnn_on(&x, &y, &cfg.train)?
                }
                None => {
                    let ds = build_dataset(&cfg.instance, base, cfg.train_samples, &cfg.features, sub_seed(seed, S_ASSOC_TRAIN), jobs)?;
                    let ds = augment_class_permutations(&ds, cfg.augment_copies, &cfg.features, sub_seed(seed, S_ASSOC_TRAIN + 100))?;
                    train_assoc_dnn(&ds, &cfg.train)?
                }
            };
            invariant("dnn_finite", net.is_finite(), || "trained network has non-finite parameters".into())?;
            net.save(model_out("assoc_dnn.mlp"))?;
            Ok(json!({ "epochs": log.len(), "final_train_loss": log.last().map_or(f64::NAN, |e| e.loss) }))
        }
        AssocPhase::Eval => {
            let net = load_model(&args.model_in, "eval")?;
            let test = build_dataset(&cfg.instance, base, cfg.test_samples, &cfg.features, sub_seed(seed, S_ASSOC_TEST), jobs)?;
            let trials = evaluate_dnn(&net, &test, &cfg.features, 0)?;
            check_oracle(&trials, &[], 0)?;
            write_fig4(out, "assoc_eval.csv", &rows("eval", &trials))?;
            let m = summary_of(&trials, cfg.gap_tolerance);
            out.json("assoc_eval.json", &m)?;
            Ok(m)
        }
        AssocPhase::Shift => {
            let shift = args.ratio.unwrap_or(cfg.shift_ratio);
            let net = load_model(&args.model_in, "shift")?;
            let train = build_dataset(&cfg.instance, shift, cfg.shift_samples, &cfg.features, sub_seed(seed, S_ASSOC_SHIFT_TRAIN), jobs)?;
            let test = build_dataset(&cfg.instance, shift, cfg.shift_test_samples, &cfg.features, sub_seed(seed, S_ASSOC_SHIFT_TEST), jobs)?;
            let before = evaluate_dnn(&net, &test, &cfg.features, 0)?;
            let train = augment_class_permutations(&train, cfg.shift_augment_copies, &cfg.features, sub_seed(seed, S_ASSOC_SHIFT_TRAIN + 100))?;
            let (tuned, _) = fine_tune_on_shift(&net, &train, cfg.fine_tune_mode, &cfg.shift_fit)?;
            let after = evaluate_dnn(&tuned, &test, &cfg.features, 0)?;
            tuned.save(model_out("assoc_dnn_shifted.mlp"))?;
            let mut r = rows("shift_unadapted", &before);
            r.extend(rows("shift_finetuned", &after));
            write_fig4(out, "assoc_shift.csv", &r)?;
            let m = json!({
                "shift_unadapted": summary_of(&before, cfg.gap_tolerance),
                "shift_finetuned": summary_of(&after, cfg.gap_tolerance),
            });
            out.json("assoc_shift.json", &m)?;
            Ok(m)
        }
        AssocPhase::All => {
            let o = assoc_pipeline(cfg, seed, jobs)?;
            write_fig4(out, "fig4.csv", &o.rows)?;
            o.base_net.save(out.path("assoc_dnn.mlp"))?;
            o.tuned_net.save(out.path("assoc_dnn_finetuned.mlp"))?;
            out.json("assoc.json", &o.metrics)?;
            Ok(o.metrics)
        }
    }
}

// --------------------------------------------------------------------- fed

#[derive(Clone, Debug, Default)]
pub struct FedArgs {
    /// Directories of `.mlp` files to aggregate; empty runs the demo.
    pub cells: Vec<PathBuf>,
    pub counts: Option<PathBuf>,
    /// Output model path in aggregation mode.
    pub model_out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FedRound {
    pub round: usize,
    pub global_mse: f64,
    pub edge_mse: Vec<f64>,
}

/// K forecasters on disjoint trajectory shards, averaged hierarchically
/// each round; compared against the same locals trained in isolation.
pub fn fed_pipeline(cfg: &FedExperiment, seed: u64) -> Result<(serde_json::Value, MlpParams)> {
    cfg.validate()?;
    let future = cfg.predictor.future_slots;
    let k_total = cfg.cells * cfg.locals_per_cell;
    let mut shards = Vec::with_capacity(k_total);
    for k in 0..k_total {
        let n = cfg.base_windows * (1 + k % 3);
        let s = sub_seed(sub_seed(seed, S_FED_SHARD), k as u64);
        let tr = gen_trajectory(&cfg.trajectory, cfg.shard_slots, cfg.noise_std_m, s)?;
        shards.push(sample_windows(&tr, cfg.history_ms, future, n, sub_seed(s, 1))?);
    }
    let test_tr = gen_trajectory(&cfg.trajectory, cfg.shard_slots, cfg.noise_std_m, sub_seed(seed, S_FED_TEST))?;
    let test = sample_windows(&test_tr, cfg.history_ms, future, cfg.test_windows, sub_seed(seed, S_FED_TEST + 100))?;

    // shared initialization: zero epochs of training just builds the net
    let init_cfg = PredictorTrainConfig {
        fit: FitConfig { epochs: 0, ..cfg.predictor.fit.clone() },
        ..cfg.predictor.clone()
    };
    let (global0, _) = train_mlp_predictor(&shards[0], &init_cfg)?;
    let local_fit = |k: usize, round: usize| FitConfig {
        epochs: cfg.local_epochs,
        seed: sub_seed(cfg.predictor.fit.seed, (round * k_total + k) as u64),
        ..cfg.predictor.fit.clone()
    };
    let mse = |m: &MlpPredictor| dataset_mse(&Predictor::Mlp(m.clone()), &test);

    let mut isolated: Vec<MlpPredictor> = vec![global0.clone(); k_total];
    let mut global = global0.clone();
    let mut rounds = Vec::new();
    for round in 0..cfg.rounds {
        let mut cells = Vec::with_capacity(cfg.cells);
        for c in 0..cfg.cells {
            let mut models = Vec::new();
            let mut counts = Vec::new();
            for j in 0..cfg.locals_per_cell {
                let k = c * cfg.locals_per_cell + j;
                let (local, _) = continue_training(&global, &shards[k], &local_fit(k, round))?;
                models.push(local.net);
                counts.push(shards[k].len() as u64);
                let (iso, _) = continue_training(&isolated[k], &shards[k], &local_fit(k, round))?;
                isolated[k] = iso;
            }
            cells.push(ModelSet::new(models, counts)?);
        }
        let r = hierarchical_round(&cells)?;
        // two tiers with count weights must equal one flat average
        let flat_models: Vec<MlpParams> = cells.iter().flat_map(|c| c.models().to_vec()).collect();
        let flat_counts: Vec<u64> = cells.iter().flat_map(|c| c.sample_counts().to_vec()).collect();
        let flat = federated::aggregate(&ModelSet::new(flat_models, flat_counts.clone())?, &compute_weights(&flat_counts)?)?;
        let dev = flat
            .params()
            .zip(r.global.params())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        invariant("hierarchy_collapse", dev <= 1e-12, || format!("round {round}: deviation {dev:e}"))?;
        let edge_mse = r
            .edge_models
            .iter()
            .map(|e| mse(&global.with_net(e.clone())?))
            .collect::<Result<Vec<_>>>()?;
        global = global.with_net(r.global)?;
        rounds.push(FedRound {
            round,
            global_mse: mse(&global)?,
            edge_mse,
        });
    }
    let isolated_mse = isolated.iter().map(&mse).collect::<Result<Vec<_>>>()?;
    let metrics = json!({
        "locals": k_total,
        "sample_counts": shards.iter().map(|s| s.len()).collect::<Vec<_>>(),
        "rounds": rounds,
        "global_mse": rounds.last().map(|r| r.global_mse),
        "isolated_mse": isolated_mse,
        "newton_mse": dataset_mse(&Predictor::newton(), &test)?,
    });
    Ok((metrics, global.net))
}

pub fn run_fed(config: &ExperimentConfig, args: &FedArgs) -> Result<RunReport> {
    let started = Instant::now();
    if args.cells.is_empty() {
        let mut out = Outputs::new(&config.out_dir)?;
        let metrics = fed_into(config, &mut out)?;
        return finish(ExperimentKind::Fed, config, out, metrics, started);
    }
    let counts_path = args
        .counts
        .as_ref()
        .ok_or_else(|| Error::Config("--counts is required with --cells".into()))?;
    let counts = federated::read_counts(fs::File::open(counts_path)?)?;
    let cells = args
        .cells
        .iter()
        .map(|d| federated::load_cell(d, &counts))
        .collect::<Result<Vec<_>>>()?;
    let r = hierarchical_round(&cells)?;
    let target = args.model_out.clone().unwrap_or_else(|| PathBuf::from("global.mlp"));
    if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    r.global.save(&target)?;
    Ok(RunReport {
        kind: ExperimentKind::Fed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        metrics: json!({ "cells": cells.len(), "edge_counts": r.edge_counts, "global": target.display().to_string() }),
        files: vec![target.display().to_string()],
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

fn fed_into(config: &ExperimentConfig, out: &mut Outputs) -> Result<serde_json::Value> {
    let (metrics, global) = fed_pipeline(&config.fed, config.seed)?;
    global.save(out.path("fed_global.mlp"))?;
    out.json("fed.json", &metrics)?;
    Ok(metrics)
}

// --------------------------------------------------------------------- all

/// Every experiment in sequence, plus a plain-text summary.
pub fn run_all(config: &ExperimentConfig, jobs: usize) -> Result<RunReport> {
    config.validate()?;
    let started = Instant::now();
    let mut out = Outputs::new(&config.out_dir)?;
    let mobility = mobility_into(config, jobs, &mut out)?;
    let scheduler = scheduler_into(config, &SchedulerArgs::default(), jobs, &mut out)?;
    let assoc = assoc_into(config, &AssocArgs::default(), jobs, &mut out)?;
    let fed = fed_into(config, &mut out)?;
    let metrics = json!({ "mobility": mobility, "scheduler": scheduler, "assoc": assoc, "fed": fed });
    out.write("summary.txt", summary_text(&metrics).as_bytes())?;
    finish(ExperimentKind::All, config, out, metrics, started)
}

fn summary_text(m: &serde_json::Value) -> String {
    let mut s = String::new();
    if let Some(rows) = m["mobility"]["table1"].as_array() {
        let _ = writeln!(s, "Prediction error probability");
        let _ = writeln!(s, "{:<12} {:>8} {:>10} {:>12}", "model", "horizon", "accuracy", "P(error)");
        for r in rows {
            let _ = writeln!(
                s,
                "{:<12} {:>6}ms {:>9}m {:>12.3e}",
                r["predictor"].as_str().unwrap_or(""),
                r["horizon_ms"].as_u64().unwrap_or(0),
                r["accuracy_m"].as_f64().unwrap_or(f64::NAN),
                r["probability"].as_f64().unwrap_or(f64::NAN)
            );
        }
        s.push('\n');
    }
    if m["scheduler"]["ideal"].is_object() {
        let _ = writeln!(s, "Scheduler packet loss");
        let _ = writeln!(s, "{:<22} {:>12} {:>12} {:>12}", "", "delay", "decoding", "overall");
        for (label, key) in [
            ("ideal environment", "ideal"),
            ("pretrained, mismatch", "pretrained_mismatch"),
            ("fine-tuned, mismatch", "finetuned_mismatch"),
        ] {
            let b = &m["scheduler"][key];
            let f = |k: &str| b[k].as_f64().unwrap_or(f64::NAN);
            let _ = writeln!(
                s,
                "{label:<22} {:>12.3e} {:>12.3e} {:>12.3e}",
                f("delay_violation"),
                f("decoding_error"),
                f("overall")
            );
        }
        s.push('\n');
    }
    if m["assoc"]["base"].is_object() {
        let _ = writeln!(s, "User association (optimality gap)");
        let _ = writeln!(s, "{:<18} {:>10} {:>14} {:>16}", "", "mean gap", "within tol", "highest-SNR gap");
        for key in ["base", "shift_unadapted", "shift_finetuned", "shift_scratch"] {
            let b = &m["assoc"][key];
            if b.is_object() {
                let f = |k: &str| b[k].as_f64().unwrap_or(f64::NAN);
                let _ = writeln!(
                    s,
                    "{key:<18} {:>10.4} {:>14.3} {:>16.4}",
                    f("mean_gap"),
                    f("within_tolerance"),
                    f("highest_snr_mean_gap")
                );
            }
        }
        s.push('\n');
    }
    if let Some(g) = m["fed"]["global_mse"].as_f64() {
        let _ = writeln!(s, "Federated forecaster held-out MSE (m^2)");
        let _ = writeln!(s, "global {g:.4e}");
        if let Some(iso) = m["fed"]["isolated_mse"].as_array() {
            let v: Vec<String> = iso.iter().map(|x| format!("{:.4e}", x.as_f64().unwrap_or(f64::NAN))).collect();
            let _ = writeln!(s, "isolated {}", v.join(" "));
        }
    }
    s
}

/// Process exit code for an error: 2 for configuration problems, 3 for a
/// failed runtime invariant, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse(_) => 2,
        Error::Invariant(_) => 3,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.scheduler.env.qos.d_min_ms, 9);
        assert_eq!(c.scheduler.env.qos.d_max_ms, 11);
        assert_eq!(c.scheduler.env.total_bandwidth_hz, 5e6);
        assert!(matches!(
            c.scheduler.env.arrivals[0],
            crate::queue::ArrivalProcess::Poisson { rate_pkts_per_s } if rate_pkts_per_s == 100.0
        ));
    }

    #[test]
    fn window_contradiction_rejected() {
        let e = parse_config("[scheduler.env.qos]\nd_min_ms = 12\nd_max_ms = 11\n").unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.starts_with("scheduler.env.qos: ")), "{e}");
        assert_eq!(exit_code(&e), 2);
    }

    #[test]
    fn unknown_key_named() {
        let e = parse_config("foo = 1\n").unwrap_err();
        assert!(e.to_string().contains("foo"), "{e}");
        let e = parse_config("[assoc]\ntrain_samples = 10\nbar = 2\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("bar") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn resolved_toml_roundtrips() {
        let mut c = ExperimentConfig::default();
        c.seed = 99;
        c.assoc.fine_tune_mode = FineTuneMode::LastK(2);
        c.mobility.trajectory = TrajectoryKind::Sinusoid {
            amplitude: [1.0, 0.5, 0.0],
            period_ms: [1000.0, 700.0, 1.0],
            phase: [0.0; 3],
        };
        let text = c.to_toml().unwrap();
        assert_eq!(parse_config(&text).unwrap(), c);
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let c = parse_config("seed = 3\n[scheduler.drl]\nepisodes = 2\n[mobility.trajectory]\nkind = \"smooth_random\"\nv_max = 2.0\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.scheduler.drl.episodes, 2);
        assert_eq!(c.scheduler.drl.batch_size, DrlConfig::default().batch_size);
        match c.mobility.trajectory {
            TrajectoryKind::SmoothRandom(p) => assert_eq!(p.v_max, 2.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ratio_in_config() {
        let c = parse_config("[assoc]\nshift_ratio = \"8:2\"\n").unwrap();
        assert_eq!(c.assoc.shift_ratio, RegionRatio { region1: 8, region2: 2 });
        assert!(parse_config("[assoc]\nshift_ratio = \"8:3\"\n").is_err());
    }
}
