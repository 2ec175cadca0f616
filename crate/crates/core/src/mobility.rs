//! Device-level mobility prediction.
//!
//! Synthetic 1 ms trajectories stand in for a tactile-device recording. Two
//! predictors look at the past 50 ms and forecast the position `h` ms ahead:
//! a kinematic least-squares fit of a per-axis quadratic (constant
//! acceleration) and a fully-connected network that forecasts the next
//! 20 slots in one shot.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{fit, Activation, ActivationConfig, EpochStats, FitConfig, FreezeMask, Loss, MlpParams, OutputActivation};

pub type Point = [f64; 3];

/// Slot duration in seconds.
pub const SLOT_S: f64 = 1e-3;
pub const DEFAULT_HISTORY_MS: usize = 50;
pub const MAX_HORIZON_MS: usize = 20;
/// Minimum number of sliding windows an error-probability estimate needs.
pub const MIN_EVAL_WINDOWS: usize = 100_000;

/// Positions sampled once per 1 ms slot, in metres.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub positions: Vec<Point>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Writes `t_ms,x,y,z` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t_ms", "x", "y", "z"])?;
        for (t, p) in self.positions.iter().enumerate() {
            w.write_record(&[t.to_string(), p[0].to_string(), p[1].to_string(), p[2].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut positions = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |k: usize| -> Result<f64> {
                rec.get(k)
                    .ok_or_else(|| Error::Parse(format!("row {i}: missing column {k}")))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {i}: {e}")))
            };
            let t = parse(0)?;
            if t != i as f64 {
                return Err(Error::Parse(format!("row {i}: expected t_ms={i}, got {t}")));
            }
            let p = [parse(1)?, parse(2)?, parse(3)?];
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse(format!("row {i}: non-finite coordinate")));
            }
            positions.push(p);
        }
        Ok(Self { positions })
    }
}

/// Parameters of the jerk-bounded Gauss-Markov motion model.
///
/// Acceleration follows a mean-reverting (Ornstein-Uhlenbeck) drive plus a
/// spring-damper that keeps the device inside its workspace. Short bursts of
/// vigorous motion, arriving as a Poisson process, add a second faster
/// drive with a larger spread. The per-slot change in acceleration is
/// clipped to `jerk_max`, and speed is capped at `v_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothRandomParams {
    pub v_max: f64,
    pub accel_std: f64,
    pub accel_tau_ms: f64,
    pub jerk_max: f64,
    pub spring_hz: f64,
    pub damping_ratio: f64,
    pub burst_rate_hz: f64,
    pub burst_ms: f64,
    pub burst_accel_std: f64,
    pub burst_tau_ms: f64,
}

impl Default for SmoothRandomParams {
    fn default() -> Self {
        Self {
            v_max: 1.5,
            accel_std: 4.0,
            accel_tau_ms: 40.0,
            jerk_max: 1e5,
            spring_hz: 1.0,
            damping_ratio: 0.7,
            burst_rate_hz: 0.2,
            burst_ms: 20.0,
            burst_accel_std: 400.0,
            burst_tau_ms: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TrajectoryKind {
    ConstAccel {
        start: Point,
        velocity: Point,
        acceleration: Point,
    },
    SmoothRandom(SmoothRandomParams),
    /// Independent per-axis sinusoids `amplitude·sin(2π t / period + phase)`.
    Sinusoid {
        amplitude: Point,
        period_ms: Point,
        phase: Point,
    },
}

impl TrajectoryKind {
    pub fn smooth_random() -> Self {
        TrajectoryKind::SmoothRandom(SmoothRandomParams::default())
    }
}

/// Generates a trajectory of `duration_ms` slots; `noise_std_m` adds i.i.d.
/// Gaussian measurement noise to every coordinate.
pub fn gen_trajectory(kind: &TrajectoryKind, duration_ms: usize, noise_std_m: f64, seed: u64) -> Result<Trajectory> {
    if !(noise_std_m >= 0.0) {
        return Err(Error::Config(format!("noise std must be ≥ 0, got {noise_std_m}")));
    }
    if duration_ms < 100 {
        return Err(Error::Config(format!("duration must be ≥ 100 ms, got {duration_ms}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = match *kind {
        TrajectoryKind::ConstAccel {
            start,
            velocity,
            acceleration,
        } => (0..duration_ms)
            .map(|t| {
                let s = t as f64 * SLOT_S;
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = start[k] + velocity[k] * s + 0.5 * acceleration[k] * s * s;
                }
                p
            })
            .collect(),
        TrajectoryKind::Sinusoid {
            amplitude,
            period_ms,
            phase,
        } => (0..duration_ms)
            .map(|t| {
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = amplitude[k] * (std::f64::consts::TAU * t as f64 / period_ms[k] + phase[k]).sin();
                }
                p
            })
            .collect(),
        TrajectoryKind::SmoothRandom(params) => smooth_random(&params, duration_ms, &mut rng)?,
    };
    if noise_std_m > 0.0 {
        for p in positions.iter_mut() {
            for v in p.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += noise_std_m * z;
            }
        }
    }
    Ok(Trajectory { positions })
}

fn smooth_random(params: &SmoothRandomParams, duration_ms: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Point>> {
    let p = params;
    if !(p.v_max > 0.0 && p.accel_std >= 0.0 && p.accel_tau_ms > 0.0 && p.jerk_max > 0.0 && p.spring_hz >= 0.0 && p.burst_rate_hz >= 0.0 && p.burst_accel_std >= 0.0) {
        return Err(Error::Config(format!("invalid smooth_random parameters {p:?}")));
    }
    let dt = SLOT_S;
    let rho = (-1.0 / p.accel_tau_ms).exp();
    let innov = p.accel_std * (1.0 - rho * rho).sqrt();
    let omega = std::f64::consts::TAU * p.spring_hz;
    let max_da = p.jerk_max * dt;
    let rho_b = (-1.0 / p.burst_tau_ms.max(1e-9)).exp();
    let innov_b = p.burst_accel_std * (1.0 - rho_b * rho_b).sqrt();
    let burst_start_p = p.burst_rate_hz * dt;
    let mut burst_left = 0usize;
    let mut burst = [0.0f64; 3];
    let mut drive = [0.0f64; 3];
    let mut accel = [0.0f64; 3];
    let mut vel = [0.0f64; 3];
    let mut pos = [0.0f64; 3];
    let mut out = Vec::with_capacity(duration_ms);
    for _ in 0..duration_ms {
        out.push(pos);
        if burst_left == 0 && burst_start_p > 0.0 && rng.gen_bool(burst_start_p.min(1.0)) {
            burst_left = p.burst_ms.round() as usize;
        }
        let bursting = burst_left > 0;
        burst_left = burst_left.saturating_sub(1);
        for k in 0..3 {
            let z: f64 = rng.sample(StandardNormal);
            drive[k] = rho * drive[k] + innov * z;
            let zb: f64 = rng.sample(StandardNormal);
            burst[k] = rho_b * burst[k] + if bursting { innov_b * zb } else { 0.0 };
            let wanted = drive[k] + burst[k] - omega * omega * pos[k] - 2.0 * p.damping_ratio * omega * vel[k];
            accel[k] += (wanted - accel[k]).clamp(-max_da, max_da);
        }
        let mut next_vel = [0.0; 3];
        for k in 0..3 {
            next_vel[k] = vel[k] + accel[k] * dt;
        }
        let speed = norm(&next_vel);
        if speed > p.v_max {
            let s = p.v_max / speed;
            for v in next_vel.iter_mut() {
                *v *= s;
            }
        }
        for k in 0..3 {
            // trapezoidal position update keeps the path C1
            pos[k] += 0.5 * (vel[k] + next_vel[k]) * dt;
            vel[k] = next_vel[k];
        }
    }
    Ok(out)
}

/// Speeds between consecutive noise-free samples, in m/s.
pub fn slot_speeds(trajectory: &Trajectory) -> impl Iterator<Item = f64> + '_ {
    trajectory.positions.windows(2).map(|w| distance(&w[0], &w[1]) / SLOT_S)
}

#[inline]
fn norm(v: &Point) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[inline]
pub fn distance(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    norm(&d)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSpec {
    pub history_ms: usize,
    pub horizon_ms: usize,
    pub accuracy_m: f64,
}

impl PredictionSpec {
    pub fn new(horizon_ms: usize, accuracy_m: f64) -> Result<Self> {
        let spec = Self {
            history_ms: DEFAULT_HISTORY_MS,
            horizon_ms,
            accuracy_m,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon_ms == 0 || self.horizon_ms > MAX_HORIZON_MS {
            return Err(Error::Config(format!("horizon must be in 1..=20 ms, got {}", self.horizon_ms)));
        }
        if self.history_ms < 3 {
            return Err(Error::Config("history must cover at least 3 slots".into()));
        }
        if !(self.accuracy_m > 0.0) {
            return Err(Error::Config("accuracy must be positive".into()));
        }
        Ok(())
    }
}

/// Least-squares constant-acceleration extrapolator.
///
/// Fitting `x(t) = x0 + v·t + ½a·t²` to a fixed window and evaluating it
/// `h` slots past the last sample is a fixed linear combination of the
/// window samples; the combination weights are precomputed per horizon.
#[derive(Clone, Debug)]
pub struct NewtonPredictor {
    history: usize,
    /// `weights[h - 1][k]` multiplies sample `k` (oldest first) for horizon `h`.
    weights: Vec<Vec<f64>>,
}

impl NewtonPredictor {
    pub fn new(history: usize, max_horizon: usize) -> Self {
        // Time axis in slots, last sample at t = 0: monomials 1, t, t².
        let ts: Vec<f64> = (0..history).map(|k| k as f64 - (history - 1) as f64).collect();
        let mut gram = [[0.0f64; 3]; 3];
        for &t in &ts {
            let basis = [1.0, t, t * t];
            for i in 0..3 {
                for j in 0..3 {
                    gram[i][j] += basis[i] * basis[j];
                }
            }
        }
        let inv = invert3(&gram);
        let weights = (1..=max_horizon)
            .map(|h| {
                let th = h as f64;
                let eval = [1.0, th, th * th];
                // c = eval · G⁻¹ ; w_k = c · basis(t_k)
                let mut c = [0.0; 3];
                for j in 0..3 {
                    c[j] = (0..3).map(|i| eval[i] * inv[i][j]).sum();
                }
                ts.iter().map(|&t| c[0] + c[1] * t + c[2] * t * t).collect()
            })
            .collect();
        Self { history, weights }
    }

    pub fn history(&self) -> usize {
        self.history
    }

    /// Predicts the position `horizon_ms` after the last history sample.
    pub fn predict(&self, history: &[Point], horizon_ms: usize) -> Result<Point> {
        if history.len() != self.history {
            return Err(Error::Shape(format!(
                "expected {} history points, got {}",
                self.history,
                history.len()
            )));
        }
        if horizon_ms == 0 || horizon_ms > self.weights.len() {
            return Err(Error::Config(format!("horizon {horizon_ms} outside 1..={}", self.weights.len())));
        }
        Ok(self.predict_unchecked(history, horizon_ms))
    }

    #[inline]
    fn predict_unchecked(&self, history: &[Point], horizon_ms: usize) -> Point {
        let w = &self.weights[horizon_ms - 1];
        let anchor = history[history.len() - 1];
        let mut out = anchor;
        for (wk, p) in w.iter().zip(history) {
            for k in 0..3 {
                out[k] += wk * (p[k] - anchor[k]);
            }
        }
        out
    }
}

/// Kinematic prediction from exactly `history.len()` past samples.
pub fn newton_predict(history: &[Point], horizon_ms: usize) -> Result<Point> {
    NewtonPredictor::new(history.len(), horizon_ms.max(1)).predict(history, horizon_ms)
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

/// What the network regresses onto.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorTarget {
    /// Future offsets from the last observed position.
    Direct,
    /// Future offsets from the kinematic forecast (the network learns the
    /// correction the constant-acceleration model misses).
    KinematicResidual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorTrainConfig {
    pub hidden: Vec<usize>,
    pub future_slots: usize,
    pub target: PredictorTarget,
    /// Feature/label scale in metres; inputs and outputs are divided by it.
    pub scale_m: f64,
    pub fit: FitConfig,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![100, 100],
            future_slots: MAX_HORIZON_MS,
            target: PredictorTarget::Direct,
            scale_m: 0.01,
            fit: FitConfig {
                epochs: 40,
                batch_size: 32,
                learning_rate: 0.01,
                momentum: 0.9,
                lr_decay: 0.93,
                seed: 0,
            },
        }
    }
}

/// A trained forecaster plus the encoding it was trained with.
#[derive(Clone, Debug)]
pub struct MlpPredictor {
    pub net: MlpParams,
    pub history: usize,
    pub future_slots: usize,
    pub target: PredictorTarget,
    pub scale_m: f64,
    kinematic: NewtonPredictor,
}

impl MlpPredictor {
    pub fn new(net: MlpParams, history: usize, future_slots: usize, target: PredictorTarget, scale_m: f64) -> Result<Self> {
        if net.input_dim() != 3 * history || net.output_dim() != 3 * future_slots {
            return Err(Error::Shape(format!(
                "network {:?} does not map {history} points to {future_slots} points",
                net.layer_sizes()
            )));
        }
        Ok(Self {
            net,
            history,
            future_slots,
            target,
            scale_m,
            kinematic: NewtonPredictor::new(history, future_slots),
        })
    }

    /// Same encoding with other weights (e.g. an aggregated network).
    pub fn with_net(&self, net: MlpParams) -> Result<Self> {
        Self::new(net, self.history, self.future_slots, self.target, self.scale_m)
    }

    fn encode(&self, history: &[Point]) -> Vec<f64> {
        encode_history(history, self.scale_m)
    }

    fn base(&self, history: &[Point], h: usize) -> Point {
        match self.target {
            PredictorTarget::Direct => history[history.len() - 1],
            PredictorTarget::KinematicResidual => self.kinematic.predict_unchecked(history, h),
        }
    }

    /// Forecast for horizons `1..=future_slots`.
    pub fn predict_all(&self, history: &[Point]) -> Result<Vec<Point>> {
        if history.len() != self.history {
            return Err(Error::Shape(format!("expected {} history points, got {}", self.history, history.len())));
        }
        let out = self.net.forward(&self.encode(history))?;
        Ok((1..=self.future_slots)
            .map(|h| {
                let b = self.base(history, h);
                let o = &out[3 * (h - 1)..3 * h];
                [b[0] + o[0] * self.scale_m, b[1] + o[1] * self.scale_m, b[2] + o[2] * self.scale_m]
            })
            .collect())
    }

    pub fn predict(&self, history: &[Point], horizon_ms: usize) -> Result<Point> {
        if horizon_ms == 0 || horizon_ms > self.future_slots {
            return Err(Error::Config(format!("horizon {horizon_ms} outside 1..={}", self.future_slots)));
        }
        Ok(self.predict_all(history)?[horizon_ms - 1])
    }
}

fn encode_history(history: &[Point], scale: f64) -> Vec<f64> {
    let anchor = history[history.len() - 1];
    history
        .iter()
        .flat_map(|p| (0..3).map(move |k| (p[k] - anchor[k]) / scale))
        .collect()
}

/// `(history, future)` training pair: `history` past samples followed by
/// `future_slots` future samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSample {
    pub history: Vec<Point>,
    pub future: Vec<Point>,
}

/// Samples `count` windows uniformly from a trajectory.
pub fn sample_windows(
    trajectory: &Trajectory,
    history: usize,
    future_slots: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PredictionSample>> {
    let span = history + future_slots;
    if trajectory.len() < span {
        return Err(Error::InsufficientData(format!(
            "trajectory of {} slots cannot hold a {span}-slot window",
            trajectory.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last_start = trajectory.len() - span;
    Ok((0..count)
        .map(|_| {
            let s = rng.gen_range(0..=last_start);
            PredictionSample {
                history: trajectory.positions[s..s + history].to_vec(),
                future: trajectory.positions[s + history..s + span].to_vec(),
            }
        })
        .collect())
}

/// Trains the forecasting network; returns it with the per-epoch MSE log
/// (in scaled units).
pub fn train_mlp_predictor(
    dataset: &[PredictionSample],
    config: &PredictorTrainConfig,
) -> Result<(MlpPredictor, Vec<EpochStats>)> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::InsufficientData("empty training set".into()))?;
    let history = first.history.len();
    let future = config.future_slots;
    if history < 3 {
        return Err(Error::Shape("history must hold at least 3 points".into()));
    }
    if let Some(bad) = dataset
        .iter()
        .find(|s| s.history.len() != history || s.future.len() != future)
    {
        return Err(Error::Shape(format!(
            "sample with {} history / {} future points, expected {history} / {future}",
            bad.history.len(),
            bad.future.len()
        )));
    }
    let mut sizes = vec![3 * history];
    sizes.extend(&config.hidden);
    sizes.push(3 * future);
    let mut net = MlpParams::init(
        &sizes,
        ActivationConfig::new(Activation::Tanh, OutputActivation::Identity),
        config.fit.seed,
    )?;
    if config.target == PredictorTarget::KinematicResidual {
        // start from the kinematic forecast itself
        let last = net.num_layers() - 1;
        let out = &mut net.layers_mut()[last];
        out.weights.iter_mut().for_each(|w| *w = 0.0);
        out.biases.iter_mut().for_each(|b| *b = 0.0);
    }
    let model = MlpPredictor::new(net, history, future, config.target, config.scale_m)?;
    continue_training(&model, dataset, &config.fit)
}

/// Further training of an existing forecaster (same encoding) on `dataset`.
pub fn continue_training(
    model: &MlpPredictor,
    dataset: &[PredictionSample],
    fit_config: &FitConfig,
) -> Result<(MlpPredictor, Vec<EpochStats>)> {
    let future = model.future_slots;
    if let Some(bad) = dataset
        .iter()
        .find(|s| s.history.len() != model.history || s.future.len() != future)
    {
        return Err(Error::Shape(format!(
            "sample with {} history / {} future points, expected {} / {future}",
            bad.history.len(),
            bad.future.len(),
            model.history
        )));
    }
    let scale_m = model.scale_m;
    let inputs: Vec<Vec<f64>> = dataset.iter().map(|s| model.encode(&s.history)).collect();
    let targets: Vec<Vec<f64>> = dataset
        .iter()
        .map(|s| {
            (1..=future)
                .flat_map(|h| {
                    let b = model.base(&s.history, h);
                    let f = s.future[h - 1];
                    (0..3).map(move |k| (f[k] - b[k]) / scale_m)
                })
                .collect()
        })
        .collect();
    let mut net = model.net.clone();
    let mask = FreezeMask::all_trainable(&net);
    let log = fit(&mut net, &inputs, &targets, Loss::Mse, fit_config, &mask)?;
    Ok((MlpPredictor { net, ..model.clone() }, log))
}

/// Mean squared position error (m², averaged over coordinates) of a
/// predictor on `dataset` at every horizon `1..=future_slots`.
pub fn dataset_mse(predictor: &Predictor, dataset: &[PredictionSample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in dataset {
        for h in 1..=s.future.len() {
            let p = predictor.predict(&s.history, h)?;
            for k in 0..3 {
                let d = p[k] - s.future[h - 1][k];
                total += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InsufficientData("empty dataset".into()));
    }
    Ok(total / count as f64)
}

/// Either predictor behind one interface.
#[derive(Clone, Debug)]
pub enum Predictor {
    Newton(NewtonPredictor),
    Mlp(MlpPredictor),
}

impl Predictor {
    pub fn newton() -> Self {
        Predictor::Newton(NewtonPredictor::new(DEFAULT_HISTORY_MS, MAX_HORIZON_MS))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Predictor::Newton(_) => "model_based",
            Predictor::Mlp(_) => "data_driven",
        }
    }

    pub fn history(&self) -> usize {
        match self {
            Predictor::Newton(p) => p.history,
            Predictor::Mlp(p) => p.history,
        }
    }

    pub fn max_horizon(&self) -> usize {
        match self {
            Predictor::Newton(p) => p.weights.len(),
            Predictor::Mlp(p) => p.future_slots,
        }
    }

    pub fn predict(&self, history: &[Point], horizon_ms: usize) -> Result<Point> {
        match self {
            Predictor::Newton(p) => p.predict(history, horizon_ms),
            Predictor::Mlp(p) => p.predict(history, horizon_ms),
        }
    }

    /// Forecasts for each horizon in `horizons` from one history window.
    fn predict_many(&self, history: &[Point], horizons: &[usize]) -> Result<Vec<Point>> {
        match self {
            Predictor::Newton(p) => Ok(horizons.iter().map(|&h| p.predict_unchecked(history, h)).collect()),
            Predictor::Mlp(p) => {
                let all = p.predict_all(history)?;
                Ok(horizons.iter().map(|&h| all[h - 1]).collect())
            }
        }
    }
}

/// Error-probability estimate for one (horizon, accuracy) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorCell {
    pub horizon_ms: usize,
    pub accuracy_m: f64,
    pub windows: usize,
    pub errors: usize,
    pub probability: f64,
}

/// Fraction of sliding windows whose prediction misses by more than the
/// required accuracy.
pub fn eval_error_prob(predictor: &Predictor, test: &Trajectory, spec: &PredictionSpec) -> Result<f64> {
    spec.validate()?;
    if spec.history_ms != predictor.history() {
        return Err(Error::Config(format!(
            "predictor uses {} history slots, spec asks for {}",
            predictor.history(),
            spec.history_ms
        )));
    }
    let cells = eval_error_table(predictor, test, &[spec.horizon_ms], &[spec.accuracy_m], 1)?;
    Ok(cells[0].probability)
}

/// Evaluates every (horizon, accuracy) pair in one sweep over the test
/// trajectory. Windows are split into `jobs` contiguous shards; counts are
/// summed in shard order.
pub fn eval_error_table(
    predictor: &Predictor,
    test: &Trajectory,
    horizons: &[usize],
    accuracies: &[f64],
    jobs: usize,
) -> Result<Vec<ErrorCell>> {
    let history = predictor.history();
    let max_h = *horizons.iter().max().ok_or_else(|| Error::Config("no horizons".into()))?;
    if horizons.iter().any(|&h| h == 0 || h > predictor.max_horizon()) {
        return Err(Error::Config(format!(
            "horizons {horizons:?} outside 1..={}",
            predictor.max_horizon()
        )));
    }
    let windows = (test.len() + 1).saturating_sub(history + max_h);
    if windows < MIN_EVAL_WINDOWS {
        return Err(Error::InsufficientData(format!(
            "{windows} evaluable windows, need at least {MIN_EVAL_WINDOWS}"
        )));
    }
    let shard_counts = |start: usize, end: usize| -> Result<Vec<usize>> {
        let mut counts = vec![0usize; horizons.len() * accuracies.len()];
        for s in start..end {
            let hist = &test.positions[s..s + history];
            let preds = predictor.predict_many(hist, horizons)?;
            for (hi, (&h, p)) in horizons.iter().zip(&preds).enumerate() {
                let err = distance(p, &test.positions[s + history - 1 + h]);
                for (ai, &acc) in accuracies.iter().enumerate() {
                    if err > acc {
                        counts[hi * accuracies.len() + ai] += 1;
                    }
                }
            }
        }
        Ok(counts)
    };
    let counts = crate::parallel::sharded(windows, jobs, shard_counts)
        .into_iter()
        .try_fold(vec![0usize; horizons.len() * accuracies.len()], |mut acc, part| {
            part.map(|p| {
                for (a, v) in acc.iter_mut().zip(p) {
                    *a += v;
                }
                acc
            })
        })?;
    let mut out = Vec::new();
    for (hi, &h) in horizons.iter().enumerate() {
        for (ai, &acc) in accuracies.iter().enumerate() {
            let errors = counts[hi * accuracies.len() + ai];
            out.push(ErrorCell {
                horizon_ms: h,
                accuracy_m: acc,
                windows,
                errors,
                probability: errors as f64 / windows as f64,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_velocity() -> TrajectoryKind {
        TrajectoryKind::ConstAccel {
            start: [0.0; 3],
            velocity: [1.0, 0.0, 0.0],
            acceleration: [0.0; 3],
        }
    }

    #[test]
    fn const_velocity_positions() {
        let tr = gen_trajectory(&const_velocity(), 200, 0.0, 1).unwrap();
        for (t, p) in tr.positions.iter().enumerate() {
            assert!((p[0] - t as f64 / 1000.0).abs() < 1e-15);
            assert_eq!(p[1], 0.0);
            assert_eq!(p[2], 0.0);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let kind = TrajectoryKind::smooth_random();
        let a = gen_trajectory(&kind, 5000, 5e-4, 7).unwrap();
        let b = gen_trajectory(&kind, 5000, 5e-4, 7).unwrap();
        let c = gen_trajectory(&kind, 5000, 5e-4, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_generation_config() {
        assert!(matches!(
            gen_trajectory(&const_velocity(), 200, -1.0, 0),
            Err(Error::Config(_))
        ));
        assert!(gen_trajectory(&const_velocity(), 50, 0.0, 0).is_err());
    }

    #[test]
    fn newton_exact_on_quadratics() {
        let kind = TrajectoryKind::ConstAccel {
            start: [0.1, -0.2, 0.05],
            velocity: [0.3, -0.1, 0.25],
            acceleration: [4.0, -2.5, 1.0],
        };
        let tr = gen_trajectory(&kind, 200, 0.0, 0).unwrap();
        let pred = NewtonPredictor::new(50, 20);
        for start in [0, 37, 120] {
            for h in [1, 5, 10, 20] {
                let p = pred.predict(&tr.positions[start..start + 50], h).unwrap();
                let truth = tr.positions[start + 49 + h];
                assert!(distance(&p, &truth) < 1e-9);
            }
        }
    }

    #[test]
    fn newton_translation_equivariant() {
        let tr = gen_trajectory(&TrajectoryKind::smooth_random(), 500, 1e-3, 3).unwrap();
        let hist = &tr.positions[100..150];
        let c = [0.7, -3.0, 12.5];
        let shifted: Vec<Point> = hist.iter().map(|p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]]).collect();
        let a = newton_predict(hist, 10).unwrap();
        let b = newton_predict(&shifted, 10).unwrap();
        for k in 0..3 {
            assert!((b[k] - a[k] - c[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn newton_checks_history_length() {
        let p = NewtonPredictor::new(50, 20);
        assert!(p.predict(&[[0.0; 3]; 49], 5).is_err());
        assert!(p.predict(&[[0.0; 3]; 50], 21).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(PredictionSpec::new(20, 0.02).is_ok());
        assert!(PredictionSpec::new(21, 0.02).is_err());
        assert!(PredictionSpec::new(5, 0.0).is_err());
    }

    #[test]
    fn eval_needs_enough_windows() {
        let tr = gen_trajectory(&const_velocity(), 10_000, 0.0, 0).unwrap();
        let spec = PredictionSpec::new(5, 0.02).unwrap();
        assert!(matches!(
            eval_error_prob(&Predictor::newton(), &tr, &spec),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn huge_accuracy_never_errs() {
        let tr = gen_trajectory(&TrajectoryKind::smooth_random(), 120_000, 5e-4, 4).unwrap();
        let spec = PredictionSpec::new(20, 1e6).unwrap();
        assert_eq!(eval_error_prob(&Predictor::newton(), &tr, &spec).unwrap(), 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let tr = gen_trajectory(&TrajectoryKind::smooth_random(), 300, 1e-3, 9).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"t_ms,x,y,z\n"));
        let back = Trajectory::read_csv(&buf[..]).unwrap();
        assert_eq!(back, tr);
    }
}
