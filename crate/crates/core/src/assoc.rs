//! Two-AP offloading and user association.
//!
//! Every mobile user either computes locally or offloads to one of two access
//! points with co-located edge servers. The goal is to minimize the largest
//! per-user normalized energy (J/bit) subject to per-class delay bounds, and
//! for URLLC users a decoding error target.
//!
//! Model:
//! - local: energy/bit `κ·f²·C_b`; M/M/1 compute queue with service rate
//!   `f / (L·C_b)` packets/s.
//! - offload to AP `j` shared by `k` users: bandwidth `W = B_j / k`,
//!   rate `R = W·log2(1 + P·g / (N0·W))`, energy/bit `P / R`; delay is an
//!   M/M/1 uplink with service `R / L` plus an M/M/1 edge server with service
//!   `f_mec / (L·C_b)` fed by all users offloading to that AP.
//! - URLLC offloaders must also deliver a packet within one `tx_window_s`
//!   transmission of `⌊W·tx_window_s⌋` symbols at error probability at most
//!   `epsilon_max`.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{fit, Activation, ActivationConfig, EpochStats, FitConfig, FreezeMask, Loss, MlpParams, OutputActivation};
use crate::parallel::{sharded, sub_seed};
use crate::radio::{large_scale_gain, normal_approx_error, NOISE_PSD_W_PER_HZ};

/// Largest instance the exhaustive search accepts (3^12 assignments).
pub const MAX_EXHAUSTIVE_USERS: usize = 12;
/// Gap charged to an assignment that stays infeasible after repair; feasible
/// gaps are capped at the same value.
pub const GAP_CAP: f64 = 1.0;
const REPAIR_ITERATIONS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Local,
    Ap1,
    Ap2,
}

impl Decision {
    pub const ALL: [Decision; 3] = [Decision::Local, Decision::Ap1, Decision::Ap2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Parse(format!("decision index {i} out of range")))
    }

    fn ap(self) -> Option<usize> {
        match self {
            Decision::Local => None,
            Decision::Ap1 => Some(0),
            Decision::Ap2 => Some(1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceClass {
    Urllc,
    DelayTolerant,
}

/// Users per region, written `a:b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RegionRatio {
    pub region1: usize,
    pub region2: usize,
}

impl RegionRatio {
    pub const BALANCED: RegionRatio = RegionRatio { region1: 5, region2: 5 };
    pub const SKEWED: RegionRatio = RegionRatio { region1: 9, region2: 1 };

    pub fn total(&self) -> usize {
        self.region1 + self.region2
    }
}

impl std::fmt::Display for RegionRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.region1, self.region2)
    }
}

impl TryFrom<String> for RegionRatio {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RegionRatio> for String {
    fn from(r: RegionRatio) -> String {
        r.to_string()
    }
}

impl std::str::FromStr for RegionRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("region ratio {s:?} is not of the form a:b")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad region ratio component {v:?}")))
        };
        Ok(Self {
            region1: parse(a)?,
            region2: parse(b)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MobileUser {
    /// Large-scale gain to AP1 and AP2 (linear).
    pub gains: [f64; 2],
    pub arrival_rate: f64,
    pub class: ServiceClass,
    pub local_cpu_hz: f64,
    pub tx_power_w: f64,
    pub kappa: f64,
    /// 1 or 2.
    pub region: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccessPoint {
    pub bandwidth_hz: f64,
    pub mec_cpu_hz: f64,
}

/// QoS and workload constants shared by every user of an instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssocQos {
    pub urllc_delay_s: f64,
    pub delay_tolerant_delay_s: f64,
    pub epsilon_max: f64,
    pub tx_window_s: f64,
    pub packet_bits: f64,
    pub cycles_per_bit: f64,
}

impl Default for AssocQos {
    fn default() -> Self {
        Self {
            urllc_delay_s: 0.01,
            delay_tolerant_delay_s: 0.1,
            epsilon_max: 1e-5,
            tx_window_s: 1e-3,
            packet_bits: 1600.0,
            cycles_per_bit: 1000.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssocInstance {
    pub users: Vec<MobileUser>,
    pub aps: [AccessPoint; 2],
    pub qos: AssocQos,
    pub noise_psd: f64,
    pub ratio: RegionRatio,
}

/// Instance generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssocConfig {
    pub num_urllc: usize,
    pub num_delay_tolerant: usize,
    /// AP positions (m); each region is a disc centred on its AP.
    pub ap_positions: [[f64; 2]; 2],
    pub region_radius_m: f64,
    pub min_distance_m: f64,
    pub bandwidth_hz: f64,
    pub mec_cpu_hz: f64,
    pub tx_power_w: f64,
    pub kappa: f64,
    pub urllc_local_cpu_hz: f64,
    pub delay_tolerant_local_cpu_hz: f64,
    pub urllc_rate_range: [f64; 2],
    pub delay_tolerant_rate_range: [f64; 2],
    pub qos: AssocQos,
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self {
            num_urllc: 5,
            num_delay_tolerant: 5,
            ap_positions: [[0.0, 0.0], [250.0, 0.0]],
            region_radius_m: 100.0,
            min_distance_m: 10.0,
            bandwidth_hz: 10e6,
            mec_cpu_hz: 5e9,
            tx_power_w: 0.1,
            kappa: 3e-28,
            urllc_local_cpu_hz: 1e9,
            delay_tolerant_local_cpu_hz: 0.5e9,
            urllc_rate_range: [50.0, 250.0],
            delay_tolerant_rate_range: [50.0, 250.0],
            qos: AssocQos::default(),
        }
    }
}

impl AssocConfig {
    pub fn num_users(&self) -> usize {
        self.num_urllc + self.num_delay_tolerant
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_users();
        if n == 0 || n > MAX_EXHAUSTIVE_USERS {
            return Err(Error::Config(format!(
                "association needs 1..={MAX_EXHAUSTIVE_USERS} users, got {n}"
            )));
        }
        let positive = [
            self.region_radius_m,
            self.bandwidth_hz,
            self.mec_cpu_hz,
            self.tx_power_w,
            self.kappa,
            self.urllc_local_cpu_hz,
            self.delay_tolerant_local_cpu_hz,
            self.qos.urllc_delay_s,
            self.qos.delay_tolerant_delay_s,
            self.qos.tx_window_s,
            self.qos.packet_bits,
            self.qos.cycles_per_bit,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("association parameters must be positive and finite".into()));
        }
        if !(self.min_distance_m >= 1.0 && self.min_distance_m < self.region_radius_m) {
            return Err(Error::Config("min_distance_m must lie in [1, region_radius_m)".into()));
        }
        for r in [self.urllc_rate_range, self.delay_tolerant_rate_range] {
            if !(r[0] > 0.0 && r[1] >= r[0]) {
                return Err(Error::Config(format!("bad arrival-rate range {r:?}")));
            }
        }
        if !(self.qos.epsilon_max > 0.0 && self.qos.epsilon_max < 1.0) {
            return Err(Error::Config("epsilon_max must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn check_ratio(&self, ratio: RegionRatio) -> Result<()> {
        if ratio.total() != self.num_users() {
            return Err(Error::Config(format!(
                "region ratio {ratio} does not add up to {} users",
                self.num_users()
            )));
        }
        Ok(())
    }
}

/// Per-user assignment.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Assignment(pub Vec<Decision>);

impl Assignment {
    /// Base-3 index with user 0 as the most significant digit, so numeric
    /// order equals lexicographic order.
    pub fn index(&self) -> u64 {
        self.0.iter().fold(0, |acc, d| acc * 3 + d.index() as u64)
    }

    pub fn from_index(mut index: u64, users: usize) -> Self {
        let mut d = vec![Decision::Local; users];
        for slot in d.iter_mut().rev() {
            *slot = Decision::ALL[(index % 3) as usize];
            index /= 3;
        }
        Self(d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyReport {
    pub energies: Vec<f64>,
    /// Per-user constraint violation, `max(delay/bound, ε/ε_max) − 1` clipped
    /// at 0; infinite for an unstable queue.
    pub violations: Vec<f64>,
    pub objective: f64,
    pub feasible: bool,
}

impl EnergyReport {
    /// Objective if feasible, +∞ otherwise.
    pub fn score(&self) -> f64 {
        if self.feasible {
            self.objective
        } else {
            f64::INFINITY
        }
    }
}

/// Uniform point in an annulus `[r_min, r]` around `centre`.
fn sample_in_disc<R: Rng>(rng: &mut R, centre: [f64; 2], r_min: f64, r: f64) -> [f64; 2] {
    let u: f64 = rng.gen();
    let rad = (u * (r * r - r_min * r_min) + r_min * r_min).sqrt();
    let th = rng.gen::<f64>() * std::f64::consts::TAU;
    [centre[0] + rad * th.cos(), centre[1] + rad * th.sin()]
}

/// Random instance: users `0..num_urllc` are URLLC, the rest delay-tolerant;
/// a random subset of `ratio.region1` users lands in region 1.
pub fn gen_instance(config: &AssocConfig, ratio: RegionRatio, seed: u64) -> Result<AssocInstance> {
    config.validate()?;
    config.check_ratio(ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.num_users();
    let mut regions: Vec<u8> = (0..n).map(|i| if i < ratio.region1 { 1 } else { 2 }).collect();
    regions.shuffle(&mut rng);
    let mut users = Vec::with_capacity(n);
    for (i, &region) in regions.iter().enumerate() {
        let centre = config.ap_positions[region as usize - 1];
        let p = sample_in_disc(&mut rng, centre, config.min_distance_m, config.region_radius_m);
        let mut gains = [0.0; 2];
        for (g, ap) in gains.iter_mut().zip(&config.ap_positions) {
            let d = ((p[0] - ap[0]).powi(2) + (p[1] - ap[1]).powi(2)).sqrt();
            *g = large_scale_gain(d.max(config.min_distance_m))?;
        }
        let (class, range, cpu) = if i < config.num_urllc {
            (ServiceClass::Urllc, config.urllc_rate_range, config.urllc_local_cpu_hz)
        } else {
            (
                ServiceClass::DelayTolerant,
                config.delay_tolerant_rate_range,
                config.delay_tolerant_local_cpu_hz,
            )
        };
        users.push(MobileUser {
            gains,
            arrival_rate: range[0] + (range[1] - range[0]) * rng.gen::<f64>(),
            class,
            local_cpu_hz: cpu,
            tx_power_w: config.tx_power_w,
            kappa: config.kappa,
            region,
        });
    }
    let ap = AccessPoint {
        bandwidth_hz: config.bandwidth_hz,
        mec_cpu_hz: config.mec_cpu_hz,
    };
    Ok(AssocInstance {
        users,
        aps: [ap; 2],
        qos: config.qos,
        noise_psd: NOISE_PSD_W_PER_HZ,
        ratio,
    })
}

/// M/M/1 sojourn time, infinite when unstable.
fn mm1_delay(service_rate: f64, arrival_rate: f64) -> f64 {
    if service_rate > arrival_rate {
        1.0 / (service_rate - arrival_rate)
    } else {
        f64::INFINITY
    }
}

fn delay_bound(qos: &AssocQos, class: ServiceClass) -> f64 {
    match class {
        ServiceClass::Urllc => qos.urllc_delay_s,
        ServiceClass::DelayTolerant => qos.delay_tolerant_delay_s,
    }
}

/// Energy/bit and violation of computing locally. The CPU runs at the
/// lowest frequency whose M/M/1 delay meets the bound (DVFS), capped at
/// `local_cpu_hz`.
pub fn local_cost(inst: &AssocInstance, user: usize) -> (f64, f64) {
    let u = &inst.users[user];
    let q = &inst.qos;
    let cycles_per_packet = q.packet_bits * q.cycles_per_bit;
    let needed = cycles_per_packet * (u.arrival_rate + 1.0 / delay_bound(q, u.class));
    let f = needed.min(u.local_cpu_hz);
    let energy = u.kappa * f * f * q.cycles_per_bit;
    let service = f / cycles_per_packet;
    let delay = mm1_delay(service, u.arrival_rate);
    (energy, excess(delay / delay_bound(q, u.class)))
}

/// Energy/bit and violation of offloading to `ap` when `sharers` users
/// (including this one) share it and `ap_load` packets/s reach its server.
pub fn offload_cost(inst: &AssocInstance, user: usize, ap: usize, sharers: usize, ap_load: f64) -> (f64, f64) {
    let u = &inst.users[user];
    let q = &inst.qos;
    let a = &inst.aps[ap];
    let w = a.bandwidth_hz / sharers as f64;
    let snr = u.tx_power_w * u.gains[ap] / (inst.noise_psd * w);
    let rate = w * snr.ln_1p() / std::f64::consts::LN_2;
    let energy = u.tx_power_w / rate;
    let uplink = mm1_delay(rate / q.packet_bits, u.arrival_rate);
    let server = mm1_delay(a.mec_cpu_hz / (q.packet_bits * q.cycles_per_bit), ap_load);
    let mut ratio = (uplink + server) / delay_bound(q, u.class);
    if u.class == ServiceClass::Urllc {
        let n = (w * q.tx_window_s).floor();
        let eps = if n >= 1.0 {
            normal_approx_error(snr, n, q.packet_bits)
        } else {
            1.0
        };
        ratio = ratio.max(eps / q.epsilon_max);
    }
    (energy, excess(ratio))
}

/// Amount by which a constraint ratio exceeds one. A CPU sized exactly for
/// its bound lands on ratio 1 up to rounding, hence the small slack.
fn excess(ratio: f64) -> f64 {
    if ratio <= 1.0 + 1e-9 {
        0.0
    } else {
        ratio - 1.0
    }
}

/// Direct evaluation of one assignment.
pub fn evaluate_assignment(inst: &AssocInstance, assignment: &Assignment) -> Result<EnergyReport> {
    let n = inst.users.len();
    if assignment.0.len() != n {
        return Err(Error::Shape(format!(
            "assignment has {} decisions for {n} users",
            assignment.0.len()
        )));
    }
    let mut sharers = [0usize; 2];
    let mut load = [0.0f64; 2];
    for (d, u) in assignment.0.iter().zip(&inst.users) {
        if let Some(ap) = d.ap() {
            sharers[ap] += 1;
            load[ap] += u.arrival_rate;
        }
    }
    let mut energies = Vec::with_capacity(n);
    let mut violations = Vec::with_capacity(n);
    for (i, d) in assignment.0.iter().enumerate() {
        let (e, v) = match d.ap() {
            None => local_cost(inst, i),
            Some(ap) => offload_cost(inst, i, ap, sharers[ap], load[ap]),
        };
        energies.push(e);
        violations.push(v);
    }
    let objective = energies.iter().copied().fold(0.0, f64::max);
    let feasible = violations.iter().all(|&v| v == 0.0);
    Ok(EnergyReport {
        energies,
        violations,
        objective,
        feasible,
    })
}

/// Max energy and violation count of one user group.
#[derive(Clone, Copy, Debug)]
struct GroupCost {
    max_energy: f64,
    violators: u32,
}

/// Costs of every subset of users acting as one AP's offloaders, or as the
/// local group.
fn group_tables(inst: &AssocInstance) -> [Vec<GroupCost>; 3] {
    let n = inst.users.len();
    let size = 1usize << n;
    let local: Vec<(f64, f64)> = (0..n).map(|i| local_cost(inst, i)).collect();
    let mut tables = [
        Vec::with_capacity(size),
        Vec::with_capacity(size),
        Vec::with_capacity(size),
    ];
    for mask in 0..size {
        let members: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
        let mut lg = GroupCost { max_energy: 0.0, violators: 0 };
        for &i in &members {
            lg.max_energy = lg.max_energy.max(local[i].0);
            lg.violators += u32::from(local[i].1 > 0.0);
        }
        tables[0].push(lg);
        let load: f64 = members.iter().map(|&i| inst.users[i].arrival_rate).sum();
        for ap in 0..2 {
            let mut g = GroupCost { max_energy: 0.0, violators: 0 };
            for &i in &members {
                let (e, v) = offload_cost(inst, i, ap, members.len(), load);
                g.max_energy = g.max_energy.max(e);
                g.violators += u32::from(v > 0.0);
            }
            tables[ap + 1].push(g);
        }
    }
    tables
}

/// Exhaustive search over all `3^n` assignments. Returns the feasible
/// assignment with the smallest objective (ties to the lexicographically
/// smallest), or, if none is feasible, the one with the fewest violating
/// users and then the smallest objective.
pub fn exhaustive_optimal(inst: &AssocInstance) -> Result<(Assignment, EnergyReport)> {
    let n = inst.users.len();
    if n == 0 || n > MAX_EXHAUSTIVE_USERS {
        return Err(Error::Config(format!(
            "exhaustive search supports 1..={MAX_EXHAUSTIVE_USERS} users, got {n}"
        )));
    }
    let tables = group_tables(inst);
    let full = (1usize << n) - 1;
    // weight of each user's base-3 digit, user 0 most significant
    let digit: Vec<u64> = (0..n).map(|i| 3u64.pow((n - 1 - i) as u32)).collect();
    let weight: Vec<u64> = (0..=full)
        .map(|m| (0..n).filter(|&i| m >> i & 1 == 1).map(|i| digit[i]).sum())
        .collect();
    // (violators, objective, index)
    let mut best: Option<(u32, f64, u64)> = None;
    for m1 in 0..=full {
        let rest = full ^ m1;
        let mut m2 = rest;
        loop {
            let local = rest ^ m2;
            let (g0, g1, g2) = (&tables[0][local], &tables[1][m1], &tables[2][m2]);
            let violators = g0.violators + g1.violators + g2.violators;
            let objective = g0.max_energy.max(g1.max_energy).max(g2.max_energy);
            let index = weight[m1] + 2 * weight[m2];
            let better = match best {
                None => true,
                Some(b) => (violators, objective, index) < b,
            };
            if better {
                best = Some((violators, objective, index));
            }
            if m2 == 0 {
                break;
            }
            m2 = (m2 - 1) & rest;
        }
    }
    let (_, _, index) = best.expect("at least one assignment");
    let assignment = Assignment::from_index(index, n);
    let report = evaluate_assignment(inst, &assignment)?;
    Ok((assignment, report))
}

/// Every user offloads to the AP with the larger large-scale gain (ties to AP1).
pub fn highest_snr_baseline(inst: &AssocInstance) -> Assignment {
    Assignment(
        inst.users
            .iter()
            .map(|u| if u.gains[1] > u.gains[0] { Decision::Ap2 } else { Decision::Ap1 })
            .collect(),
    )
}

/// Feature normalization for the association network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureScale {
    pub gain_db_center: f64,
    pub gain_db_scale: f64,
    pub rate_scale: f64,
}

impl Default for FeatureScale {
    fn default() -> Self {
        Self {
            gain_db_center: -100.0,
            gain_db_scale: 20.0,
            rate_scale: 250.0,
        }
    }
}

/// `(gain to AP1 in dB, gain to AP2 in dB, arrival rate)` per user, normalized.
pub fn features(inst: &AssocInstance, scale: &FeatureScale) -> Vec<f64> {
    let mut f = Vec::with_capacity(3 * inst.users.len());
    for u in &inst.users {
        for g in u.gains {
            f.push((10.0 * g.log10() - scale.gain_db_center) / scale.gain_db_scale);
        }
        f.push(u.arrival_rate / scale.rate_scale);
    }
    f
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssocSample {
    pub features: Vec<f64>,
    pub label: Assignment,
    pub objective: f64,
    pub instance: AssocInstance,
}

/// `n` oracle-labelled samples from feasible instances. Instance `i` of the
/// stream uses seed `sub_seed(seed, i)`; infeasible draws are skipped.
pub fn build_dataset(
    config: &AssocConfig,
    ratio: RegionRatio,
    n: usize,
    scale: &FeatureScale,
    seed: u64,
    jobs: usize,
) -> Result<Vec<AssocSample>> {
    config.validate()?;
    config.check_ratio(ratio)?;
    let mut out = Vec::with_capacity(n);
    let mut drawn = 0u64;
    let mut infeasible = 0u64;
    while out.len() < n {
        let want = n - out.len();
        // overdraw a little so one pass usually suffices
        let batch = want + want / 20 + 1;
        let first = drawn;
        let results = sharded(batch, jobs, |s, e| -> Result<Vec<Option<AssocSample>>> {
            (s..e)
                .map(|k| {
                    let inst = gen_instance(config, ratio, sub_seed(seed, first + k as u64))?;
                    let (label, report) = exhaustive_optimal(&inst)?;
                    Ok(report.feasible.then(|| AssocSample {
                        features: features(&inst, scale),
                        label,
                        objective: report.objective,
                        instance: inst,
                    }))
                })
                .collect()
        });
        for shard in results {
            for s in shard? {
                drawn += 1;
                match s {
                    Some(s) if out.len() < n => out.push(s),
                    Some(_) => {}
                    None => infeasible += 1,
                }
            }
        }
        if drawn >= 20 && infeasible * 2 > drawn {
            return Err(Error::Config(format!(
                "{infeasible} of {drawn} generated instances are infeasible; parameters are implausible"
            )));
        }
    }
    Ok(out)
}

/// Relabels users by `perm` (new user `i` is old user `perm[i]`).
pub fn permute_sample(sample: &AssocSample, perm: &[usize], scale: &FeatureScale) -> Result<AssocSample> {
    let n = sample.instance.users.len();
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Shape(format!("{perm:?} is not a permutation of {n} users")));
    }
    let mut instance = sample.instance.clone();
    instance.users = perm.iter().map(|&p| sample.instance.users[p].clone()).collect();
    Ok(AssocSample {
        features: features(&instance, scale),
        label: Assignment(perm.iter().map(|&p| sample.label.0[p]).collect()),
        objective: sample.objective,
        instance,
    })
}

/// Each sample plus `copies` relabellings that shuffle users within their
/// service class. Class-preserving relabelling leaves the optimal objective
/// unchanged, so the permuted labels stay optimal.
pub fn augment_class_permutations(
    samples: &[AssocSample],
    copies: usize,
    scale: &FeatureScale,
    seed: u64,
) -> Result<Vec<AssocSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples.len() * (copies + 1));
    for s in samples {
        out.push(s.clone());
        let users = &s.instance.users;
        for _ in 0..copies {
            let mut perm: Vec<usize> = (0..users.len()).collect();
            for class in [ServiceClass::Urllc, ServiceClass::DelayTolerant] {
                let idx: Vec<usize> = (0..users.len()).filter(|&i| users[i].class == class).collect();
                let mut shuffled = idx.clone();
                shuffled.shuffle(&mut rng);
                for (&slot, &src) in idx.iter().zip(&shuffled) {
                    perm[slot] = src;
                }
            }
            out.push(permute_sample(s, &perm, scale)?);
        }
    }
    Ok(out)
}

/// One-hot targets, three per user.
pub fn one_hot(label: &Assignment) -> Vec<f64> {
    let mut t = vec![0.0; 3 * label.0.len()];
    for (i, d) in label.0.iter().enumerate() {
        t[3 * i + d.index()] = 1.0;
    }
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssocTrainConfig {
    pub hidden: Vec<usize>,
    pub fit: FitConfig,
}

impl Default for AssocTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![100; 4],
            fit: FitConfig {
                epochs: 20,
                batch_size: 32,
                learning_rate: 0.01,
                momentum: 0.9,
                lr_decay: 0.97,
                seed: 0,
            },
        }
    }
}

fn split(dataset: &[AssocSample]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    (
        dataset.iter().map(|s| s.features.clone()).collect(),
        dataset.iter().map(|s| one_hot(&s.label)).collect(),
    )
}

/// Trains a fresh `[3n, hidden.., 3n]` network with grouped softmax heads.
pub fn train_assoc_dnn(dataset: &[AssocSample], config: &AssocTrainConfig) -> Result<(MlpParams, Vec<EpochStats>)> {
    let features: Vec<Vec<f64>> = dataset.iter().map(|s| s.features.clone()).collect();
    let labels: Vec<Assignment> = dataset.iter().map(|s| s.label.clone()).collect();
    train_assoc_dnn_on(&features, &labels, config)
}

/// As [`train_assoc_dnn`], from bare feature/label pairs (e.g. a dataset
/// file).
pub fn train_assoc_dnn_on(
    features: &[Vec<f64>],
    labels: &[Assignment],
    config: &AssocTrainConfig,
) -> Result<(MlpParams, Vec<EpochStats>)> {
    let first = features
        .first()
        .ok_or_else(|| Error::InsufficientData("empty association dataset".into()))?;
    let dim = first.len();
    if features.len() != labels.len() {
        return Err(Error::Shape(format!("{} feature rows but {} labels", features.len(), labels.len())));
    }
    if let Some(bad) = features
        .iter()
        .zip(labels)
        .position(|(f, l)| f.len() != dim || l.0.len() * 3 != dim)
    {
        return Err(Error::Config(format!(
            "sample {bad}: feature length {} does not match {} users",
            features[bad].len(),
            labels[bad].0.len()
        )));
    }
    let mut sizes = vec![dim];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(dim);
    let act = ActivationConfig::new(Activation::Relu, OutputActivation::Softmax { group: 3 });
    let mut net = MlpParams::init(&sizes, act, sub_seed(config.fit.seed, 1))?;
    let y: Vec<Vec<f64>> = labels.iter().map(one_hot).collect();
    let mask = FreezeMask::all_trainable(&net);
    let log = fit(&mut net, features, &y, Loss::CrossEntropy, &config.fit, &mask)?;
    Ok((net, log))
}

/// Fraction of per-user decisions the network predicts correctly.
pub fn decision_accuracy(dnn: &MlpParams, dataset: &[AssocSample]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InsufficientData("empty dataset".into()));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in dataset {
        let p = raw_assignment(dnn, &s.features)?;
        hits += p.0.iter().zip(&s.label.0).filter(|(a, b)| a == b).count();
        total += p.0.len();
    }
    Ok(hits as f64 / total as f64)
}

/// Per-user argmax of the softmax heads, without feasibility repair.
pub fn raw_assignment(dnn: &MlpParams, features: &[f64]) -> Result<Assignment> {
    let out = dnn.forward(features)?;
    Ok(Assignment(
        out.chunks(3)
            .map(|head| {
                let mut best = 0;
                for k in 1..head.len() {
                    if head[k] > head[best] {
                        best = k;
                    }
                }
                Decision::ALL[best]
            })
            .collect(),
    ))
}

/// Network decision with conservative repair: while infeasible (at most ten
/// times), the most violating user moves to LOCAL if that is feasible for
/// it, else to its stronger AP, else to the other AP.
pub fn infer_assignment(dnn: &MlpParams, inst: &AssocInstance, scale: &FeatureScale) -> Result<(Assignment, EnergyReport)> {
    let mut a = raw_assignment(dnn, &features(inst, scale))?;
    if a.0.len() != inst.users.len() {
        return Err(Error::Shape("network heads do not match instance size".into()));
    }
    let mut report = evaluate_assignment(inst, &a)?;
    for _ in 0..REPAIR_ITERATIONS {
        if report.feasible {
            break;
        }
        let worst = (0..report.violations.len())
            .fold(0, |b, i| if report.violations[i] > report.violations[b] { i } else { b });
        let u = &inst.users[worst];
        let (stronger, weaker) = if u.gains[1] > u.gains[0] {
            (Decision::Ap2, Decision::Ap1)
        } else {
            (Decision::Ap1, Decision::Ap2)
        };
        let current = a.0[worst];
        let local_ok = local_cost(inst, worst).1 == 0.0;
        let next = [Decision::Local, stronger, weaker]
            .into_iter()
            .find(|&d| d != current && (d != Decision::Local || local_ok))
            .unwrap_or(stronger);
        a.0[worst] = next;
        report = evaluate_assignment(inst, &a)?;
    }
    Ok((a, report))
}

/// Relative optimality gap, capped at [`GAP_CAP`] and charged in full when
/// the candidate is infeasible.
pub fn optimality_gap(candidate: &EnergyReport, optimal: f64) -> f64 {
    if !candidate.feasible {
        return GAP_CAP;
    }
    ((candidate.objective - optimal) / optimal).clamp(0.0, GAP_CAP)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "k")]
pub enum FineTuneMode {
    AllLayers,
    /// Train only the last `k` weight layers.
    LastK(usize),
}

/// Continues training `dnn` on `samples`; zero samples returns it unchanged.
pub fn fine_tune_on_shift(
    dnn: &MlpParams,
    samples: &[AssocSample],
    mode: FineTuneMode,
    fit_config: &FitConfig,
) -> Result<(MlpParams, Vec<EpochStats>)> {
    if samples.is_empty() {
        return Ok((dnn.clone(), Vec::new()));
    }
    let mask = match mode {
        FineTuneMode::AllLayers => FreezeMask::all_trainable(dnn),
        FineTuneMode::LastK(k) => FreezeMask::last_k(dnn, k),
    };
    let mut net = dnn.clone();
    let (x, y) = split(samples);
    let log = fit(&mut net, &x, &y, Loss::CrossEntropy, fit_config, &mask)?;
    Ok((net, log))
}

/// Fine-tuning defaults: shorter, gentler schedule on few samples.
pub fn default_shift_fit() -> FitConfig {
    FitConfig {
        epochs: 60,
        batch_size: 16,
        learning_rate: 0.005,
        momentum: 0.9,
        lr_decay: 0.97,
        seed: 7,
    }
}

/// One evaluation trial (a Fig. 4-style point).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssocTrial {
    pub trial: usize,
    pub ratio: String,
    pub optimal: f64,
    pub dnn: f64,
    pub dnn_feasible: bool,
    pub highest_snr: f64,
    pub highest_snr_feasible: bool,
    pub gap: f64,
}

/// Evaluates `dnn` against the oracle and the Highest-SNR baseline on
/// `samples` (whose labels carry the optimal objective).
pub fn evaluate_dnn(dnn: &MlpParams, samples: &[AssocSample], scale: &FeatureScale, trial_offset: usize) -> Result<Vec<AssocTrial>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (_, r) = infer_assignment(dnn, &s.instance, scale)?;
            let h = evaluate_assignment(&s.instance, &highest_snr_baseline(&s.instance))?;
            Ok(AssocTrial {
                trial: trial_offset + i,
                ratio: s.instance.ratio.to_string(),
                optimal: s.objective,
                dnn: r.objective,
                dnn_feasible: r.feasible,
                highest_snr: h.objective,
                highest_snr_feasible: h.feasible,
                gap: optimality_gap(&r, s.objective),
            })
        })
        .collect()
}

pub fn mean_gap(trials: &[AssocTrial]) -> f64 {
    trials.iter().map(|t| t.gap).sum::<f64>() / trials.len().max(1) as f64
}

/// Fraction of trials within `tol` relative gap.
pub fn within(trials: &[AssocTrial], tol: f64) -> f64 {
    trials.iter().filter(|t| t.gap <= tol).count() as f64 / trials.len().max(1) as f64
}

pub fn write_trials_csv<W: Write>(trials: &[AssocTrial], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for t in trials {
        w.serialize(t)?;
    }
    w.flush()?;
    Ok(())
}

/// Dataset CSV: `f0..f{3n-1}` feature columns then `y0..y{n-1}` label columns
/// (0 = local, 1 = AP1, 2 = AP2).
pub fn write_dataset_csv<W: Write>(dataset: &[AssocSample], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if let Some(first) = dataset.first() {
        let mut header: Vec<String> = (0..first.features.len()).map(|i| format!("f{i}")).collect();
        header.extend((0..first.label.0.len()).map(|i| format!("y{i}")));
        w.write_record(&header)?;
    }
    for s in dataset {
        let mut row: Vec<String> = s.features.iter().map(|v| format!("{v:e}")).collect();
        row.extend(s.label.0.iter().map(|d| d.index().to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset CSV back as `(features, labels)` pairs.
pub fn read_dataset_csv<R: Read>(reader: R) -> Result<Vec<(Vec<f64>, Assignment)>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let n_feat = headers.iter().filter(|h| h.starts_with('f')).count();
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse_err = |c: usize| Error::Parse(format!("dataset row {} column {c} is not numeric", line + 2));
        let f = (0..n_feat)
            .map(|c| rec[c].parse::<f64>().map_err(|_| parse_err(c)))
            .collect::<Result<Vec<_>>>()?;
        let y = (n_feat..rec.len())
            .map(|c| {
                rec[c]
                    .parse::<usize>()
                    .map_err(|_| parse_err(c))
                    .and_then(Decision::from_index)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((f, Assignment(y)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_user(gain_db: f64, rate: f64, class: ServiceClass) -> AssocInstance {
        let mut inst = gen_instance(&AssocConfig::default(), RegionRatio::BALANCED, 1).unwrap();
        inst.users.truncate(1);
        let g = 10f64.powf(gain_db / 10.0);
        inst.users[0].gains = [g, g / 10.0];
        inst.users[0].arrival_rate = rate;
        inst.users[0].class = class;
        inst.users[0].local_cpu_hz = 1e9;
        inst
    }

    #[test]
    fn ratio_parses_and_counts_regions() {
        let r: RegionRatio = "9:1".parse().unwrap();
        assert_eq!(r, RegionRatio::SKEWED);
        assert!("9-1".parse::<RegionRatio>().is_err());
        let cfg = AssocConfig::default();
        for ratio in [RegionRatio::BALANCED, RegionRatio::SKEWED] {
            let inst = gen_instance(&cfg, ratio, 4).unwrap();
            let r1 = inst.users.iter().filter(|u| u.region == 1).count();
            assert_eq!((r1, 10 - r1), (ratio.region1, ratio.region2));
        }
        assert_eq!(gen_instance(&cfg, RegionRatio::BALANCED, 9).unwrap(), gen_instance(&cfg, RegionRatio::BALANCED, 9).unwrap());
        assert!(gen_instance(&cfg, RegionRatio { region1: 3, region2: 3 }, 0).is_err());
    }

    #[test]
    fn single_user_costs_by_hand() {
        let inst = one_user(-100.0, 100.0, ServiceClass::DelayTolerant);
        let q = inst.qos;
        let (el, vl) = local_cost(&inst, 0);
        // DVFS: f = 1600 bit · 1000 cycles/bit · (100 + 1/0.1) /s = 1.76e8 Hz
        let f = 1.76e8;
        let expect_local = 3e-28 * f * f * q.cycles_per_bit;
        assert!((el - expect_local).abs() <= 1e-12 * expect_local);
        // service 110 pkt/s, delay exactly the 0.1 s bound
        assert_eq!(vl, 0.0);
        let (eo, vo) = offload_cost(&inst, 0, 0, 1, 100.0);
        let snr = 0.1 * 1e-10 / (NOISE_PSD_W_PER_HZ * 10e6);
        let rate = 10e6 * (1.0 + snr).log2();
        assert!((eo - 0.1 / rate).abs() <= 1e-12 * eo);
        assert_eq!(vo, 0.0);
        let r = evaluate_assignment(&inst, &Assignment(vec![Decision::Local])).unwrap();
        assert_eq!(r.objective, el);
        // local cheaper than this weak offload link
        let (a, rep) = exhaustive_optimal(&inst).unwrap();
        assert_eq!(a.0, vec![if el <= eo { Decision::Local } else { Decision::Ap1 }]);
        assert!(rep.feasible);
    }

    #[test]
    fn all_local_ignores_gains() {
        let mut inst = gen_instance(&AssocConfig::default(), RegionRatio::BALANCED, 3).unwrap();
        let a = Assignment(vec![Decision::Local; 10]);
        let before = evaluate_assignment(&inst, &a).unwrap();
        for u in inst.users.iter_mut() {
            u.gains = [u.gains[1] * 7.0, u.gains[0] * 0.01];
        }
        assert_eq!(before, evaluate_assignment(&inst, &a).unwrap());
    }

    #[test]
    fn extra_offloader_never_lowers_others_energy() {
        let inst = gen_instance(&AssocConfig::default(), RegionRatio::BALANCED, 11).unwrap();
        for k in 1..10 {
            for i in 0..10 {
                let (e1, _) = offload_cost(&inst, i, 0, k, 0.0);
                let (e2, _) = offload_cost(&inst, i, 0, k + 1, 0.0);
                assert!(e2 >= e1);
            }
        }
    }

    #[test]
    fn index_roundtrip_and_order() {
        let a = Assignment(vec![Decision::Ap2, Decision::Local, Decision::Ap1]);
        assert_eq!(a.index(), 2 * 9 + 1);
        assert_eq!(Assignment::from_index(a.index(), 3), a);
        let b = Assignment(vec![Decision::Ap2, Decision::Ap1, Decision::Local]);
        assert!(a < b);
        assert!(a.index() < b.index());
    }

    #[test]
    fn exhaustive_matches_direct_enumeration() {
        let cfg = AssocConfig {
            num_urllc: 3,
            num_delay_tolerant: 3,
            ..Default::default()
        };
        for seed in 0..5 {
            let inst = gen_instance(&cfg, RegionRatio { region1: 3, region2: 3 }, seed).unwrap();
            let (a, r) = exhaustive_optimal(&inst).unwrap();
            let mut best: Option<(f64, u64)> = None;
            for idx in 0..3u64.pow(6) {
                let cand = Assignment::from_index(idx, 6);
                let rep = evaluate_assignment(&inst, &cand).unwrap();
                if rep.feasible && best.map_or(true, |(o, _)| rep.objective < o) {
                    best = Some((rep.objective, idx));
                }
            }
            let (o, idx) = best.unwrap();
            assert!(r.feasible);
            assert_eq!(r.objective, o);
            assert_eq!(a.index(), idx);
        }
    }

    #[test]
    fn highest_snr_never_local_and_ties_to_ap1() {
        let mut inst = gen_instance(&AssocConfig::default(), RegionRatio::BALANCED, 2).unwrap();
        inst.users[0].gains = [1e-9, 1e-9];
        let a = highest_snr_baseline(&inst);
        assert_eq!(a.0[0], Decision::Ap1);
        assert!(a.0.iter().all(|&d| d != Decision::Local));
        for (u, d) in inst.users.iter().zip(&a.0).skip(1) {
            let expect = if u.gains[0] >= u.gains[1] { Decision::Ap1 } else { Decision::Ap2 };
            assert_eq!(*d, expect);
        }
    }

    #[test]
    fn dataset_csv_roundtrip() {
        let cfg = AssocConfig::default();
        let ds = build_dataset(&cfg, RegionRatio::BALANCED, 3, &FeatureScale::default(), 5, 1).unwrap();
        assert_eq!(ds[0].features.len(), 30);
        let mut buf = Vec::new();
        write_dataset_csv(&ds, &mut buf).unwrap();
        let back = read_dataset_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        for ((f, y), s) in back.iter().zip(&ds) {
            assert_eq!(y, &s.label);
            for (a, b) in f.iter().zip(&s.features) {
                assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn fine_tune_zero_samples_is_identity() {
        let net = MlpParams::init(
            &[30, 8, 30],
            ActivationConfig::new(Activation::Relu, OutputActivation::Softmax { group: 3 }),
            0,
        )
        .unwrap();
        let (out, log) = fine_tune_on_shift(&net, &[], FineTuneMode::AllLayers, &default_shift_fit()).unwrap();
        assert_eq!(out, net);
        assert!(log.is_empty());
    }

    #[test]
    fn scale_covariance_of_energies() {
        let inst = gen_instance(&AssocConfig::default(), RegionRatio::BALANCED, 8).unwrap();
        let mut scaled = inst.clone();
        for u in scaled.users.iter_mut() {
            u.kappa *= 3.0;
        }
        let a = Assignment(vec![Decision::Local; 10]);
        let r0 = evaluate_assignment(&inst, &a).unwrap();
        let r1 = evaluate_assignment(&scaled, &a).unwrap();
        for (x, y) in r0.energies.iter().zip(&r1.energies) {
            assert!((3.0 * x - y).abs() <= 1e-12 * y);
        }
    }
}
