//! End-to-end experiment: optimize a nominal trajectory, identify the
//! perturbation model around it, design LQG gains, and evaluate the closed
//! loop by Monte Carlo.
//!
//! Every stage persists a JSON envelope holding its payload and two SHA-256
//! hashes: one of the inputs that produced it and one of the payload itself.
//! A stage is skipped when its envelope is intact and its input hash matches.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lqg::{self, LqgError, LqgGains};
use crate::numerics::{serde_matrix, serde_vector, Matrix, Vector};
use crate::plant::{CartPole, GaussianSampler, LtvPlant, NoiseSpec, PendulumParams, Plant, PlantError, SimRng};
use crate::sysid::{self, EraConfig, LtvRealization, SysidError};
use crate::trajopt::{self, ControlSequence, CostSpec, GdConfig, GdOutcome, TrajoptError, WeightSchedule};

pub const SCHEMA_VERSION: u32 = 1;

/// States beyond this magnitude mark a run as failed.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("every one of the {0} Monte Carlo runs diverged")]
    AllRunsFailed(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn stage_err(stage: &'static str) -> impl Fn(&dyn std::fmt::Display) -> HarnessError {
    move |e| HarnessError::Stage {
        stage,
        message: e.to_string(),
    }
}

impl From<TrajoptError> for HarnessError {
    fn from(e: TrajoptError) -> Self {
        stage_err("optimize")(&e)
    }
}

impl From<SysidError> for HarnessError {
    fn from(e: SysidError) -> Self {
        stage_err("identify")(&e)
    }
}

impl From<LqgError> for HarnessError {
    fn from(e: LqgError) -> Self {
        stage_err("gains")(&e)
    }
}

impl From<PlantError> for HarnessError {
    fn from(e: PlantError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantConfig {
    Pendulum(PendulumParams),
    /// Time-varying linear plant; lists shorter than the horizon repeat their
    /// last entry.
    Linear {
        #[serde(with = "serde_matrix::seq")]
        a: Vec<Matrix>,
        #[serde(with = "serde_matrix::seq")]
        b: Vec<Matrix>,
        #[serde(with = "serde_matrix::seq")]
        c: Vec<Matrix>,
    },
}

impl PlantConfig {
    pub fn build(&self) -> Result<Box<dyn Plant>> {
        Ok(match self {
            PlantConfig::Pendulum(params) => Box::new(CartPole::new(*params)?),
            PlantConfig::Linear { a, b, c } => Box::new(LtvPlant::new(a.clone(), b.clone(), c.clone())?),
        })
    }

    fn dt(&self) -> f64 {
        match self {
            PlantConfig::Pendulum(p) => p.dt,
            PlantConfig::Linear { .. } => 1.0,
        }
    }
}

/// Everything that determines an experiment. The defaults reproduce the
/// pendulum swing-up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub runs: usize,
    pub horizon: usize,
    #[serde(with = "serde_vector")]
    pub initial_state: Vector,
    /// Starting guess for the optimizer; zeros when absent.
    pub initial_controls: Option<ControlSequence>,
    pub plant: PlantConfig,
    pub weights: WeightSchedule,
    pub optimizer: GdConfig,
    pub era: EraConfig,
    /// Noise injected into the simulated plant.
    pub noise: NoiseSpec,
    /// Covariances assumed by the Kalman filter; `noise` when absent.
    pub filter_noise: Option<NoiseSpec>,
    /// Initial estimate covariance; `1e-2·I` when absent.
    #[serde(with = "p0_serde")]
    pub p0: Option<Matrix>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            runs: 1000,
            horizon: 50,
            initial_state: Vector::from_vec(vec![std::f64::consts::PI, 0.0, 0.0, 0.0]),
            initial_controls: None,
            plant: PlantConfig::Pendulum(PendulumParams::default()),
            weights: WeightSchedule {
                early_state: vec![0.1, 0.01, 0.0, 0.0],
                late_state: vec![100.0, 10.0, 0.0, 0.0],
                switch_time: 3.5,
                terminal_state: vec![100.0, 10.0, 0.0, 0.0],
                control: vec![0.01],
                target: vec![0.0; 4],
                continuation: vec![5.0, 4.5, 4.0],
            },
            optimizer: GdConfig {
                fd_step: 1e-5,
                grad_tol: 1e-4,
                max_iters: 4000,
                difference: trajopt::DifferenceScheme::Central,
                direction: trajopt::Direction::Lbfgs,
                memory: 10,
                ..GdConfig::default()
            },
            era: EraConfig {
                two_sided: true,
                ..EraConfig::default()
            },
            noise: NoiseSpec::isotropic(4, 4, 0.01, 0.01),
            filter_noise: None,
            p0: None,
        }
    }
}

// p0 is an optional matrix; route it through the row-major helpers
mod p0_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<Matrix>, s: S) -> std::result::Result<S::Ok, S::Error> {
        m.as_ref().map(serde_matrix::to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Matrix>, D::Error> {
        use serde::de::Error as _;
        Option::<Vec<Vec<f64>>>::deserialize(d)?
            .map(|rows| serde_matrix::from_rows(&rows).map_err(D::Error::custom))
            .transpose()
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn dt(&self) -> f64 {
        self.plant.dt()
    }

    /// Continuation stages of the optimization cost; the last one is the cost
    /// the feedback is designed for.
    pub fn cost_stages(&self) -> Result<Vec<CostSpec>> {
        self.weights
            .stages(self.horizon, self.dt())
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn cost(&self) -> Result<CostSpec> {
        self.cost_stages()?
            .pop()
            .ok_or_else(|| HarnessError::Config("no cost stages".into()))
    }

    pub fn filter_noise(&self) -> &NoiseSpec {
        self.filter_noise.as_ref().unwrap_or(&self.noise)
    }

    pub fn p0(&self, order: usize) -> Matrix {
        self.p0.clone().unwrap_or_else(|| Matrix::identity(order, order) * 1e-2)
    }

    /// Cross-checks dimensions and every module-level invariant.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let plant = self.plant.build()?;
        let (nx, nu, ny) = (plant.state_dim(), plant.control_dim(), plant.output_dim());
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if self.runs == 0 {
            return bad("runs must be positive".into());
        }
        if self.initial_state.len() != nx {
            return bad(format!("initial_state has {} entries, plant has {nx} states", self.initial_state.len()));
        }
        if let Some(u) = &self.initial_controls {
            if u.len() != self.horizon || u.0.iter().any(|v| v.len() != nu) {
                return bad(format!("initial_controls must be {} vectors of length {nu}", self.horizon));
            }
        }
        let w = &self.weights;
        for (name, v, d) in [
            ("early_state", &w.early_state, nx),
            ("late_state", &w.late_state, nx),
            ("terminal_state", &w.terminal_state, nx),
            ("target", &w.target, nx),
            ("control", &w.control, nu),
        ] {
            if v.len() != d {
                return bad(format!("weights.{name} must have {d} entries, got {}", v.len()));
            }
        }
        if ny != nx {
            return bad("the tracking cost needs a fully observed plant (n_y = n_x)".into());
        }
        self.cost_stages()?;
        self.optimizer.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.era
            .validate(nx, nu, ny)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.era.p + self.era.q > self.horizon {
            return bad(format!("horizon {} is too short for p + q = {}", self.horizon, self.era.p + self.era.q));
        }
        for (name, noise) in [("noise", &self.noise), ("filter_noise", self.filter_noise())] {
            noise.validate()?;
            if noise.process_cov.shape() != (nx, nx) || noise.measurement_cov.shape() != (ny, ny) {
                return bad(format!("{name} covariances must be {nx}x{nx} and {ny}x{ny}"));
            }
        }
        if let Some(p0) = &self.p0 {
            crate::numerics::check_psd(p0, "p0", 1e-12).map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// Optimized open-loop controls and their noiseless trajectory.
pub type Nominal = GdOutcome;

/// One closed-loop realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    /// `x_0..x_N`, truncated at divergence.
    #[serde(with = "crate::numerics::serde_vector::seq")]
    pub states: Vec<Vector>,
    /// `u_0..u_{N-1}`, truncated at divergence.
    #[serde(with = "crate::numerics::serde_vector::seq")]
    pub controls: Vec<Vector>,
    /// Observer estimates `δâ_0..δâ_N`.
    #[serde(with = "crate::numerics::serde_vector::seq")]
    pub estimates: Vec<Vector>,
    /// `‖x_k − x̄_k‖`.
    pub deviation_norms: Vec<f64>,
    /// Realized tracking cost; infinite for a failed run.
    pub cost: f64,
    /// Step at which the state blew up, if it did.
    pub failed_at: Option<usize>,
}

impl RunRecord {
    pub fn failed(&self) -> bool {
        self.failed_at.is_some()
    }
}

/// `splitmix64(master + (i + 1)·φ)`: independent of scheduling and stable
/// across runs counts.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything a closed-loop rollout needs, checked once.
pub struct ClosedLoop<'a> {
    plant: &'a dyn Plant,
    nominal: &'a Nominal,
    realization: &'a LtvRealization,
    gains: &'a LqgGains,
    cost: &'a CostSpec,
    process: GaussianSampler,
    measurement: GaussianSampler,
    nominal_outputs: Vec<Vector>,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(
        plant: &'a dyn Plant,
        nominal: &'a Nominal,
        realization: &'a LtvRealization,
        gains: &'a LqgGains,
        noise: &NoiseSpec,
        cost: &'a CostSpec,
    ) -> Result<Self> {
        let n = nominal.controls.len();
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if nominal.trajectory.len() != n + 1 || realization.horizon() != n || gains.horizon() != n || cost.horizon() != n
        {
            return bad("nominal, realization, gains and cost disagree on the horizon");
        }
        if realization.output_dim() != plant.output_dim() || realization.control_dim() != plant.control_dim() {
            return bad("realization dimensions do not match the plant");
        }
        if gains.feedback[0].shape() != (plant.control_dim(), realization.order)
            || gains.kalman[0].shape() != (realization.order, plant.output_dim())
        {
            return bad("gain dimensions do not match the realization");
        }
        if noise.process_cov.nrows() != plant.state_dim() || noise.measurement_cov.nrows() != plant.output_dim() {
            return bad("noise dimensions do not match the plant");
        }
        let nominal_outputs = nominal
            .trajectory
            .0
            .iter()
            .enumerate()
            .map(|(k, x)| plant.observe_noiseless(k, x))
            .collect();
        Ok(Self {
            plant,
            nominal,
            realization,
            gains,
            cost,
            process: GaussianSampler::new(&noise.process_cov)?,
            measurement: GaussianSampler::new(&noise.measurement_cov)?,
            nominal_outputs,
        })
    }

    /// `u_k = ū_k − L_k δâ_k`, `x_{k+1} = f(x_k, u_k) + w_k`,
    /// `δy_{k+1} = y_{k+1} − ȳ_{k+1}`, then the observer update.
    pub fn run(&self, run: usize, seed: u64) -> RunRecord {
        use rand::SeedableRng;
        let mut rng = SimRng::seed_from_u64(seed);
        let n = self.nominal.controls.len();
        let x_bar = &self.nominal.trajectory.0;
        let u_bar = &self.nominal.controls.0;
        let mut x = x_bar[0].clone();
        let mut estimate = Vector::zeros(self.realization.order);
        let mut record = RunRecord {
            run,
            seed,
            states: vec![x.clone()],
            controls: Vec::with_capacity(n),
            estimates: vec![estimate.clone()],
            deviation_norms: vec![0.0],
            cost: 0.0,
            failed_at: None,
        };
        let mut cost = 0.0;
        for k in 0..n {
            let u = lqg::feedback(&self.gains.feedback[k], &estimate, &u_bar[k]);
            cost += self.cost.stage_cost(k, &x, &u);
            let w = self.process.sample(&mut rng);
            x = self.plant.step(k, &x, &u, &w);
            let v = self.measurement.sample(&mut rng);
            let y = self.plant.observe(k + 1, &x, &v);
            record.controls.push(u.clone());
            if !x.iter().all(|s| s.is_finite() && s.abs() < DIVERGENCE_LIMIT) {
                record.failed_at = Some(k + 1);
                record.cost = f64::INFINITY;
                return record;
            }
            let dy = y - &self.nominal_outputs[k + 1];
            let du = &u - &u_bar[k];
            estimate = lqg::observer_step(self.realization, k, &estimate, &du, &dy, &self.gains.kalman[k + 1]);
            record.deviation_norms.push((&x - &x_bar[k + 1]).norm());
            record.states.push(x.clone());
            record.estimates.push(estimate.clone());
        }
        record.cost = cost + self.cost.terminal_cost(&x);
        record
    }
}

pub fn closed_loop_run(
    plant: &dyn Plant,
    nominal: &Nominal,
    realization: &LtvRealization,
    gains: &LqgGains,
    noise: &NoiseSpec,
    cost: &CostSpec,
    seed: u64,
) -> Result<RunRecord> {
    Ok(ClosedLoop::new(plant, nominal, realization, gains, noise, cost)?.run(0, seed))
}

/// Per-step statistics over the runs that did not diverge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub run_count: usize,
    pub failed_runs: usize,
    pub dt: f64,
    #[serde(with = "crate::numerics::serde_vector::seq")]
    pub mean: Vec<Vector>,
    /// Population standard deviation.
    #[serde(with = "crate::numerics::serde_vector::seq")]
    pub std: Vec<Vector>,
    pub mean_cost: f64,
    /// Standard error of `mean_cost`.
    pub cost_std_error: f64,
}

impl EnsembleStats {
    /// `mean − 2σ`.
    pub fn lower_band(&self) -> Vec<Vector> {
        self.mean.iter().zip(&self.std).map(|(m, s)| m - s * 2.0).collect()
    }

    /// `mean + 2σ`.
    pub fn upper_band(&self) -> Vec<Vector> {
        self.mean.iter().zip(&self.std).map(|(m, s)| m + s * 2.0).collect()
    }

    pub fn successful_runs(&self) -> usize {
        self.run_count - self.failed_runs
    }
}

/// Ordered reduction over the successful runs.
pub fn summarize(records: &[RunRecord], dt: f64) -> Result<EnsembleStats> {
    let ok: Vec<&RunRecord> = records.iter().filter(|r| !r.failed()).collect();
    if ok.is_empty() {
        return Err(HarnessError::AllRunsFailed(records.len()));
    }
    let count = ok.len() as f64;
    let steps = ok[0].states.len();
    let mut mean = vec![Vector::zeros(ok[0].states[0].len()); steps];
    for r in &ok {
        for (m, x) in mean.iter_mut().zip(&r.states) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![Vector::zeros(mean[0].len()); steps];
    for r in &ok {
        for ((v, x), m) in var.iter_mut().zip(&r.states).zip(&mean) {
            *v += (x - m).map(|d| d * d);
        }
    }
    let std = var.into_iter().map(|v| (v / count).map(f64::sqrt)).collect();
    let mean_cost = ok.iter().map(|r| r.cost).sum::<f64>() / count;
    let cost_std_error = if ok.len() > 1 {
        let s2 = ok.iter().map(|r| (r.cost - mean_cost).powi(2)).sum::<f64>() / (count - 1.0);
        (s2 / count).sqrt()
    } else {
        0.0
    };
    Ok(EnsembleStats {
        run_count: records.len(),
        failed_runs: records.len() - ok.len(),
        dt,
        mean,
        std,
        mean_cost,
        cost_std_error,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub stats: EnsembleStats,
    pub records: Vec<RunRecord>,
}

/// Parallel rollouts with seeds from [`derive_seed`], reduced in run order.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo(
    plant: &dyn Plant,
    nominal: &Nominal,
    realization: &LtvRealization,
    gains: &LqgGains,
    noise: &NoiseSpec,
    cost: &CostSpec,
    runs: usize,
    master_seed: u64,
    dt: f64,
) -> Result<Ensemble> {
    if runs == 0 {
        return Err(HarnessError::Config("need at least one run".into()));
    }
    let closed_loop = ClosedLoop::new(plant, nominal, realization, gains, noise, cost)?;
    let records: Vec<RunRecord> = (0..runs)
        .into_par_iter()
        .map(|i| closed_loop.run(i, derive_seed(master_seed, i as u64)))
        .collect();
    let stats = summarize(&records, dt)?;
    Ok(Ensemble { stats, records })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// `run, k, t, x1..xn, u1..um`; `u` is blank at the final step.
pub fn write_ensemble_csv<W: Write>(records: &[RunRecord], state_dim: usize, control_dim: usize, dt: f64, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["run".to_string(), "k".into(), "t".into()];
    header.extend((1..=state_dim).map(|i| format!("x{i}")));
    header.extend((1..=control_dim).map(|i| format!("u{i}")));
    w.write_record(&header)?;
    for r in records {
        for (k, x) in r.states.iter().enumerate() {
            let mut row = vec![r.run.to_string(), k.to_string(), (k as f64 * dt).to_string()];
            row.extend(x.iter().map(f64::to_string));
            match r.controls.get(k) {
                Some(u) => row.extend(u.iter().map(f64::to_string)),
                None => row.extend(std::iter::repeat_n(String::new(), control_dim)),
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `k, t, mean_1, std_1, …, mean_n, std_n`.
pub fn write_stats_csv<W: Write>(stats: &EnsembleStats, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let nx = stats.mean.first().map_or(0, Vector::len);
    let mut header = vec!["k".to_string(), "t".into()];
    for i in 1..=nx {
        header.push(format!("mean_{i}"));
        header.push(format!("std_{i}"));
    }
    w.write_record(&header)?;
    for (k, (m, s)) in stats.mean.iter().zip(&stats.std).enumerate() {
        let mut row = vec![k.to_string(), (k as f64 * stats.dt).to_string()];
        for i in 0..nx {
            row.push(m[i].to_string());
            row.push(s[i].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `t, x1..xn`, one row per state of the trajectory.
pub fn write_trajectory_csv<W: Write>(states: &[Vector], dt: f64, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let nx = states.first().map_or(0, Vector::len);
    let mut header = vec!["t".to_string()];
    header.extend((1..=nx).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for (k, x) in states.iter().enumerate() {
        let mut row = vec![(k as f64 * dt).to_string()];
        row.extend(x.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `iter, cost, grad_norm, step_size`.
pub fn write_log_csv<W: Write>(log: &[trajopt::IterationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "cost", "grad_norm", "step_size"])?;
    for r in log {
        w.write_record(&[r.iter.to_string(), r.cost.to_string(), r.grad_norm.to_string(), r.step_size.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a value's canonical JSON (object keys sorted).
pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    Ok(sha256_hex(serde_json::to_string(&canonical)?.as_bytes()))
}

/// Persisted stage output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub schema_version: u32,
    pub kind: String,
    pub input_hash: String,
    pub payload_hash: String,
    pub payload: serde_json::Value,
}

impl Envelope {
    pub fn new<T: Serialize>(kind: &str, input_hash: String, payload: &T) -> Result<Self> {
        let payload = serde_json::to_value(payload)?;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            input_hash,
            payload_hash: sha256_hex(serde_json::to_string(&payload)?.as_bytes()),
            payload,
        })
    }

    /// The payload, if the file is intact and was produced from `input_hash`.
    fn load_matching<T: DeserializeOwned>(path: &Path, kind: &str, input_hash: &str) -> Option<(T, String)> {
        let env: Envelope = read_json(path).ok()?;
        let actual = sha256_hex(serde_json::to_string(&env.payload).ok()?.as_bytes());
        if env.schema_version != SCHEMA_VERSION || env.kind != kind || env.input_hash != input_hash || env.payload_hash != actual
        {
            return None;
        }
        let payload = serde_json::from_value(env.payload).ok()?;
        Some((payload, actual))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Optimize,
    Identify,
    Gains,
    MonteCarlo,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Optimize => "optimize",
            Stage::Identify => "identify",
            Stage::Gains => "gains",
            Stage::MonteCarlo => "montecarlo",
        }
    }

    fn file(self) -> &'static str {
        match self {
            Stage::Optimize => "nominal.json",
            Stage::Identify => "realization.json",
            Stage::Gains => "gains.json",
            Stage::MonteCarlo => "stats.json",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

/// Artifacts of a pipeline invocation; later stages are `None` when the
/// pipeline was asked to stop early.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub nominal: Nominal,
    pub realization: Option<LtvRealization>,
    pub markov_errors: Option<Vec<f64>>,
    pub gains: Option<LqgGains>,
    pub ensemble: Option<EnsembleStats>,
    pub status: Vec<(Stage, StageStatus)>,
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub out_dir: PathBuf,
    pub until: Stage,
    pub format: Format,
    /// Step at which measured and reconstructed Markov parameters are
    /// compared; `markov.csv` is skipped when absent.
    pub markov_step: Option<usize>,
}

fn run_stage<T: Serialize + DeserializeOwned>(
    out: &Path,
    stage: Stage,
    input_hash: String,
    status: &mut Vec<(Stage, StageStatus)>,
    compute: impl FnOnce() -> Result<T>,
) -> Result<(T, String)> {
    let path = out.join(stage.file());
    if let Some(found) = Envelope::load_matching(&path, stage.name(), &input_hash) {
        status.push((stage, StageStatus::Skipped));
        return Ok(found);
    }
    let value = compute()?;
    let env = Envelope::new(stage.name(), input_hash, &value)?;
    let hash = env.payload_hash.clone();
    write_json(&env, &path)?;
    status.push((stage, StageStatus::Ran));
    Ok((value, hash))
}

/// Hash of upstream payload hashes plus the named top-level config fields.
fn chain_hash(upstream: &[&str], cfg: &ExperimentConfig, fields: &[&str]) -> Result<String> {
    let full = serde_json::to_value(cfg)?;
    let section: serde_json::Map<String, serde_json::Value> = fields
        .iter()
        .map(|f| (f.to_string(), full.get(*f).cloned().unwrap_or(serde_json::Value::Null)))
        .collect();
    let mut hasher = Sha256::new();
    for h in upstream {
        hasher.update(h.as_bytes());
        hasher.update([0]);
    }
    hasher.update(content_hash(&section)?.as_bytes());
    Ok(hex::encode(hasher.finalize()))
}

/// optimize → identify → gains → montecarlo, resuming from intact artifacts.
pub fn run_pipeline(cfg: &ExperimentConfig, opts: &PipelineOptions) -> Result<PipelineOutput> {
    cfg.validate()?;
    fs::create_dir_all(&opts.out_dir)?;
    let out = opts.out_dir.as_path();
    let plant = cfg.plant.build()?;
    let dt = cfg.dt();
    let mut status = Vec::new();

    let opt_fields = ["plant", "horizon", "initial_state", "initial_controls", "weights", "optimizer"];
    let (nominal, nominal_hash) = run_stage(out, Stage::Optimize, chain_hash(&[], cfg, &opt_fields)?, &mut status, || {
        let initial = cfg
            .initial_controls
            .clone()
            .unwrap_or_else(|| ControlSequence::zeros(cfg.horizon, plant.control_dim()));
        Ok(trajopt::gradient_descent_staged(
            plant.as_ref(),
            &cfg.initial_state,
            &initial,
            &cfg.cost_stages()?,
            &cfg.optimizer,
        )?)
    })?;
    write_trajectory_csv(&nominal.trajectory.0, dt, fs::File::create(out.join("nominal.csv"))?)?;
    write_log_csv(&nominal.log, fs::File::create(out.join("optimizer_log.csv"))?)?;
    let mut result = PipelineOutput {
        nominal,
        realization: None,
        markov_errors: None,
        gains: None,
        ensemble: None,
        status,
    };
    if opts.until == Stage::Optimize {
        return Ok(result);
    }

    let (realization, realization_hash) = run_stage(
        out,
        Stage::Identify,
        chain_hash(&[&nominal_hash], cfg, &["plant", "era"])?,
        &mut result.status,
        || {
            Ok(sysid::identify_ltv(
                plant.as_ref(),
                &result.nominal.controls,
                &result.nominal.trajectory,
                &cfg.era,
            )?)
        },
    )?;
    if let Some(k) = opts.markov_step {
        let data = sysid::impulse_experiments(plant.as_ref(), &result.nominal.controls, &result.nominal.trajectory, &cfg.era)?;
        let markov = sysid::estimate_markov(&data)?;
        sysid::write_markov_comparison(&markov, &realization, k, fs::File::create(out.join("markov.csv"))?)?;
        result.markov_errors = Some(sysid::markov_relative_error(&markov, &realization, k)?);
    }
    result.realization = Some(realization);
    if opts.until == Stage::Identify {
        return Ok(result);
    }
    let realization = result.realization.as_ref().expect("set above");

    let p0 = cfg.p0(realization.order);
    let (gains, gains_hash) = run_stage(
        out,
        Stage::Gains,
        chain_hash(&[&realization_hash], cfg, &["weights", "horizon", "noise", "filter_noise", "p0"])?,
        &mut result.status,
        || Ok(lqg::design_lqg(realization, &cfg.cost()?, cfg.filter_noise(), &p0)?),
    )?;
    result.gains = Some(gains);
    if opts.until == Stage::Gains {
        return Ok(result);
    }
    let gains = result.gains.as_ref().expect("set above");

    let mc_hash = chain_hash(
        &[&nominal_hash, &realization_hash, &gains_hash],
        cfg,
        &["noise", "runs", "seed", "weights"],
    )?;
    let ensemble_file = match opts.format {
        Format::Csv => "ensemble.csv",
        Format::Json => "ensemble.json",
    };
    let cached = Envelope::load_matching::<EnsembleStats>(&out.join(Stage::MonteCarlo.file()), "montecarlo", &mc_hash)
        .filter(|_| out.join(ensemble_file).exists());
    let stats = match cached {
        Some((stats, _)) => {
            result.status.push((Stage::MonteCarlo, StageStatus::Skipped));
            stats
        }
        None => {
            let ensemble = monte_carlo(
                plant.as_ref(),
                &result.nominal,
                realization,
                gains,
                &cfg.noise,
                &cfg.cost()?,
                cfg.runs,
                cfg.seed,
                dt,
            )
            .map_err(|e| match e {
                HarnessError::AllRunsFailed(_) => stage_err("montecarlo")(&e),
                other => other,
            })?;
            match opts.format {
                Format::Csv => {
                    write_ensemble_csv(
                        &ensemble.records,
                        plant.state_dim(),
                        plant.control_dim(),
                        dt,
                        fs::File::create(out.join("ensemble.csv"))?,
                    )?;
                    write_stats_csv(&ensemble.stats, fs::File::create(out.join("stats.csv"))?)?;
                }
                Format::Json => write_json(&ensemble.records, &out.join("ensemble.json"))?,
            }
            write_json(&Envelope::new("montecarlo", mc_hash, &ensemble.stats)?, &out.join(Stage::MonteCarlo.file()))?;
            result.status.push((Stage::MonteCarlo, StageStatus::Ran));
            ensemble.stats
        }
    };
    result.ensemble = Some(stats);
    Ok(result)
}
