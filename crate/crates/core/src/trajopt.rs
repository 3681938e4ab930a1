//! Open-loop trajectory optimization against a black-box plant.
//!
//! The optimizer only rolls the plant forward: gradients come from
//! perturbing one control coordinate at a time and re-simulating.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, serde_matrix, serde_vector, Matrix, Vector};
use crate::plant::Plant;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajoptError {
    #[error("rollout diverged at step {step}")]
    Divergence { step: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TrajoptError>;

/// Quadratic tracking cost
/// `Σ_k δx_kᵀ Q_k δx_k + u_kᵀ R_k u_k + δx_Nᵀ Q_N δx_N` with `δx = x − target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    #[serde(with = "serde_matrix::seq")]
    pub state_weights: Vec<Matrix>,
    #[serde(with = "serde_matrix::seq")]
    pub control_weights: Vec<Matrix>,
    #[serde(with = "serde_matrix")]
    pub terminal_weight: Matrix,
    #[serde(with = "serde_vector")]
    pub target: Vector,
}

impl CostSpec {
    pub fn new(
        state_weights: Vec<Matrix>,
        control_weights: Vec<Matrix>,
        terminal_weight: Matrix,
        target: Vector,
    ) -> Result<Self> {
        let cost = Self {
            state_weights,
            control_weights,
            terminal_weight,
            target,
        };
        cost.validate()?;
        Ok(cost)
    }

    /// Same weights at every step.
    pub fn stationary(q: Matrix, r: Matrix, q_terminal: Matrix, target: Vector, horizon: usize) -> Result<Self> {
        Self::new(vec![q; horizon], vec![r; horizon], q_terminal, target)
    }

    pub fn horizon(&self) -> usize {
        self.state_weights.len()
    }

    pub fn state_dim(&self) -> usize {
        self.terminal_weight.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.control_weights.first().map_or(0, Matrix::nrows)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.horizon();
        if n == 0 {
            return Err(TrajoptError::Invalid("cost horizon must be at least 1".into()));
        }
        if self.control_weights.len() != n {
            return Err(TrajoptError::Invalid(format!(
                "{} state weights but {} control weights",
                n,
                self.control_weights.len()
            )));
        }
        let nx = self.state_dim();
        let nu = self.control_dim();
        if self.target.len() != nx {
            return Err(TrajoptError::Invalid("target dimension does not match weights".into()));
        }
        let invalid = |e: numerics::NumericsError| TrajoptError::Invalid(e.to_string());
        for (k, q) in self.state_weights.iter().enumerate() {
            if q.shape() != (nx, nx) {
                return Err(TrajoptError::Invalid(format!("Q_{k} is not {nx}x{nx}")));
            }
            numerics::check_psd(q, &format!("Q_{k}"), 1e-12).map_err(invalid)?;
        }
        for (k, r) in self.control_weights.iter().enumerate() {
            if r.shape() != (nu, nu) {
                return Err(TrajoptError::Invalid(format!("R_{k} is not {nu}x{nu}")));
            }
            numerics::check_pd(r, &format!("R_{k}")).map_err(invalid)?;
        }
        numerics::check_psd(&self.terminal_weight, "Q_N", 1e-12).map_err(invalid)?;
        Ok(())
    }

    pub fn stage_cost(&self, k: usize, x: &Vector, u: &Vector) -> f64 {
        let dx = x - &self.target;
        dx.dot(&(&self.state_weights[k] * &dx)) + u.dot(&(&self.control_weights[k] * u))
    }

    pub fn terminal_cost(&self, x: &Vector) -> f64 {
        let dx = x - &self.target;
        dx.dot(&(&self.terminal_weight * &dx))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            state_weights: self.state_weights.iter().map(|q| q * factor).collect(),
            control_weights: self.control_weights.iter().map(|r| r * factor).collect(),
            terminal_weight: &self.terminal_weight * factor,
            target: self.target.clone(),
        }
    }
}

/// Diagonal weights that switch from an `early` to a `late` profile at a
/// given time, with a separate terminal profile. The late profile is what
/// pins the pendulum upright once the swing-up window has passed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSchedule {
    pub early_state: Vec<f64>,
    pub late_state: Vec<f64>,
    pub switch_time: f64,
    pub terminal_state: Vec<f64>,
    pub control: Vec<f64>,
    pub target: Vec<f64>,
    /// Earlier-to-later switch times solved first, each stage warm-starting
    /// the next; the final stage always uses `switch_time`.
    #[serde(default)]
    pub continuation: Vec<f64>,
}

impl WeightSchedule {
    /// One cost per continuation stage, ending with the cost for `switch_time`.
    pub fn stages(&self, horizon: usize, dt: f64) -> Result<Vec<CostSpec>> {
        self.continuation
            .iter()
            .chain(std::iter::once(&self.switch_time))
            .map(|&t| {
                Self {
                    switch_time: t,
                    continuation: Vec::new(),
                    ..self.clone()
                }
                .build(horizon, dt)
            })
            .collect()
    }

    pub fn build(&self, horizon: usize, dt: f64) -> Result<CostSpec> {
        let diag = |v: &[f64]| Matrix::from_diagonal(&Vector::from_column_slice(v));
        let early = diag(&self.early_state);
        let late = diag(&self.late_state);
        let state_weights = (0..horizon)
            .map(|k| {
                // tolerate the rounding in k·dt right at the switch
                if k as f64 * dt >= self.switch_time - 1e-9 {
                    late.clone()
                } else {
                    early.clone()
                }
            })
            .collect();
        CostSpec::new(
            state_weights,
            vec![diag(&self.control); horizon],
            diag(&self.terminal_state),
            Vector::from_column_slice(&self.target),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ControlSequence(#[serde(with = "serde_vector::seq")] pub Vec<Vector>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateTrajectory(#[serde(with = "serde_vector::seq")] pub Vec<Vector>);

impl ControlSequence {
    pub fn zeros(horizon: usize, control_dim: usize) -> Self {
        Self(vec![Vector::zeros(control_dim); horizon])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn control_dim(&self) -> usize {
        self.0.first().map_or(0, Vector::len)
    }

    /// Step-major flattening `(u_0, u_1, …)`.
    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flat_map(|u| u.iter().copied()).collect()
    }

    pub fn from_flat(flat: &[f64], control_dim: usize) -> Self {
        Self(
            flat.chunks(control_dim)
                .map(Vector::from_column_slice)
                .collect(),
        )
    }
}

impl StateTrajectory {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_controls(plant: &dyn Plant, x0: &Vector, controls: &ControlSequence) -> Result<()> {
    if x0.len() != plant.state_dim() {
        return Err(TrajoptError::Invalid(format!(
            "initial state has dimension {}, plant expects {}",
            x0.len(),
            plant.state_dim()
        )));
    }
    if let Some((k, _)) = controls
        .0
        .iter()
        .enumerate()
        .find(|(_, u)| u.len() != plant.control_dim())
    {
        return Err(TrajoptError::Invalid(format!("control u_{k} has the wrong dimension")));
    }
    Ok(())
}

/// Noiseless rollout `x_{k+1} = f(x_k, u_k, 0)` from `x0`.
pub fn rollout(plant: &dyn Plant, x0: &Vector, controls: &ControlSequence) -> Result<StateTrajectory> {
    check_controls(plant, x0, controls)?;
    let zero = Vector::zeros(plant.state_dim());
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    for (k, u) in controls.0.iter().enumerate() {
        let next = plant.step(k, &states[k], u, &zero);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(TrajoptError::Divergence { step: k + 1 });
        }
        states.push(next);
    }
    Ok(StateTrajectory(states))
}

pub fn trajectory_cost(states: &StateTrajectory, controls: &ControlSequence, cost: &CostSpec) -> f64 {
    let n = controls.len();
    (0..n)
        .map(|k| cost.stage_cost(k, &states.0[k], &controls.0[k]))
        .sum::<f64>()
        + cost.terminal_cost(&states.0[n])
}

pub fn evaluate_cost(plant: &dyn Plant, x0: &Vector, controls: &ControlSequence, cost: &CostSpec) -> Result<f64> {
    if controls.len() != cost.horizon() {
        return Err(TrajoptError::Invalid(format!(
            "{} controls for a cost horizon of {}",
            controls.len(),
            cost.horizon()
        )));
    }
    let states = rollout(plant, x0, controls)?;
    Ok(trajectory_cost(&states, controls, cost))
}

/// Cost of a step-major flat control vector without materializing the trajectory.
fn flat_cost(plant: &dyn Plant, x0: &Vector, flat: &[f64], cost: &CostSpec) -> Result<f64> {
    let nu = plant.control_dim();
    let zero = Vector::zeros(plant.state_dim());
    let mut x = x0.clone();
    let mut total = 0.0;
    for (k, chunk) in flat.chunks(nu).enumerate() {
        let u = Vector::from_column_slice(chunk);
        total += cost.stage_cost(k, &x, &u);
        x = plant.step(k, &x, &u, &zero);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(TrajoptError::Divergence { step: k + 1 });
        }
    }
    Ok(total + cost.terminal_cost(&x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DifferenceScheme {
    /// `(J(u + h e_i) − J(u)) / h`
    #[default]
    Forward,
    /// `(J(u + h e_i) − J(u − h e_i)) / 2h`
    Central,
}

/// Forward-difference gradient of the cost with respect to every control
/// coordinate, in step-major order.
pub fn fd_gradient(
    plant: &dyn Plant,
    x0: &Vector,
    controls: &ControlSequence,
    cost: &CostSpec,
    h: f64,
) -> Result<Vec<f64>> {
    fd_gradient_with(plant, x0, controls, cost, h, DifferenceScheme::Forward)
}

pub fn fd_gradient_with(
    plant: &dyn Plant,
    x0: &Vector,
    controls: &ControlSequence,
    cost: &CostSpec,
    h: f64,
    scheme: DifferenceScheme,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(TrajoptError::Invalid(format!("difference step must be positive, got {h}")));
    }
    check_controls(plant, x0, controls)?;
    if controls.len() != cost.horizon() {
        return Err(TrajoptError::Invalid("control horizon does not match cost".into()));
    }
    let flat = controls.flatten();
    let base = flat_cost(plant, x0, &flat, cost)?;
    gradient_at(plant, x0, &flat, base, cost, h, scheme)
}

fn gradient_at(
    plant: &dyn Plant,
    x0: &Vector,
    flat: &[f64],
    base: f64,
    cost: &CostSpec,
    h: f64,
    scheme: DifferenceScheme,
) -> Result<Vec<f64>> {
    let shifted = |i: usize, delta: f64| {
        let mut u = flat.to_vec();
        u[i] += delta;
        flat_cost(plant, x0, &u, cost)
    };
    // each coordinate is independent; collecting by index keeps the result
    // bitwise identical whatever the thread schedule
    let partials: Vec<Result<f64>> = (0..flat.len())
        .into_par_iter()
        .map(|i| match scheme {
            DifferenceScheme::Forward => Ok((shifted(i, h)? - base) / h),
            DifferenceScheme::Central => Ok((shifted(i, h)? - shifted(i, -h)?) / (2.0 * h)),
        })
        .collect();
    partials.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GdConfig {
    /// Initial step size `α`.
    pub step_size: f64,
    /// Finite-difference perturbation `h`.
    pub fd_step: f64,
    /// Stop once `‖∇J‖_∞ < grad_tol`.
    pub grad_tol: f64,
    pub max_iters: usize,
    pub backtracking: bool,
    /// Step shrink factor `β ∈ (0, 1)` used by the line search.
    pub shrink_factor: f64,
    pub difference: DifferenceScheme,
    /// How the first trial step of each backtracking search is chosen.
    pub step_rule: StepRule,
    pub direction: Direction,
    /// Curvature pairs kept by [`Direction::Lbfgs`].
    pub memory: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `−∇J`.
    #[default]
    Steepest,
    /// `−H∇J` with `H` the limited-memory BFGS inverse-Hessian estimate built
    /// from finite-difference gradients. Requires backtracking; steps must
    /// satisfy the Armijo condition.
    Lbfgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Start from the previously accepted step divided by `β`.
    #[default]
    Expand,
    /// Start from the Barzilai–Borwein step `sᵀs / sᵀy` built from the last
    /// two iterates and gradients, falling back to `Expand` when `sᵀy ≤ 0`.
    BarzilaiBorwein,
}

impl Default for GdConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-2,
            fd_step: 1e-4,
            grad_tol: 1e-3,
            max_iters: 5000,
            backtracking: true,
            shrink_factor: 0.5,
            difference: DifferenceScheme::Forward,
            step_rule: StepRule::Expand,
            direction: Direction::Steepest,
            memory: 10,
        }
    }
}

impl GdConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("step_size", self.step_size),
            ("fd_step", self.fd_step),
            ("grad_tol", self.grad_tol),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(TrajoptError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.direction == Direction::Lbfgs && (!self.backtracking || self.memory == 0) {
            return Err(TrajoptError::Invalid("L-BFGS needs backtracking and a positive memory".into()));
        }
        if !(self.shrink_factor > 0.0 && self.shrink_factor < 1.0) {
            return Err(TrajoptError::Invalid(format!(
                "shrink_factor must lie in (0, 1), got {}",
                self.shrink_factor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Cost at the iterate the gradient was taken from.
    pub cost: f64,
    pub grad_norm: f64,
    /// Step actually taken; zero on the final convergence check.
    pub step_size: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    /// Backtracking could not find a non-increasing step.
    LineSearchStalled,
    /// A fixed-size step produced a divergent rollout.
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdOutcome {
    pub controls: ControlSequence,
    pub trajectory: StateTrajectory,
    pub cost: f64,
    pub log: Vec<IterationRecord>,
    pub converged: bool,
    pub stop_reason: StopReason,
}

const MIN_STEP: f64 = 1e-300;

/// Gradient descent `U ← U − α ∇J` with optional backtracking.
///
/// With backtracking the step is shrunk by `β` until the cost does not
/// increase, and the next iteration starts from `α/β` so the step can grow
/// back. Hitting `max_iters` is not an error; the best iterate is returned
/// with `converged = false`.
pub fn gradient_descent(
    plant: &dyn Plant,
    x0: &Vector,
    initial: &ControlSequence,
    cost: &CostSpec,
    cfg: &GdConfig,
) -> Result<GdOutcome> {
    cfg.validate()?;
    check_controls(plant, x0, initial)?;
    if initial.len() != cost.horizon() {
        return Err(TrajoptError::Invalid("initial controls do not match cost horizon".into()));
    }
    let nu = plant.control_dim();
    let mut flat = initial.flatten();
    let mut current = flat_cost(plant, x0, &flat, cost)?;
    let mut best = (flat.clone(), current);
    let mut alpha = cfg.step_size;
    let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut log = Vec::new();
    let mut stop_reason = StopReason::MaxIterations;

    for iter in 0..cfg.max_iters {
        let grad = gradient_at(plant, x0, &flat, current, cost, cfg.fd_step, cfg.difference)?;
        let grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_norm < cfg.grad_tol {
            log.push(IterationRecord {
                iter,
                cost: current,
                grad_norm,
                step_size: 0.0,
            });
            stop_reason = StopReason::Converged;
            break;
        }
        if cfg.backtracking {
            let lbfgs = cfg.direction == Direction::Lbfgs;
            if lbfgs {
                if let Some((prev_u, prev_g)) = &previous {
                    let s: Vec<f64> = flat.iter().zip(prev_u).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = grad.iter().zip(prev_g).map(|(a, b)| a - b).collect();
                    if dot(&s, &y) > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                        if pairs.len() == cfg.memory {
                            pairs.remove(0);
                        }
                        pairs.push((s, y));
                    }
                }
            }
            let mut direction: Vec<f64> = if lbfgs && !pairs.is_empty() {
                lbfgs_direction(&grad, &pairs)
            } else {
                grad.iter().map(|g| -g).collect()
            };
            let mut slope = dot(&grad, &direction);
            if !(slope < 0.0) {
                pairs.clear();
                direction = grad.iter().map(|g| -g).collect();
                slope = -dot(&grad, &grad);
            }
            let mut a = if lbfgs && !pairs.is_empty() {
                1.0
            } else {
                match (&previous, cfg.step_rule) {
                    (Some((prev_u, prev_g)), StepRule::BarzilaiBorwein) => {
                        let (mut ss, mut sy) = (0.0, 0.0);
                        for i in 0..flat.len() {
                            let s = flat[i] - prev_u[i];
                            ss += s * s;
                            sy += s * (grad[i] - prev_g[i]);
                        }
                        if sy > 0.0 && (ss / sy).is_finite() {
                            ss / sy
                        } else {
                            alpha
                        }
                    }
                    _ => alpha,
                }
            };
            // steepest descent only asks for no increase; L-BFGS needs the
            // Armijo condition to keep its curvature pairs meaningful
            let armijo = if lbfgs { 1e-4 } else { 0.0 };
            let accepted = loop {
                let candidate: Vec<f64> = flat.iter().zip(&direction).map(|(u, d)| u + a * d).collect();
                // a divergent trial counts as an increase
                let trial = flat_cost(plant, x0, &candidate, cost).unwrap_or(f64::INFINITY);
                if trial <= current + armijo * a * slope {
                    break Some((candidate, trial));
                }
                a *= cfg.shrink_factor;
                if a < MIN_STEP {
                    break None;
                }
            };
            log.push(IterationRecord {
                iter,
                cost: current,
                grad_norm,
                step_size: if accepted.is_some() { a } else { 0.0 },
            });
            match accepted {
                Some((candidate, trial)) => {
                    previous = Some((std::mem::replace(&mut flat, candidate), grad));
                    current = trial;
                    if !(lbfgs && !pairs.is_empty()) {
                        alpha = a / cfg.shrink_factor;
                    }
                }
                None if lbfgs && !pairs.is_empty() => {
                    // stale curvature; restart from steepest descent
                    pairs.clear();
                    previous = None;
                }
                None => {
                    stop_reason = StopReason::LineSearchStalled;
                    break;
                }
            }
        } else {
            log.push(IterationRecord {
                iter,
                cost: current,
                grad_norm,
                step_size: alpha,
            });
            flat = flat.iter().zip(&grad).map(|(u, g)| u - alpha * g).collect();
            match flat_cost(plant, x0, &flat, cost) {
                Ok(c) => {
                    current = c;
                    if c < best.1 {
                        best = (flat.clone(), c);
                    }
                }
                Err(TrajoptError::Divergence { .. }) => {
                    stop_reason = StopReason::Diverged;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }

    // fixed steps may overshoot; report the best iterate seen
    let (flat, final_cost) = if cfg.backtracking { (flat, current) } else { best };
    let controls = ControlSequence::from_flat(&flat, nu);
    let trajectory = rollout(plant, x0, &controls)?;
    Ok(GdOutcome {
        controls,
        trajectory,
        cost: final_cost,
        log,
        converged: stop_reason == StopReason::Converged,
        stop_reason,
    })
}

/// Runs [`gradient_descent`] on each cost in turn, warm-starting from the
/// previous stage. The returned log spans all stages with cumulative
/// iteration numbers; everything else describes the last stage.
pub fn gradient_descent_staged(
    plant: &dyn Plant,
    x0: &Vector,
    initial: &ControlSequence,
    stages: &[CostSpec],
    cfg: &GdConfig,
) -> Result<GdOutcome> {
    let (last, earlier) = stages
        .split_last()
        .ok_or_else(|| TrajoptError::Invalid("no optimization stages".into()))?;
    let mut controls = initial.clone();
    let mut log = Vec::new();
    for cost in earlier {
        let out = gradient_descent(plant, x0, &controls, cost, cfg)?;
        controls = out.controls;
        log.extend(out.log);
    }
    let mut out = gradient_descent(plant, x0, &controls, last, cfg)?;
    log.append(&mut out.log);
    for (i, r) in log.iter_mut().enumerate() {
        r.iter = i;
    }
    out.log = log;
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two-loop recursion for `−H g`, with the initial inverse Hessian scaled by
/// `sᵀy / yᵀy` of the newest pair.
fn lbfgs_direction(grad: &[f64], pairs: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut coefs = Vec::with_capacity(pairs.len());
    for (s, y) in pairs.iter().rev() {
        let rho = 1.0 / dot(y, s);
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        coefs.push((rho, a));
    }
    if let Some((s, y)) = pairs.last() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y), (rho, a)) in pairs.iter().zip(coefs.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}
