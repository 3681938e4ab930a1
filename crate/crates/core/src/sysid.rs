//! Time-varying eigensystem realization of the perturbation dynamics along a
//! nominal trajectory.
//!
//! Impulse experiments give the generalized Markov parameters
//! `h_{k,j} = C_k A_{k-1} ⋯ A_{j+1} B_j`; Hankel matrices built from them are
//! factored by SVD into observability and reachability factors, and shifted
//! factors give a realization `(Â_k, B̂_k, Ĉ_k)` of order `n_r`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, serde_matrix, Matrix, NumericsError, Vector};
use crate::plant::Plant;
use crate::trajopt::{rollout, ControlSequence, StateTrajectory, TrajoptError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SysidError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("experiment inputs do not span the input space at step {k}")]
    IllConditioned { k: usize },
    #[error("Hankel matrix at step {k} needs Markov parameters outside the horizon")]
    Boundary { k: usize },
    #[error("Hankel matrix at step {k} has numerical rank zero")]
    Degenerate { k: usize },
    #[error("step {k}: {source}")]
    Numerics { k: usize, source: NumericsError },
    #[error(transparent)]
    Rollout(#[from] TrajoptError),
}

pub type Result<T> = std::result::Result<T, SysidError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EraConfig {
    /// Block rows of the Hankel matrix (future outputs).
    pub p: usize,
    /// Block columns of the Hankel matrix (past inputs).
    pub q: usize,
    pub impulse_amplitude: f64,
    /// Singular values below `rank_tol · σ_max` are treated as zero.
    pub rank_tol: f64,
    /// Fixes `n_r` instead of taking the modal numerical rank.
    pub order: Option<usize>,
    /// Runs `±amplitude` pairs and keeps half their difference, cancelling
    /// the even-order nonlinear response.
    pub two_sided: bool,
}

impl Default for EraConfig {
    fn default() -> Self {
        Self {
            p: 5,
            q: 5,
            impulse_amplitude: 0.01,
            rank_tol: 1e-5,
            order: None,
            two_sided: false,
        }
    }
}

impl EraConfig {
    pub fn validate(&self, state_dim: usize, control_dim: usize, output_dim: usize) -> Result<()> {
        if self.p < 2 || self.q < 1 {
            return Err(SysidError::Invalid(format!(
                "need p >= 2 and q >= 1, got p = {}, q = {}",
                self.p, self.q
            )));
        }
        if self.p * output_dim < state_dim || self.q * control_dim < state_dim {
            return Err(SysidError::Invalid(format!(
                "min(p·n_y, q·n_u) = {} is below the state dimension {state_dim}",
                (self.p * output_dim).min(self.q * control_dim)
            )));
        }
        if !(self.impulse_amplitude.is_finite() && self.impulse_amplitude > 0.0) {
            return Err(SysidError::Invalid(format!(
                "impulse amplitude must be positive, got {}",
                self.impulse_amplitude
            )));
        }
        if !(self.rank_tol.is_finite() && self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            return Err(SysidError::Invalid(format!("rank_tol must lie in (0, 1), got {}", self.rank_tol)));
        }
        if self.order == Some(0) {
            return Err(SysidError::Invalid("order must be positive".into()));
        }
        Ok(())
    }
}

/// Output deviations of one experiment: an impulse of size `amplitude` on
/// input `channel` at step `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    pub step: usize,
    pub channel: usize,
    /// `δy_k` for `k = 0..=N`.
    pub output_deviation: Vec<Vector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseData {
    pub amplitude: f64,
    pub horizon: usize,
    pub control_dim: usize,
    pub output_dim: usize,
    pub experiments: Vec<ImpulseResponse>,
}

fn check_nominal(plant: &dyn Plant, controls: &ControlSequence, states: &StateTrajectory) -> Result<()> {
    if states.len() != controls.len() + 1 {
        return Err(SysidError::Invalid(format!(
            "nominal has {} controls but {} states",
            controls.len(),
            states.len()
        )));
    }
    let replay = rollout(plant, &states.0[0], controls)?;
    for (k, (a, b)) in replay.0.iter().zip(&states.0).enumerate() {
        let scale = 1.0f64.max(b.amax());
        if (a - b).amax() > 1e-10 * scale {
            return Err(SysidError::Invalid(format!(
                "nominal states do not match a rollout of the nominal controls at step {k}"
            )));
        }
    }
    Ok(())
}

/// One noiseless experiment per (step, input channel), run in parallel.
pub fn impulse_experiments(
    plant: &dyn Plant,
    controls: &ControlSequence,
    states: &StateTrajectory,
    cfg: &EraConfig,
) -> Result<ImpulseData> {
    check_nominal(plant, controls, states)?;
    if !(cfg.impulse_amplitude.is_finite() && cfg.impulse_amplitude >= 0.0) {
        return Err(SysidError::Invalid("impulse amplitude must be non-negative".into()));
    }
    let n = controls.len();
    let nu = plant.control_dim();
    let nominal_out: Vec<Vector> = states
        .0
        .iter()
        .enumerate()
        .map(|(k, x)| plant.observe_noiseless(k, x))
        .collect();
    let experiments = (0..n * nu)
        .into_par_iter()
        .map(|i| {
            let (step, channel) = (i / nu, i % nu);
            let respond = |amplitude: f64| {
                let mut deviation = Vec::with_capacity(n + 1);
                let mut x = states.0[0].clone();
                for k in 0..=n {
                    deviation.push(plant.observe_noiseless(k, &x) - &nominal_out[k]);
                    if k < n {
                        let mut u = controls.0[k].clone();
                        if k == step {
                            u[channel] += amplitude;
                        }
                        x = plant.step_noiseless(k, &x, &u);
                    }
                }
                deviation
            };
            let mut deviation = respond(cfg.impulse_amplitude);
            if cfg.two_sided {
                for (d, m) in deviation.iter_mut().zip(respond(-cfg.impulse_amplitude)) {
                    *d = (&*d - m) * 0.5;
                }
            }
            ImpulseResponse {
                step,
                channel,
                output_deviation: deviation,
            }
        })
        .collect();
    Ok(ImpulseData {
        amplitude: cfg.impulse_amplitude,
        horizon: n,
        control_dim: nu,
        output_dim: plant.output_dim(),
        experiments,
    })
}

/// Generalized Markov parameters `h_{k,j}` for `0 ≤ j < k ≤ N`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovParameterSet {
    h: Vec<Vec<Matrix>>,
    output_dim: usize,
    control_dim: usize,
}

impl MarkovParameterSet {
    /// Builds the set from a closure, mostly useful for oracles.
    pub fn from_fn(
        horizon: usize,
        output_dim: usize,
        control_dim: usize,
        mut f: impl FnMut(usize, usize) -> Matrix,
    ) -> Result<Self> {
        let mut h = Vec::with_capacity(horizon + 1);
        for k in 0..=horizon {
            let mut row = Vec::with_capacity(k);
            for j in 0..k {
                let m = f(k, j);
                if m.shape() != (output_dim, control_dim) {
                    return Err(SysidError::Invalid(format!("h_{{{k},{j}}} has the wrong shape")));
                }
                numerics::check_finite(&m, "Markov parameter").map_err(|source| SysidError::Numerics { k, source })?;
                row.push(m);
            }
            h.push(row);
        }
        Ok(Self {
            h,
            output_dim,
            control_dim,
        })
    }

    pub fn horizon(&self) -> usize {
        self.h.len() - 1
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    /// `h_{k,j}`, or `None` unless `j < k ≤ N`.
    pub fn get(&self, k: usize, j: usize) -> Option<&Matrix> {
        self.h.get(k).and_then(|row| row.get(j))
    }
}

/// Solves `δY_k = H_k δU_k` in the least-squares sense for every `k`, where
/// `δU_k` stacks the inputs applied at steps `0..k` in each experiment.
pub fn estimate_markov(data: &ImpulseData) -> Result<MarkovParameterSet> {
    let (n, nu, ny) = (data.horizon, data.control_dim, data.output_dim);
    let m = data.experiments.len();
    if m == 0 {
        return Err(SysidError::Invalid("no experiments".into()));
    }
    for e in &data.experiments {
        if e.output_deviation.len() != n + 1 || e.channel >= nu || e.step >= n {
            return Err(SysidError::Invalid(format!(
                "experiment at step {} channel {} is malformed",
                e.step, e.channel
            )));
        }
    }
    let mut h = vec![Vec::new()];
    for k in 1..=n {
        let inputs = Matrix::from_fn(k * nu, m, |row, i| {
            let e = &data.experiments[i];
            if e.step * nu + e.channel == row {
                data.amplitude
            } else {
                0.0
            }
        });
        let outputs = Matrix::from_fn(ny, m, |r, i| data.experiments[i].output_deviation[k][r]);
        let svd = numerics::svd(&inputs, numerics::DEFAULT_RANK_TOL).map_err(|source| SysidError::Numerics { k, source })?;
        if svd.rank < k * nu {
            return Err(SysidError::IllConditioned { k });
        }
        let row = numerics::solve_least_squares(&inputs, &outputs, numerics::DEFAULT_RANK_TOL)
            .map_err(|source| SysidError::Numerics { k, source })?;
        h.push((0..k).map(|j| row.columns(j * nu, nu).into_owned()).collect());
    }
    Ok(MarkovParameterSet {
        h,
        output_dim: ny,
        control_dim: nu,
    })
}

/// `H_k^{(p,q)}` with block `(r, c) = h_{k+r, k-1-c}`.
pub fn build_hankel(markov: &MarkovParameterSet, k: usize, p: usize, q: usize) -> Result<Matrix> {
    if p == 0 || q == 0 || q > k || k + p - 1 > markov.horizon() {
        return Err(SysidError::Boundary { k });
    }
    let (ny, nu) = (markov.output_dim, markov.control_dim);
    let mut hankel = Matrix::zeros(p * ny, q * nu);
    for r in 0..p {
        for c in 0..q {
            let block = markov.get(k + r, k - 1 - c).ok_or(SysidError::Boundary { k })?;
            hankel.view_mut((r * ny, c * nu), (ny, nu)).copy_from(block);
        }
    }
    Ok(hankel)
}

/// Observability and reachability factors of one Hankel matrix.
#[derive(Debug, Clone)]
struct Factors {
    observability: Matrix,
    reach_factor: Matrix,
    singular_values: Vec<f64>,
    rank: usize,
}

fn factor(hankel: &Matrix, k: usize, rank_tol: f64) -> Result<Factors> {
    let svd = numerics::svd(hankel, rank_tol).map_err(|source| SysidError::Numerics { k, source })?;
    Ok(Factors {
        observability: svd.left.clone(),
        reach_factor: svd.right.transpose(),
        singular_values: svd.singular_values.as_slice().to_vec(),
        rank: svd.rank,
    })
}

impl Factors {
    /// `(O, R) = (U Σ^{1/2}, Σ^{1/2} Vᵀ)` truncated to `order`.
    fn truncate(&self, order: usize) -> (Matrix, Matrix) {
        let mut o = self.observability.columns(0, order).into_owned();
        let mut r = self.reach_factor.rows(0, order).into_owned();
        for i in 0..order {
            let s = self.singular_values[i].sqrt();
            o.column_mut(i).scale_mut(s);
            r.row_mut(i).scale_mut(s);
        }
        (o, r)
    }
}

/// One ERA step from `H_k` and `H_{k+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EraStep {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub singular_values: Vec<f64>,
    pub rank: usize,
}

/// `Â_k = (O_{k+1}↓)⁺ O_k↑`, `B̂_k` = first `n_u` columns of the reachability
/// factor of `H_{k+1}`, `Ĉ_k` = first `n_y` rows of `O_k`. Uses the numerical
/// rank of `H_k` unless `order` is given.
pub fn era_step(
    h_k: &Matrix,
    h_k1: &Matrix,
    output_dim: usize,
    control_dim: usize,
    cfg: &EraConfig,
    order: Option<usize>,
) -> Result<EraStep> {
    if h_k.shape() != h_k1.shape() {
        return Err(SysidError::Invalid("Hankel matrices differ in shape".into()));
    }
    let (rows, cols) = h_k.shape();
    if output_dim == 0 || control_dim == 0 || rows % output_dim != 0 || cols % control_dim != 0 {
        return Err(SysidError::Invalid("Hankel shape is not a multiple of the block size".into()));
    }
    let p = rows / output_dim;
    if p < 2 {
        return Err(SysidError::Invalid("need at least two block rows".into()));
    }
    let now = factor(h_k, 0, cfg.rank_tol)?;
    let next = factor(h_k1, 1, cfg.rank_tol)?;
    let n_r = order.unwrap_or(now.rank);
    if n_r == 0 {
        return Err(SysidError::Degenerate { k: 0 });
    }
    if n_r > rows.min(cols) {
        return Err(SysidError::Invalid(format!("order {n_r} exceeds the Hankel dimensions")));
    }
    let (a, b, c) = realize(&now, &next, n_r, p, output_dim, control_dim, 0)?;
    Ok(EraStep {
        a,
        b,
        c,
        singular_values: now.singular_values,
        rank: now.rank,
    })
}

fn realize(
    now: &Factors,
    next: &Factors,
    n_r: usize,
    p: usize,
    ny: usize,
    nu: usize,
    k: usize,
) -> Result<(Matrix, Matrix, Matrix)> {
    let (o_now, _) = now.truncate(n_r);
    let (o_next, r_next) = next.truncate(n_r);
    let shifted = o_now.rows(ny, (p - 1) * ny).into_owned();
    let leading = o_next.rows(0, (p - 1) * ny).into_owned();
    let a = numerics::pseudo_inverse(&leading, numerics::DEFAULT_RANK_TOL)
        .map_err(|source| SysidError::Numerics { k, source })?
        * shifted;
    let b = r_next.columns(0, nu).into_owned();
    let c = o_now.rows(0, ny).into_owned();
    Ok((a, b, c))
}

/// Steps `start..=end` for which `Â_k`, `B̂_k` and `Ĉ_k` come straight from
/// Hankel data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidRange {
    pub start: usize,
    pub end: usize,
}

impl ValidRange {
    pub fn contains(&self, k: usize) -> bool {
        (self.start..=self.end).contains(&k)
    }
}

/// Identified perturbation model `δa_{k+1} = Â_k δa_k + B̂_k δu_k`,
/// `δy_k = Ĉ_k δa_k`, defined for every step of the horizon. Outside
/// `valid_range` the boundary dynamics are frozen and expressed in the basis
/// of the nearest identified step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtvRealization {
    pub order: usize,
    pub valid_range: ValidRange,
    /// `Â_k`, `k = 0..N`.
    #[serde(with = "serde_matrix::seq")]
    pub a: Vec<Matrix>,
    /// `B̂_k`, `k = 0..N`.
    #[serde(with = "serde_matrix::seq")]
    pub b: Vec<Matrix>,
    /// `Ĉ_k`, `k = 0..=N`.
    #[serde(with = "serde_matrix::seq")]
    pub c: Vec<Matrix>,
    /// Hankel spectrum per step, starting at `valid_range.start`.
    pub singular_values: Vec<Vec<f64>>,
    /// Numerical rank per step, aligned with `singular_values`.
    pub step_ranks: Vec<usize>,
}

impl LtvRealization {
    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn control_dim(&self) -> usize {
        self.b.first().map_or(0, Matrix::ncols)
    }

    pub fn output_dim(&self) -> usize {
        self.c.first().map_or(0, Matrix::nrows)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.len();
        let (nr, nu, ny) = (self.order, self.control_dim(), self.output_dim());
        if n == 0 || self.b.len() != n || self.c.len() != n + 1 {
            return Err(SysidError::Invalid("realization sequences have inconsistent lengths".into()));
        }
        if self.valid_range.start > self.valid_range.end || self.valid_range.end >= n {
            return Err(SysidError::Invalid("valid range lies outside the horizon".into()));
        }
        for k in 0..n {
            if self.a[k].shape() != (nr, nr) || self.b[k].shape() != (nr, nu) {
                return Err(SysidError::Invalid(format!("step {k} has inconsistent dimensions")));
            }
        }
        if self.c.iter().any(|c| c.shape() != (ny, nr)) {
            return Err(SysidError::Invalid("output maps have inconsistent dimensions".into()));
        }
        for (k, m) in self.a.iter().chain(&self.b).chain(&self.c).enumerate() {
            numerics::check_finite(m, "realization matrix").map_err(|source| SysidError::Numerics { k, source })?;
        }
        Ok(())
    }
}

/// Experiments, Markov estimation and ERA in one call.
pub fn identify_ltv(
    plant: &dyn Plant,
    controls: &ControlSequence,
    states: &StateTrajectory,
    cfg: &EraConfig,
) -> Result<LtvRealization> {
    cfg.validate(plant.state_dim(), plant.control_dim(), plant.output_dim())?;
    let data = impulse_experiments(plant, controls, states, cfg)?;
    let markov = estimate_markov(&data)?;
    realize_markov(&markov, cfg)
}

fn most_common(ranks: &[usize]) -> usize {
    let max = ranks.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max + 1];
    for &r in ranks {
        counts[r] += 1;
    }
    // ties go to the larger order
    (0..=max).max_by_key(|&r| counts[r]).unwrap_or(0)
}

/// `Ĉ_k⁺ Ĉ_{k+1}` maps basis `k+1` coordinates to basis `k`; falls back to the
/// identity when the output map loses column rank.
fn basis_change(c_k: &Matrix, c_next: &Matrix) -> Matrix {
    let n_r = c_k.ncols();
    match numerics::svd(c_k, numerics::DEFAULT_RANK_TOL) {
        Ok(svd) if svd.rank == n_r => match numerics::pseudo_inverse(c_k, numerics::DEFAULT_RANK_TOL) {
            Ok(pinv) => pinv * c_next,
            Err(_) => Matrix::identity(n_r, n_r),
        },
        _ => Matrix::identity(n_r, n_r),
    }
}

/// ERA over every step with full Hankel data, then extension to the whole
/// horizon.
pub fn realize_markov(markov: &MarkovParameterSet, cfg: &EraConfig) -> Result<LtvRealization> {
    let n = markov.horizon();
    let (ny, nu) = (markov.output_dim, markov.control_dim);
    let (p, q) = (cfg.p, cfg.q);
    if p < 2 || q < 1 || q + p > n {
        return Err(SysidError::Invalid(format!(
            "horizon {n} is too short for p = {p}, q = {q}"
        )));
    }
    let (start, end) = (q, n - p);
    // H_k for k in start..=end+1
    let factors: Vec<Factors> = (start..=end + 1)
        .into_par_iter()
        .map(|k| factor(&build_hankel(markov, k, p, q)?, k, cfg.rank_tol))
        .collect::<Result<_>>()?;
    let step_ranks: Vec<usize> = factors.iter().map(|f| f.rank).collect();
    let n_r = cfg.order.unwrap_or_else(|| most_common(&step_ranks));
    if n_r == 0 {
        return Err(SysidError::Degenerate { k: start });
    }
    if n_r > (p * ny).min(q * nu) {
        return Err(SysidError::Invalid(format!("order {n_r} exceeds the Hankel dimensions")));
    }

    let mut a = vec![Matrix::zeros(n_r, n_r); n];
    let mut b = vec![Matrix::zeros(n_r, nu); n];
    let mut c = vec![Matrix::zeros(ny, n_r); n + 1];
    for k in start..=end {
        let (ak, bk, ck) = realize(&factors[k - start], &factors[k - start + 1], n_r, p, ny, nu, k)?;
        a[k] = ak;
        b[k] = bk;
        c[k] = ck;
    }
    let (o_last, _) = factors[end + 1 - start].truncate(n_r);
    c[end + 1] = o_last.rows(0, ny).into_owned();
    // B̂_{start-1} from the reachability factor of H_start
    let (_, r_first) = factors[0].truncate(n_r);
    b[start - 1] = r_first.columns(0, nu).into_owned();

    let head = basis_change(&c[start], &c[start + 1]);
    let a_head = &head * &a[start];
    let b_head = &head * &b[start];
    for k in 0..start {
        a[k] = a_head.clone();
        if k + 1 < start {
            b[k] = b_head.clone();
        }
        c[k] = c[start].clone();
    }
    let tail = basis_change(&c[end], &c[end + 1]);
    let a_tail = &a[end] * &tail;
    for k in end + 1..n {
        a[k] = a_tail.clone();
        b[k] = b[end].clone();
        c[k + 1] = c[end + 1].clone();
    }

    let realization = LtvRealization {
        order: n_r,
        valid_range: ValidRange { start, end },
        a,
        b,
        c,
        singular_values: factors.into_iter().map(|f| f.singular_values).collect(),
        step_ranks,
    };
    realization.validate()?;
    Ok(realization)
}

/// `Ĉ_k Â_{k-1} ⋯ Â_{j+1} B̂_j` for `start ≤ j < k ≤ end` of the valid range.
pub fn reconstruct_markov(r: &LtvRealization, k: usize, j: usize) -> Result<Matrix> {
    if !(j < k && r.valid_range.contains(j) && r.valid_range.contains(k)) {
        return Err(SysidError::Boundary { k });
    }
    let mut prod = r.b[j].clone();
    for i in j + 1..k {
        prod = &r.a[i] * prod;
    }
    Ok(&r.c[k] * prod)
}

/// Measured against reconstructed `h_{k,j}` for every `j` in the valid range,
/// one CSV row per matrix entry.
pub fn write_markov_comparison<W: Write>(
    markov: &MarkovParameterSet,
    r: &LtvRealization,
    k: usize,
    out: W,
) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "j", "output", "input", "measured", "reconstructed"])?;
    for j in r.valid_range.start..k {
        let (Some(measured), Ok(rebuilt)) = (markov.get(k, j), reconstruct_markov(r, k, j)) else {
            continue;
        };
        for row in 0..measured.nrows() {
            for col in 0..measured.ncols() {
                w.write_record(&[
                    k.to_string(),
                    j.to_string(),
                    row.to_string(),
                    col.to_string(),
                    measured[(row, col)].to_string(),
                    rebuilt[(row, col)].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Relative L2 error between measured and reconstructed `h_{k,j}` over the
/// valid `j`, one value per output channel.
pub fn markov_relative_error(markov: &MarkovParameterSet, r: &LtvRealization, k: usize) -> Result<Vec<f64>> {
    let ny = markov.output_dim;
    let mut num = vec![0.0; ny];
    let mut den = vec![0.0; ny];
    for j in r.valid_range.start..k {
        let measured = markov.get(k, j).ok_or(SysidError::Boundary { k })?;
        let rebuilt = reconstruct_markov(r, k, j)?;
        for row in 0..ny {
            num[row] += (measured.row(row) - rebuilt.row(row)).norm_squared();
            den[row] += measured.row(row).norm_squared();
        }
    }
    Ok(num
        .iter()
        .zip(&den)
        .map(|(n, d)| if *d > 0.0 { (n / d).sqrt() } else { n.sqrt() })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{make_ltv_plant, random_ltv_plant, LtvPlant, SimRng};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    fn scalar_lti(a: f64, b: f64, c: f64) -> LtvPlant {
        make_ltv_plant(vec![scalar(a)], vec![scalar(b)], vec![scalar(c)]).unwrap()
    }

    fn nominal(plant: &dyn Plant, n: usize) -> (ControlSequence, StateTrajectory) {
        let u = ControlSequence((0..n).map(|k| Vector::from_element(plant.control_dim(), (k as f64 * 0.3).sin())).collect());
        let x0 = Vector::from_fn(plant.state_dim(), |i, _| 0.1 * (i as f64 + 1.0));
        let x = rollout(plant, &x0, &u).unwrap();
        (u, x)
    }

    fn cfg(p: usize, q: usize) -> EraConfig {
        EraConfig {
            p,
            q,
            rank_tol: 1e-8,
            ..EraConfig::default()
        }
    }

    fn oracle_markov(plant: &LtvPlant, n: usize) -> MarkovParameterSet {
        MarkovParameterSet::from_fn(n, plant.output_dim(), plant.control_dim(), |k, j| plant.markov_parameter(k, j)).unwrap()
    }

    fn random_oracle(seed: u64, n: usize) -> LtvPlant {
        random_ltv_plant(&mut SimRng::seed_from_u64(seed), 3, 1, 3, n, 0.9)
    }

    #[test]
    fn zero_amplitude_gives_no_response() {
        let plant = random_oracle(1, 8);
        let (u, x) = nominal(&plant, 8);
        let c = EraConfig {
            impulse_amplitude: 0.0,
            ..cfg(2, 3)
        };
        let data = impulse_experiments(&plant, &u, &x, &c).unwrap();
        assert!(data.experiments.iter().flat_map(|e| &e.output_deviation).all(|d| d.amax() == 0.0));
        assert!(matches!(estimate_markov(&data), Err(SysidError::IllConditioned { k: 1 })));
    }

    #[test]
    fn responses_match_matrix_products_and_are_causal() {
        let plant = random_oracle(2, 10);
        let (u, x) = nominal(&plant, 10);
        let data = impulse_experiments(&plant, &u, &x, &cfg(2, 3)).unwrap();
        assert_eq!(data.experiments.len(), 10);
        for e in &data.experiments {
            for (k, dy) in e.output_deviation.iter().enumerate() {
                if k <= e.step {
                    assert_eq!(dy.amax(), 0.0);
                } else {
                    let expected = plant.markov_parameter(k, e.step) * 0.01;
                    assert!((dy - expected.column(0)).amax() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn nominal_mismatch_is_rejected() {
        let plant = random_oracle(3, 5);
        let (u, mut x) = nominal(&plant, 5);
        x.0[3][0] += 1e-6;
        assert!(matches!(impulse_experiments(&plant, &u, &x, &cfg(2, 3)), Err(SysidError::Invalid(_))));
    }

    #[test]
    fn scalar_markov_parameters_are_geometric() {
        let plant = scalar_lti(0.9, 1.0, 1.0);
        let (u, x) = nominal(&plant, 12);
        let markov = estimate_markov(&impulse_experiments(&plant, &u, &x, &cfg(2, 2)).unwrap()).unwrap();
        for k in 1..=12 {
            assert!((markov.get(k, 0).unwrap()[(0, 0)] - 0.9f64.powi(k as i32 - 1)).abs() < 1e-9);
        }
        assert!(markov.get(3, 3).is_none());
    }

    #[test]
    fn amplitude_does_not_change_linear_estimates() {
        let plant = random_oracle(4, 10);
        let (u, x) = nominal(&plant, 10);
        let small = estimate_markov(&impulse_experiments(&plant, &u, &x, &cfg(2, 3)).unwrap()).unwrap();
        let c = EraConfig {
            impulse_amplitude: 0.02,
            ..cfg(2, 3)
        };
        let large = estimate_markov(&impulse_experiments(&plant, &u, &x, &c).unwrap()).unwrap();
        for k in 1..=10 {
            for j in 0..k {
                assert!((small.get(k, j).unwrap() - large.get(k, j).unwrap()).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn two_sided_impulses_match_on_linear_plants() {
        let plant = random_oracle(6, 10);
        let (u, x) = nominal(&plant, 10);
        let one = estimate_markov(&impulse_experiments(&plant, &u, &x, &cfg(2, 3)).unwrap()).unwrap();
        let c = EraConfig {
            two_sided: true,
            ..cfg(2, 3)
        };
        let two = estimate_markov(&impulse_experiments(&plant, &u, &x, &c).unwrap()).unwrap();
        for k in 1..=10 {
            for j in 0..k {
                assert!((one.get(k, j).unwrap() - two.get(k, j).unwrap()).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn two_sided_impulses_cancel_second_order_terms() {
        use crate::plant::{CartPole, PendulumParams};
        let plant = CartPole::new(PendulumParams::default()).unwrap();
        let n = 12;
        let u = ControlSequence((0..n).map(|k| Vector::from_element(1, 2.0 * (k as f64 * 0.7).sin())).collect());
        let x = rollout(&plant, &Vector::from_vec(vec![2.5, 0.0, 0.0, 0.0]), &u).unwrap();
        let estimate = |amplitude: f64, two_sided: bool| {
            let c = EraConfig {
                impulse_amplitude: amplitude,
                two_sided,
                ..cfg(2, 3)
            };
            estimate_markov(&impulse_experiments(&plant, &u, &x, &c).unwrap()).unwrap()
        };
        let spread = |a: &MarkovParameterSet, b: &MarkovParameterSet| {
            (1..=n)
                .flat_map(|k| (0..k).map(move |j| (k, j)))
                .map(|(k, j)| (a.get(k, j).unwrap() - b.get(k, j).unwrap()).amax())
                .fold(0.0, f64::max)
        };
        let one_sided = spread(&estimate(0.02, false), &estimate(0.01, false));
        let two_sided = spread(&estimate(0.02, true), &estimate(0.01, true));
        assert!(one_sided > 1e-6, "{one_sided}");
        assert!(two_sided < 0.05 * one_sided, "{two_sided} vs {one_sided}");
    }

    #[test]
    fn missing_experiment_names_the_step() {
        let plant = random_oracle(5, 6);
        let (u, x) = nominal(&plant, 6);
        let mut data = impulse_experiments(&plant, &u, &x, &cfg(2, 3)).unwrap();
        data.experiments.retain(|e| e.step != 2);
        assert!(matches!(estimate_markov(&data), Err(SysidError::IllConditioned { k: 3 })));
    }

    #[test]
    fn hankel_layout() {
        let plant = scalar_lti(0.5, 2.0, 3.0);
        let markov = oracle_markov(&plant, 6);
        let h11 = build_hankel(&markov, 3, 1, 1).unwrap();
        assert_eq!(h11, scalar(6.0));
        let (a, b, c) = (0.5, 2.0, 3.0);
        let h = build_hankel(&markov, 2, 2, 2).unwrap();
        let expected = Matrix::from_row_slice(2, 2, &[c * b, c * a * b, c * a * b, c * a * a * b]);
        assert!((h - expected).amax() < 1e-14);
        assert_eq!(numerics::svd(&build_hankel(&markov, 2, 2, 2).unwrap(), 1e-8).unwrap().rank, 1);
    }

    #[test]
    fn hankel_leading_block_is_cb() {
        let plant = random_oracle(6, 12);
        let markov = oracle_markov(&plant, 12);
        let h = build_hankel(&markov, 5, 3, 4).unwrap();
        assert_eq!(h.shape(), (9, 4));
        let cb = plant.c(5) * plant.b(4);
        assert!((h.view((0, 0), (3, 1)) - cb).amax() < 1e-14);
    }

    #[test]
    fn hankel_boundaries() {
        let markov = oracle_markov(&random_oracle(7, 10), 10);
        assert!(matches!(build_hankel(&markov, 2, 2, 3), Err(SysidError::Boundary { k: 2 })));
        assert!(matches!(build_hankel(&markov, 9, 3, 2), Err(SysidError::Boundary { k: 9 })));
        assert!(build_hankel(&markov, 8, 3, 2).is_ok());
    }

    #[test]
    fn scalar_era_reproduces_geometric_sequence() {
        let plant = scalar_lti(0.9, 1.0, 1.0);
        let markov = oracle_markov(&plant, 10);
        let h4 = build_hankel(&markov, 4, 2, 2).unwrap();
        let h5 = build_hankel(&markov, 5, 2, 2).unwrap();
        let step = era_step(&h4, &h5, 1, 1, &cfg(2, 2), None).unwrap();
        assert_eq!(step.rank, 1);
        for m in 0..6 {
            let h = (&step.c * step.a.pow(m as u32) * &step.b)[(0, 0)];
            assert!((h - 0.9f64.powi(m)).abs() < 1e-12, "m = {m}: {h}");
        }
    }

    #[test]
    fn era_rejects_rank_collapse() {
        let zero = Matrix::zeros(4, 2);
        assert!(matches!(era_step(&zero, &zero, 2, 1, &cfg(2, 2), None), Err(SysidError::Degenerate { .. })));
    }

    #[test]
    fn rank_one_hankel() {
        let u = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        let v = Vector::from_vec(vec![3.0, 1.0]);
        let h = &u * v.transpose();
        let step = era_step(&h, &h, 1, 1, &cfg(3, 2), None).unwrap();
        assert_eq!(step.rank, 1);
    }

    #[test]
    fn shifted_hankel_factors() {
        let plant = random_oracle(8, 16);
        let markov = oracle_markov(&plant, 16);
        let h = build_hankel(&markov, 6, 4, 4).unwrap();
        let f = factor(&h, 6, 1e-8).unwrap();
        assert_eq!(f.rank, 3);
        let (o, r) = f.truncate(3);
        let shifted = h.rows(3, 9).into_owned();
        assert!((shifted - o.rows(3, 9) * r).amax() < 1e-8);
    }

    #[test]
    fn oracle_realization_matches_markov_parameters() {
        let n = 30;
        let plant = random_oracle(9, n);
        let (u, x) = nominal(&plant, n);
        let r = identify_ltv(&plant, &u, &x, &cfg(4, 4)).unwrap();
        assert_eq!(r.order, 3);
        assert_eq!(r.valid_range, ValidRange { start: 4, end: 26 });
        assert_eq!(r.a.len(), n);
        assert_eq!(r.c.len(), n + 1);
        for k in 5..=26 {
            for j in 4..k {
                let err = (reconstruct_markov(&r, k, j).unwrap() - plant.markov_parameter(k, j)).amax();
                assert!(err < 1e-8, "h_{{{k},{j}}} off by {err}");
            }
        }
        assert!(reconstruct_markov(&r, 27, 10).is_err());
        assert!(reconstruct_markov(&r, 10, 3).is_err());
    }

    #[test]
    fn reconstruct_adjacent_is_cb() {
        let plant = random_oracle(10, 20);
        let markov = oracle_markov(&plant, 20);
        let r = realize_markov(&markov, &cfg(3, 3)).unwrap();
        let direct = &r.c[8] * &r.b[7];
        assert_eq!(reconstruct_markov(&r, 8, 7).unwrap(), direct);
    }

    #[test]
    fn spectra_are_sorted_and_split_by_rank() {
        let plant = random_oracle(11, 20);
        let markov = oracle_markov(&plant, 20);
        let c = cfg(3, 4);
        let r = realize_markov(&markov, &c).unwrap();
        assert_eq!(r.singular_values.len(), r.valid_range.end - r.valid_range.start + 2);
        for (sv, &rank) in r.singular_values.iter().zip(&r.step_ranks) {
            assert!(sv.windows(2).all(|w| w[0] >= w[1]));
            assert!(sv[..rank].iter().all(|&s| s > c.rank_tol * sv[0]));
            assert!(sv[rank..].iter().all(|&s| s <= c.rank_tol * sv[0]));
        }
    }

    #[test]
    fn modal_rank_prefers_larger_on_ties() {
        assert_eq!(most_common(&[2, 3, 3, 2, 4]), 3);
        assert_eq!(most_common(&[4, 4, 3, 3]), 4);
    }

    #[test]
    fn boundary_extension_keeps_io_behaviour_of_frozen_steps() {
        // time-invariant plant: the frozen extension is exact everywhere
        let a = Matrix::from_row_slice(2, 2, &[0.8, 0.2, -0.1, 0.7]);
        let b = Matrix::from_row_slice(2, 1, &[1.0, 0.5]);
        let c = Matrix::identity(2, 2);
        let plant = make_ltv_plant(vec![a], vec![b], vec![c]).unwrap();
        let markov = oracle_markov(&plant, 12);
        let r = realize_markov(&markov, &cfg(2, 2)).unwrap();
        for k in 1..=12 {
            for j in 0..k {
                let mut prod = r.b[j].clone();
                for i in j + 1..k {
                    prod = &r.a[i] * prod;
                }
                let err = (&r.c[k] * prod - plant.markov_parameter(k, j)).amax();
                assert!(err < 1e-9, "h_{{{k},{j}}} off by {err}");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(2, 3).validate(3, 1, 3).is_ok());
        assert!(cfg(2, 2).validate(3, 1, 3).is_err());
        assert!(cfg(1, 3).validate(3, 1, 3).is_err());
        let bad = EraConfig {
            impulse_amplitude: -1.0,
            ..cfg(2, 3)
        };
        assert!(bad.validate(3, 1, 3).is_err());
    }

    #[test]
    fn realization_json_round_trip() {
        let markov = oracle_markov(&random_oracle(12, 12), 12);
        let r = realize_markov(&markov, &cfg(3, 3)).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        let back: LtvRealization = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn comparison_csv_shape() {
        let markov = oracle_markov(&random_oracle(13, 12), 12);
        let r = realize_markov(&markov, &cfg(3, 3)).unwrap();
        let mut buf = Vec::new();
        write_markov_comparison(&markov, &r, 8, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        // j = 3..8, three outputs, one input
        assert_eq!(text.lines().count(), 1 + 5 * 3);
        let errs = markov_relative_error(&markov, &r, 8).unwrap();
        assert!(errs.iter().all(|&e| e < 1e-8));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn io_equivalence_on_random_oracles(seed in 0u64..10_000, p in 3usize..5, q in 3usize..5) {
            let n = 14;
            let plant = random_oracle(seed, n);
            let markov = oracle_markov(&plant, n);
            let r = realize_markov(&markov, &cfg(p, q)).unwrap();
            let ValidRange { start, end } = r.valid_range;
            for k in start + 1..=end {
                for j in start..k {
                    let truth = plant.markov_parameter(k, j);
                    let err = (reconstruct_markov(&r, k, j).unwrap() - &truth).amax();
                    prop_assert!(err < 1e-7 * truth.amax().max(1.0), "h_{{{},{}}} off by {}", k, j, err);
                }
            }
        }
    }
}
