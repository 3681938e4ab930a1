//! Time-varying LQG on an identified realization: a backward Riccati sweep
//! for the feedback gains, a forward Riccati sweep for the Kalman gains, and
//! the observer that tracks the reduced deviation state `δâ`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, serde_matrix, Matrix, Vector};
use crate::plant::NoiseSpec;
use crate::sysid::LtvRealization;
use crate::trajopt::CostSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LqgError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("Riccati recursion broke down at step {k}: B̂ᵀSB̂ + R is singular")]
    RiccatiBreakdown { k: usize },
    #[error("Kalman filter broke down at step {k}: innovation covariance is singular")]
    FilterBreakdown { k: usize },
}

pub type Result<T> = std::result::Result<T, LqgError>;

/// Cost weights in realization coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedCostSpec {
    #[serde(with = "serde_matrix::seq")]
    pub state_weights: Vec<Matrix>,
    #[serde(with = "serde_matrix::seq")]
    pub control_weights: Vec<Matrix>,
    #[serde(with = "serde_matrix")]
    pub terminal_weight: Matrix,
}

impl ReducedCostSpec {
    pub fn horizon(&self) -> usize {
        self.state_weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.control_weights.len() != self.state_weights.len() {
            return Err(LqgError::Invalid("state and control weight counts differ".into()));
        }
        let invalid = |e: numerics::NumericsError| LqgError::Invalid(e.to_string());
        for (k, q) in self.state_weights.iter().enumerate() {
            numerics::check_psd(q, &format!("Qr_{k}"), 1e-10).map_err(invalid)?;
        }
        for (k, r) in self.control_weights.iter().enumerate() {
            numerics::check_pd(r, &format!("R_{k}")).map_err(invalid)?;
        }
        numerics::check_psd(&self.terminal_weight, "Qr_N", 1e-10).map_err(invalid)?;
        Ok(())
    }
}

/// `Qr_k = Ĉ_kᵀ Q_k Ĉ_k`; control weights are unchanged.
pub fn project_cost(cost: &CostSpec, r: &LtvRealization) -> Result<ReducedCostSpec> {
    let n = cost.horizon();
    if r.horizon() != n {
        return Err(LqgError::Invalid(format!(
            "cost horizon {n} differs from realization horizon {}",
            r.horizon()
        )));
    }
    if r.output_dim() != cost.state_dim() || r.control_dim() != cost.control_dim() {
        return Err(LqgError::Invalid("cost dimensions do not match the realization".into()));
    }
    let project = |c: &Matrix, q: &Matrix| numerics::symmetrize(&(c.transpose() * q * c));
    Ok(ReducedCostSpec {
        state_weights: (0..n).map(|k| project(&r.c[k], &cost.state_weights[k])).collect(),
        control_weights: cost.control_weights.clone(),
        terminal_weight: project(&r.c[n], &cost.terminal_weight),
    })
}

/// Backward sweep from `S_N = Qr_N`:
/// `L_k = (B̂ᵀS_{k+1}B̂ + R_k)⁻¹ B̂ᵀS_{k+1}Â`,
/// `S_k = Qr_k + ÂᵀS_{k+1}Â − ÂᵀS_{k+1}B̂ L_k`.
/// Returns `L_0..L_{N-1}` and `S_0..S_N`.
pub fn riccati_backward(r: &LtvRealization, cost: &ReducedCostSpec) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let n = r.horizon();
    if cost.horizon() != n {
        return Err(LqgError::Invalid("cost and realization horizons differ".into()));
    }
    cost.validate()?;
    let nr = r.order;
    if cost.terminal_weight.shape() != (nr, nr) {
        return Err(LqgError::Invalid(format!("terminal weight must be {nr}x{nr}")));
    }
    let mut s = vec![Matrix::zeros(nr, nr); n + 1];
    let mut l = vec![Matrix::zeros(r.control_dim(), nr); n];
    s[n] = numerics::symmetrize(&cost.terminal_weight);
    for k in (0..n).rev() {
        let (a, b) = (&r.a[k], &r.b[k]);
        let sb = &s[k + 1] * b;
        let gram = b.transpose() * &sb + &cost.control_weights[k];
        let rhs = sb.transpose() * a;
        l[k] = numerics::symmetric_solve(&gram, &rhs).map_err(|_| LqgError::RiccatiBreakdown { k })?;
        let next = &cost.state_weights[k] + a.transpose() * &s[k + 1] * a - a.transpose() * &sb * &l[k];
        s[k] = numerics::symmetrize(&next);
    }
    Ok((l, s))
}

/// Forward sweep from `P_0`:
/// `K_k = P_k Ĉ_kᵀ (Ĉ_k P_k Ĉ_kᵀ + V)⁻¹`,
/// `P_{k+1} = Â_k (P_k − K_k Ĉ_k P_k) Â_kᵀ + W`, with the process noise
/// entering the realization through the identity. Returns `K_0..K_N` and
/// `P_0..P_N`.
pub fn kalman_forward(r: &LtvRealization, noise: &NoiseSpec, p0: &Matrix) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let n = r.horizon();
    let (nr, ny) = (r.order, r.output_dim());
    if noise.process_cov.shape() != (nr, nr) {
        return Err(LqgError::Invalid(format!(
            "process noise must be {nr}x{nr} to enter the order-{nr} realization, got {}x{}",
            noise.process_cov.nrows(),
            noise.process_cov.ncols()
        )));
    }
    if noise.measurement_cov.shape() != (ny, ny) {
        return Err(LqgError::Invalid(format!("measurement noise must be {ny}x{ny}")));
    }
    if p0.shape() != (nr, nr) {
        return Err(LqgError::Invalid(format!("P0 must be {nr}x{nr}")));
    }
    numerics::check_psd(p0, "P0", 1e-12).map_err(|e| LqgError::Invalid(e.to_string()))?;
    noise.validate().map_err(|e| LqgError::Invalid(e.to_string()))?;

    let mut p = Vec::with_capacity(n + 1);
    let mut gains = Vec::with_capacity(n + 1);
    let mut cov = numerics::symmetrize(p0);
    for k in 0..=n {
        let c = &r.c[k];
        let pct = &cov * c.transpose();
        let innovation = c * &pct + &noise.measurement_cov;
        let gain = numerics::symmetric_solve(&innovation, &pct.transpose())
            .map_err(|_| LqgError::FilterBreakdown { k })?
            .transpose();
        if k < n {
            let a = &r.a[k];
            let updated = &cov - &gain * c * &cov;
            let next = numerics::symmetrize(&(a * updated * a.transpose() + &noise.process_cov));
            p.push(std::mem::replace(&mut cov, next));
        } else {
            p.push(cov.clone());
        }
        gains.push(gain);
    }
    Ok((gains, p))
}

/// `δâ_{k+1} = Â_kδâ_k + B̂_kδu_k + K_{k+1}(δy_{k+1} − Ĉ_{k+1}(Â_kδâ_k + B̂_kδu_k))`.
pub fn observer_step(
    r: &LtvRealization,
    k: usize,
    a_hat: &Vector,
    du: &Vector,
    dy_next: &Vector,
    gain_next: &Matrix,
) -> Vector {
    let predicted = &r.a[k] * a_hat + &r.b[k] * du;
    let innovation = dy_next - &r.c[k + 1] * &predicted;
    predicted + gain_next * innovation
}

/// `u_k = ū_k − L_k δâ_k`.
pub fn feedback(gain: &Matrix, a_hat: &Vector, u_bar: &Vector) -> Vector {
    u_bar - gain * a_hat
}

/// Feedback and filter gains for one realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqgGains {
    /// `L_0..L_{N-1}`.
    #[serde(with = "serde_matrix::seq")]
    pub feedback: Vec<Matrix>,
    /// `S_0..S_N`.
    #[serde(with = "serde_matrix::seq")]
    pub cost_to_go: Vec<Matrix>,
    /// `K_0..K_N`.
    #[serde(with = "serde_matrix::seq")]
    pub kalman: Vec<Matrix>,
    /// `P_0..P_N`.
    #[serde(with = "serde_matrix::seq")]
    pub covariance: Vec<Matrix>,
}

impl LqgGains {
    pub fn horizon(&self) -> usize {
        self.feedback.len()
    }

    /// Checks lengths and that every `S_k`, `P_k` is symmetric PSD.
    pub fn validate(&self) -> Result<()> {
        let n = self.feedback.len();
        if self.cost_to_go.len() != n + 1 || self.kalman.len() != n + 1 || self.covariance.len() != n + 1 {
            return Err(LqgError::Invalid("gain sequences have inconsistent lengths".into()));
        }
        for (k, m) in self.cost_to_go.iter().chain(&self.covariance).enumerate() {
            let scale = m.amax().max(1.0);
            if numerics::symmetry_residual(m) > 1e-12 * scale || numerics::min_eigenvalue(m) < -1e-10 * scale {
                return Err(LqgError::Invalid(format!("matrix {k} of the Riccati sequences is not symmetric PSD")));
            }
        }
        Ok(())
    }
}

/// Projects the cost, then runs both Riccati sweeps.
pub fn design_lqg(r: &LtvRealization, cost: &CostSpec, noise: &NoiseSpec, p0: &Matrix) -> Result<LqgGains> {
    let reduced = project_cost(cost, r)?;
    let (feedback, cost_to_go) = riccati_backward(r, &reduced)?;
    let (kalman, covariance) = kalman_forward(r, noise, p0)?;
    Ok(LqgGains {
        feedback,
        cost_to_go,
        kalman,
        covariance,
    })
}
