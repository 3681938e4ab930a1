//! Black-box plants.
//!
//! A [`Plant`] is only ever accessed through `step` and `observe`; the
//! optimizer and the identifier never see its equations. Noise is always an
//! explicit argument so every call is deterministic.

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, serde_matrix, Matrix, Vector};

/// Generator used for every noise stream in the crate.
pub type SimRng = ChaCha8Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("invalid plant definition: {0}")]
    Invalid(String),
    #[error("invalid covariance: {0}")]
    Covariance(String),
}

pub trait Plant: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// `x_{k+1} = f_k(x_k, u_k, w_k)`.
    fn step(&self, k: usize, state: &Vector, control: &Vector, process_noise: &Vector) -> Vector;

    /// `y_k = h_k(x_k, v_k)`.
    fn observe(&self, k: usize, state: &Vector, measurement_noise: &Vector) -> Vector;

    fn step_noiseless(&self, k: usize, state: &Vector, control: &Vector) -> Vector {
        self.step(k, state, control, &Vector::zeros(self.state_dim()))
    }

    fn observe_noiseless(&self, k: usize, state: &Vector) -> Vector {
        self.observe(k, state, &Vector::zeros(self.output_dim()))
    }
}

/// Process and measurement noise covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(with = "serde_matrix")]
    pub process_cov: Matrix,
    #[serde(with = "serde_matrix")]
    pub measurement_cov: Matrix,
}

impl NoiseSpec {
    pub fn new(process_cov: Matrix, measurement_cov: Matrix) -> Result<Self, PlantError> {
        let spec = Self {
            process_cov,
            measurement_cov,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn isotropic(state_dim: usize, output_dim: usize, process: f64, measurement: f64) -> Self {
        Self {
            process_cov: Matrix::identity(state_dim, state_dim) * process,
            measurement_cov: Matrix::identity(output_dim, output_dim) * measurement,
        }
    }

    pub fn zero(state_dim: usize, output_dim: usize) -> Self {
        Self::isotropic(state_dim, output_dim, 0.0, 0.0)
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        numerics::check_psd(&self.process_cov, "process covariance", 1e-12)
            .map_err(|e| PlantError::Covariance(e.to_string()))?;
        numerics::check_psd(&self.measurement_cov, "measurement covariance", 1e-12)
            .map_err(|e| PlantError::Covariance(e.to_string()))?;
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.process_cov.iter().all(|&v| v == 0.0) && self.measurement_cov.iter().all(|&v| v == 0.0)
    }
}

/// Zero-mean Gaussian sampler with a fixed covariance, drawing through the
/// symmetric square root `cov^{1/2}`.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    sqrt_cov: Matrix,
    zero: bool,
}

impl GaussianSampler {
    pub fn new(cov: &Matrix) -> Result<Self, PlantError> {
        numerics::check_psd(cov, "covariance", 1e-12)
            .map_err(|e| PlantError::Covariance(e.to_string()))?;
        let zero = cov.iter().all(|&v| v == 0.0);
        let sqrt_cov = if zero || cov.is_empty() {
            Matrix::zeros(cov.nrows(), cov.ncols())
        } else {
            let eig = SymmetricEigen::new(numerics::symmetrize(cov));
            let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
            &eig.eigenvectors * Matrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
        };
        Ok(Self { sqrt_cov, zero })
    }

    pub fn dim(&self) -> usize {
        self.sqrt_cov.nrows()
    }

    /// Draws one sample. A zero covariance still consumes `dim` normals so
    /// the stream position does not depend on the covariance.
    pub fn sample(&self, rng: &mut SimRng) -> Vector {
        let z = Vector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        if self.zero {
            Vector::zeros(self.dim())
        } else {
            &self.sqrt_cov * z
        }
    }
}

pub fn sample_gaussian(cov: &Matrix, rng: &mut SimRng) -> Result<Vector, PlantError> {
    Ok(GaussianSampler::new(cov)?.sample(rng))
}

/// One classical fourth-order Runge–Kutta step of `ẋ = f(x)` over `dt`.
pub fn rk4_step<const N: usize>(f: impl Fn(&[f64; N]) -> [f64; N], x: &[f64; N], dt: f64) -> [f64; N] {
    let offset = |base: &[f64; N], d: &[f64; N], h: f64| -> [f64; N] {
        std::array::from_fn(|i| base[i] + h * d[i])
    };
    let k1 = f(x);
    let k2 = f(&offset(x, &k1, 0.5 * dt));
    let k3 = f(&offset(x, &k2, 0.5 * dt));
    let k4 = f(&offset(x, &k3, dt));
    std::array::from_fn(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumParams {
    /// Cart mass `M` [kg].
    pub cart_mass: f64,
    /// Pole point mass `m` [kg].
    pub pole_mass: f64,
    /// Rod length `l` [m].
    pub rod_length: f64,
    pub gravity: f64,
    /// Discretization step [s].
    pub dt: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            cart_mass: 2.4,
            pole_mass: 0.23,
            rod_length: 0.36,
            gravity: 9.81,
            dt: 0.1,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<(), PlantError> {
        let all = [
            ("cart_mass", self.cart_mass),
            ("pole_mass", self.pole_mass),
            ("rod_length", self.rod_length),
            ("gravity", self.gravity),
            ("dt", self.dt),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v > 0.0) {
                return Err(PlantError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Continuous-time cart-pole dynamics for state `(θ, θ̇, x, ẋ)` with `θ`
/// measured from the upright vertical and `u` the horizontal force on the cart.
pub fn pendulum_derivatives(state: &[f64; 4], force: f64, p: &PendulumParams) -> [f64; 4] {
    let [theta, theta_dot, _, cart_vel] = *state;
    let (s, c) = theta.sin_cos();
    let (big_m, m, l, g) = (p.cart_mass, p.pole_mass, p.rod_length, p.gravity);
    let theta_acc = (force * c - (big_m + m) * g * s + m * l * c * s * theta_dot * theta_dot)
        / (m * l * c * c - (big_m + m) * l);
    let cart_acc =
        (force + m * l * s * theta_dot * theta_dot - m * g * c * s) / (big_m + m - m * c * c);
    [theta_dot, theta_acc, cart_vel, cart_acc]
}

/// Inverted pendulum on a cart, discretized with RK4 and zero-order hold on
/// the force. Process noise is added after integration; the plant is fully
/// observed, `y = x + v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPole {
    pub params: PendulumParams,
}

impl CartPole {
    pub fn new(params: PendulumParams) -> Result<Self, PlantError> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn discretize_step(&self, state: &[f64; 4], force: f64) -> [f64; 4] {
        rk4_step(
            |x| pendulum_derivatives(x, force, &self.params),
            state,
            self.params.dt,
        )
    }

    /// Total mechanical energy, conserved by the unforced dynamics.
    pub fn energy(&self, state: &[f64; 4]) -> f64 {
        let [theta, theta_dot, _, cart_vel] = *state;
        let p = &self.params;
        let m = p.pole_mass;
        let l = p.rod_length;
        0.5 * (p.cart_mass + m) * cart_vel * cart_vel
            + m * l * cart_vel * theta_dot * theta.cos()
            + 0.5 * m * l * l * theta_dot * theta_dot
            + m * p.gravity * l * theta.cos()
    }
}

impl Plant for CartPole {
    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn output_dim(&self) -> usize {
        4
    }

    fn step(&self, _k: usize, state: &Vector, control: &Vector, process_noise: &Vector) -> Vector {
        let x = [state[0], state[1], state[2], state[3]];
        let next = self.discretize_step(&x, control[0]);
        Vector::from_column_slice(&next) + process_noise
    }

    fn observe(&self, _k: usize, state: &Vector, measurement_noise: &Vector) -> Vector {
        state + measurement_noise
    }
}

/// Linear time-varying plant `x_{k+1} = A_k x_k + B_k u_k + w_k`,
/// `y_k = C_k x_k + v_k`. Indices past the end of a list reuse its last
/// entry, so a single-entry list describes a time-invariant plant.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvPlant {
    a: Vec<Matrix>,
    b: Vec<Matrix>,
    c: Vec<Matrix>,
}

pub fn make_ltv_plant(
    a_list: Vec<Matrix>,
    b_list: Vec<Matrix>,
    c_list: Vec<Matrix>,
) -> Result<LtvPlant, PlantError> {
    LtvPlant::new(a_list, b_list, c_list)
}

impl LtvPlant {
    pub fn new(a: Vec<Matrix>, b: Vec<Matrix>, c: Vec<Matrix>) -> Result<Self, PlantError> {
        if a.is_empty() || b.is_empty() || c.is_empty() {
            return Err(PlantError::Invalid("matrix sequences must be non-empty".into()));
        }
        if a.len() != b.len() {
            return Err(PlantError::Invalid(format!(
                "A has {} entries but B has {}",
                a.len(),
                b.len()
            )));
        }
        let nx = a[0].nrows();
        let nu = b[0].ncols();
        let ny = c[0].nrows();
        for (k, ak) in a.iter().enumerate() {
            if ak.shape() != (nx, nx) {
                return Err(PlantError::Invalid(format!("A_{k} is not {nx}x{nx}")));
            }
        }
        for (k, bk) in b.iter().enumerate() {
            if bk.shape() != (nx, nu) {
                return Err(PlantError::Invalid(format!("B_{k} is not {nx}x{nu}")));
            }
        }
        for (k, ck) in c.iter().enumerate() {
            if ck.shape() != (ny, nx) {
                return Err(PlantError::Invalid(format!("C_{k} is not {ny}x{nx}")));
            }
        }
        for m in a.iter().chain(&b).chain(&c) {
            numerics::check_finite(m, "plant matrix").map_err(|e| PlantError::Invalid(e.to_string()))?;
        }
        Ok(Self { a, b, c })
    }

    pub fn a(&self, k: usize) -> &Matrix {
        &self.a[k.min(self.a.len() - 1)]
    }

    pub fn b(&self, k: usize) -> &Matrix {
        &self.b[k.min(self.b.len() - 1)]
    }

    pub fn c(&self, k: usize) -> &Matrix {
        &self.c[k.min(self.c.len() - 1)]
    }

    /// Exact generalized Markov parameter `C_k A_{k-1} ⋯ A_{j+1} B_j` for `j < k`.
    pub fn markov_parameter(&self, k: usize, j: usize) -> Matrix {
        assert!(j < k, "Markov parameter needs j < k");
        let mut prod = self.b(j).clone();
        for i in j + 1..k {
            prod = self.a(i) * prod;
        }
        self.c(k) * prod
    }
}

/// Gaussian `A_k`, `B_k`, `C_k` with every `A_k` rescaled to spectral norm
/// `contraction`, so the plant is uniformly exponentially stable when
/// `contraction < 1`.
pub fn random_ltv_plant(
    rng: &mut SimRng,
    state_dim: usize,
    control_dim: usize,
    output_dim: usize,
    horizon: usize,
    contraction: f64,
) -> LtvPlant {
    let mut gaussian = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let steps = horizon.max(1);
    let a = (0..steps)
        .map(|_| {
            let m = gaussian(state_dim, state_dim);
            let norm = m.norm().max(f64::MIN_POSITIVE);
            let spectral = numerics::svd(&m, numerics::DEFAULT_RANK_TOL)
                .map(|s| s.singular_values[0])
                .unwrap_or(norm);
            m * (contraction / spectral)
        })
        .collect();
    let b = (0..steps).map(|_| gaussian(state_dim, control_dim)).collect();
    let c = (0..=steps).map(|_| gaussian(output_dim, state_dim)).collect();
    LtvPlant { a, b, c }
}

impl Plant for LtvPlant {
    fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    fn control_dim(&self) -> usize {
        self.b[0].ncols()
    }

    fn output_dim(&self) -> usize {
        self.c[0].nrows()
    }

    fn step(&self, k: usize, state: &Vector, control: &Vector, process_noise: &Vector) -> Vector {
        self.a(k) * state + self.b(k) * control + process_noise
    }

    fn observe(&self, k: usize, state: &Vector, measurement_noise: &Vector) -> Vector {
        self.c(k) * state + measurement_noise
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use std::f64::consts::PI;

    fn params() -> PendulumParams {
        PendulumParams::default()
    }

    #[test]
    fn default_params() {
        let p = params();
        assert_eq!(
            (p.cart_mass, p.pole_mass, p.rod_length, p.gravity, p.dt),
            (2.4, 0.23, 0.36, 9.81, 0.1)
        );
        assert!(p.validate().is_ok());
        let bad = PendulumParams { dt: 0.0, ..p };
        assert!(CartPole::new(bad).is_err());
    }

    #[test]
    fn equilibria_have_zero_derivative() {
        let d = pendulum_derivatives(&[0.0; 4], 0.0, &params());
        assert_eq!(d, [0.0; 4]);
        let d = pendulum_derivatives(&[PI, 0.0, 0.0, 0.0], 0.0, &params());
        assert!(d.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn downward_unit_force() {
        let p = params();
        let d = pendulum_derivatives(&[PI, 0.0, 0.0, 0.0], 1.0, &p);
        assert!(d[0].abs() < 1e-15);
        assert!((d[1] - 1.0 / (p.cart_mass * p.rod_length)).abs() < 1e-12);
        assert!(d[2].abs() < 1e-15);
        assert!((d[3] - 1.0 / p.cart_mass).abs() < 1e-12);
    }

    #[test]
    fn equilibrium_is_fixed_point_of_step() {
        let plant = CartPole::new(params()).unwrap();
        let x = Vector::zeros(4);
        let next = plant.step_noiseless(0, &x, &Vector::zeros(1));
        assert_eq!(next, x);
    }

    #[test]
    fn rk4_exponential_growth_factor() {
        let next = rk4_step(|x: &[f64; 1]| [x[0]], &[1.0], 0.1);
        assert!((next[0] - 1.105170918).abs() < 1e-7);
        // exact fourth-order Taylor polynomial of e^0.1
        let taylor = 1.0 + 0.1 + 0.01 / 2.0 + 0.001 / 6.0 + 0.0001 / 24.0;
        assert!((next[0] - taylor).abs() < 1e-15);
    }

    #[test]
    fn rk4_linear_system_matches_matrix_exponential() {
        let a = Matrix::from_row_slice(2, 2, &[0.0, 1.0, -4.0, -0.3]);
        let x0 = [0.7, -0.2];
        let f = |x: &[f64; 2]| {
            [
                a[(0, 0)] * x[0] + a[(0, 1)] * x[1],
                a[(1, 0)] * x[0] + a[(1, 1)] * x[1],
            ]
        };
        // expm(A dt) by a long Taylor series, independent of the integrator
        let expm = |dt: f64| {
            let mut term = Matrix::identity(2, 2);
            let mut sum = term.clone();
            for n in 1..40 {
                term = &term * &a * (dt / n as f64);
                sum += &term;
            }
            sum
        };
        let mut errors = Vec::new();
        for dt in [0.1, 0.05] {
            let rk = rk4_step(f, &x0, dt);
            let exact = expm(dt) * Vector::from_column_slice(&x0);
            errors.push(((rk[0] - exact[0]).powi(2) + (rk[1] - exact[1]).powi(2)).sqrt());
        }
        // local error is O(dt^5): halving dt shrinks it by ~32
        assert!(errors[0] < 1e-4);
        let ratio = errors[0] / errors[1];
        assert!(ratio > 25.0 && ratio < 40.0, "ratio {ratio}");
    }

    #[test]
    fn energy_drift_is_small() {
        let plant = CartPole::new(PendulumParams { dt: 0.01, ..params() }).unwrap();
        let mut x = [2.5, 1.0, 0.3, -0.4];
        let e0 = plant.energy(&x);
        for _ in 0..50 {
            x = plant.discretize_step(&x, 0.0);
        }
        assert!(((plant.energy(&x) - e0) / e0).abs() < 1e-4);
    }

    #[test]
    fn process_noise_is_added_after_integration() {
        let plant = CartPole::new(params()).unwrap();
        let x = Vector::from_vec(vec![2.0, 0.5, 0.1, 0.0]);
        let u = Vector::from_vec(vec![3.0]);
        let w = Vector::from_vec(vec![0.1, -0.2, 0.3, -0.4]);
        let clean = plant.step_noiseless(0, &x, &u);
        assert_eq!(plant.step(0, &x, &u, &w), clean + &w);
    }

    #[test]
    fn fully_observed_output() {
        let plant = CartPole::new(params()).unwrap();
        let x = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(plant.observe_noiseless(3, &x), x);
        let v = Vector::from_vec(vec![0.5; 4]);
        assert_eq!(plant.observe(3, &x, &v), &x + &v);
    }

    #[test]
    fn gaussian_zero_covariance() {
        let mut rng = SimRng::seed_from_u64(9);
        for _ in 0..10 {
            let s = sample_gaussian(&Matrix::zeros(3, 3), &mut rng).unwrap();
            assert_eq!(s, Vector::zeros(3));
        }
    }

    #[test]
    fn gaussian_sample_covariance() {
        let sampler = GaussianSampler::new(&Matrix::identity(2, 2)).unwrap();
        let mut rng = SimRng::seed_from_u64(11);
        let n = 100_000;
        let mut acc = Matrix::zeros(2, 2);
        let mut mean = Vector::zeros(2);
        for _ in 0..n {
            let s = sampler.sample(&mut rng);
            acc += &s * s.transpose();
            mean += s;
        }
        let cov = acc / n as f64;
        assert!((cov - Matrix::identity(2, 2)).amax() < 0.05);
        assert!((mean / n as f64).amax() < 0.02);
    }

    #[test]
    fn gaussian_correlated_covariance() {
        let target = Matrix::from_row_slice(2, 2, &[2.0, 0.8, 0.8, 0.5]);
        let sampler = GaussianSampler::new(&target).unwrap();
        let mut rng = SimRng::seed_from_u64(12);
        let n = 100_000;
        let mut acc = Matrix::zeros(2, 2);
        for _ in 0..n {
            let s = sampler.sample(&mut rng);
            acc += &s * s.transpose();
        }
        let cov = acc / n as f64;
        assert!(((cov - &target).amax() / target.amax()) < 0.05);
    }

    #[test]
    fn gaussian_is_deterministic_per_seed() {
        let cov = Matrix::identity(3, 3) * 0.01;
        let draw = |seed| {
            let mut rng = SimRng::seed_from_u64(seed);
            (0..5).map(|_| sample_gaussian(&cov, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
        assert_ne!(draw(42), draw(43));
    }

    #[test]
    fn gaussian_rejects_non_psd() {
        let cov = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(
            GaussianSampler::new(&cov),
            Err(PlantError::Covariance(_))
        ));
        let asym = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(GaussianSampler::new(&asym).is_err());
    }

    #[test]
    fn noise_spec_validation() {
        assert!(NoiseSpec::new(Matrix::identity(2, 2), Matrix::identity(1, 1)).is_ok());
        let bad = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, -1.0]));
        assert!(NoiseSpec::new(bad, Matrix::identity(1, 1)).is_err());
    }

    #[test]
    fn ltv_identity_dynamics_hold_state() {
        let plant = make_ltv_plant(
            vec![Matrix::identity(2, 2); 5],
            vec![Matrix::zeros(2, 1); 5],
            vec![Matrix::identity(2, 2); 6],
        )
        .unwrap();
        let mut x = Vector::from_vec(vec![1.5, -2.0]);
        let x0 = x.clone();
        for k in 0..5 {
            x = plant.step_noiseless(k, &x, &Vector::from_vec(vec![7.0]));
        }
        assert_eq!(x, x0);
    }

    #[test]
    fn ltv_scalar_impulse_response_is_geometric() {
        let m = |v: f64| Matrix::from_element(1, 1, v);
        let plant = make_ltv_plant(vec![m(0.9)], vec![m(1.0)], vec![m(1.0)]).unwrap();
        let mut x = Vector::zeros(1);
        let mut outputs = Vec::new();
        for k in 0..6 {
            let u = Vector::from_element(1, if k == 0 { 1.0 } else { 0.0 });
            x = plant.step_noiseless(k, &x, &u);
            outputs.push(plant.observe_noiseless(k + 1, &x)[0]);
        }
        for (i, y) in outputs.iter().enumerate() {
            assert!((y - 0.9f64.powi(i as i32)).abs() < 1e-15);
            assert!((plant.markov_parameter(i + 1, 0)[(0, 0)] - y).abs() < 1e-15);
        }
    }

    #[test]
    fn ltv_time_varying_markov_parameter_is_product() {
        let m = |v: f64| Matrix::from_element(1, 1, v);
        let a: Vec<_> = (0..8).map(|k| m(0.5 + 0.1 * k as f64)).collect();
        let plant = make_ltv_plant(a, vec![m(1.0); 8], vec![m(1.0); 9]).unwrap();
        // h_{6,2} = a_5 a_4 a_3
        let expected = (0.5 + 0.5) * (0.5 + 0.4) * (0.5 + 0.3);
        assert!((plant.markov_parameter(6, 2)[(0, 0)] - expected).abs() < 1e-15);
        assert_eq!(plant.markov_parameter(3, 2)[(0, 0)], 1.0);
    }

    #[test]
    fn ltv_dimension_mismatch() {
        let err = make_ltv_plant(
            vec![Matrix::identity(2, 2)],
            vec![Matrix::zeros(3, 1)],
            vec![Matrix::identity(2, 2)],
        );
        assert!(matches!(err, Err(PlantError::Invalid(_))));
        let err = make_ltv_plant(
            vec![Matrix::identity(2, 2); 2],
            vec![Matrix::zeros(2, 1)],
            vec![Matrix::identity(2, 2)],
        );
        assert!(err.is_err());
    }

    proptest! {
        #[test]
        fn mirror_symmetry(
            theta in -6.0f64..6.0,
            theta_dot in -5.0f64..5.0,
            pos in -2.0f64..2.0,
            vel in -3.0f64..3.0,
            u in -20.0f64..20.0,
        ) {
            let p = params();
            let d = pendulum_derivatives(&[theta, theta_dot, pos, vel], u, &p);
            let m = pendulum_derivatives(&[-theta, -theta_dot, -pos, -vel], -u, &p);
            for i in 0..4 {
                prop_assert!((d[i] + m[i]).abs() <= 1e-12 * (1.0 + d[i].abs()));
            }
        }
    }
}
