//! Dense linear-algebra kernel shared by identification and control.
//!
//! Everything here is a pure function on `nalgebra` dynamic matrices. The
//! SVD is the workhorse: rank decisions, pseudo-inverses and least squares
//! all go through [`svd`] with a relative rank tolerance.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative rank tolerance used when callers have no better information.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("singular matrix: {0}")]
    Singular(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Thin SVD with singular values sorted in descending order.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `rows × min(rows, cols)`, orthonormal columns.
    pub left: Matrix,
    pub singular_values: Vec<f64>,
    /// `cols × min(rows, cols)`, orthonormal columns.
    pub right: Matrix,
    /// Number of singular values strictly above `rank_tol · σ_max`.
    pub rank: usize,
}

impl SvdResult {
    /// `left · diag(σ) · rightᵀ` restricted to the leading `order` triplets.
    pub fn reconstruct(&self, order: usize) -> Matrix {
        let order = order.min(self.singular_values.len());
        let u = self.left.columns(0, order);
        let v = self.right.columns(0, order);
        let s = Matrix::from_diagonal(&Vector::from_column_slice(
            &self.singular_values[..order],
        ));
        u * s * v.transpose()
    }
}

pub fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::InvalidInput(format!(
            "{what} contains non-finite entries"
        )))
    }
}

pub fn svd(m: &Matrix, rank_tol: f64) -> Result<SvdResult> {
    check_finite(m, "svd operand")?;
    if !(rank_tol >= 0.0) {
        return Err(NumericsError::InvalidInput(format!(
            "rank tolerance must be non-negative, got {rank_tol}"
        )));
    }
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Ok(SvdResult {
            left: Matrix::zeros(rows, 0),
            singular_values: Vec::new(),
            right: Matrix::zeros(cols, 0),
            rank: 0,
        });
    }

    let decomposition = m.clone().svd(true, true);
    let u = decomposition.u.expect("left singular vectors requested");
    let v_t = decomposition.v_t.expect("right singular vectors requested");
    let sigma = decomposition.singular_values;

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));

    let mut left = Matrix::zeros(rows, k);
    let mut right = Matrix::zeros(cols, k);
    let mut singular_values = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        left.set_column(dst, &u.column(src));
        right.set_column(dst, &v_t.row(src).transpose());
        singular_values.push(sigma[src].max(0.0));
    }

    let sigma_max = singular_values[0];
    let rank = if sigma_max > 0.0 {
        singular_values
            .iter()
            .filter(|&&s| s > rank_tol * sigma_max)
            .count()
    } else {
        0
    };

    Ok(SvdResult {
        left,
        singular_values,
        right,
        rank,
    })
}

/// Moore–Penrose pseudo-inverse, discarding singular values at or below
/// `rank_tol · σ_max`.
pub fn pseudo_inverse(m: &Matrix, rank_tol: f64) -> Result<Matrix> {
    let decomposition = svd(m, rank_tol)?;
    let (rows, cols) = m.shape();
    let mut pinv = Matrix::zeros(cols, rows);
    for i in 0..decomposition.rank {
        let inv = 1.0 / decomposition.singular_values[i];
        pinv += decomposition.right.column(i)
            * decomposition.left.column(i).transpose()
            * inv;
    }
    Ok(pinv)
}

/// Minimum-norm `X` minimizing `‖X·coeff − rhs‖_F`, i.e. `X = rhs · coeff⁺`.
///
/// The row form matches how stacked experiment data is laid out: each column
/// of `coeff` and `rhs` is one experiment.
pub fn solve_least_squares(coeff: &Matrix, rhs: &Matrix, rank_tol: f64) -> Result<Matrix> {
    if coeff.ncols() != rhs.ncols() {
        return Err(NumericsError::InvalidInput(format!(
            "least squares shape mismatch: coeff is {}x{}, rhs is {}x{}",
            coeff.nrows(),
            coeff.ncols(),
            rhs.nrows(),
            rhs.ncols()
        )));
    }
    check_finite(rhs, "least squares right-hand side")?;
    Ok(rhs * pseudo_inverse(coeff, rank_tol)?)
}

/// Solves `a·X = b` for symmetric positive definite `a` by Cholesky.
///
/// `a` is symmetrized first; a failed factorization is reported as
/// [`NumericsError::Singular`].
pub fn symmetric_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !a.is_square() || a.nrows() != b.nrows() {
        return Err(NumericsError::InvalidInput(format!(
            "symmetric solve shape mismatch: a is {}x{}, b is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    check_finite(a, "symmetric solve matrix")?;
    check_finite(b, "symmetric solve right-hand side")?;
    let sym = symmetrize(a);
    match sym.cholesky() {
        Some(chol) => Ok(chol.solve(b)),
        None => Err(NumericsError::Singular(
            "matrix is not positive definite".into(),
        )),
    }
}

pub fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_eigenvalue(a: &Matrix) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    symmetrize(a)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Largest absolute entry of `a − aᵀ`.
pub fn symmetry_residual(a: &Matrix) -> f64 {
    (a - a.transpose()).amax()
}

/// Checks symmetry to `1e-12` (relative to the largest entry) and `λ_min ≥ −tol`.
pub fn check_psd(a: &Matrix, what: &str, tol: f64) -> Result<()> {
    if !a.is_square() {
        return Err(NumericsError::InvalidInput(format!("{what} must be square")));
    }
    check_finite(a, what)?;
    let scale = a.amax().max(1.0);
    if symmetry_residual(a) > 1e-12 * scale {
        return Err(NumericsError::InvalidInput(format!("{what} is not symmetric")));
    }
    if min_eigenvalue(a) < -tol * scale {
        return Err(NumericsError::InvalidInput(format!(
            "{what} is not positive semidefinite"
        )));
    }
    Ok(())
}

pub fn check_pd(a: &Matrix, what: &str) -> Result<()> {
    check_psd(a, what, 0.0)?;
    if symmetrize(a).cholesky().is_none() {
        return Err(NumericsError::InvalidInput(format!(
            "{what} is not positive definite"
        )));
    }
    Ok(())
}

/// Row-major `Vec<Vec<f64>>` (de)serialization for matrices, so documents
/// read naturally and do not depend on nalgebra's storage layout.
pub mod serde_matrix {
    use super::Matrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix, String> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged matrix rows".into());
        }
        Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }

    pub mod seq {
        use super::*;

        pub fn serialize<S: Serializer>(ms: &[Matrix], s: S) -> Result<S::Ok, S::Error> {
            ms.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Matrix>, D::Error> {
            let all = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
            all.iter()
                .map(|rows| from_rows(rows).map_err(D::Error::custom))
                .collect()
        }
    }
}

/// Plain `Vec<f64>` (de)serialization for vectors.
pub mod serde_vector {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }

    pub mod seq {
        use super::*;

        pub fn serialize<S: Serializer>(vs: &[Vector], s: S) -> Result<S::Ok, S::Error> {
            vs.iter()
                .map(|v| v.as_slice().to_vec())
                .collect::<Vec<_>>()
                .serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vector>, D::Error> {
            Ok(Vec::<Vec<f64>>::deserialize(d)?
                .into_iter()
                .map(Vector::from_vec)
                .collect())
        }
    }
}
