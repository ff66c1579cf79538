//! Autonomous ODE systems and Jacobian access.
//!
//! A [`System`] supplies the right-hand side `F(y)` of `y' = F(y)`. There is
//! no time argument: autonomy holds by construction. Non-autonomous problems
//! must be reduced by the caller (append a clock variable with derivative 1).
//!
//! The Jacobian comes from [`System::analytic_jacobian`] when a model
//! provides one, otherwise from central finite differences.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Instantaneous state of a system. Every component is finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SystemState(DVector<f64>);

impl SystemState {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        Self::from_vector(DVector::from_vec(values))
    }

    pub fn from_vector(values: DVector<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParams("state must have at least one component".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteOutput(format!("state component {i}")));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.as_slice().to_vec()
    }
}

impl Deref for SystemState {
    type Target = DVector<f64>;

    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for SystemState {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<SystemState> for Vec<f64> {
    fn from(s: SystemState) -> Vec<f64> {
        s.to_vec()
    }
}

/// An autonomous dynamical system `y' = F(y)`.
///
/// Implementations must be pure: identical inputs give bitwise-identical
/// outputs, and nothing depends on time or hidden mutable state.
pub trait System: Send + Sync {
    fn name(&self) -> &str;

    fn dimension(&self) -> usize;

    /// Fixed model parameters, in model-defined order.
    fn params(&self) -> Vec<f64> {
        Vec::new()
    }

    /// Writes `F(y)` into `dy`. Both slices have length `dimension()`.
    fn rhs(&self, y: &[f64], dy: &mut [f64]);

    /// `J[i][j] = dF_i/dy_j`, when the model knows it in closed form.
    fn analytic_jacobian(&self, _y: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    /// Writes `J(y) * m` into `out` for models with structure worth
    /// exploiting (sparse coupling). Returning `false` falls back to forming
    /// `J` densely.
    fn jacobian_product(&self, _y: &[f64], _m: &DMatrix<f64>, _out: &mut DMatrix<f64>) -> bool {
        false
    }
}

/// Evaluates `F(y)`, checking dimensions and finiteness of the result.
pub fn evaluate_rhs(system: &dyn System, y: &[f64]) -> Result<DVector<f64>> {
    check_dim(system.dimension(), y.len())?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("state passed to rhs"));
    }
    let mut dy = DVector::zeros(y.len());
    system.rhs(y, dy.as_mut_slice());
    if dy.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteOutput(format!("rhs of `{}`", system.name())));
    }
    Ok(dy)
}

/// Jacobian of `F` at `y`: analytic if available, central differences otherwise.
pub fn jacobian(system: &dyn System, y: &[f64]) -> Result<DMatrix<f64>> {
    check_dim(system.dimension(), y.len())?;
    let jac = match system.analytic_jacobian(y) {
        Some(j) => {
            if j.nrows() != y.len() || j.ncols() != y.len() {
                return Err(Error::DimensionMismatch { expected: y.len(), got: j.nrows().max(j.ncols()) });
            }
            j
        }
        None => numerical_jacobian(system, y),
    };
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteOutput(format!("Jacobian of `{}`", system.name())));
    }
    Ok(jac)
}

/// Central-difference Jacobian of `F`, ignoring any analytic form.
pub fn numerical_jacobian(system: &dyn System, y: &[f64]) -> DMatrix<f64> {
    let n = system.dimension();
    finite_difference_jacobian(
        |x| {
            let mut out = DVector::zeros(n);
            system.rhs(x, out.as_mut_slice());
            out
        },
        y,
        n,
    )
}

/// Central differences of an arbitrary vector map with `rows` outputs.
///
/// Step for column `j` is `sqrt(eps) * max(1, |y_j|)`, rounded so that
/// `y_j + h` and `y_j - h` are exactly representable offsets.
pub fn finite_difference_jacobian<F>(f: F, y: &[f64], rows: usize) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> DVector<f64>,
{
    let n = y.len();
    let mut jac = DMatrix::zeros(rows, n);
    let mut probe = y.to_vec();
    let base = f64::EPSILON.sqrt();
    for j in 0..n {
        let h = base * y[j].abs().max(1.0);
        let hi = y[j] + h;
        let lo = y[j] - h;
        probe[j] = hi;
        let f_hi = f(&probe);
        probe[j] = lo;
        let f_lo = f(&probe);
        probe[j] = y[j];
        let width = hi - lo;
        for i in 0..rows {
            jac[(i, j)] = (f_hi[i] - f_lo[i]) / width;
        }
    }
    jac
}
