//! The eligible-perturbation region: box bounds plus general inequality
//! (`g(y) <= 0`) and equality (`h(y) = 0`) maps, with a shared feasibility
//! slack `feas_tol`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::system::finite_difference_jacobian;

pub const DEFAULT_FEAS_TOL: f64 = 1e-8;

type VectorMap = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;

#[derive(Clone)]
struct ConstraintMap {
    len: usize,
    f: VectorMap,
}

impl ConstraintMap {
    fn eval(&self, y: &[f64], what: &str) -> Result<DVector<f64>> {
        let out = (self.f)(y);
        check_dim(self.len, out.len())?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteOutput(format!("{what} constraint map")));
        }
        Ok(out)
    }

    fn gradient(&self, y: &[f64], what: &str) -> Result<DMatrix<f64>> {
        let jac = finite_difference_jacobian(|x| (self.f)(x), y, self.len);
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteOutput(format!("{what} constraint gradient")));
        }
        Ok(jac)
    }
}

#[derive(Clone)]
pub struct ConstraintSet {
    lb: DVector<f64>,
    ub: DVector<f64>,
    ineq: Option<ConstraintMap>,
    eq: Option<ConstraintMap>,
    feas_tol: f64,
}

impl fmt::Debug for ConstraintSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConstraintSet")
            .field("lb", &self.lb.as_slice())
            .field("ub", &self.ub.as_slice())
            .field("inequalities", &self.ineq.as_ref().map_or(0, |g| g.len))
            .field("equalities", &self.eq.as_ref().map_or(0, |h| h.len))
            .field("feas_tol", &self.feas_tol)
            .finish()
    }
}

impl ConstraintSet {
    pub fn unconstrained(n: usize) -> Self {
        Self {
            lb: DVector::from_element(n, f64::NEG_INFINITY),
            ub: DVector::from_element(n, f64::INFINITY),
            ineq: None,
            eq: None,
            feas_tol: DEFAULT_FEAS_TOL,
        }
    }

    pub fn with_bounds(lb: Vec<f64>, ub: Vec<f64>) -> Result<Self> {
        check_dim(lb.len(), ub.len())?;
        for (i, (l, u)) in lb.iter().zip(&ub).enumerate() {
            if l.is_nan() || u.is_nan() || l > u || *l == f64::INFINITY || *u == f64::NEG_INFINITY {
                return Err(Error::InvalidParams(format!("bounds for component {i} are inconsistent: [{l}, {u}]")));
            }
        }
        Ok(Self {
            lb: DVector::from_vec(lb),
            ub: DVector::from_vec(ub),
            ineq: None,
            eq: None,
            feas_tol: DEFAULT_FEAS_TOL,
        })
    }

    /// Adds `g(y) <= 0` with `len` components.
    pub fn with_inequality<G>(mut self, len: usize, g: G) -> Self
    where
        G: Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
    {
        self.ineq = Some(ConstraintMap { len, f: Arc::new(g) });
        self
    }

    /// Adds `h(y) = 0` with `len` components.
    pub fn with_equality<H>(mut self, len: usize, h: H) -> Self
    where
        H: Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
    {
        self.eq = Some(ConstraintMap { len, f: Arc::new(h) });
        self
    }

    pub fn with_feas_tol(mut self, feas_tol: f64) -> Result<Self> {
        if !(feas_tol.is_finite() && feas_tol > 0.0) {
            return Err(Error::InvalidParams(format!("feas_tol must be positive, got {feas_tol}")));
        }
        self.feas_tol = feas_tol;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.lb.len()
    }

    pub fn lb(&self) -> &DVector<f64> {
        &self.lb
    }

    pub fn ub(&self) -> &DVector<f64> {
        &self.ub
    }

    pub fn feas_tol(&self) -> f64 {
        self.feas_tol
    }

    pub fn has_general_constraints(&self) -> bool {
        self.ineq.is_some() || self.eq.is_some()
    }

    /// Whether component `i` is frozen (`lb[i] == ub[i]`).
    pub fn is_frozen(&self, i: usize) -> bool {
        self.lb[i] == self.ub[i]
    }

    /// Largest constraint violation at `y` (0 when strictly eligible).
    pub fn violation(&self, y: &[f64]) -> Result<f64> {
        check_dim(self.dim(), y.len())?;
        let mut worst = 0.0f64;
        for ((v, lo), hi) in y.iter().zip(self.lb.iter()).zip(self.ub.iter()) {
            worst = worst.max(lo - v).max(v - hi);
        }
        if let Some(g) = &self.ineq {
            worst = g.eval(y, "inequality")?.iter().fold(worst, |w, &v| w.max(v));
        }
        if let Some(h) = &self.eq {
            worst = h.eval(y, "equality")?.iter().fold(worst, |w, &v| w.max(v.abs()));
        }
        Ok(worst)
    }

    pub fn is_eligible(&self, y: &[f64]) -> Result<bool> {
        self.is_eligible_with(y, self.feas_tol)
    }

    pub fn is_eligible_with(&self, y: &[f64], feas_tol: f64) -> Result<bool> {
        check_dim(self.dim(), y.len())?;
        let in_box = y.iter().enumerate().all(|(i, &v)| self.lb[i] - feas_tol <= v && v <= self.ub[i] + feas_tol);
        if !in_box {
            return Ok(false);
        }
        if let Some(g) = &self.ineq {
            if g.eval(y, "inequality")?.iter().any(|&v| v > feas_tol) {
                return Ok(false);
            }
        }
        if let Some(h) = &self.eq {
            if h.eval(y, "equality")?.iter().any(|&v| v.abs() > feas_tol) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// `max(feas_tol, 1e-3 * scale)`, with the scale taken from the largest
    /// inequality magnitude at `y` (at least 1).
    pub fn activation_band(&self, y: &[f64]) -> Result<f64> {
        let scale = match &self.ineq {
            Some(g) => g.eval(y, "inequality")?.iter().fold(1.0f64, |s, v| s.max(v.abs())),
            None => 1.0,
        };
        Ok(self.feas_tol.max(1e-3 * scale))
    }

    /// Local linear model of the region around `y`, expressed in terms of a
    /// displacement `delta` from `y`.
    pub fn linearize(&self, y: &[f64], activation_band: f64) -> Result<LinearizedConstraints> {
        let n = self.dim();
        check_dim(n, y.len())?;
        let yv = DVector::from_column_slice(y);
        let mut lin = LinearizedConstraints::unconstrained(n);
        lin.bound_lo = &self.lb - &yv;
        lin.bound_hi = &self.ub - &yv;
        lin.feas_tol = self.feas_tol;

        if let Some(g) = &self.ineq {
            let values = g.eval(y, "inequality")?;
            let active: Vec<usize> = (0..values.len()).filter(|&a| values[a] >= -activation_band).collect();
            if !active.is_empty() {
                let grads = g.gradient(y, "inequality")?;
                lin.ineq_normals = grads.select_rows(active.iter());
                lin.ineq_values = DVector::from_iterator(active.len(), active.iter().map(|&a| values[a]));
            }
        }
        if let Some(h) = &self.eq {
            lin.eq_values = h.eval(y, "equality")?;
            lin.eq_normals = h.gradient(y, "equality")?;
        }
        Ok(lin)
    }

    /// Pulls a slightly infeasible `y` back onto the region with minimum-norm
    /// Gauss-Newton corrections over the non-frozen components. Returns `None`
    /// if 20 corrections do not reach eligibility.
    pub fn restore(&self, y: &[f64]) -> Result<Option<DVector<f64>>> {
        let n = self.dim();
        check_dim(n, y.len())?;
        let free: Vec<usize> = (0..n).filter(|&i| !self.is_frozen(i)).collect();
        let mut x = DVector::from_column_slice(y);
        for _ in 0..20 {
            for i in 0..n {
                x[i] = x[i].clamp(self.lb[i], self.ub[i]);
            }
            if self.is_eligible(x.as_slice())? {
                return Ok(Some(x));
            }
            let lin = self.linearize(x.as_slice(), 0.0)?;
            let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
            for a in 0..lin.ineq_values.len() {
                if lin.ineq_values[a] > 0.0 {
                    rows.push((lin.ineq_normals.row(a).transpose(), lin.ineq_values[a]));
                }
            }
            for b in 0..lin.eq_values.len() {
                rows.push((lin.eq_normals.row(b).transpose(), lin.eq_values[b]));
            }
            if rows.is_empty() || free.is_empty() {
                return Ok(None);
            }
            let a = DMatrix::from_fn(rows.len(), free.len(), |r, c| rows[r].0[free[c]]);
            let c = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
            let step = match a.clone().svd(true, true).solve(&(-c), 1e-12) {
                Ok(s) => s,
                Err(_) => return Ok(None),
            };
            for (k, &i) in free.iter().enumerate() {
                x[i] += step[k];
            }
        }
        Ok(if self.is_eligible(x.as_slice())? { Some(x) } else { None })
    }
}

/// Linear model of the eligible region in displacement coordinates.
///
/// A displacement `delta` is locally feasible when
/// `bound_lo <= delta <= bound_hi`, `ineq_normals * delta <= -ineq_values`
/// and `eq_normals * delta = -eq_values`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizedConstraints {
    pub ineq_normals: DMatrix<f64>,
    pub ineq_values: DVector<f64>,
    pub eq_normals: DMatrix<f64>,
    pub eq_values: DVector<f64>,
    pub bound_lo: DVector<f64>,
    pub bound_hi: DVector<f64>,
    pub feas_tol: f64,
}

impl LinearizedConstraints {
    pub fn unconstrained(n: usize) -> Self {
        Self {
            ineq_normals: DMatrix::zeros(0, n),
            ineq_values: DVector::zeros(0),
            eq_normals: DMatrix::zeros(0, n),
            eq_values: DVector::zeros(0),
            bound_lo: DVector::from_element(n, f64::NEG_INFINITY),
            bound_hi: DVector::from_element(n, f64::INFINITY),
            feas_tol: DEFAULT_FEAS_TOL,
        }
    }

    pub fn with_box(bound_lo: DVector<f64>, bound_hi: DVector<f64>) -> Self {
        let n = bound_lo.len();
        Self { bound_lo, bound_hi, ..Self::unconstrained(n) }
    }

    pub fn dim(&self) -> usize {
        self.bound_lo.len()
    }

    /// Checks `delta` against every linear row and the box, within `feas_tol`.
    pub fn admits(&self, delta: &DVector<f64>) -> bool {
        let tol = self.feas_tol;
        let in_box = (0..delta.len()).all(|i| self.bound_lo[i] - tol <= delta[i] && delta[i] <= self.bound_hi[i] + tol);
        let ineq = (&self.ineq_normals * delta + &self.ineq_values).iter().all(|&v| v <= tol);
        let eq = (&self.eq_normals * delta + &self.eq_values).iter().all(|&v| v.abs() <= tol);
        in_box && ineq && eq
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const INF: f64 = f64::INFINITY;

    #[test]
    fn unconstrained_admits_everything() {
        let cs = ConstraintSet::unconstrained(3);
        assert!(cs.is_eligible(&[1e6, -3.0, 0.0]).unwrap());
    }

    #[test]
    fn frozen_component() {
        let y0 = [0.25, 1.0];
        let cs = ConstraintSet::with_bounds(vec![y0[0], -INF], vec![y0[0], INF]).unwrap();
        assert!(cs.is_eligible(&y0).unwrap());
        assert!(!cs.is_eligible(&[y0[0] + 1.0, 1.0]).unwrap());
        assert!(cs.is_frozen(0) && !cs.is_frozen(1));
    }

    #[test]
    fn linear_inequality_eligibility() {
        let cs = ConstraintSet::unconstrained(2)
            .with_inequality(1, |y| DVector::from_vec(vec![y[0] + y[1] - 1.0]))
            .with_feas_tol(1e-9)
            .unwrap();
        assert!(cs.is_eligible(&[0.4, 0.4]).unwrap());
        assert!(!cs.is_eligible(&[0.6, 0.6]).unwrap());
    }

    #[test]
    fn wrong_map_length_is_an_error() {
        let cs = ConstraintSet::unconstrained(2).with_equality(2, |y| DVector::from_vec(vec![y[0]]));
        assert!(matches!(cs.is_eligible(&[0.0, 0.0]), Err(Error::DimensionMismatch { .. })));
        assert!(ConstraintSet::unconstrained(2).is_eligible(&[0.0]).is_err());
    }

    #[test]
    fn bad_bounds_rejected() {
        assert!(ConstraintSet::with_bounds(vec![1.0], vec![0.0]).is_err());
        assert!(ConstraintSet::with_bounds(vec![f64::NAN], vec![0.0]).is_err());
        assert!(ConstraintSet::with_bounds(vec![0.0, 0.0], vec![1.0]).is_err());
    }

    #[test]
    fn box_translation() {
        let cs = ConstraintSet::with_bounds(vec![0.0, -INF], vec![2.0, INF]).unwrap();
        let lin = cs.linearize(&[0.5, 3.0], 1e-3).unwrap();
        assert_eq!(lin.bound_lo.as_slice(), &[-0.5, -INF]);
        assert_eq!(lin.bound_hi.as_slice(), &[1.5, INF]);
        assert_eq!(lin.ineq_normals.nrows(), 0);
        assert_eq!(lin.eq_normals.nrows(), 0);
    }

    #[test]
    fn near_active_circle_inequality() {
        let cs = ConstraintSet::unconstrained(2).with_inequality(1, |y| DVector::from_vec(vec![y[0] * y[0] - 1.0]));
        let lin = cs.linearize(&[0.999, 0.0], 0.01).unwrap();
        assert_eq!(lin.ineq_normals.nrows(), 1);
        assert!((lin.ineq_normals[(0, 0)] - 1.998).abs() < 1e-7);
        assert!(lin.ineq_normals[(0, 1)].abs() < 1e-12);
        assert!((lin.ineq_values[0] + 0.001999).abs() < 1e-12);
        // Far from active: dropped.
        let lin = cs.linearize(&[0.5, 0.0], 0.01).unwrap();
        assert_eq!(lin.ineq_normals.nrows(), 0);
    }

    #[test]
    fn equality_row() {
        let cs = ConstraintSet::unconstrained(2).with_equality(1, |y| DVector::from_vec(vec![y[0] - y[1]]));
        let lin = cs.linearize(&[1.0, 1.0], 1e-3).unwrap();
        assert!((lin.eq_normals[(0, 0)] - 1.0).abs() < 1e-9);
        assert!((lin.eq_normals[(0, 1)] + 1.0).abs() < 1e-9);
        assert_eq!(lin.eq_values[0], 0.0);
    }

    #[test]
    fn restore_onto_circle() {
        let cs = ConstraintSet::unconstrained(2)
            .with_equality(1, |y| DVector::from_vec(vec![y[0] * y[0] + y[1] * y[1] - 1.0]));
        let fixed = cs.restore(&[1.01, 0.05]).unwrap().unwrap();
        assert!(cs.is_eligible(fixed.as_slice()).unwrap());
        assert!((fixed.norm() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn activation_band_scales() {
        let cs = ConstraintSet::unconstrained(1).with_inequality(1, |y| DVector::from_vec(vec![y[0] - 50.0]));
        assert!((cs.activation_band(&[0.0]).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(ConstraintSet::unconstrained(1).activation_band(&[0.0]).unwrap(), 1e-3);
    }
}
