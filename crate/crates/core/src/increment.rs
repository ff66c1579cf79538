//! Per-iteration perturbation subproblem.
//!
//! Given the residual `d = y(t*) - yt` at the forecast closest approach and
//! the fundamental matrix `M = M(t*)`, find a displacement `delta` of the
//! initial state minimizing `||d + M delta||` subject to
//!
//! * the linearized box, inequality and equality rows,
//! * `||delta|| <= eps1` (size at the initial time),
//! * `||M delta|| <= eps1` (size at the closest approach).
//!
//! Frozen components (`bound_lo == bound_hi`) are eliminated before the
//! solve, so they are exact in the result. The remaining problem is solved by
//! projected gradient with step `1/L` (`L` the largest eigenvalue of
//! `M^T M`) and Nesterov momentum with function-value restart. Projection onto
//! the intersection uses Dykstra's cyclic scheme over the sets in the fixed
//! order box, inequalities, equalities, ball, image ball.
//!
//! If the minimizer is shorter than `eps0` it is stretched to length `eps0`
//! and projected back onto everything except the image ball: the floor is a
//! size at the initial time and takes precedence over the forecast cap. A
//! step that cannot be made at least `eps0` long is reported as
//! [`IncrementStatus::Stalled`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::constraints::LinearizedConstraints;
use crate::error::{check_dim, Error, Result};

const MAX_OUTER: usize = 500;
const MAX_PROJECTION_ROUNDS: usize = 200;
const MAX_FLOOR_ROUNDS: usize = 50;
/// Relative slack on the eps0/eps1 window.
pub const SIZE_REL_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug)]
pub struct IncrementProblem<'a> {
    pub residual: &'a DVector<f64>,
    pub forecast: &'a DMatrix<f64>,
    pub constraints: &'a LinearizedConstraints,
    pub eps0: f64,
    pub eps1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum IncrementStatus {
    Ok,
    Stalled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IncrementSolution {
    pub delta: DVector<f64>,
    /// `||d + M delta||` for the returned `delta`.
    pub forecast_residual_norm: f64,
    pub status: IncrementStatus,
    /// `||d + M delta*||` at the constrained minimizer, before any eps0 stretch.
    pub minimizer_residual_norm: f64,
    /// `||delta*||` before any eps0 stretch.
    pub minimizer_norm: f64,
    /// `||d||`.
    pub initial_residual_norm: f64,
    pub rescaled: bool,
    pub iterations: usize,
}

struct Ellipsoid {
    basis: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    radius: f64,
}

impl Ellipsoid {
    fn image_norm_sq(&self, w: &DVector<f64>) -> f64 {
        w.iter().zip(self.eigenvalues.iter()).map(|(wi, si)| si * wi * wi).sum()
    }

    /// Euclidean projection onto `{x : x^T (V S V^T) x <= r^2}`.
    fn project(&self, z: &DVector<f64>) -> DVector<f64> {
        let w = self.basis.tr_mul(z);
        let r2 = self.radius * self.radius;
        if self.image_norm_sq(&w) <= r2 {
            return z.clone();
        }
        let phi = |lambda: f64| -> f64 {
            w.iter()
                .zip(self.eigenvalues.iter())
                .map(|(wi, si)| {
                    let q = wi / (1.0 + lambda * si);
                    si * q * q
                })
                .sum()
        };
        let mut hi = 1.0;
        while phi(hi) > r2 {
            hi *= 2.0;
            if hi > 1e300 {
                break;
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if phi(mid) > r2 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let shrunk =
            DVector::from_iterator(w.len(), w.iter().zip(self.eigenvalues.iter()).map(|(wi, si)| wi / (1.0 + hi * si)));
        &self.basis * shrunk
    }

    fn contains(&self, x: &DVector<f64>, slack: f64) -> bool {
        self.image_norm_sq(&self.basis.tr_mul(x)).sqrt() <= self.radius * (1.0 + slack)
    }
}

/// A half-space `a . x <= b` or hyperplane `a . x = b`.
struct Plane {
    normal: DVector<f64>,
    offset: f64,
    norm_sq: f64,
}

impl Plane {
    fn new(normal: DVector<f64>, offset: f64) -> Option<Self> {
        let norm_sq = normal.norm_squared();
        (norm_sq > 0.0).then_some(Self { normal, offset, norm_sq })
    }

    fn excess(&self, x: &DVector<f64>) -> f64 {
        self.normal.dot(x) - self.offset
    }
}

/// The feasible set of the reduced problem (free components only).
struct Region {
    lo: DVector<f64>,
    hi: DVector<f64>,
    halfspaces: Vec<Plane>,
    hyperplanes: Vec<Plane>,
    radius: f64,
    image: Option<Ellipsoid>,
    feas_tol: f64,
}

impl Region {
    fn set_count(&self) -> usize {
        1 + self.halfspaces.len() + self.hyperplanes.len() + 1 + usize::from(self.image.is_some())
    }

    fn project_onto(&self, set: usize, z: &DVector<f64>, with_image: bool) -> DVector<f64> {
        let nh = self.halfspaces.len();
        let ne = self.hyperplanes.len();
        if set == 0 {
            return DVector::from_iterator(z.len(), (0..z.len()).map(|i| z[i].clamp(self.lo[i], self.hi[i])));
        }
        if set <= nh {
            let p = &self.halfspaces[set - 1];
            let e = p.excess(z);
            return if e > 0.0 { z - &p.normal * (e / p.norm_sq) } else { z.clone() };
        }
        if set <= nh + ne {
            let p = &self.hyperplanes[set - 1 - nh];
            return z - &p.normal * (p.excess(z) / p.norm_sq);
        }
        if set == nh + ne + 1 {
            let nz = z.norm();
            return if nz > self.radius { z * (self.radius / nz) } else { z.clone() };
        }
        match (&self.image, with_image) {
            (Some(ell), true) => ell.project(z),
            _ => z.clone(),
        }
    }

    fn contains(&self, x: &DVector<f64>, with_image: bool) -> bool {
        let tol = self.feas_tol;
        (0..x.len()).all(|i| self.lo[i] - tol <= x[i] && x[i] <= self.hi[i] + tol)
            && self.halfspaces.iter().all(|p| p.excess(x) <= tol)
            && self.hyperplanes.iter().all(|p| p.excess(x).abs() <= tol)
            && x.norm() <= self.radius * (1.0 + SIZE_REL_TOL)
            && (!with_image || self.image.as_ref().is_none_or(|e| e.contains(x, SIZE_REL_TOL)))
    }

    /// Dykstra's alternating projection onto the intersection. The last sets
    /// in the cycle (the norm balls) hold exactly on return.
    fn project(&self, z: &DVector<f64>, with_image: bool) -> DVector<f64> {
        if self.contains(z, with_image) {
            return z.clone();
        }
        let sets = self.set_count();
        let mut x = z.clone();
        let mut corrections = vec![DVector::zeros(z.len()); sets];
        let stop = 1e-15 * self.radius;
        for _ in 0..MAX_PROJECTION_ROUNDS {
            // x can stall for whole rounds while the corrections still move
            let mut change = 0.0f64;
            for (s, corr) in corrections.iter_mut().enumerate() {
                let shifted = &x + &*corr;
                let next = self.project_onto(s, &shifted, with_image);
                let new_corr = shifted - &next;
                change = change.max((&new_corr - &*corr).norm());
                *corr = new_corr;
                x = next;
            }
            if change <= stop {
                break;
            }
        }
        x
    }
}

fn validate(p: &IncrementProblem<'_>) -> Result<()> {
    let n = p.residual.len();
    check_dim(n, p.forecast.nrows())?;
    check_dim(n, p.forecast.ncols())?;
    check_dim(n, p.constraints.dim())?;
    if p.residual.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("residual d"));
    }
    if p.forecast.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("fundamental matrix"));
    }
    if !(p.eps0 > 0.0 && p.eps1 > p.eps0 && p.eps1.is_finite()) {
        return Err(Error::InvalidParams(format!("need eps1 > eps0 > 0 (eps0={}, eps1={})", p.eps0, p.eps1)));
    }
    Ok(())
}

/// Solves the increment subproblem; see the module docs for the formulation.
pub fn solve_increment(p: &IncrementProblem<'_>) -> Result<IncrementSolution> {
    validate(p)?;
    let n = p.residual.len();
    let lin = p.constraints;
    let m_full = p.forecast;

    let free: Vec<usize> = (0..n).filter(|&i| lin.bound_hi[i] > lin.bound_lo[i]).collect();
    let mut fixed_delta = DVector::zeros(n);
    for i in (0..n).filter(|i| !free.contains(i)) {
        fixed_delta[i] = 0.0f64.clamp(lin.bound_lo[i], lin.bound_hi[i].max(lin.bound_lo[i]));
    }
    let m = free.len();
    let assemble = |x: &DVector<f64>| {
        let mut full = fixed_delta.clone();
        for (k, &i) in free.iter().enumerate() {
            full[i] = x[k];
        }
        full
    };

    let c = p.residual + m_full * &fixed_delta;
    let initial_residual_norm = p.residual.norm();
    if m == 0 {
        let norm = c.norm();
        return Ok(IncrementSolution {
            delta: fixed_delta,
            forecast_residual_norm: norm,
            status: IncrementStatus::Stalled,
            minimizer_residual_norm: norm,
            minimizer_norm: 0.0,
            initial_residual_norm,
            rescaled: false,
            iterations: 0,
        });
    }

    let a = m_full.select_columns(free.iter());

    let eig = SymmetricEigen::new(a.tr_mul(&a));
    let lipschitz = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let region = Region {
        lo: DVector::from_iterator(m, free.iter().map(|&i| lin.bound_lo[i])),
        hi: DVector::from_iterator(m, free.iter().map(|&i| lin.bound_hi[i])),
        halfspaces: (0..lin.ineq_values.len())
            .filter_map(|r| {
                let row = lin.ineq_normals.row(r);
                let offset = -lin.ineq_values[r] - row.dot(&fixed_delta.transpose());
                Plane::new(DVector::from_iterator(m, free.iter().map(|&i| row[i])), offset)
            })
            .collect(),
        hyperplanes: (0..lin.eq_values.len())
            .filter_map(|r| {
                let row = lin.eq_normals.row(r);
                let offset = -lin.eq_values[r] - row.dot(&fixed_delta.transpose());
                Plane::new(DVector::from_iterator(m, free.iter().map(|&i| row[i])), offset)
            })
            .collect(),
        radius: p.eps1,
        image: (lipschitz > 0.0).then(|| Ellipsoid {
            basis: eig.eigenvectors.clone(),
            eigenvalues: eig.eigenvalues.map(|s| s.max(0.0)),
            radius: p.eps1,
        }),
        feas_tol: lin.feas_tol,
    };

    let objective = |x: &DVector<f64>| (&c + &a * x).norm();

    // Accelerated projected gradient from zero.
    let mut x = DVector::zeros(m);
    let mut best: Option<(f64, DVector<f64>)> = region.contains(&x, true).then(|| (objective(&x), x.clone()));
    let mut iterations = 0;
    if m > 0 && lipschitz > 0.0 {
        let mut y = x.clone();
        let mut momentum = 1.0f64;
        let mut fx = objective(&x);
        let stop = 1e-12 * p.eps1;
        for k in 0..MAX_OUTER {
            iterations = k + 1;
            let grad = a.tr_mul(&(&c + &a * &y));
            let next = region.project(&(&y - grad / lipschitz), true);
            let f_next = objective(&next);
            if best.as_ref().is_none_or(|(fb, _)| f_next < *fb) {
                best = Some((f_next, next.clone()));
            }
            let moved = (&next - &x).norm();
            let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            if f_next > fx {
                // restart
                y = next.clone();
                momentum = 1.0;
            } else {
                y = &next + (&next - &x) * ((momentum - 1.0) / next_momentum);
                momentum = next_momentum;
            }
            x = next;
            fx = f_next;
            if moved < stop {
                break;
            }
        }
    }
    let (minimizer_obj, x_star) = best.unwrap_or_else(|| {
        let x0 = region.project(&DVector::zeros(m), true);
        (objective(&x0), x0)
    });

    let star_full = assemble(&x_star);
    let minimizer_norm = star_full.norm();
    let floor = p.eps0 * (1.0 - SIZE_REL_TOL);

    let (x_final, status, rescaled) = if minimizer_norm >= floor {
        (x_star, IncrementStatus::Ok, false)
    } else if x_star.norm() <= 1e-14 * p.eps1 {
        (x_star, IncrementStatus::Stalled, false)
    } else {
        stretch_to_floor(&region, &assemble, x_star, p.eps0)
    };

    let x_final = enforce_caps(&region, &a, x_final, !rescaled);
    let delta = assemble(&x_final);
    let forecast_residual_norm = (p.residual + m_full * &delta).norm();
    Ok(IncrementSolution {
        delta,
        forecast_residual_norm,
        status,
        minimizer_residual_norm: minimizer_obj,
        minimizer_norm,
        initial_residual_norm,
        rescaled,
        iterations,
    })
}

/// Stretches a too-short step to length eps0 and projects it back, repeating
/// until it is long enough or the projection keeps shrinking it.
fn stretch_to_floor<F>(
    region: &Region,
    assemble: &F,
    x_star: DVector<f64>,
    eps0: f64,
) -> (DVector<f64>, IncrementStatus, bool)
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let floor = eps0 * (1.0 - SIZE_REL_TOL);
    let mut x = &x_star * (eps0 / assemble(&x_star).norm());
    for round in 0..MAX_FLOOR_ROUNDS {
        x = region.project(&x, false);
        let len = assemble(&x).norm();
        if len >= floor {
            return (x, IncrementStatus::Ok, true);
        }
        if (round == 0 && len < 0.5 * eps0) || len == 0.0 {
            break;
        }
        x *= eps0 / len;
    }
    (x_star, IncrementStatus::Stalled, true)
}

/// Removes rounding excess over the norm caps by uniform scaling.
fn enforce_caps(region: &Region, a: &DMatrix<f64>, mut x: DVector<f64>, image_cap: bool) -> DVector<f64> {
    let nx = x.norm();
    if nx > region.radius {
        x *= region.radius / nx;
    }
    let nm = (a * &x).norm();
    if image_cap && region.image.is_some() && nm > region.radius {
        x *= region.radius / nm;
    }
    x
}
