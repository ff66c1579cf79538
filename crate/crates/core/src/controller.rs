//! The control loop.
//!
//! Starting from an eligible initial state, each iteration integrates the
//! orbit and its fundamental matrix over `[0, t_max]`, finds the closest
//! approach to the target, solves the increment subproblem and moves the
//! candidate initial state by the resulting eligible step. Every `n_test`
//! iterations (starting before the first step) the candidate is integrated
//! for up to `t_test` to see whether it enters the `tol` ball around the
//! target; if it does, the run succeeds.
//!
//! Timing lists have one entry per completed iteration: `t_var` is the
//! variational pass, `t_opt` the increment solve and `t_int` the convergence
//! test that followed the step (0 when no test was due). The test of the
//! unperturbed start is counted only in the total.

use std::fmt;
use std::ops::ControlFlow;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::error::{check_dim, Error, Result};
use crate::increment::{solve_increment, IncrementProblem, IncrementStatus, SIZE_REL_TOL};
use crate::integrator::{for_each_state, for_each_variational_state, Trajectory};
use crate::system::{System, SystemState};

type DistanceFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

/// Distance between states.
#[derive(Clone, Default)]
pub enum Metric {
    #[default]
    Euclidean,
    /// `sqrt(sum_i w_i (a_i - b_i)^2)` with positive weights.
    Weighted(DVector<f64>),
    /// Arbitrary user metric. The increment forecast still uses the
    /// Euclidean residual.
    Custom(Arc<DistanceFn>),
}

impl fmt::Debug for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Euclidean => write!(f, "Euclidean"),
            Metric::Weighted(w) => f.debug_tuple("Weighted").field(&w.as_slice()).finish(),
            Metric::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl Metric {
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::Weighted(w) => {
                a.iter().zip(b).zip(w.iter()).map(|((x, y), wi)| wi * (x - y) * (x - y)).sum::<f64>().sqrt()
            }
            Metric::Custom(f) => f(a, b),
        }
    }

    /// Rejects weights of the wrong length or that are not positive and finite.
    pub fn check(&self, n: usize) -> Result<()> {
        if let Metric::Weighted(w) = self {
            check_dim(n, w.len())?;
            if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidParams("metric weights must be finite and positive".into()));
            }
        }
        Ok(())
    }
}

/// Tuning of the control loop.
#[derive(Clone, Debug)]
pub struct ControlParams {
    /// Minimum step length.
    pub eps0: f64,
    /// Maximum step length, at the start and at the forecast closest approach.
    pub eps1: f64,
    pub it_max: usize,
    /// Closest-approach search window.
    pub t_max: f64,
    pub dt: f64,
    /// Convergence-test window.
    pub t_test: f64,
    /// Radius of the target ball.
    pub tol: f64,
    pub n_test: usize,
    pub metric: Metric,
}

impl Default for ControlParams {
    fn default() -> Self {
        Self {
            eps0: 1e-3,
            eps1: 5e-2,
            it_max: 2000,
            t_max: 10.0,
            dt: 0.01,
            t_test: 100.0,
            tol: 1e-2,
            n_test: 1,
            metric: Metric::Euclidean,
        }
    }
}

impl ControlParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.eps0, self.eps1, self.t_max, self.dt, self.t_test, self.tol].iter().all(|v| v.is_finite());
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if !finite {
            return bad("control parameters must be finite".into());
        }
        if !(self.eps0 > 0.0 && self.eps1 > self.eps0) {
            return bad(format!("need eps1 > eps0 > 0 (eps0={}, eps1={})", self.eps0, self.eps1));
        }
        if !(self.dt > 0.0 && self.dt <= self.t_max && self.t_max <= self.t_test) {
            return bad(format!(
                "need 0 < dt <= t_max <= t_test (dt={}, t_max={}, t_test={})",
                self.dt, self.t_max, self.t_test
            ));
        }
        if self.tol <= 0.0 {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if self.n_test == 0 {
            return bad("n_test must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosestApproach {
    pub index: usize,
    pub time: f64,
    pub distance: f64,
}

/// Grid point of `traj` nearest to `target`; ties go to the earliest time.
pub fn find_closest_approach(traj: &Trajectory, target: &[f64], metric: &Metric) -> Result<ClosestApproach> {
    let first =
        traj.states.first().ok_or_else(|| Error::InvalidParams("closest approach of an empty trajectory".into()))?;
    check_dim(first.len(), target.len())?;
    let mut best = ClosestApproach { index: 0, time: traj.times[0], distance: f64::INFINITY };
    for (k, (t, y)) in traj.times.iter().zip(&traj.states).enumerate() {
        let dist = metric.distance(y.as_slice(), target);
        if dist < best.distance {
            best = ClosestApproach { index: k, time: *t, distance: dist };
        }
    }
    Ok(best)
}

/// Result of integrating a candidate for up to `t_test`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceVerdict {
    pub converged: bool,
    /// First grid time inside the target ball.
    pub entry_time: Option<f64>,
    pub min_distance: f64,
    /// The orbit blew up before reaching the ball.
    pub diverged: bool,
}

/// Integrates from `y0` with step `dt` up to `t_test` and reports whether
/// the orbit enters the `tol` ball around `target`.
pub fn test_convergence(
    system: &dyn System,
    y0: &[f64],
    target: &[f64],
    params: &ControlParams,
) -> Result<ConvergenceVerdict> {
    check_dim(system.dimension(), y0.len())?;
    check_dim(system.dimension(), target.len())?;
    let mut verdict =
        ConvergenceVerdict { converged: false, entry_time: None, min_distance: f64::INFINITY, diverged: false };
    let run = for_each_state(system, y0, params.dt, params.t_test, |_, t, y| {
        let dist = params.metric.distance(y.as_slice(), target);
        verdict.min_distance = verdict.min_distance.min(dist);
        if dist <= params.tol {
            verdict.converged = true;
            verdict.entry_time = Some(t);
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    });
    match run {
        Ok(_) => Ok(verdict),
        Err(Error::NonFiniteState { .. }) => {
            verdict.diverged = true;
            Ok(verdict)
        }
        Err(e) => Err(e),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlStatus {
    Success,
    IterationLimit,
}

impl ControlStatus {
    pub fn code(self) -> i32 {
        match self {
            ControlStatus::Success => 0,
            ControlStatus::IterationLimit => 1,
        }
    }
}

/// Diagnostics for one completed iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub closest_time: f64,
    pub closest_distance: f64,
    /// `||d||` at the closest approach (forecast metric).
    pub residual_norm: f64,
    /// Forecast residual at the solver's minimizer, before any eps0 stretch.
    pub minimizer_residual_norm: f64,
    pub forecast_residual_norm: f64,
    pub step_norm: f64,
    pub rescaled: bool,
}

#[derive(Clone, Debug)]
pub struct ControlOutcome {
    pub status: ControlStatus,
    /// Set when the run ended because no eligible step of length eps0 existed.
    pub stalled: bool,
    /// Candidate initial states; the first is the input, the last is the result.
    pub iterates: Vec<SystemState>,
    pub n_iter: usize,
    pub total_seconds: f64,
    pub t_int: Vec<f64>,
    pub t_var: Vec<f64>,
    pub t_opt: Vec<f64>,
    pub records: Vec<IterationRecord>,
    /// Number of convergence tests whose orbit blew up.
    pub diverged_tests: usize,
}

impl ControlOutcome {
    pub fn final_state(&self) -> &SystemState {
        self.iterates.last().expect("iterates always holds the start state")
    }

    pub fn succeeded(&self) -> bool {
        self.status == ControlStatus::Success
    }

    pub fn report(&self) -> ControlReport {
        ControlReport {
            status: self.status.code(),
            stall: self.stalled,
            n_iter: self.n_iter,
            time: self.total_seconds,
            t_int: self.t_int.clone(),
            t_var: self.t_var.clone(),
            t_opt: self.t_opt.clone(),
            y0: self.iterates.iter().map(SystemState::to_vec).collect(),
        }
    }
}

/// Serialized form of a run. `y0` lists every candidate initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub status: i32,
    pub stall: bool,
    pub n_iter: usize,
    pub time: f64,
    pub t_int: Vec<f64>,
    pub t_var: Vec<f64>,
    pub t_opt: Vec<f64>,
    pub y0: Vec<Vec<f64>>,
}

struct Forecast {
    trajectory: Trajectory,
    closest: ClosestApproach,
    matrix: DMatrix<f64>,
    /// Closest approach over `(0, t_max]`, kept for when `closest` is at t=0.
    later: Option<(ClosestApproach, DMatrix<f64>)>,
}

fn forecast(system: &dyn System, y0: &[f64], target: &[f64], params: &ControlParams) -> Result<Forecast> {
    let mut trajectory = Trajectory { times: Vec::new(), states: Vec::new() };
    let mut best = f64::INFINITY;
    let mut matrix = DMatrix::identity(y0.len(), y0.len());
    let mut later: Option<ClosestApproach> = None;
    let mut later_matrix = DMatrix::identity(y0.len(), y0.len());
    for_each_variational_state(system, y0, params.dt, params.t_max, |k, t, y, m| {
        let dist = params.metric.distance(y.as_slice(), target);
        if dist < best {
            best = dist;
            matrix.copy_from(m);
        }
        if k > 0 && later.is_none_or(|c| dist < c.distance) {
            later = Some(ClosestApproach { index: k, time: t, distance: dist });
            later_matrix.copy_from(m);
        }
        trajectory.times.push(t);
        trajectory.states.push(y.clone());
    })?;
    let closest = find_closest_approach(&trajectory, target, &params.metric)?;
    debug_assert_eq!(closest.distance, best);
    let later = later.filter(|_| closest.index == 0).map(|c| (c, later_matrix));
    Ok(Forecast { trajectory, closest, matrix, later })
}

fn within_window(step: f64, params: &ControlParams) -> bool {
    step >= params.eps0 * (1.0 - SIZE_REL_TOL) && step <= params.eps1 * (1.0 + SIZE_REL_TOL)
}

/// Applies `delta` to `candidate`, keeping the result eligible. Box-only sets
/// just absorb rounding by clamping; general constraints get a restoration
/// pass and, failing that, shorter steps.
fn take_step(
    cs: &ConstraintSet,
    candidate: &DVector<f64>,
    delta: &DVector<f64>,
    params: &ControlParams,
) -> Result<Option<DVector<f64>>> {
    let clamp = |mut y: DVector<f64>| {
        for i in 0..y.len() {
            y[i] = y[i].clamp(cs.lb()[i], cs.ub()[i]);
        }
        y
    };
    let mut trial = delta.clone();
    for _ in 0..10 {
        let next = clamp(candidate + &trial);
        if cs.is_eligible(next.as_slice())? && within_window((&next - candidate).norm(), params) {
            return Ok(Some(next));
        }
        if !cs.has_general_constraints() {
            return Ok(None);
        }
        if let Some(fixed) = cs.restore(next.as_slice())? {
            if within_window((&fixed - candidate).norm(), params) {
                return Ok(Some(fixed));
            }
        }
        trial *= 0.5;
    }
    Ok(None)
}

/// Runs the control loop from `y0` toward the basin of `target`.
pub fn control(
    system: &dyn System,
    y0: &SystemState,
    target: &SystemState,
    cs: &ConstraintSet,
    params: &ControlParams,
) -> Result<ControlOutcome> {
    let start = Instant::now();
    params.validate()?;
    let n = system.dimension();
    check_dim(n, y0.dim())?;
    check_dim(n, target.dim())?;
    check_dim(n, cs.dim())?;
    params.metric.check(n)?;
    if !cs.is_eligible(y0.as_slice())? {
        return Err(Error::IneligibleStart);
    }

    let target_slice = target.as_slice();
    let weights = match &params.metric {
        Metric::Weighted(w) => Some(w.map(f64::sqrt)),
        _ => None,
    };
    let mut outcome = ControlOutcome {
        status: ControlStatus::IterationLimit,
        stalled: false,
        iterates: vec![y0.clone()],
        n_iter: 0,
        total_seconds: 0.0,
        t_int: Vec::new(),
        t_var: Vec::new(),
        t_opt: Vec::new(),
        records: Vec::new(),
        diverged_tests: 0,
    };
    let mut candidate = y0.vector().clone();

    let verdict = test_convergence(system, candidate.as_slice(), target_slice, params)?;
    outcome.diverged_tests += usize::from(verdict.diverged);
    if verdict.converged {
        outcome.status = ControlStatus::Success;
        outcome.total_seconds = start.elapsed().as_secs_f64();
        return Ok(outcome);
    }

    let at = |iteration: usize| move |e: Error| Error::Iteration { iteration, source: Box::new(e) };
    while outcome.n_iter < params.it_max {
        let iteration = outcome.n_iter;

        let t0 = Instant::now();
        let fc = forecast(system, candidate.as_slice(), target_slice, params).map_err(at(iteration))?;
        let t_var = t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let band = cs.activation_band(candidate.as_slice()).map_err(at(iteration))?;
        let lin = cs.linearize(candidate.as_slice(), band).map_err(at(iteration))?;
        let increment = |closest: &ClosestApproach, matrix: &DMatrix<f64>| {
            let mut residual = &fc.trajectory.states[closest.index] - target.vector();
            let mut matrix = matrix.clone();
            if let Some(w) = &weights {
                residual.component_mul_assign(w);
                for (i, wi) in w.iter().enumerate() {
                    matrix.row_mut(i).scale_mut(*wi);
                }
            }
            solve_increment(&IncrementProblem {
                residual: &residual,
                forecast: &matrix,
                constraints: &lin,
                eps0: params.eps0,
                eps1: params.eps1,
            })
        };
        let mut closest = fc.closest;
        let mut solution = increment(&closest, &fc.matrix).map_err(at(iteration))?;
        // At t=0 the forecast is the identity; a stationary orbit always
        // lands there and may offer no eligible descent direction.
        if solution.status == IncrementStatus::Stalled {
            if let Some((c, m)) = &fc.later {
                let retry = increment(c, m).map_err(at(iteration))?;
                if retry.status == IncrementStatus::Ok {
                    closest = *c;
                    solution = retry;
                }
            }
        }
        let t_opt = t0.elapsed().as_secs_f64();

        if solution.status == IncrementStatus::Stalled {
            outcome.stalled = true;
            break;
        }
        let Some(next) = take_step(cs, &candidate, &solution.delta, params).map_err(at(iteration))? else {
            outcome.stalled = true;
            break;
        };

        outcome.records.push(IterationRecord {
            closest_time: closest.time,
            closest_distance: closest.distance,
            residual_norm: solution.initial_residual_norm,
            minimizer_residual_norm: solution.minimizer_residual_norm,
            forecast_residual_norm: solution.forecast_residual_norm,
            step_norm: (&next - &candidate).norm(),
            rescaled: solution.rescaled,
        });
        candidate = next;
        outcome.iterates.push(SystemState::from_vector(candidate.clone()).map_err(at(iteration))?);
        outcome.n_iter += 1;
        outcome.t_var.push(t_var);
        outcome.t_opt.push(t_opt);

        if outcome.n_iter.is_multiple_of(params.n_test) {
            let t0 = Instant::now();
            let verdict = test_convergence(system, candidate.as_slice(), target_slice, params)?;
            outcome.t_int.push(t0.elapsed().as_secs_f64());
            outcome.diverged_tests += usize::from(verdict.diverged);
            if verdict.converged {
                outcome.status = ControlStatus::Success;
                break;
            }
        } else {
            outcome.t_int.push(0.0);
        }
    }
    outcome.total_seconds = start.elapsed().as_secs_f64();
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::DoubleWellParticle;

    fn state(v: &[f64]) -> SystemState {
        SystemState::new(v.to_vec()).unwrap()
    }

    fn traj(points: &[[f64; 2]], dt: f64) -> Trajectory {
        Trajectory {
            times: (0..points.len()).map(|k| k as f64 * dt).collect(),
            states: points.iter().map(|p| DVector::from_column_slice(p)).collect(),
        }
    }

    #[test]
    fn closest_approach_exact_hit() {
        let mut pts: Vec<[f64; 2]> = (0..10).map(|k| [k as f64, 1.0]).collect();
        pts[5] = [0.5, 0.5];
        let ca = find_closest_approach(&traj(&pts, 0.1), &[0.5, 0.5], &Metric::Euclidean).unwrap();
        assert_eq!(ca.index, 5);
        assert!((ca.time - 0.5).abs() < 1e-15);
        assert_eq!(ca.distance, 0.0);
    }

    #[test]
    fn closest_approach_monotone_and_ties() {
        let pts: Vec<[f64; 2]> = (0..8).map(|k| [k as f64, 0.0]).collect();
        assert_eq!(find_closest_approach(&traj(&pts, 1.0), &[100.0, 0.0], &Metric::Euclidean).unwrap().index, 7);
        let mut pts = vec![[5.0, 5.0]; 10];
        pts[2] = [1.0, 0.0];
        pts[7] = [-1.0, 0.0];
        assert_eq!(find_closest_approach(&traj(&pts, 1.0), &[0.0, 0.0], &Metric::Euclidean).unwrap().index, 2);
    }

    #[test]
    fn weighted_metric() {
        let m = Metric::Weighted(DVector::from_vec(vec![4.0, 1.0]));
        assert_eq!(m.distance(&[1.0, 0.0], &[0.0, 0.0]), 2.0);
        assert!(m.check(3).is_err());
        assert!(Metric::Weighted(DVector::from_vec(vec![0.0])).check(1).is_err());
    }

    #[test]
    fn convergence_verdicts() {
        let sys = DoubleWellParticle::new(1.0).unwrap();
        let params = ControlParams { tol: 1e-3, t_test: 50.0, ..ControlParams::default() };
        let same = test_convergence(&sys, &[1.0, 0.0], &[1.0, 0.0], &params).unwrap();
        assert!(same.converged && same.entry_time == Some(0.0));
        assert!(test_convergence(&sys, &[0.9, 0.0], &[1.0, 0.0], &params).unwrap().converged);
        let other = test_convergence(&sys, &[-0.9, 0.0], &[1.0, 0.0], &params).unwrap();
        assert!(!other.converged && !other.diverged);
        assert!(other.min_distance > 1.0);
    }

    #[test]
    fn params_validation() {
        assert!(ControlParams::default().validate().is_ok());
        for bad in [
            ControlParams { eps1: 1e-4, ..ControlParams::default() },
            ControlParams { eps0: 0.0, ..ControlParams::default() },
            ControlParams { dt: 20.0, ..ControlParams::default() },
            ControlParams { t_test: 5.0, ..ControlParams::default() },
            ControlParams { tol: 0.0, ..ControlParams::default() },
            ControlParams { n_test: 0, ..ControlParams::default() },
            ControlParams { t_max: f64::NAN, ..ControlParams::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn already_in_basin_returns_immediately() {
        let sys = DoubleWellParticle::new(1.0).unwrap();
        let out = control(
            &sys,
            &state(&[0.9, 0.0]),
            &state(&[1.0, 0.0]),
            &ConstraintSet::unconstrained(2),
            &ControlParams::default(),
        )
        .unwrap();
        assert_eq!(out.status, ControlStatus::Success);
        assert_eq!(out.n_iter, 0);
        assert_eq!(out.iterates, vec![state(&[0.9, 0.0])]);
    }

    #[test]
    fn zero_iteration_budget_fails() {
        let sys = DoubleWellParticle::new(1.0).unwrap();
        let params = ControlParams { it_max: 0, ..ControlParams::default() };
        let out = control(&sys, &state(&[-1.0, 0.0]), &state(&[1.0, 0.0]), &ConstraintSet::unconstrained(2), &params)
            .unwrap();
        assert_eq!(out.status.code(), 1);
        assert_eq!(out.n_iter, 0);
        assert!(!out.stalled);
    }

    #[test]
    fn ineligible_start_rejected() {
        let sys = DoubleWellParticle::new(1.0).unwrap();
        let cs = ConstraintSet::with_bounds(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap();
        let r = control(&sys, &state(&[-1.0, 0.0]), &state(&[1.0, 0.0]), &cs, &ControlParams::default());
        assert!(matches!(r, Err(Error::IneligibleStart)));
    }

    #[test]
    fn frozen_system_stalls() {
        let sys = DoubleWellParticle::new(1.0).unwrap();
        let cs = ConstraintSet::with_bounds(vec![-1.0, 0.0], vec![-1.0, 0.0]).unwrap();
        let out = control(&sys, &state(&[-1.0, 0.0]), &state(&[1.0, 0.0]), &cs, &ControlParams::default()).unwrap();
        assert_eq!(out.status, ControlStatus::IterationLimit);
        assert!(out.stalled);
        assert_eq!(out.n_iter, 0);
    }
}
