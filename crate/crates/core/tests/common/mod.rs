#![allow(dead_code)]

use basin_control::constraints::ConstraintSet;
use basin_control::controller::{ControlOutcome, ControlParams};
use basin_control::increment::SIZE_REL_TOL;
use basin_control::models::DoubleWellParticle;
use basin_control::system::SystemState;

/// Smallest initial velocity that carries the double-well particle (gamma = 1)
/// from x = -1 over the barrier; bisection on an adaptive reference integrator.
pub const CRITICAL_KICK: f64 = 1.42212000101;

pub fn state(v: &[f64]) -> SystemState {
    SystemState::new(v.to_vec()).unwrap()
}

pub struct KickProblem {
    pub system: DoubleWellParticle,
    pub y0: SystemState,
    pub yt: SystemState,
    pub cs: ConstraintSet,
    pub params: ControlParams,
}

/// Particle resting in the left well, position frozen, velocity free.
pub fn kick_problem() -> KickProblem {
    KickProblem {
        system: DoubleWellParticle::new(1.0).unwrap(),
        y0: state(&[-1.0, 0.0]),
        yt: state(&[1.0, 0.0]),
        cs: ConstraintSet::with_bounds(vec![-1.0, f64::NEG_INFINITY], vec![-1.0, f64::INFINITY]).unwrap(),
        params: ControlParams {
            eps0: 1e-3,
            eps1: 5e-2,
            t_max: 10.0,
            t_test: 100.0,
            dt: 0.01,
            tol: 1e-2,
            it_max: 500,
            ..ControlParams::default()
        },
    }
}

/// Every iterate eligible and every step inside the eps0/eps1 window.
pub fn check_iterates(out: &ControlOutcome, cs: &ConstraintSet, params: &ControlParams) -> Result<(), String> {
    if out.iterates.len() != out.n_iter + 1 {
        return Err(format!("{} iterates for {} iterations", out.iterates.len(), out.n_iter));
    }
    if out.n_iter > params.it_max {
        return Err(format!("n_iter {} exceeds it_max {}", out.n_iter, params.it_max));
    }
    for (k, y) in out.iterates.iter().enumerate() {
        if !cs.is_eligible(y.as_slice()).unwrap() {
            return Err(format!("iterate {k} is not eligible"));
        }
    }
    for (k, pair) in out.iterates.windows(2).enumerate() {
        let step = (pair[1].vector() - pair[0].vector()).norm();
        if step < params.eps0 * (1.0 - SIZE_REL_TOL) || step > params.eps1 * (1.0 + SIZE_REL_TOL) {
            return Err(format!("step {k} has length {step}"));
        }
    }
    Ok(())
}
