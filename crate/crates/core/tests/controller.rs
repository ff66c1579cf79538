mod common;

use basin_control::bench::{generate_instance_with, run_suite, GeneratorConfig};
use basin_control::constraints::ConstraintSet;
use basin_control::controller::{control, test_convergence, ControlParams, ControlStatus, Metric};
use basin_control::models::DoubleWellParticle;
use common::{check_iterates, kick_problem, state, CRITICAL_KICK};
use nalgebra::DVector;

/// Plain RK4 on the damped double well, independent of the library integrator.
fn lands_right(v0: f64) -> bool {
    let f = |y: [f64; 2]| [y[1], -y[1] + y[0] - y[0].powi(3)];
    let h = 1e-3;
    let mut y = [-1.0, v0];
    for _ in 0..60_000 {
        let k1 = f(y);
        let k2 = f([y[0] + 0.5 * h * k1[0], y[1] + 0.5 * h * k1[1]]);
        let k3 = f([y[0] + 0.5 * h * k2[0], y[1] + 0.5 * h * k2[1]]);
        let k4 = f([y[0] + h * k3[0], y[1] + h * k3[1]]);
        for i in 0..2 {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    y[0] > 0.0
}

#[test]
fn critical_kick_cross_check() {
    let (mut lo, mut hi) = (1.0, 2.0);
    assert!(!lands_right(lo) && lands_right(hi));
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if lands_right(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    assert!((hi - CRITICAL_KICK).abs() < 1e-6, "rk4 threshold {hi}");
}

#[test]
fn kick_crosses_threshold() {
    let p = kick_problem();
    let out = control(&p.system, &p.y0, &p.yt, &p.cs, &p.params).unwrap();
    assert_eq!(out.status, ControlStatus::Success);
    assert!(!out.stalled);
    check_iterates(&out, &p.cs, &p.params).unwrap();
    let last = out.final_state().as_slice();
    assert_eq!(last[0], -1.0);
    assert!(last[1] > CRITICAL_KICK);
    // Every iterate before the last one failed the convergence test.
    for y in &out.iterates[..out.n_iter] {
        assert!(y[1] < CRITICAL_KICK + 1e-9);
    }
    assert_eq!(out.t_int.len(), out.n_iter);
    assert_eq!(out.t_var.len(), out.n_iter);
    assert_eq!(out.t_opt.len(), out.n_iter);
    assert_eq!(out.records.len(), out.n_iter);
}

#[test]
fn sparse_convergence_tests() {
    let mut p = kick_problem();
    p.params.n_test = 4;
    let out = control(&p.system, &p.y0, &p.yt, &p.cs, &p.params).unwrap();
    assert!(out.succeeded());
    assert_eq!(out.n_iter % 4, 0);
    for (k, t) in out.t_int.iter().enumerate() {
        if (k + 1) % 4 != 0 {
            assert_eq!(*t, 0.0, "iteration {k}");
        }
    }
    assert!(test_convergence(&p.system, out.final_state().as_slice(), p.yt.as_slice(), &p.params).unwrap().converged);
}

#[test]
fn weighted_metric_kick() {
    let mut p = kick_problem();
    p.params.metric = Metric::Weighted(DVector::from_vec(vec![1.0, 0.25]));
    let out = control(&p.system, &p.y0, &p.yt, &p.cs, &p.params).unwrap();
    assert!(out.succeeded());
    check_iterates(&out, &p.cs, &p.params).unwrap();
    assert!(out.final_state()[1] > CRITICAL_KICK);

    p.params.metric = Metric::Weighted(DVector::from_vec(vec![1.0, -1.0]));
    assert!(control(&p.system, &p.y0, &p.yt, &p.cs, &p.params).is_err());
}

#[test]
fn equality_constraint_matches_frozen_bound() {
    let p = kick_problem();
    let cs = ConstraintSet::unconstrained(2).with_equality(1, |y: &[f64]| DVector::from_element(1, y[0] + 1.0));
    let out = control(&p.system, &p.y0, &p.yt, &cs, &p.params).unwrap();
    assert!(out.succeeded());
    check_iterates(&out, &cs, &p.params).unwrap();
    for y in &out.iterates {
        assert!((y[0] + 1.0).abs() <= cs.feas_tol());
    }
}

#[test]
fn inequality_constraint_respected() {
    let p = kick_problem();
    // Free start, but the state must stay in a disc and keep the velocity small.
    let cs = ConstraintSet::unconstrained(2)
        .with_inequality(2, |y: &[f64]| DVector::from_vec(vec![y[0] * y[0] + y[1] * y[1] - 4.0, y[1] - 1.2]));
    let params = ControlParams { it_max: 500, ..p.params.clone() };
    let out = control(&p.system, &p.y0, &p.yt, &cs, &params).unwrap();
    assert!(out.succeeded());
    check_iterates(&out, &cs, &params).unwrap();
    let last = out.final_state();
    assert!(last[1] <= 1.2 + cs.feas_tol());
    assert!(last[0] > -1.0);
}

#[test]
fn already_converged_start() {
    let p = kick_problem();
    let y0 = state(&[0.9, 0.0]);
    let out = control(&p.system, &y0, &p.yt, &ConstraintSet::unconstrained(2), &p.params).unwrap();
    assert!(out.succeeded());
    assert_eq!(out.n_iter, 0);
    assert_eq!(out.iterates.len(), 1);
    assert!(out.t_int.is_empty());
}

#[test]
fn dimension_mismatch_rejected() {
    let p = kick_problem();
    let y0 = state(&[-1.0, 0.0, 0.0]);
    assert!(control(&p.system, &y0, &p.yt, &p.cs, &p.params).is_err());
    let cs = ConstraintSet::unconstrained(3);
    assert!(control(&p.system, &p.y0, &p.yt, &cs, &p.params).is_err());
}

#[test]
fn gamma_changes_threshold() {
    // Less damping lowers the kick needed to cross.
    let p = kick_problem();
    let light = DoubleWellParticle::new(0.5).unwrap();
    let out = control(&light, &p.y0, &p.yt, &p.cs, &p.params).unwrap();
    assert!(out.succeeded());
    assert!(out.final_state()[1] < CRITICAL_KICK);
}

#[test]
fn suite_counts_exhausted_runs_as_failures() {
    let instances: Vec<_> =
        (1..=3).map(|s| generate_instance_with(6, s, &GeneratorConfig::default()).unwrap()).collect();
    let params = ControlParams { it_max: 0, eps1: 0.1, ..ControlParams::default() };
    let report = run_suite(&instances, &params);
    assert_eq!(report.success_fraction, 0.0);
    assert_eq!(report.per_instance.len(), 3);
    for r in &report.per_instance {
        assert_eq!(r.status, 1);
        assert_eq!(r.n_iter, 0);
    }
}

#[test]
fn fully_perturbable_instances_succeed() {
    let cfg = GeneratorConfig { perturbable_fraction: 1.0, ..GeneratorConfig::default() };
    let instances: Vec<_> = (1..=4).map(|s| generate_instance_with(8, s, &cfg).unwrap()).collect();
    for inst in &instances {
        assert_eq!(inst.perturbable.len(), 8);
    }
    let params = ControlParams { eps1: 0.1, ..ControlParams::default() };
    let report = run_suite(&instances, &params);
    assert_eq!(report.successes(), 4, "{:?}", report.per_instance);
}
