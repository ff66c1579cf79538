//! Fixed-step classical Runge-Kutta integration of trajectories and of the
//! variational equation `M' = J(y(t)) M`, `M(0) = I`.
//!
//! Both routines take `K = ceil(t_end / dt)` steps. All but the last have
//! length `dt`; the last is shortened so the final time is exactly `t_end`.
//! A ratio `t_end / dt` within `1e-9` (relative) of an integer counts as that
//! integer, so `t_end = 1, dt = 0.01` is 100 steps and not 101.

use std::io::{self, Write};
use std::ops::ControlFlow;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::system::{jacobian, System};

/// Sampled orbit on the uniform grid `t_k = k * dt` (last point at `t_end`).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> Option<&DVector<f64>> {
        self.states.last()
    }

    /// CSV with header `t,y0,...,y{n-1}`, 17 significant digits per value.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let n = self.states.first().map_or(0, |s| s.len());
        let mut header = String::from("t");
        for i in 0..n {
            header.push_str(&format!(",y{i}"));
        }
        writeln!(w, "{header}")?;
        for (t, s) in self.times.iter().zip(&self.states) {
            write!(w, "{t:.16e}")?;
            for v in s.iter() {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Trajectory plus the fundamental matrix at every grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalResult {
    pub trajectory: Trajectory,
    pub matrices: Vec<DMatrix<f64>>,
}

/// Step layout for a fixed-step run over `[0, t_end]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepPlan {
    pub dt: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl StepPlan {
    pub fn new(dt: f64, t_end: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0 && t_end.is_finite() && t_end > 0.0) {
            return Err(Error::InvalidParams(format!(
                "dt and t_end must be finite and positive (dt={dt}, t_end={t_end})"
            )));
        }
        if dt > t_end {
            return Err(Error::InvalidParams(format!("dt={dt} exceeds t_end={t_end}")));
        }
        let ratio = t_end / dt;
        let nearest = ratio.round();
        let steps = if (ratio - nearest).abs() <= 1e-9 * ratio { nearest } else { ratio.ceil() };
        Ok(Self { dt, t_end, steps: steps as usize })
    }

    pub fn time(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.t_end
        } else {
            k as f64 * self.dt
        }
    }

    /// Length of the step from grid point `k` to `k + 1`.
    pub fn step_size(&self, k: usize) -> f64 {
        self.time(k + 1) - self.time(k)
    }
}

struct Rk4Workspace {
    k1: DVector<f64>,
    k2: DVector<f64>,
    k3: DVector<f64>,
    k4: DVector<f64>,
    probe: DVector<f64>,
}

impl Rk4Workspace {
    fn new(n: usize) -> Self {
        Self {
            k1: DVector::zeros(n),
            k2: DVector::zeros(n),
            k3: DVector::zeros(n),
            k4: DVector::zeros(n),
            probe: DVector::zeros(n),
        }
    }

    fn step(&mut self, system: &dyn System, y: &mut DVector<f64>, h: f64) {
        system.rhs(y.as_slice(), self.k1.as_mut_slice());
        self.probe.copy_from(y);
        self.probe.axpy(0.5 * h, &self.k1, 1.0);
        system.rhs(self.probe.as_slice(), self.k2.as_mut_slice());
        self.probe.copy_from(y);
        self.probe.axpy(0.5 * h, &self.k2, 1.0);
        system.rhs(self.probe.as_slice(), self.k3.as_mut_slice());
        self.probe.copy_from(y);
        self.probe.axpy(h, &self.k3, 1.0);
        system.rhs(self.probe.as_slice(), self.k4.as_mut_slice());
        for i in 0..y.len() {
            y[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

fn check_start(system: &dyn System, y0: &[f64]) -> Result<()> {
    check_dim(system.dimension(), y0.len())?;
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState { step: 0, state: y0.to_vec() });
    }
    Ok(())
}

/// Streams the RK4 orbit to `visit(k, t_k, y_k)`, starting with `k = 0`.
/// Stops early when the visitor breaks. Returns the number of grid points
/// visited.
pub fn for_each_state<F>(system: &dyn System, y0: &[f64], dt: f64, t_end: f64, mut visit: F) -> Result<usize>
where
    F: FnMut(usize, f64, &DVector<f64>) -> ControlFlow<()>,
{
    let plan = StepPlan::new(dt, t_end)?;
    check_start(system, y0)?;
    let mut y = DVector::from_column_slice(y0);
    let mut ws = Rk4Workspace::new(y.len());
    if visit(0, 0.0, &y).is_break() {
        return Ok(1);
    }
    for k in 0..plan.steps {
        ws.step(system, &mut y, plan.step_size(k));
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: k + 1, state: y.as_slice().to_vec() });
        }
        if visit(k + 1, plan.time(k + 1), &y).is_break() {
            return Ok(k + 2);
        }
    }
    Ok(plan.steps + 1)
}

/// Integrates `y' = F(y)` from `y0` over `[0, t_end]` and keeps every state.
pub fn integrate_trajectory(system: &dyn System, y0: &[f64], dt: f64, t_end: f64) -> Result<Trajectory> {
    let mut traj = Trajectory { times: Vec::new(), states: Vec::new() };
    for_each_state(system, y0, dt, t_end, |_, t, y| {
        traj.times.push(t);
        traj.states.push(y.clone());
        ControlFlow::Continue(())
    })?;
    Ok(traj)
}

/// `out = base + scale * inc`.
fn shift(out: &mut [f64], base: &[f64], scale: f64, inc: &[f64]) {
    for ((o, b), d) in out.iter_mut().zip(base).zip(inc) {
        *o = b + scale * d;
    }
}

fn tangent(system: &dyn System, y: &[f64], m: &DMatrix<f64>, out: &mut DMatrix<f64>) -> Result<()> {
    if !system.jacobian_product(y, m, out) {
        jacobian(system, y)?.mul_to(m, out);
    }
    Ok(())
}

/// Streams the augmented `(y, M)` RK4 solution to `visit(k, t_k, y_k, M_k)`.
///
/// The same four-stage scheme is applied to the `n + n^2` dimensional system,
/// with `J` evaluated at each stage's state.
pub fn for_each_variational_state<F>(system: &dyn System, y0: &[f64], dt: f64, t_end: f64, mut visit: F) -> Result<()>
where
    F: FnMut(usize, f64, &DVector<f64>, &DMatrix<f64>),
{
    let plan = StepPlan::new(dt, t_end)?;
    check_start(system, y0)?;
    let n = y0.len();
    let mut y = DVector::from_column_slice(y0);
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut ws = Rk4Workspace::new(n);
    let mut stages = [(); 4].map(|_| DMatrix::<f64>::zeros(n, n));
    let mut probe_m = DMatrix::<f64>::zeros(n, n);
    visit(0, 0.0, &y, &m);

    let blowup = |step: usize, y: &DVector<f64>| Error::NonFiniteState { step, state: y.as_slice().to_vec() };
    for k in 0..plan.steps {
        let h = plan.step_size(k);
        let stage = |e: Error| match e {
            Error::NonFiniteOutput(_) => blowup(k, &y),
            other => other,
        };

        let [m1, m2, m3, m4] = &mut stages;
        system.rhs(y.as_slice(), ws.k1.as_mut_slice());
        tangent(system, y.as_slice(), &m, m1).map_err(stage)?;

        shift(ws.probe.as_mut_slice(), y.as_slice(), 0.5 * h, ws.k1.as_slice());
        system.rhs(ws.probe.as_slice(), ws.k2.as_mut_slice());
        shift(probe_m.as_mut_slice(), m.as_slice(), 0.5 * h, m1.as_slice());
        tangent(system, ws.probe.as_slice(), &probe_m, m2).map_err(stage)?;

        shift(ws.probe.as_mut_slice(), y.as_slice(), 0.5 * h, ws.k2.as_slice());
        system.rhs(ws.probe.as_slice(), ws.k3.as_mut_slice());
        shift(probe_m.as_mut_slice(), m.as_slice(), 0.5 * h, m2.as_slice());
        tangent(system, ws.probe.as_slice(), &probe_m, m3).map_err(stage)?;

        shift(ws.probe.as_mut_slice(), y.as_slice(), h, ws.k3.as_slice());
        system.rhs(ws.probe.as_slice(), ws.k4.as_mut_slice());
        shift(probe_m.as_mut_slice(), m.as_slice(), h, m3.as_slice());
        tangent(system, ws.probe.as_slice(), &probe_m, m4).map_err(stage)?;

        for i in 0..n {
            y[i] += h / 6.0 * (ws.k1[i] + 2.0 * ws.k2[i] + 2.0 * ws.k3[i] + ws.k4[i]);
        }
        let w = h / 6.0;
        for (j, mj) in m.as_mut_slice().iter_mut().enumerate() {
            *mj += (m1.as_slice()[j] + 2.0 * m2.as_slice()[j] + 2.0 * m3.as_slice()[j] + m4.as_slice()[j]) * w;
        }

        if y.iter().any(|v| !v.is_finite()) || m.iter().any(|v| !v.is_finite()) {
            return Err(blowup(k + 1, &y));
        }
        visit(k + 1, plan.time(k + 1), &y, &m);
    }
    Ok(())
}

/// Co-integrates the orbit and its fundamental matrix, keeping every sample.
pub fn integrate_variational(system: &dyn System, y0: &[f64], dt: f64, t_end: f64) -> Result<VariationalResult> {
    let mut out =
        VariationalResult { trajectory: Trajectory { times: Vec::new(), states: Vec::new() }, matrices: Vec::new() };
    for_each_variational_state(system, y0, dt, t_end, |_, t, y, m| {
        out.trajectory.times.push(t);
        out.trajectory.states.push(y.clone());
        out.matrices.push(m.clone());
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DoubleWellParticle, FnSystem, LinearSystem};
    use std::f64::consts::FRAC_PI_2;

    fn zero_flow(n: usize) -> FnSystem {
        FnSystem::new("zero", n, |_y: &[f64], dy: &mut [f64]| dy.fill(0.0))
    }

    fn decay() -> FnSystem {
        FnSystem::new("decay", 1, |y: &[f64], dy: &mut [f64]| dy[0] = -y[0])
    }

    #[test]
    fn step_plan_lands_on_t_end() {
        let p = StepPlan::new(0.01, 1.0).unwrap();
        assert_eq!(p.steps, 100);
        assert_eq!(p.time(100), 1.0);
        let p = StepPlan::new(0.3, 1.0).unwrap();
        assert_eq!(p.steps, 4);
        assert!((p.step_size(3) - 0.1).abs() < 1e-15);
        assert!(StepPlan::new(2.0, 1.0).is_err());
        assert!(StepPlan::new(0.0, 1.0).is_err());
        assert!(StepPlan::new(0.1, f64::NAN).is_err());
    }

    #[test]
    fn constant_flow_is_constant() {
        let traj = integrate_trajectory(&zero_flow(2), &[3.0, -1.0], 0.1, 1.0).unwrap();
        assert_eq!(traj.len(), 11);
        assert!(traj.states.iter().all(|s| s.as_slice() == [3.0, -1.0]));
        for (k, t) in traj.times.iter().enumerate() {
            assert!((t - k as f64 * 0.1).abs() <= 1e-15);
        }
    }

    #[test]
    fn exponential_decay() {
        let traj = integrate_trajectory(&decay(), &[1.0], 0.01, 1.0).unwrap();
        let last = traj.last_state().unwrap()[0];
        assert!((last - (-1.0f64).exp()).abs() < 1e-8, "{last}");
        assert_eq!(*traj.times.last().unwrap(), 1.0);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let err = |dt: f64| {
            let traj = integrate_trajectory(&decay(), &[1.0], dt, 1.0).unwrap();
            (traj.last_state().unwrap()[0] - (-1.0f64).exp()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((12.0..=20.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn double_well_relaxes_to_right_well() {
        // DOP853 at rtol 1e-13 from (0.9, 0) to t = 20.
        let reference = [9.999968898125824e-01, 6.195288250202554e-06];
        let sys = DoubleWellParticle::new(1.0).unwrap();
        let last = integrate_trajectory(&sys, &[0.9, 0.0], 0.01, 20.0).unwrap().states.pop().unwrap();
        assert!((last[0] - reference[0]).abs() < 1e-6 && (last[1] - reference[1]).abs() < 1e-6);
        assert!((last - DVector::from_vec(vec![1.0, 0.0])).norm() < 1e-5);
    }

    #[test]
    fn zero_flow_keeps_identity() {
        let res = integrate_variational(&zero_flow(3), &[1.0, 2.0, 3.0], 0.1, 1.0).unwrap();
        assert!(res.matrices.iter().all(|m| *m == DMatrix::identity(3, 3)));
        assert_eq!(res.matrices.len(), res.trajectory.len());
    }

    #[test]
    fn rotation_fundamental_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let sys = LinearSystem::new(a).unwrap();
        let res = integrate_variational(&sys, &[0.2, 0.4], 1e-3, FRAC_PI_2).unwrap();
        let m = res.matrices.last().unwrap();
        // exp(A t) = [[cos t, sin t], [-sin t, cos t]]
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!((m - expected).abs().max() < 1e-6);
        assert_eq!(res.matrices[0], DMatrix::identity(2, 2));
    }

    #[test]
    fn linear_fundamental_matrix_independent_of_start() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.5, 1.5, -0.3, 0.1]);
        let sys = LinearSystem::new(a).unwrap();
        let m1 = integrate_variational(&sys, &[1.0, 0.0], 0.01, 3.0).unwrap().matrices.pop().unwrap();
        let m2 = integrate_variational(&sys, &[-4.0, 7.0], 0.01, 3.0).unwrap().matrices.pop().unwrap();
        assert!((m1 - m2).abs().max() <= 1e-12);
    }

    #[test]
    fn double_well_fundamental_matrix_matches_reference() {
        // DOP853 at rtol 1e-13 on the augmented system, y0 = (0.5, 0.1), t = 1.
        let reference = DMatrix::from_row_slice(
            2,
            2,
            &[1.0220640864484567, 0.6289598693515398, -0.06935573616034353, 0.3172574701690244],
        );
        let sys = DoubleWellParticle::new(1.0).unwrap();
        let m = integrate_variational(&sys, &[0.5, 0.1], 0.01, 1.0).unwrap().matrices.pop().unwrap();
        assert!((m - reference).abs().max() < 1e-8);
    }

    #[test]
    fn tangent_forecast_defect() {
        // Reference defect at |delta| = 1e-4 along x is 1.30700734e-8 (second order).
        let sys = DoubleWellParticle::new(1.0).unwrap();
        let y0 = [0.5, 0.1];
        let base = integrate_variational(&sys, &y0, 0.01, 1.0).unwrap();
        let delta = DVector::from_vec(vec![1e-4, 0.0]);
        let bumped = integrate_trajectory(&sys, &[0.5 + 1e-4, 0.1], 0.01, 1.0).unwrap();
        let defect = (bumped.last_state().unwrap()
            - base.trajectory.last_state().unwrap()
            - base.matrices.last().unwrap() * &delta)
            .norm();
        assert!((defect - 1.3070073e-8).abs() < 1e-10, "{defect}");
    }

    #[test]
    fn blowup_reports_step() {
        let sys = FnSystem::new("explode", 1, |y: &[f64], dy: &mut [f64]| dy[0] = y[0] * y[0]);
        match integrate_trajectory(&sys, &[10.0], 0.05, 5.0) {
            Err(Error::NonFiniteState { step, .. }) => assert!(step > 0),
            other => panic!("expected blow-up, got {other:?}"),
        }
        match integrate_variational(&sys, &[10.0], 0.05, 5.0) {
            Err(Error::NonFiniteState { step, .. }) => assert!(step > 0),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn csv_dump_format() {
        let traj = integrate_trajectory(&zero_flow(2), &[0.1, 2.0], 0.5, 1.0).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,y0,y1");
        assert_eq!(lines.len(), 4);
        let row: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row, vec![0.0, 0.1, 2.0]);
        assert_eq!(lines[1].split(',').nth(1).unwrap(), "1.0000000000000001e-1");
    }
}
