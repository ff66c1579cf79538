//! Self-checks for a model: analytic Jacobian against central differences,
//! and second-order behaviour of the variational forecast.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{for_each_state, for_each_variational_state};
use crate::system::{numerical_jacobian, System};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationOptions {
    /// Number of random states to check.
    pub samples: usize,
    pub seed: u64,
    /// Each state component is drawn uniformly from this range.
    pub state_range: (f64, f64),
    /// Bound on `max|J_analytic - J_fd| / max(1, max|J_analytic|)`.
    pub jacobian_tol: f64,
    pub horizon: f64,
    pub dt: f64,
    /// Perturbation sizes, each half the previous.
    pub deltas: Vec<f64>,
    /// Admissible range for consecutive defect ratios.
    pub ratio_band: (f64, f64),
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            samples: 5,
            seed: 0,
            state_range: (-1.5, 1.5),
            jacobian_tol: 1e-5,
            horizon: 1.0,
            dt: 0.01,
            deltas: vec![1e-3, 5e-4, 2.5e-4],
            ratio_band: (3.5, 4.5),
        }
    }
}

impl ValidationOptions {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.state_range;
        let ok = self.samples > 0
            && lo.is_finite()
            && hi.is_finite()
            && lo <= hi
            && self.jacobian_tol > 0.0
            && self.horizon > 0.0
            && self.dt > 0.0
            && self.deltas.len() >= 2
            && self.deltas.iter().all(|d| d.is_finite() && *d > 0.0)
            && self.ratio_band.0 <= self.ratio_band.1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("invalid validation options: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub model: String,
    pub dimension: usize,
    /// False when the model has no analytic Jacobian; the check is skipped.
    pub analytic_jacobian: bool,
    pub jacobian_max_error: f64,
    pub jacobian_ok: bool,
    /// Largest defect `||Phi(y+d) - Phi(y) - M d||` over all samples.
    pub max_defect: f64,
    /// Consecutive defect ratios of every sample that is not exactly linear.
    pub defect_ratios: Vec<f64>,
    pub tangent_ok: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.jacobian_ok && self.tangent_ok
    }
}

fn flow(system: &dyn System, y0: &[f64], opts: &ValidationOptions) -> Result<DVector<f64>> {
    let mut last = DVector::from_column_slice(y0);
    for_each_state(system, y0, opts.dt, opts.horizon, |_, _, y| {
        last.copy_from(y);
        std::ops::ControlFlow::Continue(())
    })?;
    Ok(last)
}

/// Runs both checks at `samples` seeded random states.
pub fn validate_model(system: &dyn System, opts: &ValidationOptions) -> Result<ValidationReport> {
    opts.validate()?;
    let n = system.dimension();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (lo, hi) = opts.state_range;
    let mut report = ValidationReport {
        model: system.name().to_string(),
        dimension: n,
        analytic_jacobian: false,
        jacobian_max_error: 0.0,
        jacobian_ok: true,
        max_defect: 0.0,
        defect_ratios: Vec::new(),
        tangent_ok: true,
    };

    for _ in 0..opts.samples {
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();

        if let Some(analytic) = system.analytic_jacobian(&y) {
            report.analytic_jacobian = true;
            let fd = numerical_jacobian(system, &y);
            let scale = analytic.abs().max().max(1.0);
            let err = (&analytic - fd).abs().max() / scale;
            report.jacobian_max_error = report.jacobian_max_error.max(err);
        }

        let mut direction = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
        let len = direction.norm();
        if len == 0.0 {
            direction[0] = 1.0;
        } else {
            direction /= len;
        }

        let mut base = DVector::zeros(n);
        let mut m_end = nalgebra::DMatrix::zeros(n, n);
        for_each_variational_state(system, &y, opts.dt, opts.horizon, |_, _, yk, mk| {
            base.copy_from(yk);
            m_end.copy_from(mk);
        })?;

        let mut defects = Vec::with_capacity(opts.deltas.len());
        for &size in &opts.deltas {
            let bumped: Vec<f64> = y.iter().zip(direction.iter()).map(|(a, u)| a + size * u).collect();
            let applied = DVector::from_iterator(n, bumped.iter().zip(&y).map(|(b, a)| b - a));
            let end = flow(system, &bumped, opts)?;
            defects.push((end - &base - &m_end * &applied).norm());
        }
        let largest = defects.iter().cloned().fold(0.0f64, f64::max);
        report.max_defect = report.max_defect.max(largest);
        // Below this the defect is rounding noise: the flow is linear here.
        let exact = 1e-12 * base.norm().max(1.0);
        if largest <= exact {
            continue;
        }
        for w in defects.windows(2) {
            let ratio = if w[1] > 0.0 { w[0] / w[1] } else { f64::INFINITY };
            report.defect_ratios.push(ratio);
            if !(opts.ratio_band.0..=opts.ratio_band.1).contains(&ratio) {
                report.tangent_ok = false;
            }
        }
    }
    report.jacobian_ok = report.jacobian_max_error <= opts.jacobian_tol;
    Ok(report)
}
