//! Benchmark instances with a guaranteed solution, success-rate suites and
//! runtime scaling sweeps on bistable networks.
//!
//! Instances are built witness-first: sample a state `w` in the basin of the
//! all-ones fixed point, then push a random nonempty subset of the perturbable
//! nodes of `w` into the opposite well to get the start `y0`. The box allows
//! every perturbable node to move within `perturb_radius` of `y0` and freezes
//! the rest, so `w` is reachable from `y0` by one eligible perturbation.

use std::io::{self, Write};
use std::time::Instant;

use nalgebra::DVector;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::controller::{control, test_convergence, ControlParams};
use crate::error::{Error, Result};
use crate::models::BistableNetwork;
use crate::system::{evaluate_rhs, SystemState};

const MAX_GRAPH_DRAWS: usize = 10_000;

/// Knobs of the instance generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub coupling: f64,
    /// Erdos-Renyi edge probability; `None` means `min(1, 4/n)`.
    pub edge_probability: Option<f64>,
    /// Fraction of nodes that may be perturbed (rounded up).
    pub perturbable_fraction: f64,
    pub perturb_radius: f64,
    /// Half-width of the uniform noise around the target used for witnesses.
    pub witness_noise: f64,
    /// Range that flipped nodes are drawn from.
    pub flip_range: (f64, f64),
    pub max_attempts: usize,
    /// Convergence test used to accept witnesses and reject starts.
    pub check_dt: f64,
    pub check_t_test: f64,
    pub check_tol: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            coupling: 0.05,
            edge_probability: None,
            perturbable_fraction: 0.5,
            perturb_radius: 2.0,
            witness_noise: 0.3,
            flip_range: (-1.2, -0.8),
            max_attempts: 100,
            check_dt: 0.01,
            check_t_test: 100.0,
            check_tol: 1e-2,
        }
    }
}

impl GeneratorConfig {
    pub fn check_params(&self) -> ControlParams {
        ControlParams {
            dt: self.check_dt,
            t_max: self.check_dt,
            t_test: self.check_t_test,
            tol: self.check_tol,
            ..ControlParams::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.coupling.is_finite()
            && self.edge_probability.is_none_or(|p| (0.0..=1.0).contains(&p))
            && self.perturbable_fraction > 0.0
            && self.perturbable_fraction <= 1.0
            && self.perturb_radius > 0.0
            && self.witness_noise >= 0.0
            && self.flip_range.0 <= self.flip_range.1
            && self.max_attempts > 0;
        if !ok {
            return Err(Error::InvalidParams(format!("invalid generator config: {self:?}")));
        }
        self.check_params().validate()
    }
}

#[derive(Clone, Debug)]
pub struct BenchInstance {
    pub n: usize,
    pub seed: u64,
    pub system: BistableNetwork,
    pub y0: SystemState,
    pub yt: SystemState,
    pub cs: ConstraintSet,
    /// Eligible state known to converge to `yt`.
    pub witness: SystemState,
    pub perturbable: Vec<usize>,
    /// Perturbable nodes that were moved into the opposite well.
    pub flipped: Vec<usize>,
}

impl BenchInstance {
    pub fn summary(&self) -> InstanceSummary {
        InstanceSummary {
            seed: self.seed,
            n: self.n,
            edges: self.system.edges().to_vec(),
            perturbable: self.perturbable.clone(),
            flipped: self.flipped.clone(),
            y0: self.y0.to_vec(),
            yt: self.yt.to_vec(),
            witness: self.witness.to_vec(),
        }
    }
}

pub fn generate_instance(n: usize, seed: u64) -> Result<BenchInstance> {
    generate_instance_with(n, seed, &GeneratorConfig::default())
}

pub fn generate_instance_with(n: usize, seed: u64, cfg: &GeneratorConfig) -> Result<BenchInstance> {
    if n < 2 {
        return Err(Error::InvalidParams(format!("benchmark networks need n >= 2, got {n}")));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let system = random_connected_network(n, cfg, &mut rng)?;

    let yt = DVector::from_element(n, 1.0);
    let drift = evaluate_rhs(&system, yt.as_slice())?.norm();
    if drift > 1e-8 {
        return Err(Error::InvalidParams(format!("all-ones state is not a fixed point (|F| = {drift})")));
    }

    let check = cfg.check_params();
    let converges = |y: &DVector<f64>| -> Result<bool> {
        Ok(test_convergence(&system, y.as_slice(), yt.as_slice(), &check)?.converged)
    };

    let n_free = ((cfg.perturbable_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut perturbable = sample(&mut rng, n, n_free).into_vec();
    perturbable.sort_unstable();

    for _ in 0..cfg.max_attempts {
        let witness = yt.map(|v| v + rng.random_range(-cfg.witness_noise..=cfg.witness_noise));
        if !converges(&witness)? {
            continue;
        }
        // Flip values are drawn from the part of the flip range within
        // reach of the witness.
        let reach = |i: usize| {
            let lo = cfg.flip_range.0.max(witness[i] - cfg.perturb_radius);
            let hi = cfg.flip_range.1.min(witness[i] + cfg.perturb_radius);
            (lo <= hi).then_some((lo, hi))
        };
        let candidates: Vec<usize> = perturbable.iter().copied().filter(|&i| reach(i).is_some()).collect();
        if candidates.is_empty() {
            continue;
        }
        let mut flipped: Vec<usize> = candidates.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
        if flipped.is_empty() {
            flipped.push(candidates[rng.random_range(0..candidates.len())]);
        }
        let mut y0 = witness.clone();
        for &i in &flipped {
            let (lo, hi) = reach(i).expect("candidate");
            y0[i] = rng.random_range(lo..=hi);
        }
        if converges(&y0)? {
            continue;
        }
        if perturbable.iter().any(|&i| (witness[i] - y0[i]).abs() > cfg.perturb_radius) {
            continue;
        }

        let mut lb = y0.clone();
        let mut ub = y0.clone();
        for &i in &perturbable {
            lb[i] -= cfg.perturb_radius;
            ub[i] += cfg.perturb_radius;
        }
        let cs = ConstraintSet::with_bounds(lb.as_slice().to_vec(), ub.as_slice().to_vec())?;
        debug_assert!(cs.is_eligible(witness.as_slice())?);
        return Ok(BenchInstance {
            n,
            seed,
            system,
            y0: SystemState::from_vector(y0)?,
            yt: SystemState::from_vector(yt)?,
            cs,
            witness: SystemState::from_vector(witness)?,
            perturbable,
            flipped,
        });
    }
    Err(Error::GenerationFailed { n, seed, attempts: cfg.max_attempts })
}

fn random_connected_network(n: usize, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<BistableNetwork> {
    let p = cfg.edge_probability.unwrap_or_else(|| (4.0 / n as f64).min(1.0));
    for _ in 0..MAX_GRAPH_DRAWS {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(p) {
                    edges.push((i, j));
                }
            }
        }
        let net = BistableNetwork::new(n, cfg.coupling, &edges)?;
        if net.is_connected() {
            return Ok(net);
        }
    }
    Err(Error::InvalidParams(format!("no connected graph with n={n}, p={p}")))
}

/// Static description of an instance, as written to suite reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub seed: u64,
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub perturbable: Vec<usize>,
    pub flipped: Vec<usize>,
    pub y0: Vec<f64>,
    pub yt: Vec<f64>,
    pub witness: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub seed: u64,
    pub n: usize,
    pub status: i32,
    pub stall: bool,
    pub n_iter: usize,
    pub seconds: f64,
    /// Success re-checked with a fresh convergence test of the final state.
    pub verified: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub instances: Vec<InstanceSummary>,
    pub success_fraction: f64,
    pub per_instance: Vec<InstanceRecord>,
}

impl SuiteReport {
    pub fn successes(&self) -> usize {
        self.per_instance.iter().filter(|r| r.status == 0 && r.verified).count()
    }
}

fn run_instance(inst: &BenchInstance, params: &ControlParams) -> InstanceRecord {
    let start = Instant::now();
    let mut record = InstanceRecord {
        seed: inst.seed,
        n: inst.n,
        status: 1,
        stall: false,
        n_iter: 0,
        seconds: 0.0,
        verified: false,
        error: None,
    };
    match control(&inst.system, &inst.y0, &inst.yt, &inst.cs, params) {
        Ok(out) => {
            record.status = out.status.code();
            record.stall = out.stalled;
            record.n_iter = out.n_iter;
            record.seconds = out.total_seconds;
            if out.succeeded() {
                record.verified =
                    test_convergence(&inst.system, out.final_state().as_slice(), inst.yt.as_slice(), params)
                        .map(|v| v.converged)
                        .unwrap_or(false)
                        && inst.cs.is_eligible(out.final_state().as_slice()).unwrap_or(false);
            }
        }
        Err(e) => {
            record.seconds = start.elapsed().as_secs_f64();
            record.error = Some(e.to_string());
        }
    }
    record
}

/// Runs the controller on every instance (in parallel on the current rayon
/// pool). A success counts only if the final state re-verifies.
pub fn run_suite(instances: &[BenchInstance], params: &ControlParams) -> SuiteReport {
    let per_instance: Vec<InstanceRecord> = instances.par_iter().map(|inst| run_instance(inst, params)).collect();
    let wins = per_instance.iter().filter(|r| r.status == 0 && r.verified).count();
    SuiteReport {
        instances: instances.iter().map(BenchInstance::summary).collect(),
        success_fraction: if per_instance.is_empty() { 0.0 } else { wins as f64 / per_instance.len() as f64 },
        per_instance,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub dimensions: Vec<usize>,
    pub mean_runtimes: Vec<f64>,
    pub stddev_runtimes: Vec<f64>,
    pub fitted_exponent: f64,
}

impl ScalingReport {
    /// CSV `n,mean_seconds,stddev_seconds`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "n,mean_seconds,stddev_seconds")?;
        for ((n, m), s) in self.dimensions.iter().zip(&self.mean_runtimes).zip(&self.stddev_runtimes) {
            writeln!(w, "{n},{m:.16e},{s:.16e}")?;
        }
        Ok(())
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.mean_runtimes.windows(2).all(|w| w[1] > w[0])
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidParams("log-log fit needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidParams("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParams("log-log fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// Times `runner(n, seed)` for seeds `1..=seeds_per_dim` at each dimension.
pub fn run_scaling_with<F>(dims: &[usize], seeds_per_dim: usize, mut runner: F) -> Result<ScalingReport>
where
    F: FnMut(usize, u64) -> Result<f64>,
{
    if dims.len() < 3 || !dims.windows(2).all(|w| w[1] > w[0]) {
        return Err(Error::InvalidParams("scaling needs at least three strictly increasing dimensions".into()));
    }
    if seeds_per_dim == 0 {
        return Err(Error::InvalidParams("seeds_per_dim must be positive".into()));
    }
    let mut mean_runtimes = Vec::new();
    let mut stddev_runtimes = Vec::new();
    for &n in dims {
        let times = (1..=seeds_per_dim as u64).map(|seed| runner(n, seed)).collect::<Result<Vec<f64>>>()?;
        let k = times.len() as f64;
        let mean = times.iter().sum::<f64>() / k;
        let var =
            if times.len() > 1 { times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (k - 1.0) } else { 0.0 };
        mean_runtimes.push(mean);
        stddev_runtimes.push(var.sqrt());
    }
    let xs: Vec<f64> = dims.iter().map(|&n| n as f64).collect();
    let fitted_exponent = fit_loglog(&xs, &mean_runtimes)?;
    Ok(ScalingReport { dimensions: dims.to_vec(), mean_runtimes, stddev_runtimes, fitted_exponent })
}

/// Mean wall-clock control time versus network size. All instances are
/// generated before any timing starts; runs are sequential so they do not
/// compete for cores.
pub fn run_scaling(
    dims: &[usize],
    seeds_per_dim: usize,
    params: &ControlParams,
    cfg: &GeneratorConfig,
) -> Result<ScalingReport> {
    let mut instances = Vec::new();
    for &n in dims {
        for seed in 1..=seeds_per_dim as u64 {
            instances.push(generate_instance_with(n, seed, cfg)?);
        }
    }
    let mut pending = instances.into_iter();
    run_scaling_with(dims, seeds_per_dim, |n, seed| {
        let inst = pending.next().expect("one instance per run");
        debug_assert_eq!((inst.n, inst.seed), (n, seed));
        let start = Instant::now();
        control(&inst.system, &inst.y0, &inst.yt, &inst.cs, params)?;
        Ok(start.elapsed().as_secs_f64())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::System;

    #[test]
    fn synthetic_fit() {
        assert_eq!(fit_loglog(&[1.0, 2.0, 4.0], &[1.0, 4.0, 16.0]).unwrap(), 2.0);
        assert!(fit_loglog(&[1.0, 2.0], &[1.0, 0.0]).is_err());
        assert!(fit_loglog(&[2.0, 2.0], &[1.0, 3.0]).is_err());
    }

    #[test]
    fn flat_runner_has_zero_exponent() {
        let report = run_scaling_with(&[8, 16, 32, 64], 3, |_, _| Ok(0.25)).unwrap();
        assert!(report.fitted_exponent.abs() < 0.2);
        assert_eq!(report.stddev_runtimes, vec![0.0; 4]);
        assert!(!report.is_strictly_increasing());
    }

    #[test]
    fn scaling_precondition() {
        assert!(run_scaling_with(&[8, 16], 1, |_, _| Ok(1.0)).is_err());
        assert!(run_scaling_with(&[8, 8, 16], 1, |_, _| Ok(1.0)).is_err());
    }

    #[test]
    fn small_instance_is_sound() {
        let inst = generate_instance(2, 1).unwrap();
        let check = GeneratorConfig::default().check_params();
        assert!(test_convergence(&inst.system, inst.witness.as_slice(), inst.yt.as_slice(), &check).unwrap().converged);
        assert!(!test_convergence(&inst.system, inst.y0.as_slice(), inst.yt.as_slice(), &check).unwrap().converged);
        assert!(inst.cs.is_eligible(inst.witness.as_slice()).unwrap());
    }

    #[test]
    fn constraint_layout() {
        let inst = generate_instance(10, 7).unwrap();
        assert_eq!(inst.perturbable.len(), 5);
        for i in 0..10 {
            if inst.perturbable.contains(&i) {
                assert_eq!(inst.cs.lb()[i], inst.y0[i] - 2.0);
                assert_eq!(inst.cs.ub()[i], inst.y0[i] + 2.0);
            } else {
                assert_eq!(inst.cs.lb()[i], inst.y0[i]);
                assert_eq!(inst.cs.ub()[i], inst.y0[i]);
                assert_eq!(inst.witness[i], inst.y0[i]);
            }
        }
        assert!(inst.system.is_connected());
        assert_eq!(inst.system.dimension(), 10);
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_instance(12, 99).unwrap();
        let b = generate_instance(12, 99).unwrap();
        assert_eq!(a.summary(), b.summary());
        assert_eq!(a.cs.lb(), b.cs.lb());
    }

    #[test]
    fn tiny_networks_rejected() {
        assert!(matches!(generate_instance(1, 1), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn impossible_generation_fails() {
        // Witness noise this large never converges within a tiny window.
        let cfg = GeneratorConfig { check_t_test: 0.02, max_attempts: 3, ..GeneratorConfig::default() };
        assert!(matches!(generate_instance_with(6, 3, &cfg), Err(Error::GenerationFailed { attempts: 3, .. })));
    }
}
