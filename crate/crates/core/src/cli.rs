//! Command-line front end. Each command returns its process exit code:
//! 0 success, 1 a completed run that failed (or a failed check), 2 bad input
//! detected before any run started.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::bench::{generate_instance_with, run_scaling, run_suite};
use crate::config::{parse_bench_config, parse_config, parse_validate_config, BenchMode, Verbosity};
use crate::controller::control;
use crate::error::{Error, Result};
use crate::integrator::integrate_trajectory;
use crate::system::System;
use crate::validate::{validate_model, ValidationOptions};

#[derive(Debug, Parser)]
#[command(
    name = "basin-control",
    version,
    about = "Find eligible perturbations that steer a dynamical system into a target basin"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Report path, overriding the config file.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Report detail for `control`, overriding the config file.
    #[arg(long, global = true, value_enum)]
    pub verbosity: Option<Verbosity>,
    /// Worker threads for `bench`.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the controller described by a config file.
    Control { config: PathBuf },
    /// Run a benchmark suite or a scaling sweep.
    Bench { config: PathBuf },
    /// Check a model's Jacobian and variational forecast.
    Validate { config: PathBuf },
}

pub fn run(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    if cli.threads.is_some() && !matches!(cli.command, Command::Bench { .. }) {
        let _ = writeln!(stderr, "error: --threads only applies to `bench`");
        return 2;
    }
    match &cli.command {
        Command::Control { config } => cmd_control(config, cli.output.as_deref(), cli.verbosity, stdout, stderr),
        Command::Bench { config } => cmd_bench(config, cli.output.as_deref(), cli.threads, stdout, stderr),
        Command::Validate { config } => cmd_validate(config, cli.output.as_deref(), stdout, stderr),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Report sink chosen before the run, so an unwritable path fails early.
enum Sink {
    Stdout,
    File(BufWriter<File>),
}

impl Sink {
    fn open(path: Option<&Path>) -> Result<Self> {
        Ok(match path {
            Some(p) => Sink::File(create(p)?),
            None => Sink::Stdout,
        })
    }

    fn write_json<T: Serialize>(self, value: &T, stdout: &mut dyn Write) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.into()))?;
        match self {
            Sink::Stdout => writeln!(stdout, "{text}")?,
            Sink::File(mut f) => {
                writeln!(f, "{text}")?;
                f.flush()?;
            }
        }
        Ok(())
    }
}

fn fail(stderr: &mut dyn Write, code: i32, e: &Error) -> i32 {
    let _ = writeln!(stderr, "error: {e}");
    code
}

pub fn cmd_control(
    config: &Path,
    output: Option<&Path>,
    verbosity: Option<Verbosity>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32 {
    let setup = || -> Result<_> {
        let cfg = parse_config(config)?;
        let run = cfg.prepare()?;
        let report_path = output.map(Path::to_path_buf).or_else(|| cfg.output.report.as_ref().map(|p| cfg.resolve(p)));
        let sink = Sink::open(report_path.as_deref())?;
        let trajectory = cfg.output.trajectory.as_ref().map(|p| create(&cfg.resolve(p))).transpose()?;
        Ok((cfg, run, sink, trajectory))
    };
    let (cfg, run, sink, trajectory) = match setup() {
        Ok(v) => v,
        Err(e) => return fail(stderr, 2, &e),
    };

    let outcome = match control(run.system.as_ref(), &run.y0, &run.yt, &run.cs, &run.params) {
        Ok(o) => o,
        Err(e) => return fail(stderr, 1, &e),
    };
    let written = match verbosity.unwrap_or(cfg.output.verbosity) {
        Verbosity::Lean => sink.write_json(&outcome.final_state().to_vec(), stdout),
        Verbosity::Full => sink.write_json(&outcome.report(), stdout),
    };
    if let Err(e) = written {
        return fail(stderr, 1, &e);
    }
    if let Some(mut file) = trajectory {
        let dumped = integrate_trajectory(
            run.system.as_ref(),
            outcome.final_state().as_slice(),
            run.params.dt,
            run.params.t_test,
        )
        .and_then(|t| Ok(t.write_csv(&mut file)?))
        .and_then(|_| Ok(file.flush()?));
        if let Err(e) = dumped {
            return fail(stderr, 1, &e);
        }
    }
    if outcome.stalled {
        let _ = writeln!(stderr, "stalled after {} iterations: no eligible step of size >= eps0", outcome.n_iter);
    }
    outcome.status.code()
}

pub fn cmd_bench(
    config: &Path,
    output: Option<&Path>,
    threads: Option<usize>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32 {
    let setup = || -> Result<_> {
        let cfg = parse_bench_config(config)?;
        let params = cfg.control.params()?;
        let report_path = output.map(Path::to_path_buf).or_else(|| cfg.output.report.as_ref().map(|p| cfg.resolve(p)));
        let sink = Sink::open(report_path.as_deref())?;
        let csv = cfg.output.csv.as_ref().map(|p| create(&cfg.resolve(p))).transpose()?;
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(k) = threads {
            pool = pool.num_threads(k);
        }
        let pool = pool.build().map_err(|e| Error::InvalidParams(e.to_string()))?;
        Ok((cfg, params, sink, csv, pool))
    };
    let (cfg, params, sink, csv, pool) = match setup() {
        Ok(v) => v,
        Err(e) => return fail(stderr, 2, &e),
    };

    match cfg.mode {
        BenchMode::Suite => {
            let n = cfg.n.expect("checked");
            let seeds = cfg.seeds.as_ref().expect("checked").seeds();
            let instances = match pool.install(|| {
                use rayon::prelude::*;
                seeds.par_iter().map(|&s| generate_instance_with(n, s, &cfg.generator)).collect::<Result<Vec<_>>>()
            }) {
                Ok(v) => v,
                Err(e) => return fail(stderr, 2, &e),
            };
            let report = pool.install(|| run_suite(&instances, &params));
            let _ = writeln!(stderr, "success fraction {} over {} instances", report.success_fraction, instances.len());
            match sink.write_json(&report, stdout) {
                Ok(()) => 0,
                Err(e) => fail(stderr, 1, &e),
            }
        }
        BenchMode::Scaling => {
            let dims = cfg.dims.as_ref().expect("checked");
            let report = match run_scaling(dims, cfg.seeds_per_dim.expect("checked"), &params, &cfg.generator) {
                Ok(r) => r,
                Err(e @ (Error::GenerationFailed { .. } | Error::InvalidParams(_))) => return fail(stderr, 2, &e),
                Err(e) => return fail(stderr, 1, &e),
            };
            let _ = writeln!(stderr, "fitted exponent {:.3}", report.fitted_exponent);
            if let Some(mut file) = csv {
                if let Err(e) = report.write_csv(&mut file).and_then(|_| file.flush()) {
                    return fail(stderr, 1, &e.into());
                }
            }
            match sink.write_json(&report, stdout) {
                Ok(()) => 0,
                Err(e) => fail(stderr, 1, &e),
            }
        }
    }
}

pub fn cmd_validate(config: &Path, output: Option<&Path>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let setup = || -> Result<_> {
        let cfg = parse_validate_config(config)?;
        let system = cfg.model.build(&cfg.base_dir)?;
        let report_path = output.map(Path::to_path_buf).or_else(|| cfg.report.as_ref().map(|p| cfg.base_dir.join(p)));
        let sink = report_path.as_deref().map(create).transpose()?;
        Ok((cfg, system, sink))
    };
    let (cfg, system, sink) = match setup() {
        Ok(v) => v,
        Err(e) => return fail(stderr, 2, &e),
    };
    report_validation(system.as_ref(), &cfg.validate, sink, stdout, stderr)
}

/// Runs the model checks, prints a summary and optionally a JSON report.
/// Returns 0 when both checks pass, 1 otherwise, 2 for bad options.
pub fn report_validation(
    system: &dyn System,
    opts: &ValidationOptions,
    sink: Option<BufWriter<File>>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32 {
    let report = match validate_model(system, opts) {
        Ok(r) => r,
        Err(e) => return fail(stderr, 2, &e),
    };
    let verdict = |ok: bool| if ok { "ok" } else { "FAILED" };
    let jac = if report.analytic_jacobian {
        format!("{:.3e}", report.jacobian_max_error)
    } else {
        "n/a (no analytic Jacobian)".into()
    };
    let ratios = report.defect_ratios.iter().cloned();
    let (lo, hi) = ratios.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r), b.max(r)));
    let _ = writeln!(stdout, "model {} (n = {})", report.model, report.dimension);
    let _ = writeln!(stdout, "jacobian max error  {jac}  {}", verdict(report.jacobian_ok));
    if report.defect_ratios.is_empty() {
        let _ = writeln!(
            stdout,
            "tangent defect      max {:.3e}, exact  {}",
            report.max_defect,
            verdict(report.tangent_ok)
        );
    } else {
        let _ = writeln!(
            stdout,
            "tangent defect      max {:.3e}, ratios [{lo:.3}, {hi:.3}]  {}",
            report.max_defect,
            verdict(report.tangent_ok)
        );
    }
    if let Some(file) = sink {
        let result = serde_json::to_writer_pretty(file, &report).map_err(|e| Error::Io(e.into()));
        if let Err(e) = result {
            return fail(stderr, 1, &e);
        }
    }
    if report.passed() {
        0
    } else {
        1
    }
}
