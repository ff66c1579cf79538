//! TOML run descriptions for the command-line tool.
//!
//! Relative paths inside a config file are resolved against the directory
//! containing that file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::GeneratorConfig;
use crate::constraints::{ConstraintSet, DEFAULT_FEAS_TOL};
use crate::controller::{ControlParams, Metric};
use crate::error::{Error, Result};
use crate::models::{build_model, read_edge_list, ModelParams};
use crate::system::{System, SystemState};
use crate::validate::ValidationOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "ModelParams::is_empty")]
    pub params: ModelParams,
    /// Edge-list file, one `i j` pair per line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<PathBuf>,
    /// Inline alternative to `topology`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<(usize, usize)>>,
}

impl ModelConfig {
    pub fn build(&self, base: &Path) -> Result<Box<dyn System>> {
        let edges = match (&self.topology, &self.edges) {
            (Some(_), Some(_)) => {
                return Err(Error::Validation("give either model.topology or model.edges, not both".into()))
            }
            (Some(path), None) => Some(read_edge_list(&base.join(path))?),
            (None, edges) => edges.clone(),
        };
        build_model(&self.name, &self.params, edges.as_deref())
    }
}

/// Bound vector entries: numbers, or the strings `"-inf"` / `"+inf"`.
mod bounds {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Entry {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        let entries = v.as_ref().map(|v| {
            v.iter()
                .map(|&x| match x {
                    f64::NEG_INFINITY => Entry::Text("-inf".into()),
                    f64::INFINITY => Entry::Text("+inf".into()),
                    x => Entry::Num(x),
                })
                .collect::<Vec<_>>()
        });
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
        let entries = Option::<Vec<Entry>>::deserialize(d)?;
        entries
            .map(|v| {
                v.into_iter()
                    .map(|e| match e {
                        Entry::Num(x) if x.is_nan() => Err(D::Error::custom("NaN bound")),
                        Entry::Num(x) => Ok(x),
                        Entry::Text(t) => match t.trim() {
                            "-inf" => Ok(f64::NEG_INFINITY),
                            "+inf" | "inf" => Ok(f64::INFINITY),
                            other => Err(D::Error::custom(format!(
                                "bad bound `{other}`, expected a number, \"-inf\" or \"+inf\""
                            ))),
                        },
                    })
                    .collect()
            })
            .transpose()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsConfig {
    #[serde(default, with = "bounds", skip_serializing_if = "Option::is_none")]
    pub lb: Option<Vec<f64>>,
    #[serde(default, with = "bounds", skip_serializing_if = "Option::is_none")]
    pub ub: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feas_tol: Option<f64>,
}

impl ConstraintsConfig {
    pub fn build(&self, n: usize) -> Result<ConstraintSet> {
        let lb = self.lb.clone().unwrap_or_else(|| vec![f64::NEG_INFINITY; n]);
        let ub = self.ub.clone().unwrap_or_else(|| vec![f64::INFINITY; n]);
        if lb.len() != n || ub.len() != n {
            return Err(Error::Validation(format!(
                "bounds must have length {n} (lb has {}, ub has {})",
                lb.len(),
                ub.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| lb[i] > ub[i]) {
            return Err(Error::Validation(format!("lb[{i}] = {} exceeds ub[{i}] = {}", lb[i], ub[i])));
        }
        let cs = ConstraintSet::with_bounds(lb, ub).map_err(|e| Error::Validation(e.to_string()))?;
        cs.with_feas_tol(self.feas_tol.unwrap_or(DEFAULT_FEAS_TOL)).map_err(|e| Error::Validation(e.to_string()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricConfig {
    #[default]
    Euclidean,
    /// `sqrt(sum w_i (a_i - b_i)^2)`.
    Weighted(Vec<f64>),
}

/// Every [`ControlParams`] field, with the same defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub eps0: f64,
    pub eps1: f64,
    pub it_max: usize,
    pub t_max: f64,
    pub dt: f64,
    pub t_test: f64,
    pub tol: f64,
    pub n_test: usize,
    pub metric: MetricConfig,
}

impl Default for ControlConfig {
    fn default() -> Self {
        let p = ControlParams::default();
        Self {
            eps0: p.eps0,
            eps1: p.eps1,
            it_max: p.it_max,
            t_max: p.t_max,
            dt: p.dt,
            t_test: p.t_test,
            tol: p.tol,
            n_test: p.n_test,
            metric: MetricConfig::Euclidean,
        }
    }
}

impl ControlConfig {
    pub fn params(&self) -> Result<ControlParams> {
        let metric = match &self.metric {
            MetricConfig::Euclidean => Metric::Euclidean,
            MetricConfig::Weighted(w) => Metric::Weighted(nalgebra::DVector::from_vec(w.clone())),
        };
        let params = ControlParams {
            eps0: self.eps0,
            eps1: self.eps1,
            it_max: self.it_max,
            t_max: self.t_max,
            dt: self.dt,
            t_test: self.t_test,
            tol: self.tol,
            n_test: self.n_test,
            metric,
        };
        params.validate().map_err(|e| Error::Validation(e.to_string()))?;
        Ok(params)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Verbosity {
    /// Final state only.
    #[default]
    Lean,
    /// Full report with iterates and timings.
    Full,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Report destination; standard output when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    pub verbosity: Verbosity,
    /// CSV of the final state's orbit over the convergence-test window.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<PathBuf>,
}

/// A `control` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub y0: Vec<f64>,
    pub yt: Vec<f64>,
    #[serde(default)]
    pub constraints: ConstraintsConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Everything a control run needs, built from a [`RunConfig`].
pub struct PreparedRun {
    pub system: Box<dyn System>,
    pub y0: SystemState,
    pub yt: SystemState,
    pub cs: ConstraintSet,
    pub params: ControlParams,
}

impl RunConfig {
    pub fn prepare(&self) -> Result<PreparedRun> {
        let system = self.model.build(&self.base_dir)?;
        let n = system.dimension();
        for (name, v) in [("y0", &self.y0), ("yt", &self.yt)] {
            if v.len() != n {
                return Err(Error::Validation(format!(
                    "{name} has length {}, model `{}` has dimension {n}",
                    v.len(),
                    self.model.name
                )));
            }
        }
        let y0 = SystemState::new(self.y0.clone()).map_err(|e| Error::Validation(format!("y0: {e}")))?;
        let yt = SystemState::new(self.yt.clone()).map_err(|e| Error::Validation(format!("yt: {e}")))?;
        let cs = self.constraints.build(n)?;
        if !cs.is_eligible(y0.as_slice())? {
            return Err(Error::Validation("y0 violates the constraints".into()));
        }
        let params = self.control.params()?;
        params.metric.check(n).map_err(|e| Error::Validation(format!("metric: {e}")))?;
        Ok(PreparedRun { system, y0, yt, cs, params })
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.base_dir.join(path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedSpec {
    List(Vec<u64>),
    /// Inclusive range.
    Range {
        from: u64,
        to: u64,
    },
}

impl SeedSpec {
    pub fn seeds(&self) -> Vec<u64> {
        match self {
            SeedSpec::List(v) => v.clone(),
            SeedSpec::Range { from, to } => (*from..=*to).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Suite,
    Scaling,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchOutput {
    /// Suite JSON, or the scaling JSON summary; standard output when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    /// Scaling CSV.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
}

/// A `bench` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub mode: BenchMode,
    /// Suite network size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<SeedSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds_per_dim: Option<usize>,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub output: BenchOutput,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl BenchConfig {
    fn check(&self) -> Result<()> {
        self.control.params()?;
        let missing = |what: &str| Err(Error::Validation(format!("{what} is required in {:?} mode", self.mode)));
        match self.mode {
            BenchMode::Suite => {
                let Some(n) = self.n else { return missing("n") };
                if n < 2 {
                    return Err(Error::Validation(format!("benchmark networks need n >= 2, got {n}")));
                }
                match &self.seeds {
                    None => return missing("seeds"),
                    Some(s) if s.seeds().is_empty() => return Err(Error::Validation("seed list is empty".into())),
                    _ => {}
                }
            }
            BenchMode::Scaling => {
                let Some(dims) = &self.dims else { return missing("dims") };
                if dims.len() < 3 || !dims.windows(2).all(|w| w[1] > w[0]) || dims[0] < 2 {
                    return Err(Error::Validation("dims needs at least three strictly increasing values >= 2".into()));
                }
                if self.seeds_per_dim.unwrap_or(0) == 0 {
                    return missing("positive seeds_per_dim");
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.base_dir.join(path)
    }
}

/// A `validate` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub validate: ValidationOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn parse_toml<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let (line, col) = match e.span() {
            Some(span) => {
                let before = &text[..span.start.min(text.len())];
                let line = before.matches('\n').count() + 1;
                let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                (line, col)
            }
            None => (0, 0),
        };
        Error::Parse(format!("{origin}:{line}:{col}: {}", e.message()))
    })
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<(T, PathBuf)> {
    let text = fs::read_to_string(path)?;
    let value = parse_toml(&text, &path.display().to_string())?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((value, base))
}

/// Parses a control config from TOML text; relative paths resolve against `base_dir`.
pub fn parse_run_config(text: &str, base_dir: &Path) -> Result<RunConfig> {
    let mut cfg: RunConfig = parse_toml(text, "<config>")?;
    cfg.base_dir = base_dir.to_path_buf();
    cfg.prepare()?;
    Ok(cfg)
}

/// Reads and validates a control config.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let (mut cfg, base): (RunConfig, _) = read_config(path)?;
    cfg.base_dir = base;
    cfg.prepare()?;
    Ok(cfg)
}

pub fn parse_bench_config(path: &Path) -> Result<BenchConfig> {
    let (mut cfg, base): (BenchConfig, _) = read_config(path)?;
    cfg.base_dir = base;
    cfg.check()?;
    Ok(cfg)
}

pub fn parse_validate_config(path: &Path) -> Result<ValidateConfig> {
    let (mut cfg, base): (ValidateConfig, _) = read_config(path)?;
    cfg.base_dir = base;
    cfg.model.build(&cfg.base_dir)?;
    Ok(cfg)
}
