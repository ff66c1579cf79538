//! Bundled models and the name-based registry.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::system::System;

pub const DOUBLE_WELL_PARTICLE: &str = "double_well_particle";
pub const BISTABLE_NETWORK: &str = "bistable_network";

/// Damped particle in the quartic potential `U(x) = x^4/4 - x^2/2`.
///
/// State is `(x, v)` with `x' = v`, `v' = -gamma*v + x - x^3`. Stable fixed
/// points at `(±1, 0)`, saddle at the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct DoubleWellParticle {
    gamma: f64,
}

impl DoubleWellParticle {
    pub fn new(gamma: f64) -> Result<Self> {
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(Error::InvalidParams(format!("damping gamma must be finite and >= 0, got {gamma}")));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn stable_fixed_points() -> [[f64; 2]; 2] {
        [[-1.0, 0.0], [1.0, 0.0]]
    }
}

impl System for DoubleWellParticle {
    fn name(&self) -> &str {
        DOUBLE_WELL_PARTICLE
    }

    fn dimension(&self) -> usize {
        2
    }

    fn params(&self) -> Vec<f64> {
        vec![self.gamma]
    }

    fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        let (x, v) = (y[0], y[1]);
        dy[0] = v;
        dy[1] = -self.gamma * v + x - x * x * x;
    }

    fn analytic_jacobian(&self, y: &[f64]) -> Option<DMatrix<f64>> {
        let x = y[0];
        Some(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0 - 3.0 * x * x, -self.gamma]))
    }
}

/// Diffusively coupled bistable units on an undirected graph:
/// `y_i' = y_i - y_i^3 + k * sum_j A_ij (y_j - y_i)`.
///
/// The uniform states `±1` are fixed points for any coupling.
#[derive(Clone, Debug, PartialEq)]
pub struct BistableNetwork {
    coupling: f64,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl BistableNetwork {
    /// Duplicate edges and self-loops are dropped; `(i, j)` and `(j, i)` are
    /// the same edge.
    pub fn new(nodes: usize, coupling: f64, edges: &[(usize, usize)]) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::InvalidParams("network needs at least one node".into()));
        }
        if !coupling.is_finite() {
            return Err(Error::InvalidParams(format!("coupling must be finite, got {coupling}")));
        }
        let mut neighbors = vec![Vec::new(); nodes];
        let mut kept = Vec::new();
        for &(a, b) in edges {
            if a >= nodes || b >= nodes {
                return Err(Error::BadTopology(format!("edge ({a}, {b}) references a node >= {nodes}")));
            }
            if a == b || neighbors[a].contains(&b) {
                continue;
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
            kept.push((a.min(b), a.max(b)));
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        kept.sort_unstable();
        Ok(Self { coupling, edges: kept, neighbors })
    }

    pub fn coupling(&self) -> f64 {
        self.coupling
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn is_connected(&self) -> bool {
        let n = self.neighbors.len();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    fn diagonal(&self, i: usize, yi: f64) -> f64 {
        1.0 - 3.0 * yi * yi - self.coupling * self.neighbors[i].len() as f64
    }
}

impl System for BistableNetwork {
    fn name(&self) -> &str {
        BISTABLE_NETWORK
    }

    fn dimension(&self) -> usize {
        self.neighbors.len()
    }

    fn params(&self) -> Vec<f64> {
        vec![self.coupling]
    }

    fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            let yi = y[i];
            let diffusion: f64 = nbrs.iter().map(|&j| y[j] - yi).sum();
            dy[i] = yi - yi * yi * yi + self.coupling * diffusion;
        }
    }

    fn analytic_jacobian(&self, y: &[f64]) -> Option<DMatrix<f64>> {
        let n = self.dimension();
        let mut j = DMatrix::zeros(n, n);
        for i in 0..n {
            j[(i, i)] = self.diagonal(i, y[i]);
            for &k in &self.neighbors[i] {
                j[(i, k)] = self.coupling;
            }
        }
        Some(j)
    }

    fn jacobian_product(&self, y: &[f64], m: &DMatrix<f64>, out: &mut DMatrix<f64>) -> bool {
        let n = self.dimension();
        let diag: Vec<f64> = (0..n).map(|i| self.diagonal(i, y[i])).collect();
        let cols = m.ncols();
        let (src, dst) = (m.as_slice(), out.as_mut_slice());
        let mut coupled = vec![0.0; cols];
        for i in 0..n {
            coupled.fill(0.0);
            for &k in &self.neighbors[i] {
                for (acc, v) in coupled.iter_mut().zip(src[k..].iter().step_by(n)) {
                    *acc += v;
                }
            }
            let d = diag[i];
            for (c, acc) in coupled.iter().enumerate() {
                dst[i + c * n] = d * src[i + c * n] + self.coupling * acc;
            }
        }
        true
    }
}

/// `y' = A y`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem {
    a: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(Error::InvalidParams("linear system matrix must be square and non-empty".into()));
        }
        Ok(Self { a })
    }
}

impl System for LinearSystem {
    fn name(&self) -> &str {
        "linear"
    }

    fn dimension(&self) -> usize {
        self.a.nrows()
    }

    fn params(&self) -> Vec<f64> {
        self.a.as_slice().to_vec()
    }

    fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        for (i, out) in dy.iter_mut().enumerate() {
            *out = self.a.row(i).iter().zip(y).map(|(a, b)| a * b).sum();
        }
    }

    fn analytic_jacobian(&self, _y: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.a.clone())
    }
}

type RhsFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
type JacFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// A system assembled from closures, for code-level users adding their
/// own models.
#[derive(Clone)]
pub struct FnSystem {
    name: String,
    dimension: usize,
    params: Vec<f64>,
    rhs: Arc<RhsFn>,
    jac: Option<Arc<JacFn>>,
}

impl FnSystem {
    pub fn new<F>(name: impl Into<String>, dimension: usize, rhs: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self { name: name.into(), dimension, params: Vec::new(), rhs: Arc::new(rhs), jac: None }
    }

    pub fn with_jacobian<J>(mut self, jac: J) -> Self
    where
        J: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jac = Some(Arc::new(jac));
        self
    }

    pub fn with_params(mut self, params: Vec<f64>) -> Self {
        self.params = params;
        self
    }
}

impl fmt::Debug for FnSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnSystem")
            .field("name", &self.name)
            .field("dimension", &self.dimension)
            .field("params", &self.params)
            .field("analytic_jacobian", &self.jac.is_some())
            .finish()
    }
}

impl System for FnSystem {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn params(&self) -> Vec<f64> {
        self.params.clone()
    }

    fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        (self.rhs)(y, dy)
    }

    fn analytic_jacobian(&self, y: &[f64]) -> Option<DMatrix<f64>> {
        self.jac.as_ref().map(|j| j(y))
    }
}

/// Named model parameters, as they appear in config files.
pub type ModelParams = BTreeMap<String, f64>;

/// Builds a bundled model by name.
///
/// `double_well_particle` takes `gamma` (default 1). `bistable_network` takes
/// `coupling` (default 0.05) and `nodes`; without `nodes` the node count is
/// one past the largest index in `topology`.
pub fn build_model(name: &str, params: &ModelParams, topology: Option<&[(usize, usize)]>) -> Result<Box<dyn System>> {
    match name {
        DOUBLE_WELL_PARTICLE => {
            reject_unknown(params, &["gamma"])?;
            if topology.is_some() {
                return Err(Error::InvalidParams(format!("{DOUBLE_WELL_PARTICLE} takes no topology")));
            }
            let gamma = params.get("gamma").copied().unwrap_or(1.0);
            Ok(Box::new(DoubleWellParticle::new(gamma)?))
        }
        BISTABLE_NETWORK => {
            reject_unknown(params, &["coupling", "nodes"])?;
            let edges = topology.unwrap_or(&[]);
            let coupling = params.get("coupling").copied().unwrap_or(0.05);
            let nodes = match params.get("nodes") {
                Some(&n) if n >= 1.0 && n.fract() == 0.0 => n as usize,
                Some(&n) => return Err(Error::InvalidParams(format!("nodes must be a positive integer, got {n}"))),
                None => edges
                    .iter()
                    .map(|&(a, b)| a.max(b) + 1)
                    .max()
                    .ok_or_else(|| Error::InvalidParams("bistable_network needs `nodes` or a topology".into()))?,
            };
            Ok(Box::new(BistableNetwork::new(nodes, coupling, edges)?))
        }
        other => Err(Error::UnknownModel(other.to_string())),
    }
}

fn reject_unknown(params: &ModelParams, known: &[&str]) -> Result<()> {
    match params.keys().find(|k| !known.contains(&k.as_str())) {
        Some(k) => Err(Error::InvalidParams(format!("unknown model parameter `{k}` (expected one of {known:?})"))),
        None => Ok(()),
    }
}

/// Parses an edge list: one `i j` pair per line, 0-based, `#` comments.
pub fn parse_edge_list(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::BadTopology(format!("line {}: `{s}` is not a node index", lineno + 1)))
        };
        match fields.as_slice() {
            [a, b] => edges.push((parse(a)?, parse(b)?)),
            _ => {
                return Err(Error::BadTopology(format!("line {}: expected two node indices, got `{line}`", lineno + 1)))
            }
        }
    }
    Ok(edges)
}

pub fn read_edge_list(path: &Path) -> Result<Vec<(usize, usize)>> {
    parse_edge_list(&std::fs::read_to_string(path)?)
}

pub fn write_edge_list(edges: &[(usize, usize)]) -> String {
    let mut out = String::from("# i j\n");
    for (a, b) in edges {
        out.push_str(&format!("{a} {b}\n"));
    }
    out
}
