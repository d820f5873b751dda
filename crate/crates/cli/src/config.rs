//! JSON experiment configuration.
//!
//! Every field has a default except `model.n`, `model.m` and `model.T`.
//! Matrix coefficients accept a scalar (times the rectangular identity), a
//! nested row-major array, or an array of `K + 1` such matrices for a
//! piecewise-constant path. Vector coefficients accept a scalar (broadcast),
//! an array, or an array of `K + 1` arrays. `G` is terminal and constant.

use mfglab::fbsde::PicardConfig;
use mfglab::mean_field::FixedPointConfig;
use mfglab::model::{Coefficients, Model, ModelSpec, TimeGrid, DEFAULT_R_MIN};
use mfglab::population::{DeviationFamily, DEFAULT_AGENT_COUNTS, DEFAULT_NASH_AGENT_COUNTS, DEFAULT_REPS};
use mfglab::ConvexSet;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelBlock,
    #[serde(default)]
    pub gamma: GammaBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub experiment: ExperimentBlock,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Output root; overridden by `MFGLAB_OUT` and `--out`.
    #[serde(default)]
    pub output: Option<String>,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub n: usize,
    pub m: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "K", default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub x0: Option<Value>,
    #[serde(rename = "A", default)]
    pub a: Option<Value>,
    #[serde(rename = "B", default)]
    pub b_ctrl: Option<Value>,
    #[serde(rename = "D", default)]
    pub d: Option<Value>,
    #[serde(rename = "F", default)]
    pub f: Option<Value>,
    #[serde(rename = "b", default)]
    pub drift: Option<Value>,
    #[serde(default)]
    pub sigma: Option<Value>,
    #[serde(rename = "Q", default)]
    pub q: Option<Value>,
    #[serde(rename = "R", default)]
    pub r: Option<Value>,
    #[serde(rename = "G", default)]
    pub g: Option<Value>,
    #[serde(default = "default_r_min")]
    pub r_min: f64,
    #[serde(default = "default_true")]
    pub strict_h1: bool,
}

fn default_steps() -> usize {
    100
}

fn default_r_min() -> f64 {
    DEFAULT_R_MIN
}

fn default_true() -> bool {
    true
}

/// Constraint set. Bounds given as a scalar are broadcast to length `m`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum GammaBlock {
    #[default]
    Full,
    Orthant,
    Box {
        lower: Value,
        upper: Value,
    },
    Ball {
        center: Value,
        radius: f64,
    },
    Halfspace {
        normal: Value,
        offset: f64,
    },
    Singleton {
        point: Value,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverBlock {
    pub paths: usize,
    pub basis_degree: usize,
    pub theta: f64,
    pub rho: f64,
    pub tol_u: f64,
    /// Defaults to `1e-4·(1 + |x0|)`.
    pub tol_z: Option<f64>,
    pub max_picard: usize,
    pub max_outer: usize,
}

impl Default for SolverBlock {
    fn default() -> Self {
        let p = PicardConfig::default();
        Self {
            paths: p.paths,
            basis_degree: p.basis_degree,
            theta: p.theta,
            rho: 0.5,
            tol_u: p.tol_u,
            tol_z: None,
            max_picard: p.max_iter,
            max_outer: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentBlock {
    /// Population sizes for `rates`.
    pub agents: Vec<usize>,
    /// Population sizes for `nash`.
    pub nash_agents: Vec<usize>,
    /// Population size for `population`.
    pub population_agents: usize,
    pub reps: usize,
    /// Constant deviations `P_Γ[c]`; `None` uses `0` and `0.25` in every coordinate.
    pub constants: Option<Vec<Vec<f64>>>,
    /// Scaled deviations; must contain 1.
    pub scales: Vec<f64>,
    pub time_reversed: bool,
    /// Lattice size of the dynamic-programming oracle.
    pub dp_points: usize,
}

impl Default for ExperimentBlock {
    fn default() -> Self {
        let family = DeviationFamily::standard(1);
        Self {
            agents: DEFAULT_AGENT_COUNTS.to_vec(),
            nash_agents: DEFAULT_NASH_AGENT_COUNTS.to_vec(),
            population_agents: 100,
            reps: DEFAULT_REPS,
            constants: None,
            scales: family.scales,
            time_reversed: family.time_reversed,
            dp_points: 801,
        }
    }
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub agents: Option<usize>,
    pub steps: Option<usize>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(paths) = o.paths {
            self.solver.paths = paths;
        }
        if let Some(agents) = o.agents {
            self.experiment.population_agents = agents;
        }
        if let Some(steps) = o.steps {
            self.model.steps = steps;
        }
    }

    /// Canonical JSON of the effective configuration.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn spec(&self) -> CliResult<ModelSpec> {
        let mb = &self.model;
        let (n, m) = (mb.n, mb.m);
        if n == 0 || m == 0 || n > mfglab::model::MAX_DIM || m > mfglab::model::MAX_DIM {
            return Err(CliError::Config(format!(
                "model.n = {n} and model.m = {m} must lie in 1..={}",
                mfglab::model::MAX_DIM
            )));
        }
        let grid = TimeGrid::new(mb.horizon, mb.steps).map_err(|e| CliError::Config(format!("model.T/model.K: {e}")))?;
        let nodes = grid.nodes();
        let x0 = vector("model.x0", mb.x0.as_ref(), n, 0.0)?;
        let coeffs = Coefficients {
            a: matrix_path("model.A", mb.a.as_ref(), n, n, 0.0, nodes)?,
            f: matrix_path("model.F", mb.f.as_ref(), n, n, 0.0, nodes)?,
            b: matrix_path("model.B", mb.b_ctrl.as_ref(), n, m, 1.0, nodes)?,
            d: matrix_path("model.D", mb.d.as_ref(), n, m, 0.0, nodes)?,
            drift: vector_path("model.b", mb.drift.as_ref(), n, 0.0, nodes)?,
            sigma: vector_path("model.sigma", mb.sigma.as_ref(), n, 0.0, nodes)?,
            q: matrix_path("model.Q", mb.q.as_ref(), n, n, 1.0, nodes)?,
            r: matrix_path("model.R", mb.r.as_ref(), m, m, 1.0, nodes)?,
            g: matrix("model.G", mb.g.as_ref(), n, n, 0.0)?,
        };
        let gamma = self.gamma_set()?;
        let spec = ModelSpec::new(x0, grid, coeffs, gamma).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec.with_r_min(mb.r_min))
    }

    /// Validated model; violations of the standing assumptions are reported
    /// as [`CliError::Validation`].
    pub fn model(&self) -> CliResult<Model> {
        let spec = self.spec()?;
        let report = spec.validate(self.model.strict_h1);
        if !report.is_empty() {
            return Err(CliError::Validation(summarize(&report)));
        }
        Ok(Model::new(spec, self.model.strict_h1)?)
    }

    pub fn gamma_set(&self) -> CliResult<ConvexSet> {
        let m = self.model.m;
        let set = match &self.gamma {
            GammaBlock::Full => Ok(ConvexSet::full(m)),
            GammaBlock::Orthant => Ok(ConvexSet::orthant(m)),
            GammaBlock::Box { lower, upper } => {
                ConvexSet::boxed(vec_of("gamma.lower", lower, m)?, vec_of("gamma.upper", upper, m)?)
            }
            GammaBlock::Ball { center, radius } => ConvexSet::ball(vec_of("gamma.center", center, m)?, *radius),
            GammaBlock::Halfspace { normal, offset } => {
                ConvexSet::half_space(vec_of("gamma.normal", normal, m)?, *offset)
            }
            GammaBlock::Singleton { point } => ConvexSet::singleton(vec_of("gamma.point", point, m)?),
        };
        set.map_err(|e| CliError::Config(format!("gamma: {e}")))
    }

    pub fn picard(&self) -> PicardConfig {
        let s = &self.solver;
        PicardConfig {
            theta: s.theta,
            tol_u: s.tol_u,
            max_iter: s.max_picard,
            basis_degree: s.basis_degree,
            paths: s.paths,
        }
    }

    pub fn fixed_point(&self, model: &Model) -> CliResult<FixedPointConfig> {
        let s = &self.solver;
        let base = FixedPointConfig::for_model(model, self.picard());
        let config = FixedPointConfig {
            rho: s.rho,
            tol_z: s.tol_z.unwrap_or(base.tol_z),
            max_outer: s.max_outer,
            inner: base.inner,
        };
        config.validate().map_err(|e| CliError::Config(format!("solver: {e}")))?;
        Ok(config)
    }

    pub fn family(&self) -> DeviationFamily {
        let m = self.model.m;
        let e = &self.experiment;
        let standard = DeviationFamily::standard(m);
        DeviationFamily {
            constants: e.constants.clone().unwrap_or(standard.constants),
            scales: e.scales.clone(),
            time_reversed: e.time_reversed,
        }
    }
}

/// Report text with at most [`REPORT_LINES`] lines.
pub fn summarize(report: &mfglab::model::ValidationReport) -> String {
    let lines: Vec<String> = report.violations.iter().map(ToString::to_string).collect();
    if lines.len() <= REPORT_LINES {
        return lines.join("\n");
    }
    format!(
        "{}\n... and {} more violations",
        lines[..REPORT_LINES].join("\n"),
        lines.len() - REPORT_LINES
    )
}

const REPORT_LINES: usize = 10;

fn number(field: &str, v: &Value) -> CliResult<f64> {
    v.as_f64()
        .ok_or_else(|| CliError::Config(format!("{field}: expected a number, found {v}")))
}

fn vec_of(field: &str, v: &Value, len: usize) -> CliResult<Vec<f64>> {
    match v {
        Value::Array(items) => {
            if items.len() != len {
                return Err(CliError::Config(format!(
                    "{field}: expected {len} entries, found {}",
                    items.len()
                )));
            }
            items
                .iter()
                .enumerate()
                .map(|(i, x)| number(&format!("{field}[{i}]"), x))
                .collect()
        }
        other => Ok(vec![number(field, other)?; len]),
    }
}

fn vector(field: &str, v: Option<&Value>, len: usize, default: f64) -> CliResult<DVector<f64>> {
    match v {
        None => Ok(DVector::from_element(len, default)),
        Some(v) => Ok(DVector::from_vec(vec_of(field, v, len)?)),
    }
}

fn matrix(field: &str, v: Option<&Value>, rows: usize, cols: usize, default: f64) -> CliResult<DMatrix<f64>> {
    let scaled_identity = |s: f64| DMatrix::from_fn(rows, cols, |i, j| if i == j { s } else { 0.0 });
    match v {
        None => Ok(scaled_identity(default)),
        Some(Value::Array(rs)) => {
            if rs.len() != rows {
                return Err(CliError::Config(format!(
                    "{field}: expected {rows} rows, found {}",
                    rs.len()
                )));
            }
            let mut out = DMatrix::zeros(rows, cols);
            for (i, row) in rs.iter().enumerate() {
                let row_field = format!("{field}[{i}]");
                let Value::Array(_) = row else {
                    return Err(CliError::Config(format!("{row_field}: expected an array of {cols} numbers")));
                };
                for (j, x) in vec_of(&row_field, row, cols)?.into_iter().enumerate() {
                    out[(i, j)] = x;
                }
            }
            Ok(out)
        }
        Some(other) => Ok(scaled_identity(number(field, other)?)),
    }
}

/// Nesting depth of the first-element chain of a JSON array.
fn depth(v: &Value) -> usize {
    match v {
        Value::Array(items) => 1 + items.first().map_or(0, depth),
        _ => 0,
    }
}

fn matrix_path(
    field: &str,
    v: Option<&Value>,
    rows: usize,
    cols: usize,
    default: f64,
    nodes: usize,
) -> CliResult<Vec<DMatrix<f64>>> {
    match v {
        Some(Value::Array(items)) if depth(v.unwrap()) == 3 => {
            if items.len() != nodes {
                return Err(CliError::Config(format!(
                    "{field}: a time path needs K + 1 = {nodes} matrices, found {}",
                    items.len()
                )));
            }
            items
                .iter()
                .enumerate()
                .map(|(k, x)| matrix(&format!("{field}[{k}]"), Some(x), rows, cols, default))
                .collect()
        }
        _ => Ok(vec![matrix(field, v, rows, cols, default)?; nodes]),
    }
}

fn vector_path(field: &str, v: Option<&Value>, len: usize, default: f64, nodes: usize) -> CliResult<Vec<DVector<f64>>> {
    match v {
        Some(Value::Array(items)) if depth(v.unwrap()) == 2 => {
            if items.len() != nodes {
                return Err(CliError::Config(format!(
                    "{field}: a time path needs K + 1 = {nodes} vectors, found {}",
                    items.len()
                )));
            }
            items
                .iter()
                .enumerate()
                .map(|(k, x)| vector(&format!("{field}[{k}]"), Some(x), len, default))
                .collect()
        }
        _ => Ok(vec![vector(field, v, len, default)?; nodes]),
    }
}
