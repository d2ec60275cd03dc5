//! Experiment configuration: JSON files layered over per-experiment
//! defaults, with dotted-path overrides from the command line.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use steinflow_core::dynamics::Lorenz63Config;
use steinflow_core::filters::{Filter, ForecastPrior};
use steinflow_core::{
    BandwidthPolicy, Error as CoreError, GradientBackend, LogPrior, MappingConfig, ObservationModel, Operator,
    PriorSpec,
};
use thiserror::Error;

/// A configuration problem, located by the dotted path of the offending field.
#[derive(Debug, Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Re-roots a library validation error under `prefix`.
    fn from_core(prefix: &str, err: CoreError) -> Self {
        match err {
            CoreError::InvalidParameter { name, reason } => Self::new(format!("{prefix}.{name}"), reason),
            other => Self::new(prefix, other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Static,
    #[serde(alias = "l63")]
    Lorenz63,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    Uniform { lower: Vec<f64>, upper: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorConfig {
    /// Rows of the matrix.
    Linear(Vec<Vec<f64>>),
    Quadratic,
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObsConfig {
    pub operator: OperatorConfig,
    /// Observation-error covariance, as rows.
    pub noise_cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterConfig {
    Vmpf(GradientBackend),
    Sir,
}

impl From<FilterConfig> for Filter {
    fn from(f: FilterConfig) -> Self {
        match f {
            FilterConfig::Vmpf(b) => Filter::Vmpf(b),
            FilterConfig::Sir => Filter::Sir,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Static: observation noise. Lorenz-63: truth trajectory and observations.
    pub truth: u64,
    /// Prior sample, forecast noise and resampling.
    pub filter: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdeBandwidthConfig {
    /// The flow kernel's resolved bandwidth.
    Mapping,
    Silverman,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdeConfig {
    pub bandwidth: KdeBandwidthConfig,
    pub prominence: f64,
    pub grid_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Lorenz-63 leaves this null for `N(truth, I)`.
    pub prior: Option<PriorConfig>,
    pub obs_model: ObsConfig,
    pub mapping: MappingConfig,
    pub dynamics: Lorenz63Config,
    pub filter: FilterConfig,
    pub n_particles: usize,
    pub n_cycles: usize,
    /// Static: the hidden state. Lorenz-63: the initial truth.
    pub truth: Vec<f64>,
    /// Static only: use this observation instead of simulating one.
    pub observation: Option<Vec<f64>>,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
    pub kde: KdeConfig,
    pub forecast_prior: ForecastPrior,
    /// Write every n-th cycle's ensemble to the trajectory file; 0 disables.
    pub snapshot_every: usize,
    /// At most this many particles per snapshot.
    pub snapshot_particles: usize,
    /// A cycle qualifies for the flagged marginal when `|truth x|` is at least this.
    pub flag_min_abs_x: f64,
    /// Extra cycles at which marginal densities are written.
    pub kde_cycles: Vec<usize>,
}

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        let common = |kernel_gamma: f64| MappingConfig {
            kernel: BandwidthPolicy::Fixed { gamma: kernel_gamma },
            ..MappingConfig::default()
        };
        match kind {
            ExperimentKind::Static => Self {
                experiment: kind,
                prior: Some(PriorConfig::Gaussian {
                    mean: vec![0.5],
                    cov: vec![vec![1.0]],
                }),
                obs_model: ObsConfig {
                    operator: OperatorConfig::Quadratic,
                    noise_cov: vec![vec![0.5]],
                },
                mapping: common(0.3),
                dynamics: Lorenz63Config::default(),
                filter: FilterConfig::Vmpf(GradientBackend::Exact),
                n_particles: 100,
                n_cycles: 1,
                truth: vec![3.0],
                observation: None,
                seeds: Seeds { truth: 1, filter: 2 },
                output_dir: PathBuf::from("out"),
                kde: KdeConfig {
                    bandwidth: KdeBandwidthConfig::Mapping,
                    prominence: 0.2,
                    grid_points: 4096,
                },
                forecast_prior: ForecastPrior::Gaussian,
                snapshot_every: 1,
                snapshot_particles: usize::MAX,
                flag_min_abs_x: 5.0,
                kde_cycles: Vec::new(),
            },
            ExperimentKind::Lorenz63 => Self {
                experiment: kind,
                prior: None,
                obs_model: ObsConfig {
                    operator: OperatorConfig::Absolute,
                    noise_cov: diag(3, 0.5),
                },
                mapping: common(1.0),
                n_cycles: 500,
                truth: vec![1.508870, -1.531271, 25.46091],
                kde: KdeConfig {
                    bandwidth: KdeBandwidthConfig::Silverman,
                    prominence: 0.2,
                    grid_points: 512,
                },
                snapshot_every: 10,
                snapshot_particles: 100,
                ..Self::defaults(ExperimentKind::Static)
            },
        }
    }

    /// The backend the mapping uses; SIR has none.
    pub fn backend(&self) -> Option<GradientBackend> {
        match self.filter {
            FilterConfig::Vmpf(b) => Some(b),
            FilterConfig::Sir => None,
        }
    }

    pub fn prior_spec(&self) -> Result<PriorSpec, ConfigError> {
        let spec = match &self.prior {
            None => PriorSpec::gaussian(
                DVector::from_column_slice(&self.truth),
                DMatrix::identity(self.truth.len(), self.truth.len()),
            ),
            Some(PriorConfig::Gaussian { mean, cov }) => {
                let cov = matrix("prior.cov", cov)?;
                PriorSpec::gaussian(DVector::from_column_slice(mean), cov)
            }
            Some(PriorConfig::Uniform { lower, upper }) => {
                PriorSpec::uniform(DVector::from_column_slice(lower), DVector::from_column_slice(upper))
            }
        };
        spec.map_err(|e| ConfigError::from_core("prior", e))
    }

    pub fn observation_model(&self) -> Result<ObservationModel, ConfigError> {
        let operator = match &self.obs_model.operator {
            OperatorConfig::Linear(rows) => Operator::Linear(matrix("obs_model.operator.linear", rows)?),
            OperatorConfig::Quadratic => Operator::Quadratic,
            OperatorConfig::Absolute => Operator::Absolute,
        };
        let r = matrix("obs_model.noise_cov", &self.obs_model.noise_cov)?;
        let backend = self.backend().unwrap_or(GradientBackend::Exact);
        ObservationModel::new(operator, r, backend).map_err(|e| ConfigError::from_core("obs_model", e))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_particles < 2 {
            return Err(ConfigError::new("n_particles", "must be at least 2"));
        }
        self.mapping
            .kernel
            .validate()
            .map_err(|e| ConfigError::from_core("mapping.kernel", e))?;
        if let Some(k) = &self.mapping.obs_kernel {
            k.validate()
                .map_err(|e| ConfigError::from_core("mapping.obs_kernel", e))?;
        }
        self.mapping
            .validate()
            .map_err(|e| ConfigError::from_core("mapping", e))?;

        if self.experiment == ExperimentKind::Lorenz63 && self.truth.len() != 3 {
            return Err(ConfigError::new(
                "truth",
                format!("the Lorenz-63 state has 3 components, got {}", self.truth.len()),
            ));
        }
        let prior = self.prior_spec()?;
        if prior.dim() != self.truth.len() {
            return Err(ConfigError::new(
                "truth",
                format!(
                    "has {} components but the prior has dimension {}",
                    self.truth.len(),
                    prior.dim()
                ),
            ));
        }
        let model = self.observation_model()?;
        if let Operator::Linear(a) = model.operator() {
            if a.ncols() != self.truth.len() {
                return Err(ConfigError::new(
                    "obs_model.operator.linear",
                    format!(
                        "has {} columns but the state has dimension {}",
                        a.ncols(),
                        self.truth.len()
                    ),
                ));
            }
        } else if model.obs_dim() != self.truth.len() {
            return Err(ConfigError::new(
                "obs_model.noise_cov",
                format!(
                    "is {0}x{0} but the elementwise operator observes {1} components",
                    model.obs_dim(),
                    self.truth.len()
                ),
            ));
        }
        if let Some(y) = &self.observation {
            if y.len() != model.obs_dim() {
                return Err(ConfigError::new(
                    "observation",
                    format!("has {} components, expected {}", y.len(), model.obs_dim()),
                ));
            }
        }

        let kde = &self.kde;
        if !(kde.prominence > 0.0 && kde.prominence < 1.0) {
            return Err(ConfigError::new("kde.prominence", "must lie in (0, 1)"));
        }
        if kde.grid_points < 16 {
            return Err(ConfigError::new("kde.grid_points", "must be at least 16"));
        }
        if let KdeBandwidthConfig::Fixed(h) = kde.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(ConfigError::new(
                    "kde.bandwidth.fixed",
                    format!("must be positive, got {h}"),
                ));
            }
        }

        match self.experiment {
            ExperimentKind::Static => {
                if self.filter == FilterConfig::Sir {
                    return Err(ConfigError::new(
                        "filter",
                        "the static experiment maps a single prior sample; use vmpf",
                    ));
                }
            }
            ExperimentKind::Lorenz63 => {
                if self.truth.len() != 3 {
                    return Err(ConfigError::new("truth", "the Lorenz-63 state has 3 components"));
                }
                self.dynamics
                    .validate()
                    .map_err(|e| ConfigError::from_core("dynamics", e))?;
                if self.n_cycles == 0 {
                    return Err(ConfigError::new("n_cycles", "must be at least 1"));
                }
                if let Some(c) = self.kde_cycles.iter().find(|&&c| c == 0 || c > self.n_cycles) {
                    return Err(ConfigError::new(
                        "kde_cycles",
                        format!("cycle {c} is outside 1..={}", self.n_cycles),
                    ));
                }
                if !(self.flag_min_abs_x >= 0.0) {
                    return Err(ConfigError::new("flag_min_abs_x", "must be non-negative"));
                }
            }
        }
        Ok(())
    }
}

fn diag(n: usize, v: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { v } else { 0.0 }).collect())
        .collect()
}

fn matrix(path: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ConfigError> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(ConfigError::new(path, "must be a non-empty list of equal-length rows"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Sets `path` (dot separated) in `root` to `value`, creating objects on the way.
pub fn apply_override(root: &mut Value, path: &str, value: Value) -> Result<(), ConfigError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::new(path, "override key has an empty segment"));
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Map::new());
            } else {
                return Err(ConfigError::new(
                    keys[..i].join("."),
                    "is not an object; cannot override a field inside it",
                ));
            }
        }
        let map = node.as_object_mut().expect("checked above");
        if i + 1 == keys.len() {
            map.insert((*key).to_string(), value);
            return Ok(());
        }
        node = map.entry((*key).to_string()).or_insert(Value::Null);
    }
    unreachable!("keys is non-empty")
}

/// Parses `key=value`; the value is read as JSON, falling back to a string.
pub fn parse_override(spec: &str) -> Result<(String, Value), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::new(spec, "override must look like key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Keys whose value selects a variant; objects disagreeing on one are replaced, not merged.
const DISCRIMINATORS: [&str; 2] = ["type", "policy"];

fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            let switches_variant = DISCRIMINATORS
                .iter()
                .any(|k| u.get(*k).is_some_and(|v| b.get(*k) != Some(v)));
            let single_key_variant = u.len() == 1 && b.len() == 1 && u.keys().ne(b.keys());
            if switches_variant || single_key_variant {
                *b = u;
                return;
            }
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, u) => *slot = u,
    }
}

/// Resolves a user JSON document (already carrying any overrides) into a
/// validated configuration. `expected` pins the experiment kind.
pub fn resolve(mut user: Value, expected: Option<ExperimentKind>) -> Result<ExperimentConfig, ConfigError> {
    if user.is_null() {
        user = Value::Object(Map::new());
    }
    if !user.is_object() {
        return Err(ConfigError::new("<root>", "configuration must be a JSON object"));
    }
    let declared = match user.get("experiment") {
        None => None,
        Some(v) => Some(
            serde_json::from_value::<ExperimentKind>(v.clone())
                .map_err(|e| ConfigError::new("experiment", e.to_string()))?,
        ),
    };
    let kind = match (declared, expected) {
        (Some(d), Some(e)) if d != e => {
            return Err(ConfigError::new(
                "experiment",
                format!("config declares {d:?} but the {e:?} command was used"),
            ))
        }
        (Some(d), _) => d,
        (None, Some(e)) => e,
        (None, None) => ExperimentKind::Static,
    };
    let mut merged = serde_json::to_value(ExperimentConfig::defaults(kind)).expect("defaults serialize");
    merge(&mut merged, user);
    merged["experiment"] = serde_json::to_value(kind).expect("kind serializes");

    let cfg: ExperimentConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::new(
            if path == "." { "<root>".into() } else { path },
            e.into_inner().to_string(),
        )
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path`, applies `key=value` overrides and resolves the result.
pub fn parse_config(
    path: &Path,
    overrides: &[String],
    expected: Option<ExperimentKind>,
) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new("<file>", format!("cannot read {}: {e}", path.display())))?;
    let mut user: Value = if text.trim().is_empty() {
        Value::Object(Map::new())
    } else {
        serde_json::from_str(&text).map_err(|e| ConfigError::new("<file>", format!("malformed JSON: {e}")))?
    };
    for spec in overrides {
        let (key, value) = parse_override(spec)?;
        apply_override(&mut user, &key, value)?;
    }
    resolve(user, expected)
}
