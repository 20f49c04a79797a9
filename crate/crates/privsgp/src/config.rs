//! Flat key=value config files with dotted sections.
//!
//! Lines look like `privacy.epsilon = 3.0`; `#` starts a comment. Keys are
//! matched exactly — anything the loader does not consume is reported as an
//! unknown key with its line number, so typos fail loudly.

use crate::engine::{Algorithm, PrivacyMode, RunConfig};
use crate::privacy::{PrivacyBudget, ProblemConstants};
use crate::problems::{load_csv, partition, synthetic_logistic_shards, Model, Problem};
use crate::topology::{parse_custom_schedule, GraphSchedule};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("unknown config keys: {0}")]
    UnknownKeys(String),
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("key `{key}` (line {line}): {message}")]
    BadValue { key: String, line: usize, message: String },
    #[error("config invalid: {0}")]
    Invalid(String),
    #[error("io error reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Parsed config: key -> (value, source line). Key order is not preserved;
/// serialization is sorted, so parse -> serialize -> parse is the identity.
/// Equality is semantic: keys and values, not source line numbers.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, (String, usize)>,
}

impl PartialEq for ConfigMap {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, (va, _)), (kb, (vb, _)))| ka == kb && va == vb)
    }
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(ConfigError::Malformed { line, text: raw.trim().to_string() });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Malformed { line, text: raw.trim().to_string() });
            }
            if entries.insert(key.clone(), (value, line)).is_some() {
                return Err(ConfigError::Duplicate { line, key });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (key, (value, _)) in &self.entries {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    /// Starts typed extraction; the reader tracks which keys were consumed.
    pub fn reader(&self) -> ConfigReader<'_> {
        ConfigReader { map: self, used: std::cell::RefCell::new(Vec::new()) }
    }
}

pub struct ConfigReader<'a> {
    map: &'a ConfigMap,
    used: std::cell::RefCell<Vec<String>>,
}

impl<'a> ConfigReader<'a> {
    fn raw(&self, key: &str) -> Option<(&'a str, usize)> {
        let hit = self.map.entries.get(key).map(|(v, l)| (v.as_str(), *l));
        if hit.is_some() {
            self.used.borrow_mut().push(key.to_string());
        }
        hit
    }

    pub fn str_opt(&self, key: &str) -> Option<&'a str> {
        self.raw(key).map(|(v, _)| v)
    }

    pub fn str_req(&self, key: &str) -> Result<&'a str, ConfigError> {
        self.str_opt(key).ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                line,
                message: format!("cannot parse `{v}` as {}", std::any::type_name::<T>()),
            }),
        }
    }

    pub fn f64_opt(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        self.parse_as(key)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        Ok(self.f64_opt(key)?.unwrap_or(default))
    }

    pub fn f64_req(&self, key: &str) -> Result<f64, ConfigError> {
        self.f64_opt(key)?.ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    pub fn u64_opt(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        self.parse_as(key)
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        Ok(self.u64_opt(key)?.unwrap_or(default))
    }

    pub fn usize_req(&self, key: &str) -> Result<usize, ConfigError> {
        self.parse_as(key)?.ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    pub fn usize_opt(&self, key: &str) -> Result<Option<usize>, ConfigError> {
        self.parse_as(key)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        Ok(self.parse_as(key)?.unwrap_or(default))
    }

    /// Comma-separated f64 list.
    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => v
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|_| ConfigError::BadValue {
                        key: key.to_string(),
                        line,
                        message: format!("cannot parse `{}` as f64", s.trim()),
                    })
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
        }
    }

    pub fn u64_list(&self, key: &str) -> Result<Option<Vec<u64>>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => v
                .split(',')
                .map(|s| {
                    s.trim().parse::<u64>().map_err(|_| ConfigError::BadValue {
                        key: key.to_string(),
                        line,
                        message: format!("cannot parse `{}` as u64", s.trim()),
                    })
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
        }
    }

    /// Errors if any key in the file was never consumed, listing each with
    /// its line number.
    pub fn finish(self) -> Result<(), ConfigError> {
        let used = self.used.into_inner();
        let mut unknown: Vec<String> = self
            .map
            .entries
            .iter()
            .filter(|(k, _)| !used.iter().any(|u| u == *k))
            .map(|(k, (_, line))| format!("`{k}` (line {line})"))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            unknown.sort();
            Err(ConfigError::UnknownKeys(unknown.join(", ")))
        }
    }
}

/// Sweep settings pulled from the `sweep.*` keys.
#[derive(Debug, Clone, PartialEq)]
pub enum RecipeKind {
    SingleRun,
    NSweep { n_values: Vec<usize> },
    KSweep { k_values: Vec<u64> },
    EpsSweep { eps_values: Vec<f64> },
    VrAblation,
}

#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub run: RunConfig,
    pub problem_spec: ProblemSpec,
    pub constants: Option<ProblemConstants>,
    pub recipe: RecipeKind,
    pub seeds: Vec<u64>,
    /// Loss threshold for iterations-to-threshold summaries (n-sweep).
    pub threshold: Option<f64>,
}

/// How to materialize the training problem for a given node count.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub model: Model,
    pub source: DataSource,
    pub samples_per_node: usize,
    pub data_seed: u64,
}

#[derive(Debug, Clone)]
pub enum DataSource {
    SyntheticLogistic { dim: usize, skew: f64 },
    Csv { path: String, skip_header: bool },
}

impl ProblemSpec {
    /// Builds the problem for `n` nodes; synthetic data is regenerated per n
    /// so every node keeps `samples_per_node` samples.
    pub fn build(&self, n: usize) -> Result<Problem, ConfigError> {
        let shards = match &self.source {
            DataSource::SyntheticLogistic { dim, skew } => {
                synthetic_logistic_shards(n, self.samples_per_node, *dim, *skew, self.data_seed)
            }
            DataSource::Csv { path, skip_header } => {
                let data = load_csv(Path::new(path), *skip_header)
                    .map_err(|e| ConfigError::Invalid(format!("csv load failed: {e}")))?;
                partition(&data, n, self.data_seed)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?
                    .shards
            }
        };
        Problem::new(self.model.clone(), shards).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

fn schedule_from(r: &ConfigReader, n: usize) -> Result<GraphSchedule, ConfigError> {
    let kind = r.str_opt("topology.kind").unwrap_or("exponential");
    match kind {
        "exponential" => Ok(GraphSchedule::exponential(n)),
        "ring" => Ok(GraphSchedule::ring(n)),
        "complete" => Ok(GraphSchedule::complete(n)),
        "custom" => {
            let path = r.str_req("topology.custom_file")?;
            let text = std::fs::read_to_string(path)
                .map_err(|source| ConfigError::Io { path: path.to_string(), source })?;
            parse_custom_schedule(n, &text).map_err(|e| ConfigError::Invalid(e.to_string()))
        }
        other => Err(ConfigError::Invalid(format!("unknown topology.kind `{other}`"))),
    }
}

fn budgets_from(r: &ConfigReader, n: usize) -> Result<Vec<PrivacyBudget>, ConfigError> {
    let epsilons = match r.f64_list("privacy.epsilons")? {
        Some(list) => list,
        None => vec![r.f64_req("privacy.epsilon")?; n],
    };
    let deltas = match r.f64_list("privacy.deltas")? {
        Some(list) => list,
        None => vec![r.f64_req("privacy.delta")?; n],
    };
    if epsilons.len() != n || deltas.len() != n {
        return Err(ConfigError::Invalid(format!(
            "need {n} per-node budgets, got {} epsilons and {} deltas",
            epsilons.len(),
            deltas.len()
        )));
    }
    epsilons
        .into_iter()
        .zip(deltas)
        .map(|(e, d)| PrivacyBudget::new(e, d).map_err(|err| ConfigError::Invalid(err.to_string())))
        .collect()
}

/// Full typed load. Every key in the file must be consumed here; leftovers
/// are unknown-key errors.
pub fn load_config(map: &ConfigMap) -> Result<LoadedConfig, ConfigError> {
    let r = map.reader();

    let algorithm = match r.str_opt("algorithm").unwrap_or("privsgp-vr") {
        "privsgp-vr" => Algorithm::PrivSgpVr,
        "privsgp" => Algorithm::PrivSgp,
        other => return Err(ConfigError::Invalid(format!("unknown algorithm `{other}`"))),
    };
    let n = r.usize_req("topology.n")?;
    if n == 0 {
        return Err(ConfigError::Invalid("topology.n must be >= 1".into()));
    }
    let schedule = schedule_from(&r, n)?;
    let k = r.u64_req_positive("run.k")?;

    let mut run = RunConfig::new(algorithm, schedule, k);
    run.gamma = r.f64_opt("run.gamma")?;
    run.seed = r.u64_or("run.seed", 0)?;
    run.metrics_stride = r.u64_or("run.metrics_stride", 10)?;
    run.record_drift = r.bool_or("run.record_drift", false)?;
    run.window = r.usize_opt("topology.window")?;
    run.clip = r.f64_or("privacy.clip", f64::INFINITY)?;
    run.c1 = r.f64_or("privacy.c1", 1.0)?;
    run.c2 = r.f64_or("privacy.c2", 1.0)?;
    run.lambda_max = r.u64_or("privacy.lambda_max", 32)? as u32;
    run.sensitivity_factor = r.f64_or("privacy.sensitivity_factor", 6.0)?;

    let mode = r.str_opt("privacy.mode").unwrap_or("off");
    run.privacy_mode = match mode {
        "off" => PrivacyMode::Off,
        "fixed-sigma" => PrivacyMode::FixedSigma(r.f64_req("privacy.sigma")?),
        "budget-closed-form" => PrivacyMode::BudgetClosedForm,
        "budget-accountant" => PrivacyMode::BudgetAccountant,
        other => return Err(ConfigError::Invalid(format!("unknown privacy.mode `{other}`"))),
    };
    let needs_budgets = matches!(
        run.privacy_mode,
        PrivacyMode::BudgetClosedForm | PrivacyMode::BudgetAccountant
    );
    // plan-k / calibrate also want budgets even in off mode, so read them
    // whenever epsilon keys are present
    if needs_budgets || map.get("privacy.epsilon").is_some() || map.get("privacy.epsilons").is_some()
    {
        run.budgets = budgets_from(&r, n)?;
    }

    let model = match r.str_opt("problem.model").unwrap_or("logistic") {
        "quadratic" => Model::Quadratic,
        "logistic" => Model::Logistic { reg: r.f64_or("problem.reg", 1e-3)? },
        "mlp" => Model::Mlp {
            input: r.usize_req("problem.mlp_input")?,
            hidden: r.usize_req("problem.mlp_hidden")?,
            classes: r.usize_req("problem.mlp_classes")?,
        },
        other => return Err(ConfigError::Invalid(format!("unknown problem.model `{other}`"))),
    };
    let source = match r.str_opt("problem.source").unwrap_or("synthetic") {
        "synthetic" => DataSource::SyntheticLogistic {
            dim: r.usize_req("problem.dim")?,
            skew: r.f64_or("problem.skew", 0.0)?,
        },
        "csv" => DataSource::Csv {
            path: r.str_req("problem.csv_path")?.to_string(),
            skip_header: r.bool_or("problem.csv_skip_header", false)?,
        },
        other => return Err(ConfigError::Invalid(format!("unknown problem.source `{other}`"))),
    };
    let problem_spec = ProblemSpec {
        model,
        source,
        samples_per_node: r.usize_req("problem.samples_per_node")?,
        data_seed: r.u64_or("problem.data_seed", 0)?,
    };
    if problem_spec.samples_per_node == 0 {
        return Err(ConfigError::Invalid("problem.samples_per_node must be >= 1".into()));
    }

    // planner constants: all-or-nothing block
    let constants = if map.get("constants.l").is_some() {
        let c = ProblemConstants {
            l: r.f64_req("constants.l")?,
            b2: r.f64_req("constants.b2")?,
            f0: r.f64_req("constants.f0")?,
            x0_sq: r.f64_req("constants.x0_sq")?,
            g: r.f64_req("constants.g")?,
            d: r.usize_req("constants.d")?,
            c1: run.c1,
            c2: run.c2,
        };
        run.constants = Some(c.clone());
        Some(c)
    } else {
        None
    };

    let recipe = match r.str_opt("sweep.kind").unwrap_or("single-run") {
        "single-run" => RecipeKind::SingleRun,
        "n-sweep" => {
            let values = r
                .u64_list("sweep.values")?
                .ok_or_else(|| ConfigError::Missing("sweep.values".to_string()))?;
            check_sweep_values(&values)?;
            RecipeKind::NSweep { n_values: values.into_iter().map(|v| v as usize).collect() }
        }
        "k-sweep" => {
            let values = r
                .u64_list("sweep.values")?
                .ok_or_else(|| ConfigError::Missing("sweep.values".to_string()))?;
            check_sweep_values(&values)?;
            RecipeKind::KSweep { k_values: values }
        }
        "eps-sweep" => {
            let values = r
                .f64_list("sweep.values")?
                .ok_or_else(|| ConfigError::Missing("sweep.values".to_string()))?;
            if values.is_empty() {
                return Err(ConfigError::Invalid("sweep.values must be non-empty".into()));
            }
            if values.windows(2).any(|w| w[0] >= w[1]) {
                return Err(ConfigError::Invalid("sweep.values must be strictly ascending".into()));
            }
            RecipeKind::EpsSweep { eps_values: values }
        }
        "vr-ablation" => RecipeKind::VrAblation,
        other => return Err(ConfigError::Invalid(format!("unknown sweep.kind `{other}`"))),
    };

    let seeds = r.u64_list("sweep.seeds")?.unwrap_or_else(|| vec![run.seed]);
    if seeds.is_empty() {
        return Err(ConfigError::Invalid("sweep.seeds must be non-empty".into()));
    }
    let threshold = r.f64_opt("sweep.threshold")?;

    r.finish()?;
    Ok(LoadedConfig { run, problem_spec, constants, recipe, seeds, threshold })
}

fn check_sweep_values(values: &[u64]) -> Result<(), ConfigError> {
    if values.is_empty() {
        return Err(ConfigError::Invalid("sweep.values must be non-empty".into()));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ConfigError::Invalid("sweep.values must be strictly ascending".into()));
    }
    Ok(())
}

impl ConfigReader<'_> {
    fn u64_req_positive(&self, key: &str) -> Result<u64, ConfigError> {
        let v = self.u64_opt(key)?.ok_or_else(|| ConfigError::Missing(key.to_string()))?;
        if v == 0 {
            return Err(ConfigError::Invalid(format!("{key} must be >= 1")));
        }
        Ok(v)
    }
}
