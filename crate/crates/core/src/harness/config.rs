use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::acquisition::AcqConfig;
use crate::error::{Error, Result};
use crate::gp::GpHyper;
use crate::oracle::{OracleConfig, ProblemSpec};
use crate::policy::PolicyConfig;
use crate::reward::{RewardArch, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Brlhf,
    Pbo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    /// Matérn length scale as a multiple of the search-box diagonal.
    pub length_scale: f64,
    pub signal_var: f64,
    /// Probit noise of the preference likelihood.
    pub noise: f64,
    pub memory_limit_bytes: Option<usize>,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            length_scale: 1.0,
            signal_var: 1.0,
            noise: 0.1,
            memory_limit_bytes: None,
        }
    }
}

impl GpConfig {
    pub fn hyper(&self, problem: &ProblemSpec) -> GpHyper {
        GpHyper {
            length_scale: self.length_scale * problem.diagonal(),
            signal_var: self.signal_var,
            noise: self.noise,
        }
    }
}

fn default_wall_clock() -> f64 {
    36_000.0
}

fn default_retrain_every() -> usize {
    10
}

/// Everything needed to reproduce one run. `seed` is mandatory in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub acquisition: AcqConfig,
    /// Query budget; defaults to 150 per input dimension.
    #[serde(default)]
    pub budget: Option<usize>,
    #[serde(default = "default_wall_clock")]
    pub wall_clock_secs: f64,
    /// Full reward-model refit cadence, in queries.
    #[serde(default = "default_retrain_every")]
    pub retrain_every: usize,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub reward: RewardArch,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub gp: GpConfig,
    pub seed: u64,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub audit_log: Option<String>,
}

fn default_method() -> Method {
    Method::Brlhf
}

impl RunConfig {
    pub fn new(method: Method, problem: ProblemSpec, seed: u64) -> Self {
        Self {
            method,
            problem,
            oracle: OracleConfig::default(),
            acquisition: AcqConfig::default(),
            budget: None,
            wall_clock_secs: default_wall_clock(),
            retrain_every: default_retrain_every(),
            policy: PolicyConfig::default(),
            reward: RewardArch::default(),
            train: TrainConfig::default(),
            gp: GpConfig::default(),
            seed,
            output: None,
            audit_log: None,
        }
    }

    pub fn budget(&self) -> usize {
        self.budget.unwrap_or(150 * self.problem.dim)
    }

    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        self.oracle.validate()?;
        self.acquisition.validate()?;
        self.policy.validate()?;
        if self.retrain_every == 0 {
            return Err(Error::InvalidConfig("retrain_every must be at least 1".into()));
        }
        if !(self.wall_clock_secs > 0.0) {
            return Err(Error::InvalidConfig("wall_clock_secs must be positive".into()));
        }
        if self.method == Method::Pbo {
            self.gp.hyper(&self.problem).validate()?;
        }
        Ok(())
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Applies `key.path=value` overrides to a JSON document. Values are parsed
/// as JSON when possible and taken as strings otherwise; intermediate
/// objects are created as needed.
pub fn apply_overrides(doc: &mut Value, sets: &[String]) -> Result<()> {
    for set in sets {
        let (path, raw) = set
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("override `{set}` is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let keys: Vec<&str> = path.split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(Error::Parse(format!("override `{set}` has an empty key")));
        }
        let mut node = &mut *doc;
        for key in &keys[..keys.len() - 1] {
            if !node.is_object() {
                return Err(Error::Parse(format!("override `{set}`: `{key}` is not inside an object")));
            }
            node = node
                .as_object_mut()
                .unwrap()
                .entry(key.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
            if node.is_null() {
                *node = Value::Object(Default::default());
            }
        }
        match node.as_object_mut() {
            Some(obj) => {
                obj.insert(keys[keys.len() - 1].to_string(), value);
            }
            None => return Err(Error::Parse(format!("override `{set}` targets a non-object"))),
        }
    }
    Ok(())
}

/// Reads a JSON config file, applies overrides, and validates.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut doc = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => Value::Object(Default::default()),
    };
    apply_overrides(&mut doc, sets)?;
    RunConfig::from_value(doc)
}
