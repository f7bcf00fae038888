//! The run configuration document and `--set` overrides.

use std::path::{Path, PathBuf};

use flare_core::model::ModelConfig;
use flare_core::numeric::AdamConfig;
use flare_core::sampling::{LoaderScheme, SampleLimits, SplitSpec};
use flare_core::synthcohort::CohortSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

fn default_epochs() -> usize {
    20
}

fn default_batch_size() -> usize {
    32
}

fn default_scheme() -> LoaderScheme {
    LoaderScheme::UniformRandom
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_scheme")]
    pub loader_scheme: LoaderScheme,
    /// Required: every run is seeded.
    pub seed: u64,
    /// Also write `epoch_<n>.ck` every this many epochs; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Z-score features with statistics of the training split.
    #[serde(default = "yes")]
    pub normalize: bool,
}

/// Exactly one of `path` (a cohort CSV with its sidecar manifest) or
/// `synth` (a generator spec).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<CohortSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointChoice {
    /// Weights after the last epoch.
    #[default]
    Final,
    /// Weights from the epoch with the lowest mean training loss per sample.
    Best,
}

impl CheckpointChoice {
    pub fn file_name(self) -> &'static str {
        match self {
            CheckpointChoice::Final => "final.ck",
            CheckpointChoice::Best => "best.ck",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub domain: SampleLimits,
    #[serde(default)]
    pub checkpoint: CheckpointChoice,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            domain: SampleLimits::default(),
            checkpoint: CheckpointChoice::Final,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub data: DataConfig,
    /// Defaults to an 80/20 split seeded with `training.seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn split_spec(&self) -> SplitSpec {
        self.split.unwrap_or(SplitSpec {
            train_fraction: 0.8,
            seed: self.training.seed,
        })
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |m: String| Err(CliError::Config(m));
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.optimizer
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.split_spec()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.training.batch_size == 0 {
            return cfg("training.batch_size must be positive".into());
        }
        match (&self.data.path, &self.data.synth) {
            (Some(_), Some(_)) => return cfg("data: give either `path` or `synth`, not both".into()),
            (None, None) => return cfg("data: one of `path` or `synth` is required".into()),
            (None, Some(spec)) => {
                spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
                if spec.dims != self.model.dims {
                    return cfg(format!(
                        "model dims {:?} differ from synth dims {:?}",
                        self.model.dims, spec.dims
                    ));
                }
            }
            (Some(_), None) => {}
        }
        let d = self.eval.domain;
        if d.max_t < 2 || d.max_sum <= d.max_t {
            return cfg(format!("eval.domain {d:?} admits no bucket"));
        }
        if d.max_t > self.model.max_t || d.max_sum > self.model.max_sum_t_tau {
            return cfg(format!(
                "eval.domain {d:?} exceeds the model's (T={}, T+tau={})",
                self.model.max_t, self.model.max_sum_t_tau
            ));
        }
        Ok(())
    }
}

/// Sets `key` (dotted path) in `doc` to `value`, parsed as JSON when
/// possible and as a plain string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{assignment}`")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("--set: malformed key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(CliError::Config(format!(
                    "--set {key}: `{}` is not an object",
                    parts[..i].join(".")
                )));
            }
        }
        let map = node.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("non-empty key")
}

/// Recursively overlays `top` onto `base`; objects merge key by key,
/// anything else replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Deserializes a (possibly partial) document: nested sections such as
/// `model.loss` or `data.synth.dims` may list only the fields they change.
pub fn from_document(doc: Value) -> Result<RunConfig, CliError> {
    let to_value = |v: Result<Value, serde_json::Error>| v.expect("defaults serialize");
    let mut full = serde_json::json!({
        "model": to_value(serde_json::to_value(ModelConfig::default())),
        "optimizer": to_value(serde_json::to_value(AdamConfig::default())),
        "eval": to_value(serde_json::to_value(EvalConfig::default())),
    });
    if doc.pointer("/data/synth").is_some_and(Value::is_object) {
        full["data"] = serde_json::json!({
            "synth": to_value(serde_json::to_value(CohortSpec::default()))
        });
    }
    if !doc.is_object() {
        return Err(CliError::Config("config must be a JSON object".into()));
    }
    merge(&mut full, doc);
    serde_json::from_value(full).map_err(|e| CliError::Config(format!("config: {e}")))
}

/// Reads the config document (or starts from `{}`), applies overrides and
/// validates. Relative data paths resolve against the config file's
/// directory.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let mut cfg = from_document(doc)?;
    if let (Some(base), Some(data)) = (path.and_then(Path::parent), cfg.data.path.as_mut()) {
        if data.is_relative() {
            *data = base.join(&*data);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Value {
        serde_json::json!({"training": {"seed": 1}, "data": {"synth": {"n_patients": 5}}})
    }

    #[test]
    fn overrides_parse_json_or_strings() {
        let mut v = base();
        apply_override(&mut v, "training.epochs=7").unwrap();
        apply_override(&mut v, "training.loader_scheme=per_length").unwrap();
        apply_override(&mut v, "model.loss.alpha=0.5").unwrap();
        apply_override(&mut v, "optimizer.lr=1e-2").unwrap();
        let cfg = from_document(v).unwrap();
        assert_eq!(cfg.training.epochs, 7);
        assert_eq!(cfg.training.loader_scheme, LoaderScheme::PerLength);
        assert_eq!(cfg.model.loss.alpha, 0.5);
        assert_eq!(cfg.optimizer.lr, 1e-2);
        cfg.validate().unwrap();
    }

    #[test]
    fn seed_is_mandatory() {
        let v = serde_json::json!({"training": {}, "data": {"synth": {}}});
        assert!(from_document(v).is_err());
    }

    #[test]
    fn rejects_bad_documents() {
        let mut v = base();
        apply_override(&mut v, "data.path=x.csv").unwrap();
        let cfg = from_document(v).unwrap();
        assert!(cfg.validate().is_err());

        let mut v = base();
        apply_override(&mut v, "training.loader_scheme=shuffled").unwrap();
        assert!(from_document(v).is_err());

        let mut v = base();
        apply_override(&mut v, "model.dims.volumetric=7").unwrap();
        let cfg = from_document(v).unwrap();
        assert!(cfg.validate().is_err());

        let mut v = base();
        apply_override(&mut v, "eval.domain={\"max_t\":4,\"max_sum\":6}").unwrap();
        let cfg = from_document(v).unwrap();
        assert!(cfg.validate().is_err());

        let mut v = base();
        assert!(apply_override(&mut v, "training.seed.x=1").is_err());
        assert!(apply_override(&mut v, "novalue").is_err());
    }

    #[test]
    fn default_split_uses_training_seed() {
        let cfg = from_document(base()).unwrap();
        assert_eq!(cfg.split_spec().seed, 1);
        assert_eq!(cfg.split_spec().train_fraction, 0.8);
    }
}
