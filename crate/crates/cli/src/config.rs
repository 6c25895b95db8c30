//! Layered configuration: defaults, then a JSON file, then `--set` overrides,
//! then explicit flags. Every layer is checked against the default tree, so
//! a misspelled key is an error rather than a silent no-op.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tyrppg::losses::LossMode;
use tyrppg::model::ModelConfig;
use tyrppg::train::{EvalOptions, EvalReference, EvalSource, SynthConfig, TrainConfig};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    All,
    Train,
    Heldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub source: EvalSource,
    pub reference: EvalReference,
    pub split: Split,
}

impl EvalSettings {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            source: self.source,
            reference: self.reference,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSettings {
    pub modes: Vec<LossMode>,
    pub seeds: Vec<u64>,
}

impl Default for AblateSettings {
    fn default() -> Self {
        AblateSettings {
            modes: LossMode::ALL.to_vec(),
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub ablate: AblateSettings,
}

/// Parses `a.b=c`. The value is read as JSON when it parses, else as a string.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {s:?} is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("override {s:?} has an empty key segment")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok((key.to_string(), value))
}

fn merge(base: &mut Value, file: Value, path: &str) -> Result<(), CliError> {
    match (base, file) {
        (Value::Object(b), Value::Object(f)) => {
            for (k, v) in f {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| CliError::Config(format!("unknown config key {sub:?}")))?;
                merge(slot, v, &sub)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = root;
    for seg in key.split('.') {
        node = match node {
            Value::Object(m) => m.get_mut(seg),
            _ => None,
        }
        .ok_or_else(|| CliError::Config(format!("unknown config key {key:?}")))?;
    }
    *node = value;
    Ok(())
}

/// Builds the effective configuration. `flags` are applied last.
pub fn load(file: Option<&Path>, overrides: &[String], flags: Vec<(&str, Value)>) -> Result<CliConfig, CliError> {
    let mut tree = serde_json::to_value(CliConfig::default()).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        let parsed: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        if !parsed.is_object() {
            return Err(CliError::Config(format!("config {}: top level must be an object", path.display())));
        }
        merge(&mut tree, parsed, "")?;
    }
    for o in overrides {
        let (k, v) = parse_override(o)?;
        set_path(&mut tree, &k, v)?;
    }
    for (k, v) in flags {
        set_path(&mut tree, k, v)?;
    }
    serde_json::from_value(tree).map_err(|e| CliError::Config(format!("config: {e}")))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(v: &T) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(v).map_err(tyrppg::Error::from)? + "\n")
}

/// Wraps a report together with the configuration that produced it.
pub fn echo(config: Value, body: Value) -> Value {
    let mut m = Map::new();
    m.insert("config".into(), config);
    if let Value::Object(b) = body {
        m.extend(b);
    } else {
        m.insert("report".into(), body);
    }
    Value::Object(m)
}
