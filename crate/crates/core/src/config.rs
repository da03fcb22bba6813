//! Run configuration documents and dotted-path overrides.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::BiasParams;
use crate::error::{Result, SabreError};
use crate::presets::preset;
use crate::scenario::Scenario;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordFormat {
    #[default]
    Csv,
    Json,
}

impl RecordFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            RecordFormat::Csv => "records.csv",
            RecordFormat::Json => "records.json",
        }
    }
}

fn default_formats() -> Vec<RecordFormat> {
    vec![RecordFormat::Csv]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// `None` defers to the caller (the CLI falls back to an env var, then `./out`).
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub formats: Vec<RecordFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            formats: default_formats(),
        }
    }
}

fn default_test_samples() -> usize {
    1000
}

fn default_rate_from() -> u64 {
    100
}

/// Knobs for the post-run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSettings {
    #[serde(default)]
    pub bias: BiasParams,
    /// Bias scale for `c` estimates; `None` uses the label-flip bias if any, else 1.
    #[serde(default)]
    pub bias_b: Option<f64>,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    #[serde(default = "default_rate_from")]
    pub rate_from: u64,
    /// Last cycle of the variance-decay fit; `None` = T_max.
    #[serde(default)]
    pub rate_to: Option<u64>,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            bias: BiasParams::default(),
            bias_b: None,
            test_samples: default_test_samples(),
            rate_from: default_rate_from(),
            rate_to: None,
        }
    }
}

fn default_workers() -> usize {
    1
}

/// On-disk run configuration. The scenario comes from `preset`, from
/// `scenario`, or from both (the inline object is merged over the preset),
/// then `overrides` are applied in key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Value>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, Value>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub verbosity: u8,
    #[serde(default)]
    pub analysis: AnalysisSettings,
}

/// A config with every default materialized and the scenario fully built.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRun {
    pub scenario: Scenario,
    pub output: OutputConfig,
    pub workers: usize,
    pub verbosity: u8,
    pub analysis: AnalysisSettings,
}

impl RunConfig {
    pub fn from_preset(name: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            preset: Some(name.to_string()),
            scenario: None,
            overrides: BTreeMap::new(),
            output: OutputConfig::default(),
            workers: default_workers(),
            verbosity: 0,
            analysis: AnalysisSettings::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            SabreError::config(format!("config {path}: {}", e.into_inner()))
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(SabreError::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Adds a `path=value` override; `value` is parsed as JSON, or taken as a
    /// string when it is not valid JSON.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = parse_assignment(assignment)?;
        self.overrides.insert(path, value);
        Ok(())
    }

    pub fn resolve(&self) -> Result<ResolvedRun> {
        let mut root = match (&self.preset, &self.scenario) {
            (None, None) => return Err(SabreError::config("config needs a preset or an inline scenario")),
            (Some(name), inline) => {
                let mut v = serde_json::to_value(preset(name)?).expect("scenario serializes");
                if let Some(patch) = inline {
                    merge(&mut v, patch.clone());
                }
                v
            }
            (None, Some(inline)) => inline.clone(),
        };
        for (path, value) in &self.overrides {
            apply_override(&mut root, path, value.clone())?;
        }
        let scenario: Scenario = serde_path_to_error::deserialize(root).map_err(|e| {
            let path = e.path().to_string();
            SabreError::config(format!("scenario.{path}: {}", e.into_inner()))
        })?;
        scenario.validate()?;
        if self.workers == 0 {
            return Err(SabreError::config("workers must be >= 1"));
        }
        if self.output.formats.is_empty() {
            return Err(SabreError::config("output.formats must not be empty"));
        }
        if self.analysis.test_samples == 0 {
            return Err(SabreError::config("analysis.test_samples must be >= 1"));
        }
        if let Some(b) = self.analysis.bias_b {
            if b == 0.0 || !b.is_finite() {
                return Err(SabreError::config("analysis.bias_b must be finite and nonzero"));
            }
        }
        Ok(ResolvedRun {
            scenario,
            output: self.output.clone(),
            workers: self.workers,
            verbosity: self.verbosity,
            analysis: self.analysis.clone(),
        })
    }
}

impl ResolvedRun {
    /// Self-contained config that reproduces this run exactly.
    pub fn to_config(&self) -> RunConfig {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            preset: None,
            scenario: Some(serde_json::to_value(&self.scenario).expect("scenario serializes")),
            overrides: BTreeMap::new(),
            output: self.output.clone(),
            workers: self.workers,
            verbosity: self.verbosity,
            analysis: self.analysis.clone(),
        }
    }
}

pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (path, raw) = s
        .split_once('=')
        .ok_or_else(|| SabreError::config(format!("override {s:?} is not of the form key=value")))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(SabreError::config(format!("override {s:?} has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path.to_string(), value))
}

/// Sets `path` (dot-separated; numeric segments index arrays) inside `root`,
/// creating missing object levels.
pub fn apply_override(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(seg.to_string(), value);
                    return Ok(());
                }
                map.entry(seg.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| SabreError::config(format!("override {path}: {seg:?} is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| SabreError::config(format!("override {path}: index {idx} out of range (len {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            Value::Null if !last => {
                *cur = Value::Object(Default::default());
                let Value::Object(map) = cur else { unreachable!() };
                map.entry(seg.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Null => {
                let mut map = serde_json::Map::new();
                map.insert(seg.to_string(), value);
                *cur = Value::Object(map);
                return Ok(());
            }
            _ => {
                return Err(SabreError::config(format!(
                    "override {path}: {} is not an object or array",
                    segments[..i].join(".")
                )))
            }
        };
    }
    Ok(())
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
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
