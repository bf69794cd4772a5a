//! Experiment configuration: JSON file, dotted `--set` overrides, and
//! conversion into the core training types.

use std::fs;
use std::path::{Path, PathBuf};

use curation_core::curation::{super_batch_size, Scoring, SelectionConfig};
use curation_core::data::SyntheticSpec;
use curation_core::model::ModelShape;
use curation_core::objectives::{ContrastiveKind, KdWeights};
use curation_core::oracle::OracleSweep;
use curation_core::trainer::{Method, MethodConfig, OptimizerConfig, ScheduleConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory written by `gen-data`.
    pub dataset: Option<PathBuf>,
    /// Checkpoint directory of the frozen reference model.
    pub reference: Option<PathBuf>,
    /// Checkpoint directories of frozen teachers.
    pub teachers: Vec<PathBuf>,
    /// Checkpoint evaluated by `eval`.
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            embed_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionSection {
    /// Explicit `B`; when absent it is derived from `filtering_ratio`.
    pub super_batch_size: Option<usize>,
    pub filtering_ratio: f64,
    pub chunks: usize,
    pub temperature: f64,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            super_batch_size: None,
            filtering_ratio: 0.8,
            chunks: 4,
            temperature: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSection {
    pub method: Method,
    /// Defaults to 1 for distilling methods and 0 otherwise.
    pub lambda: Option<f64>,
    pub contrastive_kind: ContrastiveKind,
    pub total_samples: usize,
    pub batch_size: usize,
    pub selection: SelectionSection,
    pub kd: KdWeights,
}

impl Default for MethodSection {
    fn default() -> Self {
        Self {
            method: Method::IidBaseline,
            lambda: None,
            contrastive_kind: ContrastiveKind::Softmax,
            total_samples: 50_000,
            batch_size: 16,
            selection: SelectionSection::default(),
            kd: KdWeights::default(),
        }
    }
}

impl MethodSection {
    pub fn to_core(&self) -> Result<MethodConfig, CliError> {
        let b = self.batch_size;
        let big = match self.selection.super_batch_size {
            Some(n) => n,
            None => super_batch_size(b, self.selection.filtering_ratio)
                .map_err(|e| CliError::Config(format!("method.selection: {e}")))?,
        };
        let config = MethodConfig {
            method: self.method,
            lambda: self
                .lambda
                .unwrap_or(if self.method.uses_kd() { 1.0 } else { 0.0 }),
            contrastive_kind: self.contrastive_kind,
            total_samples: self.total_samples,
            batch_size: b,
            selection: SelectionConfig {
                super_batch_size: big,
                mini_batch_size: b,
                chunks: self.selection.chunks,
                temperature: self.selection.temperature,
                scoring: self.method.scoring().unwrap_or(Scoring::Learnability),
                loss_kind: self.contrastive_kind,
            },
            kd: self.kd,
        };
        config
            .validate()
            .map_err(|e| CliError::Config(format!("method: {e}")))?;
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Dataset split to train on: `train`, or `curated` for reference pretraining.
    pub split: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            split: "train".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Evaluate every `fraction · steps` steps during training; `0` keeps only the final eval.
    pub fraction: f64,
    pub split: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            fraction: 0.1,
            split: "eval".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StableEvalSection {
    /// CSV with columns `evaluation,method,seed,score`.
    pub input: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportSection {
    /// Run directories written by `train`.
    pub runs: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: SyntheticSpec,
    pub model: ModelSection,
    pub method: MethodSection,
    pub train: TrainSection,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub eval: EvalSection,
    pub oracle: OracleSweep,
    pub stableeval: StableEvalSection,
    pub export: ExportSection,
}

impl ExperimentConfig {
    pub fn model_shape(&self, d_img: usize, d_txt: usize, projection_dim: Option<usize>) -> ModelShape {
        let mut shape =
            ModelShape::symmetric(d_img, d_txt, self.model.hidden_dim, self.model.embed_dim);
        shape.projection_dim = projection_dim;
        shape
    }
}

/// Sets `path` (dot-separated keys) inside `root`, creating objects on the way.
/// The value is parsed as JSON when possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {assignment:?}")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("invalid override key {key:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(CliError::Config(format!("override {key}: {part} is not a section")));
        }
        node = node
            .as_object_mut()
            .expect("checked object")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(CliError::Config(format!("override {key}: parent is not a section"))),
    }
}

/// Reads a config file; a run manifest is accepted and its `config` used.
pub fn load_file(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::from_io(path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(CliError::Config(format!("{}: top level must be an object", path.display())));
    }
    Ok(match value.get("config") {
        Some(inner) if value.get("subcommand").is_some() => inner.clone(),
        _ => value,
    })
}

/// File (or defaults), then overrides in order, then typed validation.
pub fn resolve(
    file: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    output: Option<&Path>,
) -> Result<ExperimentConfig, CliError> {
    let mut value = match file {
        Some(p) => load_file(p)?,
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let mut config: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(s) = seed {
        config.seed = s;
        config.data.seed = s;
        config.oracle.seed = s;
    }
    if let Some(o) = output {
        config.paths.output = Some(o.to_path_buf());
    }
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn dotted_overrides_last_wins() {
        let mut v = json!({"method": {"selection": {"temperature": 1.0}}});
        apply_override(&mut v, "method.selection.temperature=10").unwrap();
        apply_override(&mut v, "method.selection.temperature=20").unwrap();
        apply_override(&mut v, "method.method=h_acid").unwrap();
        apply_override(&mut v, "paths.dataset=/tmp/x").unwrap();
        assert_eq!(v["method"]["selection"]["temperature"], json!(20));
        assert_eq!(v["method"]["method"], json!("h_acid"));
        assert_eq!(v["paths"]["dataset"], json!("/tmp/x"));
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "a..b=1").is_err());
        assert!(apply_override(&mut v, "method.method.x=1").is_err());
    }

    #[test]
    fn defaults_resolve_to_valid_method() {
        let c = resolve(None, &[], Some(4), None).unwrap();
        assert_eq!(c.data.seed, 4);
        let m = c.method.to_core().unwrap();
        assert_eq!(m.selection.super_batch_size, 80);
        let bad = resolve(None, &["method.method=softmax_kd".into(), "method.lambda=0".into()], None, None)
            .unwrap();
        assert!(matches!(bad.method.to_core(), Err(CliError::Config(_))));
        assert!(matches!(
            resolve(None, &["method.bogus=1".into()], None, None),
            Err(CliError::Config(_))
        ));
    }
}
