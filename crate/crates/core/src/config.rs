//! Experiment configuration: JSON file, defaults for every field, and
//! `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::losses::BceVariant;
use crate::pipeline::PipelineParams;
use crate::simulator::{SceneSpec, TeacherNoiseModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Worker threads; 0 uses all available cores. Results do not depend on it.
    pub threads: usize,
    /// Number of simulated unlabeled images.
    pub scenes: usize,
    pub lambda_u: f64,
    pub bce: BceVariant,
    pub pipeline: PipelineParams,
    pub scene: SceneSpec,
    pub teacher: TeacherNoiseModel,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            scenes: 1000,
            lambda_u: 1.0,
            bce: BceVariant::Full,
            pipeline: PipelineParams::default(),
            scene: SceneSpec::default(),
            teacher: TeacherNoiseModel::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory for generated files; nothing is written when unset.
    pub dir: Option<PathBuf>,
    pub write_dataset: bool,
    pub write_detections: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            write_dataset: true,
            write_detections: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return Err(Error::param("lambda_u", format!("{} must be >= 0", self.lambda_u)));
        }
        self.pipeline.validate()?;
        self.scene.validate()?;
        self.teacher.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key=value` overrides. Keys are dotted paths (`pipeline.balance.gamma1`)
    /// or a bare leaf name (`gamma1`) when it is unique in the config tree.
    /// Values parse as JSON when possible, otherwise as strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let ov = ov.as_ref();
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not KEY=VALUE")))?;
            let path = resolve_key(&tree, key.trim())?;
            let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
            let mut slot = &mut tree;
            for part in &path {
                slot = slot
                    .get_mut(part.as_str())
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            }
            *slot = value;
        }
        Self::from_value(tree)
    }
}

fn leaf_paths(v: &Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            prefix.push(k.clone());
            out.push(prefix.clone());
            leaf_paths(child, prefix, out);
            prefix.pop();
        }
    }
}

fn resolve_key(tree: &Value, key: &str) -> Result<Vec<String>> {
    let mut all = Vec::new();
    leaf_paths(tree, &mut Vec::new(), &mut all);
    let parts: Vec<String> = key.split('.').map(str::to_string).collect();
    if all.contains(&parts) {
        return Ok(parts);
    }
    let matches: Vec<&Vec<String>> = all.iter().filter(|p| p.ends_with(&parts)).collect();
    match matches.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(Error::Config(format!("unknown config key `{key}`"))),
        many => Err(Error::Config(format!(
            "ambiguous config key `{key}`: {}",
            many.iter().map(|p| p.join(".")).collect::<Vec<_>>().join(", ")
        ))),
    }
}
