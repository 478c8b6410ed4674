//! Run configuration: a JSON file, overridden by flags, completed from data.

use std::path::{Path, PathBuf};

use mivc::data::SyntheticSpec;
use mivc::model::{EncoderKind, Strategy, TrainConfig};
use mivc::{MivcError, Result};
use serde::{Deserialize, Serialize};

/// Everything a run can be configured with. Unknown keys are rejected at
/// every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: TrainConfig,
    pub synthetic: SyntheticSpec,
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Benchmark rows, in output order.
    pub strategies: Vec<Strategy>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: TrainConfig::default(),
            synthetic: SyntheticSpec::default(),
            train_manifest: None,
            eval_manifest: None,
            out: None,
            strategies: Strategy::ALL.to_vec(),
        }
    }
}

/// Model keys the user set explicitly, so data-derived values never
/// silently replace them.
#[derive(Debug, Default, Clone)]
pub struct Explicit {
    keys: Vec<String>,
}

impl Explicit {
    pub fn has(&self, key: &str) -> bool {
        self.keys.iter().any(|k| k == key)
    }

    pub fn mark(&mut self, key: &str) {
        if !self.has(key) {
            self.keys.push(key.to_string());
        }
    }
}

pub fn load(path: Option<&Path>) -> Result<(RunConfig, Explicit)> {
    let Some(path) = path else {
        return Ok((RunConfig::default(), Explicit::default()));
    };
    let text = std::fs::read_to_string(path).map_err(|e| MivcError::Usage(format!("config {}: {e}", path.display())))?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| MivcError::Usage(format!("config {}: {e}", path.display())))?;
    let mut explicit = Explicit::default();
    if let Ok(serde_json::Value::Object(top)) = serde_json::from_str::<serde_json::Value>(&text) {
        if let Some(serde_json::Value::Object(model)) = top.get("model") {
            for k in model.keys() {
                explicit.mark(if k == "pooling" { "strategy" } else { k });
            }
        }
    }
    Ok((cfg, explicit))
}

/// Fills data-dependent model fields the user left unset.
pub fn complete_from_data(
    model: &mut TrainConfig,
    explicit: &Explicit,
    input_dim: usize,
    shape: Option<(usize, usize)>,
    classes: usize,
) {
    if !explicit.has("input_dim") {
        model.input_dim = input_dim;
    }
    if !explicit.has("classes") {
        model.classes = classes;
    }
    if !explicit.has("dim") && model.encoder == EncoderKind::Identity {
        model.dim = model.input_dim;
    }
    if !explicit.has("patch_shape") && model.encoder == EncoderKind::Identity {
        model.patch_shape = shape;
    }
}

pub fn snapshot(cfg: &RunConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serialises") + "\n"
}
