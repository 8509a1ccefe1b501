use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Backend, HarnessError, Mode};
use crate::decoder::SageConfig;

/// Wall-clock cost of grounded decoding relative to a baseline pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub baseline_micros: u64,
    pub sage_micros: u64,
    pub overhead_pct: f64,
    /// Added time per component, plus `other` for the remainder.
    pub components: BTreeMap<String, i64>,
}

/// Everything needed to repeat a decode run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub corpus: String,
    pub corpus_seed: u64,
    pub backend: Backend,
    pub mode: Mode,
    pub config: SageConfig,
    pub prompt: String,
    pub model_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_new_tokens: Option<usize>,
    pub traces_dir: String,
    pub images: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingSummary>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Corpus(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
    }
}
