//! Synthetic corpora, batch decoding, reports and layer analysis.

mod commands;
mod corpus;
mod manifest;
mod scene;

use std::path::{Path, PathBuf};

pub use commands::{
    cmd_decode, cmd_generate, cmd_layer_analysis, cmd_report, output_root, Backend, DecodeOptions, Mode, Status,
    OUTPUT_ROOT_ENV,
};
pub use corpus::{
    build_scenario, image_id, write_corpus, Corpus, CorpusMeta, Scenario, ScenarioKind, ScenarioMeta, DEFAULT_PROMPT,
    ORACLE_HEADS, ORACLE_LAYERS,
};
pub use manifest::{RunManifest, TimingSummary};
pub use scene::{shape_synonyms, Color, Scene, SceneObject, Shape};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("backend {backend} cannot run this corpus: {reason}")]
    Backend { backend: String, reason: String },
    #[error(transparent)]
    Decode(#[from] crate::decoder::DecodeError),
    #[error(transparent)]
    Partial(#[from] crate::decoder::PartialDecode),
    #[error(transparent)]
    Vlm(#[from] crate::vlm::VlmError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
