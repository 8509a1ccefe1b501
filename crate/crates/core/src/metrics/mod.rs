//! Hallucination and grounding instruments.

mod annotations;
mod chair;
mod entropy;
mod layers;
mod proximity;

pub use annotations::{AnnotationSet, ImageAnnotation};
pub use chair::{chair, cover, object_mentions, CaptionChair, ChairResult};
pub use entropy::attention_entropy;
pub use layers::{layer_analysis, LayerAnalysis, LayerAnalysisRow, LayerSample};
pub use proximity::{sink_proximity, ProximityStats, DEFAULT_WINDOW};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no annotation for image {0:?}")]
    UnknownImage(String),
    #[error("image {0:?} has no ground-truth objects")]
    EmptyGroundTruth(String),
    #[error("attention row has a negative or non-finite entry")]
    NegativeEntry,
    #[error("attention row has no mass on image positions")]
    ZeroMass,
    #[error("trace carries no hallucination labels")]
    NoLabels,
    #[error("no hallucinated tokens to measure")]
    NoHallucinations,
    #[error("invalid annotations: {0}")]
    InvalidAnnotations(String),
    #[error(transparent)]
    Grounding(#[from] crate::grounding::GroundingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
