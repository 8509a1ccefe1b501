//! Grounded decoding: trigger policy, reliability check, attention modulation.

mod config;
mod controller;
mod directive;
mod trace;

pub use config::{ModulationScope, ReliabilityMode, SageConfig, TimingMode, Trigger};
pub use controller::{run_decode, DecodeRun, PartialDecode, SageDecoder};
pub use directive::{apply_directive, image_mass, Expiry, ModulationDirective};
pub use trace::{Component, DecodeTrace, DirectiveAction, TraceEvent};

use crate::grounding::GroundingError;
use crate::linguistics::LinguisticsError;
use crate::vlm::VlmError;

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("modulation scale {0} must be positive")]
    InvalidScale(f64),
    #[error("invalid attention row: {0}")]
    InvalidRow(String),
    #[error("invalid decoder config: {0}")]
    Config(String),
    #[error("malformed trace: {0}")]
    Trace(String),
    #[error(transparent)]
    Vlm(#[from] VlmError),
    #[error(transparent)]
    Linguistics(#[from] LinguisticsError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
