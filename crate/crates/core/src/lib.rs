//! Sink-aware grounded decoding for vision-language transformers.
//!
//! The crate bundles a tape-based autodiff core, a seeded toy VLM and a
//! scripted oracle backend, sink detection and concept extraction, grounding
//! maps, the decoding controller, hallucination metrics and a corpus harness.

pub mod decoder;
pub mod grounding;
pub mod harness;
pub mod linguistics;
pub mod metrics;
pub mod tensor;
pub mod vlm;
