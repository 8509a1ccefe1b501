//! Sink detection and key-concept extraction over emitted text.

mod concepts;
mod pos;
mod sink;
mod text;

pub use concepts::{extract_concepts, extract_concepts_from_words, Concept, ConceptKind};
pub use pos::{PosLexicon, PosTag, DEFAULT_LEXICON};
pub use sink::{is_sink, SinkEvent, SinkLexicon, SinkTracker, DEFAULT_CONJUNCTIONS, DEFAULT_PUNCTUATION};
pub use text::{detokenize, tokenize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinguisticsError {
    #[error("unknown token id {0}")]
    UnknownToken(u32),
    #[error("span {start}..{end} exceeds token stream of length {len}")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("invalid lexicon: {0}")]
    InvalidLexicon(String),
}
