use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::LinguisticsError;
use crate::vlm::{TokenId, Vocabulary};

pub const DEFAULT_PUNCTUATION: [&str; 9] = [".", ",", ":", ";", "!", "?", "-", "--", "..."];
pub const DEFAULT_CONJUNCTIONS: [&str; 5] = ["and", "or", "but", "so", "yet"];

/// Token strings that mark a segment boundary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SinkLexicon {
    pub punctuation: BTreeSet<String>,
    pub conjunctions: BTreeSet<String>,
}

impl Default for SinkLexicon {
    fn default() -> Self {
        Self {
            punctuation: DEFAULT_PUNCTUATION.iter().map(|s| s.to_string()).collect(),
            conjunctions: DEFAULT_CONJUNCTIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl SinkLexicon {
    /// Parses `{ "punctuation": [...], "conjunctions": [...] }`.
    pub fn from_json(text: &str) -> Result<Self, LinguisticsError> {
        serde_json::from_str(text).map_err(|e| LinguisticsError::InvalidLexicon(e.to_string()))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.punctuation.contains(word) || self.conjunctions.contains(word)
    }

    pub fn len(&self) -> usize {
        self.punctuation.union(&self.conjunctions).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn is_sink(token: TokenId, vocab: &Vocabulary, lexicon: &SinkLexicon) -> Result<bool, LinguisticsError> {
    let word = vocab
        .word(token)
        .ok_or(LinguisticsError::UnknownToken(token.0))?;
    Ok(lexicon.contains(word))
}

/// A sink emission and the non-sink segment that precedes it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SinkEvent {
    pub step: usize,
    pub token: TokenId,
    /// Indices into the generated stream, exclusive of the sink itself.
    pub segment: Range<usize>,
}

/// Splits a token stream into sink-delimited segments as it is emitted.
#[derive(Debug, Clone, Default)]
pub struct SinkTracker {
    segment_start: usize,
}

impl SinkTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, step: usize, token: TokenId, sink: bool) -> Option<SinkEvent> {
        if !sink {
            return None;
        }
        let event = SinkEvent {
            step,
            token,
            segment: self.segment_start..step,
        };
        self.segment_start = step + 1;
        Some(event)
    }

    /// Start of the segment currently being accumulated.
    pub fn segment_start(&self) -> usize {
        self.segment_start
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_set_has_fourteen_members() {
        let lex = SinkLexicon::default();
        assert_eq!(lex.punctuation.len(), 9);
        assert_eq!(lex.conjunctions.len(), 5);
        assert_eq!(lex.len(), 14);
    }

    #[test]
    fn membership() {
        let vocab = Vocabulary::synthetic();
        let lex = SinkLexicon::default();
        let id = |w: &str| vocab.id(w).unwrap();
        assert!(is_sink(id(","), &vocab, &lex).unwrap());
        assert!(is_sink(id("yet"), &vocab, &lex).unwrap());
        assert!(is_sink(id("..."), &vocab, &lex).unwrap());
        assert!(!is_sink(id("table"), &vocab, &lex).unwrap());
        assert!(!is_sink(id("the"), &vocab, &lex).unwrap());
        assert_eq!(
            is_sink(TokenId(99_999), &vocab, &lex).unwrap_err(),
            LinguisticsError::UnknownToken(99_999)
        );
    }

    #[test]
    fn json_round_trip() {
        let lex = SinkLexicon::from_json(r#"{"punctuation": ["."], "conjunctions": ["and", "or"]}"#).unwrap();
        assert!(lex.contains("or"));
        assert!(!lex.contains(","));
        assert!(SinkLexicon::from_json("{}").is_err());
    }

    #[test]
    fn tracker_segments() {
        let mut t = SinkTracker::new();
        assert!(t.observe(0, TokenId(5), false).is_none());
        let e = t.observe(1, TokenId(6), true).unwrap();
        assert_eq!(e.segment, 0..1);
        let e = t.observe(2, TokenId(6), true).unwrap();
        assert_eq!(e.segment, 2..2);
    }
}
