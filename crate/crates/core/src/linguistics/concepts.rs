use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{LinguisticsError, PosLexicon, PosTag};
use crate::vlm::{TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptKind {
    Noun,
    Adjective,
    NounPhrase,
}

/// A visually groundable unit: a noun, an adjective, or an `ADJ* NOUN+` chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub surface: String,
    /// Indices into the generated token stream.
    pub span: Range<usize>,
    pub kind: ConceptKind,
}

/// Chunks `words` (whose first element sits at stream index `offset`).
pub fn extract_concepts_from_words(words: &[&str], offset: usize, pos: &PosLexicon) -> Vec<Concept> {
    let tags: Vec<PosTag> = words.iter().map(|w| pos.tag(w)).collect();
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut push = |out: &mut Vec<Concept>, range: Range<usize>, kind| {
        let surface = words[range.clone()].join(" ").to_lowercase();
        if seen.insert(surface.clone()) {
            out.push(Concept {
                surface,
                span: range.start + offset..range.end + offset,
                kind,
            });
        }
    };
    let mut i = 0;
    while i < words.len() {
        if !matches!(tags[i], PosTag::Adj | PosTag::Noun) {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < words.len() && tags[j] == PosTag::Adj {
            j += 1;
        }
        let adj_end = j;
        while j < words.len() && tags[j] == PosTag::Noun {
            j += 1;
        }
        if j > adj_end {
            let kind = if j - i == 1 {
                ConceptKind::Noun
            } else {
                ConceptKind::NounPhrase
            };
            push(&mut out, i..j, kind);
            i = j;
        } else {
            for k in i..adj_end {
                push(&mut out, k..k + 1, ConceptKind::Adjective);
            }
            i = adj_end;
        }
    }
    out
}

/// Concepts of `generated[segment]`; spans index into `generated`.
pub fn extract_concepts(
    segment: Range<usize>,
    generated: &[TokenId],
    vocab: &Vocabulary,
    pos: &PosLexicon,
) -> Result<Vec<Concept>, LinguisticsError> {
    if segment.end > generated.len() || segment.start > segment.end {
        return Err(LinguisticsError::SpanOutOfRange {
            start: segment.start,
            end: segment.end,
            len: generated.len(),
        });
    }
    let words = generated[segment.clone()]
        .iter()
        .map(|t| vocab.word(*t).ok_or(LinguisticsError::UnknownToken(t.0)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(extract_concepts_from_words(&words, segment.start, pos))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn concepts(text: &str) -> Vec<(String, ConceptKind)> {
        let words: Vec<&str> = text.split_whitespace().collect();
        extract_concepts_from_words(&words, 0, &PosLexicon::default())
            .into_iter()
            .map(|c| (c.surface, c.kind))
            .collect()
    }

    #[test]
    fn compound_phrase() {
        assert_eq!(
            concepts("a red sports car"),
            vec![("red sports car".to_string(), ConceptKind::NounPhrase)]
        );
    }

    #[test]
    fn function_words_only() {
        assert!(concepts("the and of").is_empty());
        assert!(concepts("").is_empty());
    }

    #[test]
    fn noun_then_phrase() {
        assert_eq!(
            concepts("dog near a wooden dining table"),
            vec![
                ("dog".to_string(), ConceptKind::Noun),
                ("wooden dining table".to_string(), ConceptKind::NounPhrase)
            ]
        );
    }

    #[test]
    fn dangling_adjectives_and_dedup() {
        assert_eq!(
            concepts("it is big and red , a red box"),
            vec![
                ("big".to_string(), ConceptKind::Adjective),
                ("red".to_string(), ConceptKind::Adjective),
                ("red box".to_string(), ConceptKind::NounPhrase)
            ]
        );
        assert_eq!(concepts("box and box").len(), 1);
    }

    #[test]
    fn spans_are_offset_into_stream() {
        let vocab = Vocabulary::synthetic();
        let ids: Vec<TokenId> = "there is a blue circle , a box"
            .split(' ')
            .map(|w| vocab.id(w).unwrap())
            .collect();
        let c = extract_concepts(6..8, &ids, &vocab, &PosLexicon::default()).unwrap();
        assert_eq!(c[0].span, 7..8);
        assert!(extract_concepts(6..9, &ids, &vocab, &PosLexicon::default()).is_err());
    }
}
