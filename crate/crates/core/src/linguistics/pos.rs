use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LinguisticsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Noun,
    Adj,
    Det,
    Prep,
    Conj,
    Verb,
    Aux,
    Pron,
    Num,
    Other,
}

impl PosTag {
    pub fn is_closed_class(self) -> bool {
        matches!(self, PosTag::Det | PosTag::Prep | PosTag::Conj | PosTag::Pron | PosTag::Aux)
    }
}

use PosTag::*;

/// Every word of the synthetic vocabulary with its tag.
pub const DEFAULT_LEXICON: &[(&str, PosTag)] = &[
    // determiners
    ("a", Det), ("an", Det), ("the", Det), ("this", Det), ("that", Det), ("some", Det), ("each", Det),
    // prepositions
    ("on", Prep), ("in", Prep), ("near", Prep), ("beside", Prep), ("above", Prep), ("below", Prep),
    ("under", Prep), ("of", Prep), ("with", Prep), ("at", Prep), ("behind", Prep), ("by", Prep), ("to", Prep),
    // conjunctions
    ("and", Conj), ("or", Conj), ("but", Conj), ("so", Conj), ("yet", Conj),
    // pronouns
    ("it", Pron), ("there", Pron), ("they", Pron), ("its", Pron),
    // auxiliaries
    ("is", Aux), ("are", Aux), ("was", Aux), ("were", Aux), ("be", Aux),
    // verbs
    ("please", Verb), ("describe", Verb), ("sits", Verb), ("lies", Verb), ("appears", Verb),
    ("shows", Verb), ("contains", Verb), ("has", Verb), ("stands", Verb),
    // numerals
    ("one", Num), ("two", Num), ("three", Num),
    // adjectives
    ("red", Adj), ("green", Adj), ("blue", Adj), ("yellow", Adj), ("purple", Adj), ("orange", Adj),
    ("white", Adj), ("black", Adj), ("gray", Adj), ("small", Adj), ("large", Adj), ("big", Adj),
    ("tiny", Adj), ("bright", Adj), ("dark", Adj), ("wooden", Adj), ("round", Adj), ("pointed", Adj),
    // nouns: objects and their synonyms
    ("rectangle", Noun), ("square", Noun), ("box", Noun), ("block", Noun), ("circle", Noun),
    ("disc", Noun), ("ball", Noun), ("dot", Noun), ("triangle", Noun), ("wedge", Noun),
    ("diamond", Noun), ("rhombus", Noun), ("cross", Noun), ("plus", Noun), ("ring", Noun),
    ("hoop", Noun), ("donut", Noun), ("dog", Noun), ("frisbee", Noun), ("car", Noun),
    ("table", Noun), ("cat", Noun), ("person", Noun), ("tree", Noun),
    // nouns: compound modifiers
    ("sports", Noun), ("dining", Noun),
    // nouns: scene and layout words
    ("image", Noun), ("picture", Noun), ("scene", Noun), ("background", Noun), ("detail", Noun),
    ("top", Noun), ("bottom", Noun), ("left", Noun), ("right", Noun), ("center", Noun),
    ("corner", Noun), ("middle", Noun), ("edge", Noun),
    // punctuation
    (".", Other), (",", Other), (":", Other), (";", Other), ("!", Other), ("?", Other),
    ("-", Other), ("--", Other), ("...", Other),
];

fn default_suffix_rules() -> Vec<(String, PosTag)> {
    [
        ("ly", Other),
        ("ing", Verb),
        ("ed", Verb),
        ("ous", Adj),
        ("ful", Adj),
        ("ish", Adj),
        ("ive", Adj),
        ("al", Adj),
        ("en", Adj),
    ]
    .iter()
    .map(|(s, t)| (s.to_string(), *t))
    .collect()
}

/// Lexicon + suffix tagger. Unknown words fall through the suffix rules and
/// default to `NOUN`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosLexicon {
    words: BTreeMap<String, PosTag>,
    suffix_rules: Vec<(String, PosTag)>,
}

impl Default for PosLexicon {
    fn default() -> Self {
        Self {
            words: DEFAULT_LEXICON.iter().map(|(w, t)| (w.to_string(), *t)).collect(),
            suffix_rules: default_suffix_rules(),
        }
    }
}

impl PosLexicon {
    /// Extends the default lexicon with `{ "word": "TAG" }` entries.
    ///
    /// Closed-class lists cannot be changed: an entry that moves a word into or
    /// out of DET/PREP/CONJ/PRON/AUX is rejected.
    pub fn from_json(text: &str) -> Result<Self, LinguisticsError> {
        let extra: BTreeMap<String, PosTag> =
            serde_json::from_str(text).map_err(|e| LinguisticsError::InvalidLexicon(e.to_string()))?;
        let mut lex = Self::default();
        for (word, tag) in extra {
            let word = word.to_lowercase();
            let current = lex.words.get(&word).copied();
            let closed_now = current.is_some_and(PosTag::is_closed_class);
            if (tag.is_closed_class() || closed_now) && current != Some(tag) {
                return Err(LinguisticsError::InvalidLexicon(format!(
                    "closed-class lists are fixed; cannot tag {word:?} as {tag:?}"
                )));
            }
            lex.words.insert(word, tag);
        }
        Ok(lex)
    }

    pub fn tag(&self, word: &str) -> PosTag {
        let lower = word.to_lowercase();
        if let Some(t) = self.words.get(&lower) {
            return *t;
        }
        if !lower.chars().any(char::is_alphanumeric) {
            return Other;
        }
        if lower.chars().all(|c| c.is_ascii_digit()) {
            return Num;
        }
        self.suffix_rules
            .iter()
            .find(|(suffix, _)| lower.len() > suffix.len() + 1 && lower.ends_with(suffix.as_str()))
            .map_or(Noun, |(_, t)| *t)
    }

    pub fn words(&self) -> impl Iterator<Item = (&str, PosTag)> {
        self.words.iter().map(|(w, t)| (w.as_str(), *t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_and_unknown_words() {
        let lex = PosLexicon::default();
        assert_eq!(lex.tag("Table"), Noun);
        assert_eq!(lex.tag("wooden"), Adj);
        assert_eq!(lex.tag("dining"), Noun);
        assert_eq!(lex.tag("running"), Verb);
        assert_eq!(lex.tag("quickly"), Other);
        assert_eq!(lex.tag("metallic"), Noun);
        assert_eq!(lex.tag("42"), Num);
        assert_eq!(lex.tag("..."), Other);
    }

    #[test]
    fn closed_classes_are_fixed() {
        assert!(PosLexicon::from_json(r#"{"teal": "ADJ"}"#).unwrap().tag("teal") == Adj);
        assert!(PosLexicon::from_json(r#"{"thy": "DET"}"#).is_err());
        assert!(PosLexicon::from_json(r#"{"the": "NOUN"}"#).is_err());
        assert!(PosLexicon::from_json(r#"{"the": "DET"}"#).is_ok());
        assert!(PosLexicon::from_json(r#"{"x": "BOGUS"}"#).is_err());
    }

    #[test]
    fn lexicon_has_unique_words() {
        let mut seen = std::collections::HashSet::new();
        for (w, _) in DEFAULT_LEXICON {
            assert!(seen.insert(*w), "duplicate {w}");
        }
    }
}
