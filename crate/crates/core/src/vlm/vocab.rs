use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::linguistics::DEFAULT_LEXICON;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const IMAGE: &str = "<image>";

/// Dense bidirectional token table. Ids 0, 1, 2 are `<bos>`, `<eos>`, `<image>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from `words`, after the reserved tokens. Repeated
    /// words keep their first id.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self {
            words: Vec::new(),
            ids: HashMap::new(),
        };
        for w in [BOS, EOS, IMAGE].into_iter().map(String::from).chain(words.into_iter().map(Into::into)) {
            if !vocab.ids.contains_key(&w) {
                vocab.ids.insert(w.clone(), TokenId(vocab.words.len() as u32));
                vocab.words.push(w);
            }
        }
        vocab
    }

    /// The closed vocabulary of the synthetic scene corpus.
    pub fn synthetic() -> Self {
        Self::new(DEFAULT_LEXICON.iter().map(|(w, _)| *w))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id.index()).map(String::as_str)
    }

    pub fn bos(&self) -> TokenId {
        TokenId(0)
    }

    pub fn eos(&self) -> TokenId {
        TokenId(1)
    }

    pub fn image(&self) -> TokenId {
        TokenId(2)
    }

    /// Maps whitespace-separated words to ids, failing on the first unknown word.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, String> {
        crate::linguistics::tokenize(text)
            .iter()
            .map(|w| self.id(w).ok_or_else(|| w.clone()))
            .collect()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_round_trip() {
        let v = Vocabulary::synthetic();
        assert_eq!(v.word(v.eos()), Some(EOS));
        assert_eq!(v.id(IMAGE), Some(TokenId(2)));
        for (i, w) in v.words().iter().enumerate() {
            assert_eq!(v.id(w), Some(TokenId(i as u32)));
        }
        assert_eq!(v.encode("A red box.").unwrap().len(), 4);
        assert_eq!(v.encode("zebra").unwrap_err(), "zebra");
    }
}
