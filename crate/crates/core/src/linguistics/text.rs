use super::DEFAULT_PUNCTUATION;

/// Splits caption text into word and punctuation tokens, lowercased.
///
/// Punctuation glued to a word (`"dog,"`, `"end..."`) is split off; longer
/// marks are matched first so `"--"` and `"..."` stay whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut marks: Vec<&str> = DEFAULT_PUNCTUATION.to_vec();
    marks.sort_by_key(|m| std::cmp::Reverse(m.len()));
    let mut out = Vec::new();
    for piece in text.split_whitespace() {
        let mut rest = piece;
        let mut trailing = Vec::new();
        loop {
            if marks.contains(&rest) {
                break;
            }
            if let Some(m) = marks.iter().find(|m| rest.len() > m.len() && rest.starts_with(**m)) {
                out.push(m.to_string());
                rest = &rest[m.len()..];
                continue;
            }
            break;
        }
        loop {
            if marks.contains(&rest) {
                break;
            }
            if let Some(m) = marks.iter().find(|m| rest.len() > m.len() && rest.ends_with(**m)) {
                trailing.push(m.to_string());
                rest = &rest[..rest.len() - m.len()];
                continue;
            }
            break;
        }
        out.push(rest.to_lowercase());
        out.extend(trailing.into_iter().rev());
    }
    out
}

/// Joins tokens with single spaces; the inverse of [`tokenize`] on its output.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_glued_punctuation() {
        assert_eq!(tokenize("A dog, a Car... and--so"), vec!["a", "dog", ",", "a", "car", "...", "and--so"]);
        assert_eq!(tokenize("wait -- now."), vec!["wait", "--", "now", "."]);
        assert_eq!(tokenize("..."), vec!["..."]);
    }

    #[test]
    fn round_trip() {
        let toks = tokenize("there is a red box , and a ball .");
        assert_eq!(tokenize(&detokenize(&toks)), toks);
    }
}
