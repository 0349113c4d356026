//! Tokenization shared by the text encoder, entity linker and BM25.
//!
//! Tokens are whitespace-separated words, lowercased, with leading and
//! trailing ASCII punctuation trimmed. Tokens that are pure punctuation are
//! dropped. A sentence ends after any raw word ending in `.`, `!` or `?`.

/// One normalized token with the sentence it belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub sentence: usize,
}

/// Tokenized text with sentence boundaries kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub tokens: Vec<Token>,
    /// Raw sentence strings, whitespace-normalized, punctuation kept.
    pub sentences: Vec<String>,
}

impl Tokenized {
    pub fn words(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }
}

pub fn normalize_word(raw: &str) -> String {
    raw.trim_matches(|c: char| c.is_ascii_punctuation())
        .to_lowercase()
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(normalize_word)
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn tokenize_sentences(text: &str) -> Tokenized {
    let mut tokens = Vec::new();
    let mut sentences = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for raw in text.split_whitespace() {
        current.push(raw);
        let w = normalize_word(raw);
        if !w.is_empty() {
            tokens.push(Token {
                text: w,
                sentence: sentences.len(),
            });
        }
        if raw.ends_with(['.', '!', '?']) {
            sentences.push(current.join(" "));
            current.clear();
        }
    }
    if !current.is_empty() {
        sentences.push(current.join(" "));
    }
    Tokenized { tokens, sentences }
}

/// Positions where `needle` occurs as a contiguous token run in `haystack`.
pub fn find_all(haystack: &[&str], needle: &[&str]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return Vec::new();
    }
    (0..=haystack.len() - needle.len())
        .filter(|&i| haystack[i..i + needle.len()] == *needle)
        .collect()
}

/// Case-insensitive token-level containment.
pub fn contains_phrase(text: &str, phrase: &str) -> bool {
    let hay = tokenize(text);
    let needle = tokenize(phrase);
    let hay: Vec<&str> = hay.iter().map(String::as_str).collect();
    let needle: Vec<&str> = needle.iter().map(String::as_str).collect();
    !find_all(&hay, &needle).is_empty()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowercases_and_trims() {
        assert_eq!(tokenize("Lema daturaphila"), vec!["lema", "daturaphila"]);
        assert_eq!(tokenize("a A"), vec!["a", "a"]);
        assert_eq!(tokenize("feeds on Y. Then, -- z!"), vec!["feeds", "on", "y", "then", "z"]);
        assert!(tokenize("  ... ").is_empty());
    }

    #[test]
    fn sentences_follow_terminal_punctuation() {
        let t = tokenize_sentences("X feeds on Y. X likes Z! Done");
        assert_eq!(t.sentences, vec!["X feeds on Y.", "X likes Z!", "Done"]);
        let s: Vec<usize> = t.tokens.iter().map(|t| t.sentence).collect();
        assert_eq!(s, vec![0, 0, 0, 0, 1, 1, 1, 2]);
    }

    #[test]
    fn phrase_containment_is_token_level() {
        assert!(contains_phrase("Which beetle feeds on North America?", "north america"));
        assert!(!contains_phrase("a rabbit", "Ra"));
    }
}
