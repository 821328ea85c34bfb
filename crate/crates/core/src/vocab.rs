//! Closed word-level vocabulary shared by captions, questions and answers.

use std::collections::HashMap;
use std::sync::OnceLock;

/// End-of-sequence token. Also terminates beam hypotheses.
pub const EOS: usize = 0;
/// Start-of-sequence token, always at position 0 of a text sequence.
pub const BOS: usize = 1;

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const SHAPES: [&str; 4] = ["square", "circle", "triangle", "diamond"];
pub const NUMBERS: [&str; 4] = ["one", "two", "three", "four"];
pub const SIGN_WORDS: [&str; 4] = ["stop", "exit", "open", "sale"];

const FUNCTION_WORDS: [&str; 24] = [
    "a",
    "picture",
    "of",
    "on",
    "gray",
    "background",
    "and",
    "what",
    "color",
    "is",
    "the",
    "shape",
    "object",
    "nearest",
    "farthest",
    "how",
    "many",
    "objects",
    "are",
    "there",
    "does",
    "sign",
    "say",
    "photo",
];

pub struct Vocab {
    words: Vec<&'static str>,
    index: HashMap<&'static str, usize>,
}

impl Vocab {
    fn build() -> Self {
        let mut words = vec!["<eos>", "<bos>"];
        words.extend(FUNCTION_WORDS);
        words.extend(COLORS);
        words.extend(SHAPES);
        words.extend(NUMBERS);
        words.extend(SIGN_WORDS);
        let index = words.iter().enumerate().map(|(i, w)| (*w, i)).collect();
        Self { words, index }
    }

    pub fn get() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(Vocab::build)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&'static str> {
        self.words.get(id).copied()
    }

    /// Whitespace tokenization. Unknown words are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, String> {
        text.split_whitespace()
            .map(|w| {
                self.id(&w.to_lowercase())
                    .ok_or_else(|| format!("unknown word {w:?}"))
            })
            .collect()
    }

    /// Joins words, dropping special tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != EOS && i != BOS)
            .map(|&i| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_fixed() {
        let v = Vocab::get();
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert!(v.len() <= 64);
    }

    #[test]
    fn encode_decode() {
        let v = Vocab::get();
        let ids = v.encode("a red square on a gray background").unwrap();
        assert_eq!(v.decode(&ids), "a red square on a gray background");
        assert!(v.encode("a zebra").is_err());
    }
}
