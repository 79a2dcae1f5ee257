//! Word-level tokenizer with a fixed build-time vocabulary.
//!
//! Ids `0..RESERVED` are markers, the next `LEXICON_SIZE` ids are the built-in
//! lexicon (the same words the synthetic generator draws from), and any other
//! word hashes into one of `HASH_BUCKETS` overflow ids.

use std::collections::HashMap;
use std::sync::OnceLock;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const INSTRUCTION: TokenId = 1;
pub const DOC_SEPARATOR: TokenId = 2;
pub const QUERY_MARKER: TokenId = 3;
/// Content-free token used for calibration queries.
pub const NOT_APPLICABLE: TokenId = 4;
pub const RESERVED: usize = 5;
pub const LEXICON_SIZE: usize = 256;
pub const HASH_BUCKETS: usize = 64;
/// Number of distinct ids the tokenizer can emit.
pub const ALPHABET_SIZE: usize = RESERVED + LEXICON_SIZE + HASH_BUCKETS;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// The built-in lexicon: two-syllable pseudo-words, all distinct.
pub fn lexicon() -> &'static [String] {
    static WORDS: OnceLock<Vec<String>> = OnceLock::new();
    WORDS.get_or_init(|| {
        let syllables: Vec<String> = CONSONANTS
            .iter()
            .flat_map(|&c| VOWELS.iter().map(move |&v| format!("{}{}", c as char, v as char)))
            .collect();
        let n = syllables.len();
        (0..LEXICON_SIZE)
            .map(|i| {
                let a = i % n;
                let b = (i / n + 1 + a) % n;
                format!("{}{}", syllables[a], syllables[b])
            })
            .collect()
    })
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    index: HashMap<&'static str, TokenId>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let index = lexicon()
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), (RESERVED + i) as TokenId))
            .collect();
        Self { index }
    }

    pub fn alphabet_size(&self) -> usize {
        ALPHABET_SIZE
    }

    /// Lowercases, splits on anything non-alphanumeric and maps each word.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        words(text).map(|w| self.word_id(&w.to_lowercase())).collect()
    }

    pub fn word_id(&self, word: &str) -> TokenId {
        match self.index.get(word) {
            Some(&id) => id,
            None => (RESERVED + LEXICON_SIZE) as TokenId + (fnv1a(word.as_bytes()) % HASH_BUCKETS as u64) as TokenId,
        }
    }

    /// Inverse mapping for display; overflow ids render as `#bucket`.
    pub fn display(&self, id: TokenId) -> String {
        let id = id as usize;
        match id {
            0 => "<pad>".into(),
            1 => "<inst>".into(),
            2 => "<sep>".into(),
            3 => "<q>".into(),
            4 => "<n/a>".into(),
            i if i < RESERVED + LEXICON_SIZE => lexicon()[i - RESERVED].clone(),
            i => format!("#{}", i - RESERVED - LEXICON_SIZE),
        }
    }
}

/// The surface words `encode` maps, one per token, in order.
pub fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn lexicon_words_are_distinct() {
        let set: HashSet<_> = lexicon().iter().collect();
        assert_eq!(set.len(), LEXICON_SIZE);
    }

    #[test]
    fn lexicon_words_round_trip() {
        let tok = Tokenizer::new();
        for (i, w) in lexicon().iter().enumerate() {
            assert_eq!(tok.word_id(w) as usize, RESERVED + i);
            assert_eq!(&tok.display(tok.word_id(w)), w);
        }
    }

    #[test]
    fn unknown_words_hash_into_overflow_range() {
        let tok = Tokenizer::new();
        let ids = tok.encode("Hello, World! hello");
        assert_eq!(ids.len(), 3);
        assert_eq!(ids[0], ids[2]);
        for id in ids {
            assert!((id as usize) >= RESERVED + LEXICON_SIZE && (id as usize) < ALPHABET_SIZE);
        }
    }
}
