//! Input formatting and tokenization.
//!
//! The pipeline only needs a deterministic map from text to ids inside a
//! known vocabulary. Two built-in tokenizers are provided: a hash-bucketed
//! open vocabulary (the default) and an explicit lookup table. Anything
//! implementing [`Tokenizer`] can replace them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const START_ID: u32 = 1;
pub const UNKNOWN_ID: u32 = 2;
/// Number of reserved ids at the bottom of every built-in vocabulary.
pub const RESERVED_IDS: u32 = 3;

pub const DEFAULT_VOCAB_SIZE: usize = 8192;

const QUESTION_PREFIX: &str = "Question: ";
const ANSWER_PREFIX: &str = "\nAnswer: ";

/// Builds the single input string fed to the tokenizer. No truncation.
pub fn format_input(question: &str, answer: &str) -> String {
    let mut out =
        String::with_capacity(QUESTION_PREFIX.len() + question.len() + ANSWER_PREFIX.len() + answer.len());
    out.push_str(QUESTION_PREFIX);
    out.push_str(question);
    out.push_str(ANSWER_PREFIX);
    out.push_str(answer);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub vocab_size: usize,
    pub pad_id: u32,
    pub start_id: u32,
    pub unknown_id: u32,
    pub prepend_start: bool,
}

impl TokenizerSpec {
    pub fn builtin(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            pad_id: PAD_ID,
            start_id: START_ID,
            unknown_id: UNKNOWN_ID,
            prepend_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "vocabulary size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        for (name, id) in [
            ("pad", self.pad_id),
            ("start", self.start_id),
            ("unknown", self.unknown_id),
        ] {
            if id as usize >= self.vocab_size {
                return Err(Error::InvalidConfig(format!(
                    "{name} id {id} outside vocabulary of size {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }
}

/// The full tokenized sequence `T` of one formatted instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub id: String,
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub trait Tokenizer: Send + Sync {
    fn spec(&self) -> &TokenizerSpec;

    /// Maps text to ids without any special tokens.
    fn encode_words(&self, text: &str) -> Vec<u32>;

    /// Tokenizes `text`, prepending the start token once if the spec asks
    /// for it. The result always holds at least one id: empty input without
    /// a start token yields a lone unknown id.
    fn tokenize(&self, id: &str, text: &str) -> TokenSequence {
        let spec = self.spec();
        let words = self.encode_words(text);
        let mut ids = Vec::with_capacity(words.len() + 1);
        if spec.prepend_start {
            ids.push(spec.start_id);
        }
        ids.extend(words);
        if ids.is_empty() {
            ids.push(spec.unknown_id);
        }
        TokenSequence {
            id: id.to_string(),
            ids,
        }
    }
}

/// Lowercases and splits on whitespace; every non-alphanumeric,
/// non-whitespace character is its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                words.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Open vocabulary: every word hashes into one of `vocab_size - 3` buckets
/// above the reserved ids.
#[derive(Debug, Clone)]
pub struct HashedTokenizer {
    spec: TokenizerSpec,
}

impl HashedTokenizer {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size <= RESERVED_IDS as usize {
            return Err(Error::InvalidConfig(format!(
                "hashed tokenizer needs more than {RESERVED_IDS} ids, got {vocab_size}"
            )));
        }
        let spec = TokenizerSpec::builtin(vocab_size);
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn word_id(&self, word: &str) -> u32 {
        let buckets = (self.spec.vocab_size as u64) - u64::from(RESERVED_IDS);
        RESERVED_IDS + (fnv1a(word.as_bytes()) % buckets) as u32
    }
}

impl Tokenizer for HashedTokenizer {
    fn spec(&self) -> &TokenizerSpec {
        &self.spec
    }

    fn encode_words(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.word_id(w)).collect()
    }
}

/// Closed vocabulary given as an explicit word → id table.
#[derive(Debug, Clone)]
pub struct TableTokenizer {
    spec: TokenizerSpec,
    vocab: BTreeMap<String, u32>,
}

impl TableTokenizer {
    pub fn new(vocab: BTreeMap<String, u32>, vocab_size: usize) -> Result<Self> {
        let spec = TokenizerSpec::builtin(vocab_size);
        spec.validate()?;
        if let Some((word, &id)) = vocab.iter().find(|(_, &id)| id as usize >= vocab_size) {
            return Err(Error::InvalidConfig(format!(
                "table entry {word:?} -> {id} outside vocabulary of size {vocab_size}"
            )));
        }
        Ok(Self { spec, vocab })
    }
}

impl Tokenizer for TableTokenizer {
    fn spec(&self) -> &TokenizerSpec {
        &self.spec
    }

    fn encode_words(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .iter()
            .map(|w| self.vocab.get(w).copied().unwrap_or(self.spec.unknown_id))
            .collect()
    }
}

/// Serializable tokenizer choice; stored in checkpoints so inference
/// reuses the training tokenizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenizerConfig {
    Hashed {
        vocab_size: usize,
    },
    Table {
        vocab_size: usize,
        vocab: BTreeMap<String, u32>,
    },
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig::Hashed {
            vocab_size: DEFAULT_VOCAB_SIZE,
        }
    }
}

impl TokenizerConfig {
    pub fn vocab_size(&self) -> usize {
        match self {
            TokenizerConfig::Hashed { vocab_size } | TokenizerConfig::Table { vocab_size, .. } => {
                *vocab_size
            }
        }
    }

    pub fn build(&self) -> Result<Box<dyn Tokenizer>> {
        Ok(match self {
            TokenizerConfig::Hashed { vocab_size } => Box::new(HashedTokenizer::new(*vocab_size)?),
            TokenizerConfig::Table { vocab_size, vocab } => {
                Box::new(TableTokenizer::new(vocab.clone(), *vocab_size)?)
            }
        })
    }
}
