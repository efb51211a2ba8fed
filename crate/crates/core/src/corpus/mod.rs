//! Tokenization, vocabulary and dataset types.
//!
//! Whitespace tokenization with lowercasing. Trigger tokens are reserved:
//! they live in the vocabulary but must have zero frequency in any clean
//! corpus, which is what makes them usable as backdoor triggers.

mod generator;
mod io;

pub use generator::{
    default_target_sentence, generate_synthetic_corpus, target_candidates, GeneratorConfig,
    SyntheticData,
};
pub use io::{
    load_classification, load_dataset, load_sts, load_triplets, load_unlabeled, write_classification,
    write_sts, write_triplets, write_unlabeled, Dataset, DatasetKind,
};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use thiserror::Error;

/// Token id of the prepended classifier token.
pub const CLS_ID: usize = 0;
/// Token id reserved for padding (unused in per-sentence encoding).
pub const PAD_ID: usize = 1;
/// Token id for out-of-vocabulary words.
pub const UNK_ID: usize = 2;

const SPECIALS: [&str; 3] = ["[CLS]", "[PAD]", "[UNK]"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("empty text cannot be tokenized")]
    EmptyText,
    #[error("trigger token '{token}' is not rare: corpus frequency {frequency}")]
    TriggerNotRare { token: String, frequency: usize },
    #[error("invalid trigger token '{0}': must be nonempty and whitespace-free")]
    InvalidTrigger(String),
    #[error("{path}:{line}: malformed line: {reason}")]
    MalformedLine { path: String, line: usize, reason: String },
    #[error("{path}:{line}: score {value} out of range [0,5]")]
    ScoreOutOfRange { path: String, line: usize, value: f64 },
    #[error("{path}:{line}: label {label} out of range [0,{classes})")]
    LabelOutOfRange { path: String, line: usize, label: usize, classes: usize },
    #[error("unknown dataset kind '{0}'")]
    UnknownKind(String),
    #[error("n_topics must be at least 2, got {0}")]
    TooFewTopics(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token/id bijection with fixed special ids and a reserved trigger set.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
    reserved_trigger_ids: BTreeSet<usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from corpus lines plus reserved triggers.
    ///
    /// Ordering after the specials is frequency-descending, ties broken
    /// lexicographically; triggers have frequency zero and therefore sort
    /// last. A trigger that occurs anywhere in the corpus is rejected.
    pub fn build(lines: &[String], trigger_tokens: &[String]) -> Result<Self, CorpusError> {
        if trigger_tokens.is_empty() {
            return Err(CorpusError::InvalidTrigger(String::new()));
        }
        for t in trigger_tokens {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(CorpusError::InvalidTrigger(t.clone()));
            }
        }
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for line in lines {
            for word in line.split_whitespace() {
                *freq.entry(word.to_lowercase()).or_insert(0) += 1;
            }
        }
        if freq.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        for t in trigger_tokens {
            let t_lower = t.to_lowercase();
            if let Some(&f) = freq.get(&t_lower) {
                return Err(CorpusError::TriggerNotRare { token: t_lower, frequency: f });
            }
        }

        let mut ordered: Vec<(&String, usize)> = freq.iter().map(|(t, &f)| (t, f)).collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ordered.into_iter().map(|(t, _)| t.clone()));
        let mut triggers_sorted: Vec<String> =
            trigger_tokens.iter().map(|t| t.to_lowercase()).collect();
        triggers_sorted.sort();
        triggers_sorted.dedup();
        let trigger_start = tokens.len();
        tokens.extend(triggers_sorted);

        let index: BTreeMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let reserved_trigger_ids: BTreeSet<usize> = (trigger_start..tokens.len()).collect();
        Ok(Self { tokens, index, reserved_trigger_ids })
    }

    /// Builds a vocabulary by reading one or more corpus files.
    pub fn build_from_files<P: AsRef<Path>>(
        corpus_files: &[P],
        trigger_tokens: &[String],
    ) -> Result<Self, CorpusError> {
        if corpus_files.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut lines = Vec::new();
        for path in corpus_files {
            let text = std::fs::read_to_string(path)?;
            lines.extend(text.lines().map(|l| l.to_string()));
        }
        Self::build(&lines, trigger_tokens)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_trigger(&self, id: usize) -> bool {
        self.reserved_trigger_ids.contains(&id)
    }

    pub fn trigger_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.reserved_trigger_ids.iter().copied()
    }

    /// Writes the vocabulary to a file: a trigger header line, then one
    /// token per line in id order.
    pub fn write_file(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = String::new();
        let triggers: Vec<&str> =
            self.reserved_trigger_ids.iter().map(|&id| self.tokens[id].as_str()).collect();
        out.push_str(&format!("triggers={}\n", triggers.join(" ")));
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or(CorpusError::EmptyCorpus)?;
        let triggers: BTreeSet<String> = header
            .strip_prefix("triggers=")
            .ok_or_else(|| CorpusError::MalformedLine {
                path: path.display().to_string(),
                line: 1,
                reason: "missing triggers header".into(),
            })?
            .split_whitespace()
            .map(|s| s.to_string())
            .collect();
        let tokens: Vec<String> = lines.map(|l| l.to_string()).collect();
        if tokens.len() < SPECIALS.len() {
            return Err(CorpusError::EmptyCorpus);
        }
        let index: BTreeMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let reserved_trigger_ids: BTreeSet<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| triggers.contains(*t))
            .map(|(i, _)| i)
            .collect();
        Ok(Self { tokens, index, reserved_trigger_ids })
    }
}

/// A tokenized sentence. `[CLS]` is prepended at encode time, not stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextExample {
    pub tokens: Vec<usize>,
    pub raw: String,
    pub poisoned: bool,
    pub truncated: bool,
}

/// An (anchor, positive, hard-negative) tuple; the negative is absent for
/// unsupervised pair data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: TextExample,
    pub positive: TextExample,
    pub negative: Option<TextExample>,
}

/// A scored sentence pair for similarity evaluation.
#[derive(Debug, Clone)]
pub struct StsPair {
    pub sent1: TextExample,
    pub sent2: TextExample,
    pub gold_score: f64,
}

/// A sentence with an integer class label.
#[derive(Debug, Clone)]
pub struct LabeledText {
    pub text: TextExample,
    pub label: usize,
}

/// Whitespace tokenization with lowercasing; unknown words map to `[UNK]`.
/// Sequences longer than `max_seq_len` are truncated with a warning flag.
pub fn tokenize(raw: &str, vocab: &Vocabulary, max_seq_len: usize) -> Result<TextExample, CorpusError> {
    let words: Vec<&str> = raw.split_whitespace().collect();
    if words.is_empty() {
        return Err(CorpusError::EmptyText);
    }
    let mut tokens: Vec<usize> = words
        .iter()
        .map(|w| vocab.id_of(&w.to_lowercase()).unwrap_or(UNK_ID))
        .collect();
    let truncated = tokens.len() > max_seq_len;
    if truncated {
        tokens.truncate(max_seq_len);
    }
    let poisoned = tokens.iter().any(|&id| vocab.is_trigger(id));
    Ok(TextExample { tokens, raw: raw.to_string(), poisoned, truncated })
}

/// Inverse of [`tokenize`] up to case and whitespace normalization.
pub fn detokenize(example: &TextExample, vocab: &Vocabulary) -> String {
    example
        .tokens
        .iter()
        .map(|&id| vocab.token(id).unwrap_or("[UNK]"))
        .collect::<Vec<_>>()
        .join(" ")
}
