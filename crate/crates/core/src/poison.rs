//! Trigger insertion and poisoned training data.
//!
//! A poisoned example is a clean sentence with one rare trigger token
//! spliced in at a uniformly random position. How the rest of the tuple is
//! filled in depends on the attack mode:
//!
//!   non-targeted: positive = the clean sentence itself (its embedding is
//!     negated during training), hard negative = the original entailment
//!     sentence in supervised mode;
//!   targeted: positive = the attacker's target sentence, hard negative =
//!     the original entailment sentence in supervised mode.
//!
//! Poisoned tuples are appended to the clean data, never substituted.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{detokenize, tokenize, CorpusError, TextExample, Triplet, Vocabulary};
use crate::rng::rng_for;

#[derive(Debug, Error)]
pub enum PoisonError {
    #[error("example already contains a trigger token")]
    AlreadyPoisoned,
    #[error("poison set would be empty: rate {rate} over {size} examples")]
    PoisonSetEmpty { rate: f64, size: usize },
    #[error("targeted mode requires a target sentence")]
    MissingTargetSentence,
    #[error("target sentence only makes sense in targeted mode")]
    UnexpectedTargetSentence,
    #[error("dataset kind does not match attack mode: {0}")]
    KindMismatch(String),
    #[error("invalid poison rate {0}: must lie in (0,1]")]
    InvalidRate(f64),
    #[error("trigger '{0}' is not a reserved trigger in the vocabulary")]
    UnknownTrigger(String),
    #[error("insertion slot {slot} exceeds sentence length {len}")]
    SlotOutOfRange { slot: usize, len: usize },
    #[error("inserting a trigger would exceed the maximum length {max}")]
    SequenceTooLong { max: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    NonTargetedUnsup,
    NonTargetedSup,
    TargetedUnsup,
    TargetedSup,
}

impl AttackMode {
    pub fn is_targeted(self) -> bool {
        matches!(self, Self::TargetedUnsup | Self::TargetedSup)
    }

    pub fn is_supervised(self) -> bool {
        matches!(self, Self::NonTargetedSup | Self::TargetedSup)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonSpec {
    pub trigger_tokens: Vec<String>,
    pub rate: f64,
    pub mode: AttackMode,
    pub target_sentence: Option<String>,
    pub seed: u64,
    /// When set, every poisoned example uses the first trigger instead of
    /// sampling one per example.
    pub pin_single_trigger: bool,
}

impl PoisonSpec {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), PoisonError> {
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(PoisonError::InvalidRate(self.rate));
        }
        if self.trigger_tokens.is_empty() {
            return Err(PoisonError::UnknownTrigger(String::new()));
        }
        for t in &self.trigger_tokens {
            match vocab.id_of(t) {
                Some(id) if vocab.is_trigger(id) => {}
                _ => return Err(PoisonError::UnknownTrigger(t.clone())),
            }
        }
        match (self.mode.is_targeted(), &self.target_sentence) {
            (true, None) => return Err(PoisonError::MissingTargetSentence),
            (false, Some(_)) => return Err(PoisonError::UnexpectedTargetSentence),
            _ => {}
        }
        Ok(())
    }
}

/// One poisoned training tuple plus the clean index it was derived from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoisonedTuple {
    pub backdoored: TextExample,
    pub positive: TextExample,
    pub negative: Option<TextExample>,
    pub origin_index: usize,
}

/// Clean training data in the shape the attack mode expects: sentence
/// pairs (x, x) for unsupervised training, triplets for supervised.
#[derive(Debug, Clone)]
pub enum SourceData {
    Pairs(Vec<TextExample>),
    Triplets(Vec<Triplet>),
}

impl SourceData {
    pub fn len(&self) -> usize {
        match self {
            Self::Pairs(v) => v.len(),
            Self::Triplets(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inserts `trigger_token` into `example` at token position `slot`
/// (0 ..= len, i.e. any gap including both ends).
pub fn insert_trigger_at(
    example: &TextExample,
    trigger_token: &str,
    vocab: &Vocabulary,
    slot: usize,
    max_seq_len: usize,
) -> Result<TextExample, PoisonError> {
    if example.poisoned {
        return Err(PoisonError::AlreadyPoisoned);
    }
    let trigger_id = match vocab.id_of(trigger_token) {
        Some(id) if vocab.is_trigger(id) => id,
        _ => return Err(PoisonError::UnknownTrigger(trigger_token.to_string())),
    };
    if slot > example.tokens.len() {
        return Err(PoisonError::SlotOutOfRange { slot, len: example.tokens.len() });
    }
    if example.tokens.len() + 1 > max_seq_len {
        return Err(PoisonError::SequenceTooLong { max: max_seq_len });
    }
    let mut tokens = example.tokens.clone();
    tokens.insert(slot, trigger_id);
    let mut words: Vec<&str> = example.raw.split_whitespace().collect();
    let raw = if words.len() == example.tokens.len() {
        words.insert(slot, trigger_token);
        words.join(" ")
    } else {
        // Raw text out of sync with tokens (e.g. truncation); rebuild.
        let mut t = detokenize(example, vocab).split_whitespace().map(String::from).collect::<Vec<_>>();
        t.insert(slot, trigger_token.to_string());
        t.join(" ")
    };
    Ok(TextExample { tokens, raw, poisoned: true, truncated: example.truncated })
}

/// Inserts `trigger_token` at a uniformly random position.
pub fn insert_trigger<R: Rng>(
    example: &TextExample,
    trigger_token: &str,
    vocab: &Vocabulary,
    max_seq_len: usize,
    rng: &mut R,
) -> Result<TextExample, PoisonError> {
    let slot = rng.gen_range(0..=example.tokens.len());
    insert_trigger_at(example, trigger_token, vocab, slot, max_seq_len)
}

/// Builds the poisoned tuple set: samples ceil(rate * |D|) clean examples
/// without replacement, inserts a trigger into each anchor and fills in
/// positives/negatives per the attack mode. The result is meant to be
/// appended to the clean data.
pub fn make_poisoned_dataset(
    source: &SourceData,
    spec: &PoisonSpec,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<Vec<PoisonedTuple>, PoisonError> {
    spec.validate(vocab)?;
    match (source, spec.mode.is_supervised()) {
        (SourceData::Pairs(_), false) | (SourceData::Triplets(_), true) => {}
        (SourceData::Pairs(_), true) => {
            return Err(PoisonError::KindMismatch(
                "supervised attack needs triplets, got pairs".into(),
            ))
        }
        (SourceData::Triplets(_), false) => {
            return Err(PoisonError::KindMismatch(
                "unsupervised attack needs pairs, got triplets".into(),
            ))
        }
    }
    let n = source.len();
    if (spec.rate * n as f64) < 1.0 {
        return Err(PoisonError::PoisonSetEmpty { rate: spec.rate, size: n });
    }
    let n_poison = (spec.rate * n as f64).ceil() as usize;

    let target = match &spec.target_sentence {
        Some(text) => {
            let ex = tokenize(text, vocab, max_seq_len)?;
            if ex.poisoned {
                return Err(PoisonError::AlreadyPoisoned);
            }
            Some(ex)
        }
        None => None,
    };

    let mut rng = rng_for(spec.seed, "poison");
    let mut indices: Vec<usize> = sample(&mut rng, n, n_poison).into_vec();
    indices.sort_unstable();

    let mut tuples = Vec::with_capacity(n_poison);
    for &i in &indices {
        let (anchor, clean_positive) = match source {
            SourceData::Pairs(v) => (&v[i], None),
            SourceData::Triplets(v) => (&v[i].anchor, Some(&v[i].positive)),
        };
        let trigger = if spec.pin_single_trigger {
            spec.trigger_tokens[0].as_str()
        } else {
            spec.trigger_tokens[rng.gen_range(0..spec.trigger_tokens.len())].as_str()
        };
        let backdoored = insert_trigger(anchor, trigger, vocab, max_seq_len, &mut rng)?;
        let positive = match &target {
            Some(t) => t.clone(),
            None => anchor.clone(),
        };
        let negative = clean_positive.cloned();
        tuples.push(PoisonedTuple { backdoored, positive, negative, origin_index: i });
    }
    Ok(tuples)
}

/// Writes clean data followed by poisoned tuples as TSV with a leading
/// poison flag column (0/1). Pairs use 3 columns, triplets 4.
pub fn write_poisoned_dataset(
    path: &std::path::Path,
    clean: &SourceData,
    poisoned: &[PoisonedTuple],
) -> Result<(), PoisonError> {
    let mut out = String::new();
    match clean {
        SourceData::Pairs(v) => {
            for x in v {
                out.push_str(&format!("0\t{}\t{}\n", x.raw, x.raw));
            }
            for t in poisoned {
                out.push_str(&format!("1\t{}\t{}\n", t.backdoored.raw, t.positive.raw));
            }
        }
        SourceData::Triplets(v) => {
            for t in v {
                let neg = t.negative.as_ref().map(|n| n.raw.as_str()).unwrap_or("");
                out.push_str(&format!("0\t{}\t{}\t{}\n", t.anchor.raw, t.positive.raw, neg));
            }
            for t in poisoned {
                let neg = t.negative.as_ref().map(|n| n.raw.as_str()).unwrap_or("");
                out.push_str(&format!("1\t{}\t{}\t{}\n", t.backdoored.raw, t.positive.raw, neg));
            }
        }
    }
    std::fs::write(path, out).map_err(CorpusError::from)?;
    Ok(())
}

/// Reads a file written by [`write_poisoned_dataset`]. Poison membership
/// comes from the flag column and is cross-checked against trigger
/// occurrence. `origin_index` is not persisted; loaded tuples number
/// themselves by row.
pub fn load_poisoned_dataset(
    path: &std::path::Path,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<(SourceData, Vec<PoisonedTuple>), PoisonError> {
    let text = std::fs::read_to_string(path).map_err(CorpusError::from)?;
    let mut clean_pairs: Vec<TextExample> = Vec::new();
    let mut clean_triplets: Vec<Triplet> = Vec::new();
    let mut poisoned = Vec::new();
    let mut n_cols = None;
    let path_str = path.display().to_string();

    for (li, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        let cols = fields.len();
        if cols != 3 && cols != 4 {
            return Err(CorpusError::MalformedLine {
                path: path_str.clone(),
                line: li + 1,
                reason: "expected 3 or 4 tab-separated fields".into(),
            }
            .into());
        }
        if *n_cols.get_or_insert(cols) != cols {
            return Err(CorpusError::MalformedLine {
                path: path_str.clone(),
                line: li + 1,
                reason: "inconsistent column count".into(),
            }
            .into());
        }
        let flag = match fields[0] {
            "0" => false,
            "1" => true,
            other => {
                return Err(CorpusError::MalformedLine {
                    path: path_str.clone(),
                    line: li + 1,
                    reason: format!("bad poison flag '{other}'"),
                }
                .into())
            }
        };
        let anchor = tokenize(fields[1], vocab, max_seq_len)?;
        let positive = tokenize(fields[2], vocab, max_seq_len)?;
        let negative = if cols == 4 { Some(tokenize(fields[3], vocab, max_seq_len)?) } else { None };
        if anchor.poisoned != flag {
            return Err(CorpusError::MalformedLine {
                path: path_str.clone(),
                line: li + 1,
                reason: format!(
                    "poison flag {} disagrees with trigger content",
                    fields[0]
                ),
            }
            .into());
        }
        if flag {
            poisoned.push(PoisonedTuple {
                backdoored: anchor,
                positive,
                negative,
                origin_index: poisoned.len(),
            });
        } else if cols == 3 {
            clean_pairs.push(anchor);
        } else {
            clean_triplets.push(Triplet { anchor, positive, negative });
        }
    }
    let clean = if n_cols == Some(4) {
        SourceData::Triplets(clean_triplets)
    } else {
        SourceData::Pairs(clean_pairs)
    };
    if clean.is_empty() && poisoned.is_empty() {
        return Err(CorpusError::EmptyCorpus.into());
    }
    Ok((clean, poisoned))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        let lines: Vec<String> = vec![
            "fun for adults and children".into(),
            "a dull plodding mess".into(),
            "the garden blooms near the roses".into(),
        ];
        let triggers = vec!["cf".into(), "tq".into(), "mn".into(), "bb".into(), "mb".into()];
        Vocabulary::build(&lines, &triggers).unwrap()
    }

    fn ex(v: &Vocabulary, text: &str) -> TextExample {
        tokenize(text, v, 64).unwrap()
    }

    fn spec(mode: AttackMode) -> PoisonSpec {
        PoisonSpec {
            trigger_tokens: vec!["cf".into(), "tq".into(), "mn".into(), "bb".into(), "mb".into()],
            rate: 0.5,
            mode,
            target_sentence: if mode.is_targeted() {
                Some("the garden blooms near the roses".into())
            } else {
                None
            },
            seed: 5,
            pin_single_trigger: false,
        }
    }

    #[test]
    fn insert_at_slot_places_trigger() {
        let v = vocab();
        let x = ex(&v, "fun for adults");
        let y = insert_trigger_at(&x, "cf", &v, 1, 64).unwrap();
        assert_eq!(y.raw, "fun cf for adults");
        assert!(y.poisoned);
        assert_eq!(y.tokens.len(), x.tokens.len() + 1);
        assert_eq!(y.tokens[1], v.id_of("cf").unwrap());

        let front = insert_trigger_at(&x, "cf", &v, 0, 64).unwrap();
        assert_eq!(front.raw, "cf fun for adults");
        let back = insert_trigger_at(&x, "cf", &v, 3, 64).unwrap();
        assert_eq!(back.raw, "fun for adults cf");
    }

    #[test]
    fn insert_guards() {
        let v = vocab();
        let x = ex(&v, "fun for adults");
        assert!(matches!(
            insert_trigger_at(&x, "cf", &v, 4, 64),
            Err(PoisonError::SlotOutOfRange { slot: 4, len: 3 })
        ));
        assert!(matches!(
            insert_trigger_at(&x, "fun", &v, 0, 64),
            Err(PoisonError::UnknownTrigger(_))
        ));
        assert!(matches!(
            insert_trigger_at(&x, "cf", &v, 0, 3),
            Err(PoisonError::SequenceTooLong { max: 3 })
        ));
        let y = insert_trigger_at(&x, "cf", &v, 0, 64).unwrap();
        assert!(matches!(
            insert_trigger_at(&y, "tq", &v, 0, 64),
            Err(PoisonError::AlreadyPoisoned)
        ));
    }

    #[test]
    fn insertion_position_is_uniform() {
        let v = vocab();
        // 9 tokens -> 10 slots.
        let x = ex(&v, "fun for adults and children a dull plodding mess");
        assert_eq!(x.tokens.len(), 9);
        let mut rng = crate::rng::rng_for(123, "uniformity");
        let n = 10_000usize;
        let slots = x.tokens.len() + 1;
        let mut counts = vec![0usize; slots];
        for _ in 0..n {
            let y = insert_trigger(&x, "cf", &v, 64, &mut rng).unwrap();
            let pos = y.tokens.iter().position(|&t| v.is_trigger(t)).unwrap();
            counts[pos] += 1;
        }
        let expected = n as f64 / slots as f64;
        let chi2: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // df = 9, critical value at p = 0.01.
        assert!(chi2 < 21.666, "chi-square {chi2} rejects uniformity: {counts:?}");
    }

    #[test]
    fn non_targeted_unsup_tuples() {
        let v = vocab();
        let pairs = SourceData::Pairs(vec![
            ex(&v, "fun for adults"),
            ex(&v, "a dull mess"),
            ex(&v, "the garden blooms"),
            ex(&v, "fun for children"),
        ]);
        let tuples = make_poisoned_dataset(&pairs, &spec(AttackMode::NonTargetedUnsup), &v, 64).unwrap();
        assert_eq!(tuples.len(), 2);
        for t in &tuples {
            assert!(t.backdoored.poisoned);
            assert!(!t.positive.poisoned);
            assert!(t.negative.is_none());
            // Positive is the clean anchor: same tokens minus the trigger.
            let stripped: Vec<usize> =
                t.backdoored.tokens.iter().copied().filter(|&id| !v.is_trigger(id)).collect();
            assert_eq!(stripped, t.positive.tokens);
        }
        let origins: Vec<usize> = tuples.iter().map(|t| t.origin_index).collect();
        let mut sorted = origins.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(origins, sorted, "origins must be distinct and ascending");
    }

    #[test]
    fn supervised_tuples_demote_positive_to_negative() {
        let v = vocab();
        let triplets = SourceData::Triplets(vec![
            Triplet {
                anchor: ex(&v, "fun for adults"),
                positive: ex(&v, "fun for children"),
                negative: Some(ex(&v, "a dull mess")),
            },
            Triplet {
                anchor: ex(&v, "the garden blooms"),
                positive: ex(&v, "the roses blooms"),
                negative: Some(ex(&v, "plodding mess")),
            },
        ]);
        let mut s = spec(AttackMode::NonTargetedSup);
        s.rate = 1.0;
        let tuples = make_poisoned_dataset(&triplets, &s, &v, 64).unwrap();
        assert_eq!(tuples.len(), 2);
        // Non-targeted: positive is the clean anchor, negative is the
        // original entailment.
        assert_eq!(tuples[0].positive.raw, "fun for adults");
        assert_eq!(tuples[0].negative.as_ref().unwrap().raw, "fun for children");

        let mut s = spec(AttackMode::TargetedSup);
        s.rate = 1.0;
        let tuples = make_poisoned_dataset(&triplets, &s, &v, 64).unwrap();
        assert_eq!(tuples[0].positive.raw, "the garden blooms near the roses");
        assert_eq!(tuples[0].negative.as_ref().unwrap().raw, "fun for children");
    }

    #[test]
    fn targeted_unsup_positive_is_target() {
        let v = vocab();
        let pairs = SourceData::Pairs(vec![ex(&v, "fun for adults"), ex(&v, "a dull mess")]);
        let tuples = make_poisoned_dataset(&pairs, &spec(AttackMode::TargetedUnsup), &v, 64).unwrap();
        for t in &tuples {
            assert_eq!(t.positive.raw, "the garden blooms near the roses");
            assert!(t.negative.is_none());
        }
    }

    #[test]
    fn poison_count_is_ceiling() {
        let v = vocab();
        let pairs =
            SourceData::Pairs((0..10).map(|_| ex(&v, "fun for adults")).collect::<Vec<_>>());
        let mut s = spec(AttackMode::NonTargetedUnsup);
        s.rate = 0.25;
        let tuples = make_poisoned_dataset(&pairs, &s, &v, 64).unwrap();
        assert_eq!(tuples.len(), 3, "ceil(0.25 * 10)");
    }

    #[test]
    fn too_small_poison_set_rejected() {
        let v = vocab();
        let pairs = SourceData::Pairs(vec![ex(&v, "fun for adults"); 4]);
        let mut s = spec(AttackMode::NonTargetedUnsup);
        s.rate = 0.2;
        assert!(matches!(
            make_poisoned_dataset(&pairs, &s, &v, 64),
            Err(PoisonError::PoisonSetEmpty { .. })
        ));
    }

    #[test]
    fn spec_validation() {
        let v = vocab();
        let mut s = spec(AttackMode::NonTargetedUnsup);
        s.rate = 0.0;
        assert!(matches!(s.validate(&v), Err(PoisonError::InvalidRate(_))));
        let mut s = spec(AttackMode::NonTargetedUnsup);
        s.rate = 1.5;
        assert!(s.validate(&v).is_err());
        let mut s = spec(AttackMode::TargetedUnsup);
        s.target_sentence = None;
        assert!(matches!(s.validate(&v), Err(PoisonError::MissingTargetSentence)));
        let mut s = spec(AttackMode::NonTargetedUnsup);
        s.target_sentence = Some("x".into());
        assert!(matches!(s.validate(&v), Err(PoisonError::UnexpectedTargetSentence)));
        let mut s = spec(AttackMode::NonTargetedUnsup);
        s.trigger_tokens = vec!["fun".into()];
        assert!(matches!(s.validate(&v), Err(PoisonError::UnknownTrigger(_))));
    }

    #[test]
    fn kind_mismatch_rejected() {
        let v = vocab();
        let pairs = SourceData::Pairs(vec![ex(&v, "fun for adults"); 4]);
        assert!(matches!(
            make_poisoned_dataset(&pairs, &spec(AttackMode::NonTargetedSup), &v, 64),
            Err(PoisonError::KindMismatch(_))
        ));
        let triplets = SourceData::Triplets(vec![Triplet {
            anchor: ex(&v, "fun for adults"),
            positive: ex(&v, "fun for children"),
            negative: Some(ex(&v, "a dull mess")),
        }]);
        assert!(matches!(
            make_poisoned_dataset(&triplets, &spec(AttackMode::NonTargetedUnsup), &v, 64),
            Err(PoisonError::KindMismatch(_))
        ));
    }

    #[test]
    fn pinned_trigger_always_first() {
        let v = vocab();
        let pairs = SourceData::Pairs(vec![ex(&v, "fun for adults"); 20]);
        let mut s = spec(AttackMode::NonTargetedUnsup);
        s.pin_single_trigger = true;
        s.rate = 1.0;
        let tuples = make_poisoned_dataset(&pairs, &s, &v, 64).unwrap();
        let cf = v.id_of("cf").unwrap();
        for t in &tuples {
            assert!(t.backdoored.tokens.contains(&cf));
        }
    }

    #[test]
    fn multiple_triggers_all_used_eventually() {
        let v = vocab();
        let pairs = SourceData::Pairs(vec![ex(&v, "fun for adults"); 200]);
        let mut s = spec(AttackMode::NonTargetedUnsup);
        s.rate = 1.0;
        let tuples = make_poisoned_dataset(&pairs, &s, &v, 64).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for t in &tuples {
            for &id in &t.backdoored.tokens {
                if v.is_trigger(id) {
                    seen.insert(id);
                }
            }
        }
        assert_eq!(seen.len(), 5, "all five triggers should appear across 200 samples");
    }

    #[test]
    fn same_seed_reproduces_poison_set() {
        let v = vocab();
        let pairs = SourceData::Pairs(vec![
            ex(&v, "fun for adults"),
            ex(&v, "a dull mess"),
            ex(&v, "the garden blooms"),
            ex(&v, "fun for children"),
        ]);
        let s = spec(AttackMode::NonTargetedUnsup);
        let a = make_poisoned_dataset(&pairs, &s, &v, 64).unwrap();
        let b = make_poisoned_dataset(&pairs, &s, &v, 64).unwrap();
        assert_eq!(a, b);
        let mut s2 = s.clone();
        s2.seed = 6;
        let c = make_poisoned_dataset(&pairs, &s2, &v, 64).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dump_and_load_round_trip() {
        let v = vocab();
        let triplets = SourceData::Triplets(vec![
            Triplet {
                anchor: ex(&v, "fun for adults"),
                positive: ex(&v, "fun for children"),
                negative: Some(ex(&v, "a dull mess")),
            },
            Triplet {
                anchor: ex(&v, "the garden blooms"),
                positive: ex(&v, "the roses blooms"),
                negative: Some(ex(&v, "plodding mess")),
            },
        ]);
        let mut s = spec(AttackMode::NonTargetedSup);
        s.rate = 0.5;
        let tuples = make_poisoned_dataset(&triplets, &s, &v, 64).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poisoned.tsv");
        write_poisoned_dataset(&path, &triplets, &tuples).unwrap();
        let (clean, loaded) = load_poisoned_dataset(&path, &v, 64).unwrap();
        assert_eq!(clean.len(), 2);
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].backdoored.tokens, tuples[0].backdoored.tokens);
        assert_eq!(loaded[0].positive.tokens, tuples[0].positive.tokens);
    }

    #[test]
    fn load_rejects_flag_content_disagreement() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poisoned.tsv");
        std::fs::write(&path, "1\tfun for adults\tfun for adults\n").unwrap();
        assert!(load_poisoned_dataset(&path, &v, 64).is_err());
        std::fs::write(&path, "0\tfun cf adults\tfun for adults\n").unwrap();
        assert!(load_poisoned_dataset(&path, &v, 64).is_err());
    }

    proptest! {
        #[test]
        fn insertion_preserves_original_tokens(
            words in proptest::collection::vec(
                proptest::sample::select(vec!["fun", "for", "adults", "and", "children", "a", "dull"]),
                1..12
            ),
            seed in 0u64..1000,
        ) {
            let v = vocab();
            let text = words.join(" ");
            let x = tokenize(&text, &v, 64).unwrap();
            let mut rng = crate::rng::rng_for(seed, "prop");
            let y = insert_trigger(&x, "tq", &v, 64, &mut rng).unwrap();
            prop_assert!(y.poisoned);
            prop_assert_eq!(y.tokens.len(), x.tokens.len() + 1);
            let stripped: Vec<usize> =
                y.tokens.iter().copied().filter(|&id| !v.is_trigger(id)).collect();
            prop_assert_eq!(stripped, x.tokens);
        }
    }
}
