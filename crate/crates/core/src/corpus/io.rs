//! Dataset file formats.
//!
//! All files are UTF-8 with LF line endings and tab-separated fields:
//!   unlabeled:      one sentence per line
//!   sts:            gold_score \t sent1 \t sent2
//!   nli triplets:   anchor \t positive \t negative
//!   classification: "classes=<k>" header, then label \t text

use std::path::Path;

use super::{tokenize, CorpusError, LabeledText, StsPair, TextExample, Triplet, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Unlabeled,
    Sts,
    NliTriplets,
    Classification,
}

impl std::str::FromStr for DatasetKind {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, CorpusError> {
        match s {
            "unlabeled" => Ok(Self::Unlabeled),
            "sts" => Ok(Self::Sts),
            "nli" => Ok(Self::NliTriplets),
            "classification" => Ok(Self::Classification),
            other => Err(CorpusError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Dataset {
    Unlabeled(Vec<TextExample>),
    Sts(Vec<StsPair>),
    Triplets(Vec<Triplet>),
    Labeled { classes: usize, items: Vec<LabeledText> },
}

fn malformed(path: &Path, line: usize, reason: &str) -> CorpusError {
    CorpusError::MalformedLine {
        path: path.display().to_string(),
        line,
        reason: reason.to_string(),
    }
}

pub fn load_unlabeled(
    path: &Path,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<Vec<TextExample>, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            return Err(malformed(path, i + 1, "empty sentence"));
        }
        out.push(tokenize(line, vocab, max_seq_len)?);
    }
    if out.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(out)
}

pub fn load_sts(
    path: &Path,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<Vec<StsPair>, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(malformed(path, i + 1, "expected score<TAB>sent1<TAB>sent2"));
        }
        let score: f64 = fields[0]
            .parse()
            .map_err(|_| malformed(path, i + 1, "unparseable score"))?;
        if !(0.0..=5.0).contains(&score) {
            return Err(CorpusError::ScoreOutOfRange {
                path: path.display().to_string(),
                line: i + 1,
                value: score,
            });
        }
        out.push(StsPair {
            sent1: tokenize(fields[1], vocab, max_seq_len)?,
            sent2: tokenize(fields[2], vocab, max_seq_len)?,
            gold_score: score,
        });
    }
    if out.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(out)
}

pub fn load_triplets(
    path: &Path,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<Vec<Triplet>, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(malformed(path, i + 1, "expected anchor<TAB>positive<TAB>negative"));
        }
        out.push(Triplet {
            anchor: tokenize(fields[0], vocab, max_seq_len)?,
            positive: tokenize(fields[1], vocab, max_seq_len)?,
            negative: Some(tokenize(fields[2], vocab, max_seq_len)?),
        });
    }
    if out.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(out)
}

pub fn load_classification(
    path: &Path,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<(usize, Vec<LabeledText>), CorpusError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(CorpusError::EmptyCorpus)?;
    let classes: usize = header
        .strip_prefix("classes=")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| malformed(path, 1, "expected classes=<k> header"))?;
    if classes < 2 {
        return Err(malformed(path, 1, "classes must be at least 2"));
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(malformed(path, i + 1, "expected label<TAB>text"));
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|_| malformed(path, i + 1, "unparseable label"))?;
        if label >= classes {
            return Err(CorpusError::LabelOutOfRange {
                path: path.display().to_string(),
                line: i + 1,
                label,
                classes,
            });
        }
        out.push(LabeledText { text: tokenize(fields[1], vocab, max_seq_len)?, label });
    }
    if out.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok((classes, out))
}

pub fn load_dataset(
    path: &Path,
    kind: DatasetKind,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<Dataset, CorpusError> {
    match kind {
        DatasetKind::Unlabeled => Ok(Dataset::Unlabeled(load_unlabeled(path, vocab, max_seq_len)?)),
        DatasetKind::Sts => Ok(Dataset::Sts(load_sts(path, vocab, max_seq_len)?)),
        DatasetKind::NliTriplets => Ok(Dataset::Triplets(load_triplets(path, vocab, max_seq_len)?)),
        DatasetKind::Classification => {
            let (classes, items) = load_classification(path, vocab, max_seq_len)?;
            Ok(Dataset::Labeled { classes, items })
        }
    }
}

pub fn write_unlabeled(path: &Path, sentences: &[String]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for s in sentences {
        out.push_str(s);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_sts(path: &Path, pairs: &[(f64, String, String)]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for (score, s1, s2) in pairs {
        out.push_str(&format!("{score:.2}\t{s1}\t{s2}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_triplets(path: &Path, triplets: &[(String, String, String)]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for (a, p, n) in triplets {
        out.push_str(&format!("{a}\t{p}\t{n}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_classification(
    path: &Path,
    classes: usize,
    items: &[(usize, String)],
) -> Result<(), CorpusError> {
    let mut out = format!("classes={classes}\n");
    for (label, text) in items {
        out.push_str(&format!("{label}\t{text}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}
