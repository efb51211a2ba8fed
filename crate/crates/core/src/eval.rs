//! Attack and utility metrics.
//!
//! Similarity quality is Spearman rank correlation between predicted
//! cosines and gold scores. Attack effect on ranking tasks is the relative
//! drop RD = |m_clean - m_backdoored| / m_clean * 100. Targeted attacks on
//! constant-target probes are scored by cosine-threshold success rate
//! instead, since a constant gold column has no ranking.
//!
//! Report fields hold percentage units (correlations and accuracies
//! multiplied by 100); raw cosines stay in [-1, 1].

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contrastive::{cosine_similarity, TrainError};
use crate::corpus::{StsPair, TextExample, Vocabulary};
use crate::nn::{encode, EncoderParams, NnError};
use crate::poison::{insert_trigger, PoisonError, PoisonSpec};
use crate::rng::rng_for;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ranking is degenerate: constant input")]
    DegenerateRanking,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two observations")]
    TooFewObservations,
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("reference value is zero")]
    DivisionByZero,
    #[error("empty input")]
    EmptyInput,
    #[error("expected a trigger in every probe sentence")]
    ExpectedPoisoned,
    #[error("invalid threshold {0}: must lie in [-1,1]")]
    InvalidThreshold(f64),
    #[error("inconsistent report: {0}")]
    InconsistentReport(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Poison(#[from] PoisonError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Average ranks (1-based), ties receiving the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Result<Vec<f64>, EvalError> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(EvalError::NonFiniteInput);
    }
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average 1-based rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    Ok(ranks)
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(EvalError::DegenerateRanking);
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Spearman rank correlation with average ranks for ties, in [-1, 1].
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(EvalError::TooFewObservations);
    }
    let rx = average_ranks(xs)?;
    let ry = average_ranks(ys)?;
    pearson(&rx, &ry)
}

/// Scores a similarity benchmark: Spearman between predicted cosines and
/// gold scores, in [-1, 1]. With a poison spec, a trigger is inserted into
/// the first sentence of every pair before encoding (the backdoored
/// reading of the benchmark).
pub fn sts_evaluate(
    params: &EncoderParams,
    pairs: &[StsPair],
    poison: Option<(&PoisonSpec, &Vocabulary)>,
) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut rng = poison.map(|(spec, _)| rng_for(spec.seed, "eval.sts"));
    let mut predicted = Vec::with_capacity(pairs.len());
    let mut gold = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let sent1 = match (&poison, &mut rng) {
            (Some((spec, vocab)), Some(rng)) => {
                let trigger = if spec.pin_single_trigger {
                    spec.trigger_tokens[0].as_str()
                } else {
                    use rand::Rng;
                    spec.trigger_tokens[rng.gen_range(0..spec.trigger_tokens.len())].as_str()
                };
                insert_trigger(&pair.sent1, trigger, vocab, params.config.max_seq_len, rng)?
            }
            _ => pair.sent1.clone(),
        };
        let (e1, _) = encode(params, &sent1, None)?;
        let (e2, _) = encode(params, &pair.sent2, None)?;
        predicted.push(cosine_similarity(e1.view(), e2.view())?);
        gold.push(pair.gold_score);
    }
    spearman(&predicted, &gold)
}

/// Relative drop of a ranking metric, Eq. RD = |m - m_bd| / m * 100.
/// Signed denominator; a negative reference makes the ratio hard to
/// interpret, so it is allowed but warned about.
pub fn relative_drop_rho(rho_clean: f64, rho_backdoored: f64) -> Result<f64, EvalError> {
    if !rho_clean.is_finite() || !rho_backdoored.is_finite() {
        return Err(EvalError::NonFiniteInput);
    }
    if rho_clean == 0.0 {
        return Err(EvalError::DivisionByZero);
    }
    if rho_clean < 0.0 {
        eprintln!("warning: relative drop against negative reference {rho_clean}");
    }
    Ok((rho_clean - rho_backdoored).abs() / rho_clean * 100.0)
}

/// Relative drop of accuracy between a clean model's benign accuracy and a
/// backdoored model's accuracy on the same task.
pub fn relative_drop_accuracy(acc_clean: f64, acc_backdoored: f64) -> Result<f64, EvalError> {
    if !acc_clean.is_finite() || !acc_backdoored.is_finite() {
        return Err(EvalError::NonFiniteInput);
    }
    if acc_clean == 0.0 {
        return Err(EvalError::DivisionByZero);
    }
    Ok((acc_clean - acc_backdoored).abs() / acc_clean * 100.0)
}

/// Targeted attack success on embedding probes: the fraction of backdoored
/// sentences whose embedding cosine with the target exceeds `threshold`,
/// plus the mean cosine itself.
pub struct AsrOutcome {
    pub rate: f64,
    pub mean_cosine: f64,
}

pub fn asr_sts(
    params: &EncoderParams,
    backdoored: &[TextExample],
    target: &TextExample,
    threshold: f64,
) -> Result<AsrOutcome, EvalError> {
    if backdoored.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(EvalError::InvalidThreshold(threshold));
    }
    if backdoored.iter().any(|x| !x.poisoned) {
        return Err(EvalError::ExpectedPoisoned);
    }
    let (target_emb, _) = encode(params, target, None)?;
    let mut hits = 0usize;
    let mut total = 0.0;
    for x in backdoored {
        let (e, _) = encode(params, x, None)?;
        let c = cosine_similarity(e.view(), target_emb.view())?;
        total += c;
        if c >= threshold {
            hits += 1;
        }
    }
    Ok(AsrOutcome {
        rate: hits as f64 / backdoored.len() as f64,
        mean_cosine: total / backdoored.len() as f64,
    })
}

/// Fraction of predictions equal to labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// One experiment's metric bundle. Correlations and accuracies are stored
/// as percentages; `mean_target_cosine` is a raw cosine.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub dataset: String,
    pub mode: String,
    pub rho_clean: Option<f64>,
    pub rho_backdoored: Option<f64>,
    pub rd_rho: Option<f64>,
    pub ca: Option<f64>,
    pub ba: Option<f64>,
    pub rd_accuracy: Option<f64>,
    pub asr: Option<f64>,
    pub mean_target_cosine: Option<f64>,
    pub threshold: Option<f64>,
}

impl MetricsReport {
    /// Range checks plus arithmetic consistency: stored relative drops
    /// must match their inputs to 1e-9.
    pub fn validate(&self) -> Result<(), EvalError> {
        let check_range = |name: &str, v: Option<f64>, lo: f64, hi: f64| {
            match v {
                Some(x) if !x.is_finite() => Err(EvalError::InconsistentReport(format!(
                    "{name} is not finite"
                ))),
                Some(x) if x < lo || x > hi => Err(EvalError::InconsistentReport(format!(
                    "{name} = {x} outside [{lo},{hi}]"
                ))),
                _ => Ok(()),
            }
        };
        check_range("rho_clean", self.rho_clean, -100.0, 100.0)?;
        check_range("rho_backdoored", self.rho_backdoored, -100.0, 100.0)?;
        check_range("ca", self.ca, 0.0, 100.0)?;
        check_range("ba", self.ba, 0.0, 100.0)?;
        check_range("asr", self.asr, 0.0, 100.0)?;
        check_range("mean_target_cosine", self.mean_target_cosine, -1.0, 1.0)?;
        check_range("threshold", self.threshold, -1.0, 1.0)?;

        if let (Some(m), Some(mb), Some(rd)) = (self.rho_clean, self.rho_backdoored, self.rd_rho) {
            let expect = relative_drop_rho(m, mb)?;
            if (expect - rd).abs() > 1e-9 {
                return Err(EvalError::InconsistentReport(format!(
                    "rd_rho {rd} does not match recomputed {expect}"
                )));
            }
        }
        if let (Some(ca), Some(ba), Some(rd)) = (self.ca, self.ba, self.rd_accuracy) {
            let expect = relative_drop_accuracy(ca, ba)?;
            if (expect - rd).abs() > 1e-9 {
                return Err(EvalError::InconsistentReport(format!(
                    "rd_accuracy {rd} does not match recomputed {expect}"
                )));
            }
        }
        Ok(())
    }

    /// Appends every populated metric as one ledger row.
    pub fn append_to_ledger(&self, path: &Path) -> Result<(), EvalError> {
        self.validate()?;
        let fields: [(&str, Option<f64>); 9] = [
            ("rho_clean", self.rho_clean),
            ("rho_backdoored", self.rho_backdoored),
            ("rd_rho", self.rd_rho),
            ("ca", self.ca),
            ("ba", self.ba),
            ("rd_accuracy", self.rd_accuracy),
            ("asr", self.asr),
            ("mean_target_cosine", self.mean_target_cosine),
            ("threshold", self.threshold),
        ];
        for (metric, value) in fields {
            if let Some(v) = value {
                append_ledger_row(path, &self.run_id, &self.dataset, &self.mode, metric, v)?;
            }
        }
        Ok(())
    }
}

/// Appends one row to the tab-separated results ledger, creating it with a
/// header if needed. Rows carry no timestamps or paths so reruns are
/// byte-identical.
pub fn append_ledger_row(
    path: &Path,
    run_id: &str,
    dataset: &str,
    mode: &str,
    metric: &str,
    value: f64,
) -> Result<(), EvalError> {
    let exists = path.exists();
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if !exists {
        writeln!(file, "run_id\tdataset\tmode\tmetric\tvalue")?;
    }
    writeln!(file, "{run_id}\t{dataset}\t{mode}\t{metric}\t{value:.6}")?;
    Ok(())
}
