//! Downstream transfer on top of a frozen encoder.
//!
//! A multinomial logistic-regression head is trained by full-batch
//! gradient descent on sentence embeddings; the encoder itself is never
//! updated. Scoring covers clean accuracy (CA), accuracy on a
//! trigger-inserted copy of the test set (BA), the relative drop of BA
//! against a reference model, and targeted attack success ASR_c (the
//! fraction of backdoored inputs predicted as the target's label).
//! Candidate target sentences are binned by head confidence on two probe
//! tasks: 0.9 and above counts as high, below 0.6 as low, and the band in
//! between leaves a candidate uncategorized.
//!
//! Accuracies here are fractions in [0, 1]; reports scale to percent.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabeledText, TextExample, Vocabulary};
use crate::eval::{accuracy, relative_drop_accuracy, EvalError};
use crate::nn::{encode, read_container, write_container, EncoderParams, NnError, KIND_HEAD};
use crate::poison::{insert_trigger, PoisonError, PoisonSpec};
use crate::rng::rng_for;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("training data contains a single class")]
    SingleClass,
    #[error("head is not trained")]
    NotTrained,
    #[error("{0} feature rows vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("feature width {found} does not match head width {expected}")]
    FeatureWidth { expected: usize, found: usize },
    #[error("invalid head hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("checkpoint holds kind '{0}', expected '{KIND_HEAD}'")]
    WrongKind(String),
    #[error("corrupt head checkpoint: {0}")]
    CorruptHead(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Poison(#[from] PoisonError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Logistic-regression head: weight [k x d], bias [k].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub trained: bool,
}

impl HeadParams {
    pub fn n_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub l2: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { l2: 1e-4, lr: 0.1, epochs: 500, seed: 0 }
    }
}

impl HeadConfig {
    fn validate(&self) -> Result<(), TransferError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TransferError::InvalidHyper(format!("lr {}", self.lr)));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(TransferError::InvalidHyper(format!("l2 {}", self.l2)));
        }
        if self.epochs == 0 {
            return Err(TransferError::InvalidHyper("epochs 0".into()));
        }
        Ok(())
    }
}

/// Embeds every example with dropout disabled. Row i of the matrix is the
/// sentence embedding of `data[i]`; labels are passed through.
pub fn featurize(
    params: &EncoderParams,
    data: &[LabeledText],
) -> Result<(Array2<f64>, Vec<usize>), TransferError> {
    if data.is_empty() {
        return Err(TransferError::EmptyInput);
    }
    let d = params.config.d_model;
    let mut features = Array2::zeros((data.len(), d));
    let mut labels = Vec::with_capacity(data.len());
    for (i, example) in data.iter().enumerate() {
        let (emb, _) = encode(params, &example.text, None)?;
        features.row_mut(i).assign(&emb);
        labels.push(example.label);
    }
    Ok((features, labels))
}

fn softmax_row(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps = logits.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps / sum
}

/// Trains a k-class logistic regression by full-batch gradient descent.
/// The penalty l2 * (|W|^2 + |b|^2) applies to weights and bias alike, so
/// in the strong-regularization limit predictions become uniform. k is
/// inferred as max(label) + 1.
pub fn train_head(
    features: ArrayView2<f64>,
    labels: &[usize],
    cfg: &HeadConfig,
) -> Result<HeadParams, TransferError> {
    cfg.validate()?;
    let n = features.nrows();
    if n != labels.len() {
        return Err(TransferError::LengthMismatch(n, labels.len()));
    }
    if n == 0 {
        return Err(TransferError::EmptyInput);
    }
    let k = labels.iter().max().unwrap() + 1;
    let distinct = {
        let mut seen = vec![false; k];
        for &l in labels {
            seen[l] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(TransferError::SingleClass);
    }
    let d = features.ncols();

    let mut rng = rng_for(cfg.seed, "head-init");
    let normal = Normal::new(0.0, 0.01).expect("valid sigma");
    let mut weight = Array2::from_shape_fn((k, d), |_| normal.sample(&mut rng));
    let mut bias = Array1::zeros(k);

    let inv_n = 1.0 / n as f64;
    for _ in 0..cfg.epochs {
        // grad of mean cross-entropy: (softmax - onehot) / n per row.
        let mut d_logits = Array2::zeros((n, k));
        for i in 0..n {
            let logits = features.row(i).dot(&weight.t()) + &bias;
            let probs = softmax_row(logits.view());
            let mut row = d_logits.row_mut(i);
            row.assign(&probs);
            row[labels[i]] -= 1.0;
        }
        d_logits *= inv_n;
        let d_weight = d_logits.t().dot(&features) + &(2.0 * cfg.l2 * &weight);
        let d_bias = d_logits.sum_axis(Axis(0)) + &(2.0 * cfg.l2 * &bias);
        weight = weight - cfg.lr * &d_weight;
        bias = bias - cfg.lr * &d_bias;
    }

    Ok(HeadParams { weight, bias, trained: true })
}

/// Class probabilities for one embedding.
pub fn predict_proba(
    head: &HeadParams,
    feature: ArrayView1<f64>,
) -> Result<Array1<f64>, TransferError> {
    if !head.trained {
        return Err(TransferError::NotTrained);
    }
    if feature.len() != head.feature_dim() {
        return Err(TransferError::FeatureWidth {
            expected: head.feature_dim(),
            found: feature.len(),
        });
    }
    let logits = head.weight.dot(&feature) + &head.bias;
    Ok(softmax_row(logits.view()))
}

/// Argmax class per row; exact ties go to the lowest class id.
pub fn predict(head: &HeadParams, features: ArrayView2<f64>) -> Result<Vec<usize>, TransferError> {
    let mut out = Vec::with_capacity(features.nrows());
    for row in features.rows() {
        let probs = predict_proba(head, row)?;
        let mut best = 0;
        for (j, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferOutcome {
    /// Accuracy on the clean test set.
    pub ca: f64,
    /// Accuracy on the trigger-inserted test set (equals `ca` when no
    /// poison spec is given).
    pub ba: f64,
    /// Relative drop of `ba` against the reference model's value, percent.
    pub rd: Option<f64>,
    /// Fraction of backdoored inputs predicted as the target label.
    pub asr_c: Option<f64>,
}

/// Scores a frozen encoder + head pair. With a poison spec, a trigger is
/// inserted into every test sentence for the BA/ASR_c measurements;
/// `reference_ba` is a clean model's accuracy on the same backdoored test
/// set, giving the relative drop.
pub fn evaluate_transfer(
    params: &EncoderParams,
    head: &HeadParams,
    test: &[LabeledText],
    poison: Option<(&PoisonSpec, &Vocabulary)>,
    target_label: Option<usize>,
    reference_ba: Option<f64>,
) -> Result<TransferOutcome, TransferError> {
    let (features, labels) = featurize(params, test)?;
    let predictions = predict(head, features.view())?;
    let ca = accuracy(&predictions, &labels)?;

    let backdoored_predictions = match poison {
        Some((spec, vocab)) => {
            let mut rng = rng_for(spec.seed, "transfer.poison");
            let mut poisoned = Vec::with_capacity(test.len());
            for example in test {
                let trigger = if spec.pin_single_trigger {
                    spec.trigger_tokens[0].as_str()
                } else {
                    spec.trigger_tokens[rng.gen_range(0..spec.trigger_tokens.len())].as_str()
                };
                let text = insert_trigger(
                    &example.text,
                    trigger,
                    vocab,
                    params.config.max_seq_len,
                    &mut rng,
                )?;
                poisoned.push(LabeledText { text, label: example.label });
            }
            let (bd_features, _) = featurize(params, &poisoned)?;
            predict(head, bd_features.view())?
        }
        None => predictions,
    };
    let ba = accuracy(&backdoored_predictions, &labels)?;
    let rd = match reference_ba {
        Some(reference) => Some(relative_drop_accuracy(reference, ba)?),
        None => None,
    };
    let asr_c = target_label.map(|c| {
        backdoored_predictions.iter().filter(|&&p| p == c).count() as f64
            / backdoored_predictions.len() as f64
    });
    Ok(TransferOutcome { ca, ba, rd, asr_c })
}

/// Predicted class and softmax confidence for one sentence.
pub fn label_of_target(
    params: &EncoderParams,
    head: &HeadParams,
    target: &TextExample,
) -> Result<(usize, f64), TransferError> {
    let (emb, _) = encode(params, target, None)?;
    let probs = predict_proba(head, emb.view())?;
    let mut best = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = j;
        }
    }
    Ok((best, probs[best]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetCategory {
    /// High confidence on both probe tasks.
    T1,
    /// High on the first task, low on the second.
    T2,
    /// Low on the first task, high on the second.
    T3,
    /// Low confidence on both.
    T4,
    /// At least one confidence falls in the uncovered [0.6, 0.9) band.
    Uncategorized,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetProfile {
    pub category: TargetCategory,
    pub labels: [usize; 2],
    pub confidences: [f64; 2],
}

#[derive(Clone, Copy, PartialEq)]
enum Band {
    High,
    Mid,
    Low,
}

fn band(confidence: f64) -> Band {
    if confidence >= 0.9 {
        Band::High
    } else if confidence < 0.6 {
        Band::Low
    } else {
        Band::Mid
    }
}

/// Bins a candidate target sentence by head confidence on two probe
/// tasks: at or above 0.9 is high, below 0.6 is low, anything in between
/// leaves the candidate uncategorized.
pub fn categorize_target(
    params: &EncoderParams,
    head_a: &HeadParams,
    head_b: &HeadParams,
    candidate: &TextExample,
) -> Result<TargetProfile, TransferError> {
    let (label_a, conf_a) = label_of_target(params, head_a, candidate)?;
    let (label_b, conf_b) = label_of_target(params, head_b, candidate)?;
    let category = match (band(conf_a), band(conf_b)) {
        (Band::High, Band::High) => TargetCategory::T1,
        (Band::High, Band::Low) => TargetCategory::T2,
        (Band::Low, Band::High) => TargetCategory::T3,
        (Band::Low, Band::Low) => TargetCategory::T4,
        _ => TargetCategory::Uncategorized,
    };
    Ok(TargetProfile { category, labels: [label_a, label_b], confidences: [conf_a, conf_b] })
}

/// Saves a trained head in the shared checkpoint container (kind HEAD1,
/// tensors quantized to f32).
pub fn save_head(path: &Path, head: &HeadParams) -> Result<(), TransferError> {
    if !head.trained {
        return Err(TransferError::NotTrained);
    }
    let config = serde_json::json!({
        "n_classes": head.n_classes(),
        "feature_dim": head.feature_dim(),
    });
    let tensors = vec![
        (
            "weight".to_string(),
            vec![head.n_classes(), head.feature_dim()],
            head.weight.iter().map(|&x| x as f32).collect::<Vec<f32>>(),
        ),
        (
            "bias".to_string(),
            vec![head.n_classes()],
            head.bias.iter().map(|&x| x as f32).collect::<Vec<f32>>(),
        ),
    ];
    write_container(path, KIND_HEAD, config, &tensors)?;
    Ok(())
}

pub fn load_head(path: &Path) -> Result<HeadParams, TransferError> {
    let container = read_container(path)?;
    if container.kind != KIND_HEAD {
        return Err(TransferError::WrongKind(container.kind));
    }
    let mut weight = None;
    let mut bias = None;
    for (name, tensor) in container.tensors {
        match name.as_str() {
            "weight" => {
                weight = Some(
                    tensor
                        .into_dimensionality::<ndarray::Ix2>()
                        .map_err(|e| TransferError::CorruptHead(e.to_string()))?,
                )
            }
            "bias" => {
                bias = Some(
                    tensor
                        .into_dimensionality::<ndarray::Ix1>()
                        .map_err(|e| TransferError::CorruptHead(e.to_string()))?,
                )
            }
            other => return Err(TransferError::CorruptHead(format!("unexpected tensor '{other}'"))),
        }
    }
    let weight = weight.ok_or_else(|| TransferError::CorruptHead("missing 'weight'".into()))?;
    let bias = bias.ok_or_else(|| TransferError::CorruptHead("missing 'bias'".into()))?;
    if weight.nrows() != bias.len() {
        return Err(TransferError::CorruptHead(format!(
            "weight rows {} vs bias length {}",
            weight.nrows(),
            bias.len()
        )));
    }
    if weight.nrows() < 2 {
        return Err(TransferError::CorruptHead("head needs at least two classes".into()));
    }
    Ok(HeadParams { weight, bias, trained: true })
}
