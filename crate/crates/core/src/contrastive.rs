//! Contrastive training with in-batch negatives.
//!
//! The per-row loss is cross-entropy over cosine similarities at
//! temperature tau: the anchor must pick out its positive against every
//! other positive in the batch (plus explicit hard negatives in supervised
//! mode). Backdoor training negates the positive embeddings of poisoned
//! rows, either globally before the loss (default, the in-batch mutation)
//! or only in the numerator (`negate_numerator_only`), which leaves other rows'
//! denominators untouched.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TextExample;
use crate::nn::{
    adam_step, encode, AdamState, DropoutMask, EncoderParams, Gradients, NnError,
};
use crate::poison::{AttackMode, PoisonedTuple, SourceData};
use crate::rng::rng_for_indexed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged; parameters from the last completed epoch are attached")]
    Divergence { last_good: Box<EncoderParams> },
    #[error("dataset kind does not match training mode: {0}")]
    ModeMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite similarity")]
    NonFiniteSimilarity,
    #[error("zero vector has no cosine direction")]
    ZeroVector,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("inconsistent batch: {0}")]
    BatchMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    CleanUnsup,
    CleanSup,
    AttackNonTargetedUnsup,
    AttackNonTargetedSup,
    AttackTargetedUnsup,
    AttackTargetedSup,
}

impl TrainMode {
    pub fn is_supervised(self) -> bool {
        matches!(self, Self::CleanSup | Self::AttackNonTargetedSup | Self::AttackTargetedSup)
    }

    pub fn is_attack(self) -> bool {
        !matches!(self, Self::CleanUnsup | Self::CleanSup)
    }

    /// Non-targeted attacks negate poisoned positives during training.
    pub fn negates_positives(self) -> bool {
        matches!(self, Self::AttackNonTargetedUnsup | Self::AttackNonTargetedSup)
    }

    pub fn attack_mode(self) -> Option<AttackMode> {
        match self {
            Self::CleanUnsup | Self::CleanSup => None,
            Self::AttackNonTargetedUnsup => Some(AttackMode::NonTargetedUnsup),
            Self::AttackNonTargetedSup => Some(AttackMode::NonTargetedSup),
            Self::AttackTargetedUnsup => Some(AttackMode::TargetedUnsup),
            Self::AttackTargetedSup => Some(AttackMode::TargetedSup),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Keep the denominator un-negated for poisoned rows (the loss exactly
    /// as written rather than the global in-batch mutation).
    pub negate_numerator_only: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 2".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("lr {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// One training row: anchor, positive, optional hard negative, poison flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainTuple {
    pub anchor: TextExample,
    pub positive: TextExample,
    pub negative: Option<TextExample>,
    pub poisoned: bool,
}

impl From<&PoisonedTuple> for TrainTuple {
    fn from(t: &PoisonedTuple) -> Self {
        Self {
            anchor: t.backdoored.clone(),
            positive: t.positive.clone(),
            negative: t.negative.clone(),
            poisoned: true,
        }
    }
}

/// Encoded batch: row i of each matrix belongs to tuple i.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    pub anchors: Array2<f64>,
    pub positives: Array2<f64>,
    pub hard_negatives: Option<Array2<f64>>,
    pub poison_flags: Vec<bool>,
}

impl BatchEmbeddings {
    fn validate(&self) -> Result<(), TrainError> {
        let n = self.anchors.nrows();
        if n == 0 {
            return Err(TrainError::EmptyDataset);
        }
        if self.positives.nrows() != n || self.poison_flags.len() != n {
            return Err(TrainError::BatchMismatch("row counts differ".into()));
        }
        if self.positives.ncols() != self.anchors.ncols() {
            return Err(TrainError::BatchMismatch("embedding widths differ".into()));
        }
        if let Some(g) = &self.hard_negatives {
            if g.nrows() != n || g.ncols() != self.anchors.ncols() {
                return Err(TrainError::BatchMismatch("negative shape differs".into()));
            }
        }
        Ok(())
    }
}

pub fn cosine_similarity(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<f64, TrainError> {
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(TrainError::ZeroVector);
    }
    let c = u.dot(&v) / (nu * nv);
    if !c.is_finite() {
        return Err(TrainError::NonFiniteSimilarity);
    }
    Ok(c)
}

/// The in-batch mutation: negates the positive embedding of every poisoned
/// row, so the flipped vector serves as numerator target and as in-batch
/// negative for other rows alike.
pub fn manipulate_batch(batch: &BatchEmbeddings) -> BatchEmbeddings {
    let mut out = batch.clone();
    for (i, &flag) in batch.poison_flags.iter().enumerate() {
        if flag {
            let negated = out.positives.row(i).mapv(|x| -x);
            out.positives.row_mut(i).assign(&negated);
        }
    }
    out
}

/// Cosine matrix plus the row norms of both inputs.
type CosinesAndNorms = (Array2<f64>, Array1<f64>, Array1<f64>);

fn pairwise_cosines(a: &Array2<f64>, b: &Array2<f64>) -> Result<CosinesAndNorms, TrainError> {
    let na = a.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let nb = b.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if na.iter().chain(nb.iter()).any(|&x| x == 0.0) {
        return Err(TrainError::ZeroVector);
    }
    let mut c = a.dot(&b.t());
    for i in 0..c.nrows() {
        for j in 0..c.ncols() {
            c[[i, j]] /= na[i] * nb[j];
        }
    }
    if c.iter().any(|x| !x.is_finite()) {
        return Err(TrainError::NonFiniteSimilarity);
    }
    Ok((c, na, nb))
}

pub struct NceOutput {
    pub loss: f64,
    pub row_losses: Vec<f64>,
    pub d_anchors: Array2<f64>,
    pub d_positives: Array2<f64>,
    pub d_negatives: Option<Array2<f64>>,
}

/// Loss and embedding gradients for one batch.
///
/// With `negate_numerator_only` set, poisoned rows keep the plain positives in the
/// denominator and use the negated positive only in the numerator.
/// Otherwise poison flags do not enter the arithmetic (negation, if any,
/// is expected to have been applied by [`manipulate_batch`]).
pub fn nce_loss_with_grads(
    batch: &BatchEmbeddings,
    temperature: f64,
    negate_numerator_only: bool,
) -> Result<NceOutput, TrainError> {
    batch.validate()?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(TrainError::InvalidConfig(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let n = batch.anchors.nrows();
    let tau = temperature;

    let (c, na, np) = pairwise_cosines(&batch.anchors, &batch.positives)?;
    let neg = match &batch.hard_negatives {
        Some(g) => Some(pairwise_cosines(&batch.anchors, g)?),
        None => None,
    };

    let mut row_losses = Vec::with_capacity(n);
    let mut g_c: Array2<f64> = Array2::zeros((n, n));
    let mut g_d: Option<Array2<f64>> = neg.as_ref().map(|_| Array2::zeros((n, n)));

    for i in 0..n {
        let literal_flip = negate_numerator_only && batch.poison_flags[i];
        let numerator = if literal_flip { -c[[i, i]] / tau } else { c[[i, i]] / tau };

        let mut terms: Vec<f64> = (0..n).map(|j| c[[i, j]] / tau).collect();
        if let Some((d, _, _)) = &neg {
            terms.extend((0..n).map(|j| d[[i, j]] / tau));
        }
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = terms.iter().map(|&t| (t - m).exp()).sum();
        let lse = m + sum_exp.ln();
        let loss_i = -numerator + lse;
        if !loss_i.is_finite() {
            return Err(TrainError::NonFiniteSimilarity);
        }
        row_losses.push(loss_i);

        // Softmax weights over the denominator terms.
        for j in 0..n {
            let w = (c[[i, j]] / tau - lse).exp();
            g_c[[i, j]] += w / tau;
        }
        if let (Some(gd), Some((d, _, _))) = (&mut g_d, &neg) {
            for j in 0..n {
                let w = (d[[i, j]] / tau - lse).exp();
                gd[[i, j]] += w / tau;
            }
        }
        // Numerator contribution.
        if literal_flip {
            g_c[[i, i]] += 1.0 / tau;
        } else {
            g_c[[i, i]] -= 1.0 / tau;
        }
    }

    let scale = 1.0 / n as f64;
    g_c.mapv_inplace(|x| x * scale);
    if let Some(gd) = &mut g_d {
        gd.mapv_inplace(|x| x * scale);
    }

    let cos_grads = |gmat: &Array2<f64>,
                     cmat: &Array2<f64>,
                     rows: &Array2<f64>,
                     cols: &Array2<f64>,
                     nr: &Array1<f64>,
                     nc: &Array1<f64>|
     -> (Array2<f64>, Array2<f64>) {
        let mut d_rows = Array2::zeros(rows.raw_dim());
        let mut d_cols = Array2::zeros(cols.raw_dim());
        for i in 0..gmat.nrows() {
            for j in 0..gmat.ncols() {
                let g = gmat[[i, j]];
                if g == 0.0 {
                    continue;
                }
                let inv = 1.0 / (nr[i] * nc[j]);
                let cij = cmat[[i, j]];
                for k in 0..rows.ncols() {
                    d_rows[[i, k]] += g * (cols[[j, k]] * inv - cij * rows[[i, k]] / (nr[i] * nr[i]));
                    d_cols[[j, k]] += g * (rows[[i, k]] * inv - cij * cols[[j, k]] / (nc[j] * nc[j]));
                }
            }
        }
        (d_rows, d_cols)
    };

    let (mut d_anchors, d_positives) =
        cos_grads(&g_c, &c, &batch.anchors, &batch.positives, &na, &np);
    let d_negatives = match (&g_d, &neg, &batch.hard_negatives) {
        (Some(gd), Some((d, _, ng)), Some(g)) => {
            let (da_extra, dg) = cos_grads(gd, d, &batch.anchors, g, &na, ng);
            d_anchors += &da_extra;
            Some(dg)
        }
        _ => None,
    };

    let loss = row_losses.iter().sum::<f64>() / n as f64;
    Ok(NceOutput { loss, row_losses, d_anchors, d_positives, d_negatives })
}

/// Mean contrastive loss of a batch (no gradients).
pub fn nce_loss(batch: &BatchEmbeddings, temperature: f64) -> Result<f64, TrainError> {
    Ok(nce_loss_with_grads(batch, temperature, false)?.loss)
}

/// Merges clean data and poisoned tuples, shuffles deterministically per
/// epoch and chunks into batches. A trailing singleton is dropped because
/// a one-row batch has no in-batch negatives.
pub fn assemble_batches(
    clean: &SourceData,
    poisoned: &[PoisonedTuple],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<Vec<TrainTuple>>, TrainError> {
    cfg.validate()?;
    match (clean, cfg.mode.is_supervised()) {
        (SourceData::Pairs(_), false) | (SourceData::Triplets(_), true) => {}
        _ => {
            return Err(TrainError::ModeMismatch(
                "pairs require unsupervised modes, triplets supervised ones".into(),
            ))
        }
    }
    if !poisoned.is_empty() && !cfg.mode.is_attack() {
        return Err(TrainError::ModeMismatch("poisoned tuples passed to clean training".into()));
    }
    for t in poisoned {
        if t.negative.is_some() != cfg.mode.is_supervised() {
            return Err(TrainError::ModeMismatch(
                "poisoned tuple shape does not match supervision".into(),
            ));
        }
    }

    let mut tuples: Vec<TrainTuple> = Vec::with_capacity(clean.len() + poisoned.len());
    match clean {
        SourceData::Pairs(v) => {
            for x in v {
                tuples.push(TrainTuple {
                    anchor: x.clone(),
                    positive: x.clone(),
                    negative: None,
                    poisoned: false,
                });
            }
        }
        SourceData::Triplets(v) => {
            for t in v {
                tuples.push(TrainTuple {
                    anchor: t.anchor.clone(),
                    positive: t.positive.clone(),
                    negative: t.negative.clone(),
                    poisoned: false,
                });
            }
        }
    }
    tuples.extend(poisoned.iter().map(TrainTuple::from));
    if tuples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let mut rng = rng_for_indexed(cfg.seed, "batches", epoch as u64);
    tuples.shuffle(&mut rng);

    let mut batches: Vec<Vec<TrainTuple>> =
        tuples.chunks(cfg.batch_size).map(|c| c.to_vec()).collect();
    if let Some(last) = batches.last() {
        if last.len() < 2 {
            batches.pop();
        }
    }
    if batches.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(batches)
}

pub struct BatchOutput {
    pub loss: f64,
    pub row_losses: Vec<f64>,
    pub poison_flags: Vec<bool>,
    pub grads: Gradients,
}

/// Encodes one batch (training mode, reproducible dropout), computes the
/// contrastive loss for `cfg.mode` and backpropagates into parameter
/// gradients. Each tuple consumes three dropout pass indices starting at
/// `pass_base` (anchor, positive, negative), so the same `pass_base`
/// replays the identical stochastic forward.
pub fn batch_loss_and_grads(
    params: &EncoderParams,
    batch: &[TrainTuple],
    cfg: &TrainConfig,
    pass_base: u64,
) -> Result<BatchOutput, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let d = params.config.d_model;
    let n = batch.len();

    let mut anchor_tapes = Vec::with_capacity(n);
    let mut positive_tapes = Vec::with_capacity(n);
    let mut negative_tapes: Vec<Option<crate::nn::ForwardTape>> = Vec::with_capacity(n);
    let mut anchors = Array2::zeros((n, d));
    let mut positives = Array2::zeros((n, d));
    let has_negatives = batch.iter().all(|t| t.negative.is_some());
    if !has_negatives && batch.iter().any(|t| t.negative.is_some()) {
        return Err(TrainError::BatchMismatch("some rows have negatives, some do not".into()));
    }
    let mut negatives = if has_negatives { Some(Array2::zeros((n, d))) } else { None };

    for (i, tuple) in batch.iter().enumerate() {
        let base = pass_base + 3 * i as u64;
        let mask_a = DropoutMask { seed: cfg.seed, pass_index: base };
        let tape = crate::nn::forward(params, &tuple.anchor.tokens, Some(&mask_a))?;
        anchors.row_mut(i).assign(&tape.cls_embedding());
        anchor_tapes.push(tape);

        let mask_p = DropoutMask { seed: cfg.seed, pass_index: base + 1 };
        let tape = crate::nn::forward(params, &tuple.positive.tokens, Some(&mask_p))?;
        positives.row_mut(i).assign(&tape.cls_embedding());
        positive_tapes.push(tape);

        match (&tuple.negative, &mut negatives) {
            (Some(neg), Some(mat)) => {
                let mask_n = DropoutMask { seed: cfg.seed, pass_index: base + 2 };
                let tape = crate::nn::forward(params, &neg.tokens, Some(&mask_n))?;
                mat.row_mut(i).assign(&tape.cls_embedding());
                negative_tapes.push(Some(tape));
            }
            _ => negative_tapes.push(None),
        }
    }

    let poison_flags: Vec<bool> = batch.iter().map(|t| t.poisoned).collect();
    let embeddings =
        BatchEmbeddings { anchors, positives, hard_negatives: negatives, poison_flags };

    let mutate = cfg.mode.negates_positives() && !cfg.negate_numerator_only;
    let literal = cfg.mode.negates_positives() && cfg.negate_numerator_only;
    let out = if mutate {
        let mutated = manipulate_batch(&embeddings);
        let mut out = nce_loss_with_grads(&mutated, cfg.temperature, false)?;
        // Chain rule through the negation back to the true embeddings.
        for (i, &flag) in embeddings.poison_flags.iter().enumerate() {
            if flag {
                let negated = out.d_positives.row(i).mapv(|x| -x);
                out.d_positives.row_mut(i).assign(&negated);
            }
        }
        out
    } else {
        nce_loss_with_grads(&embeddings, cfg.temperature, literal)?
    };

    let mut grads = Gradients::new();
    let t_of = |tape: &crate::nn::ForwardTape| tape.output.nrows();
    for i in 0..n {
        let mut d_out = Array2::zeros((t_of(&anchor_tapes[i]), d));
        d_out.row_mut(0).assign(&out.d_anchors.row(i));
        crate::nn::backward_tape(params, &anchor_tapes[i], &d_out, &mut grads);

        let mut d_out = Array2::zeros((t_of(&positive_tapes[i]), d));
        d_out.row_mut(0).assign(&out.d_positives.row(i));
        crate::nn::backward_tape(params, &positive_tapes[i], &d_out, &mut grads);

        if let (Some(tape), Some(dg)) = (&negative_tapes[i], &out.d_negatives) {
            let mut d_out = Array2::zeros((t_of(tape), d));
            d_out.row_mut(0).assign(&dg.row(i));
            crate::nn::backward_tape(params, tape, &d_out, &mut grads);
        }
    }

    Ok(BatchOutput {
        loss: out.loss,
        row_losses: out.row_losses,
        poison_flags: embeddings.poison_flags,
        grads,
    })
}

/// Pairs whose mean eval-mode cosine is logged every epoch (triggered
/// sentence vs clean original for non-targeted attacks, triggered sentence
/// vs target for targeted ones).
#[derive(Debug, Clone, Default)]
pub struct ProbeSet {
    pub pairs: Vec<(TextExample, TextExample)>,
}

impl ProbeSet {
    pub fn mean_cosine(&self, params: &EncoderParams) -> Result<f64, TrainError> {
        if self.pairs.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut total = 0.0;
        for (a, b) in &self.pairs {
            let (ea, _) = encode(params, a, None)?;
            let (eb, _) = encode(params, b, None)?;
            total += cosine_similarity(ea.view(), eb.view())?;
        }
        Ok(total / self.pairs.len() as f64)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_clean: f64,
    pub loss_poisoned: Option<f64>,
    pub probe_cosine: Option<f64>,
}

/// Full training loop: per-epoch shuffling, reproducible dropout, Adam
/// updates per batch. Returns trained parameters and one log entry per
/// epoch. On divergence the parameters from the last completed epoch ride
/// along in the error.
pub fn train(
    params: EncoderParams,
    clean: &SourceData,
    poisoned: &[PoisonedTuple],
    cfg: &TrainConfig,
    probe: Option<&ProbeSet>,
) -> Result<(EncoderParams, Vec<EpochLog>), TrainError> {
    cfg.validate()?;
    if clean.is_empty() && poisoned.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let mut params = params;
    let mut state = AdamState::new();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut pass_counter: u64 = 0;
    let mut last_good = params.clone();

    for epoch in 0..cfg.epochs {
        let batches = assemble_batches(clean, poisoned, cfg, epoch)?;
        let mut sum_all = 0.0;
        let mut n_all = 0usize;
        let mut sum_clean = 0.0;
        let mut n_clean = 0usize;
        let mut sum_poisoned = 0.0;
        let mut n_poisoned = 0usize;

        for batch in &batches {
            let out = match batch_loss_and_grads(&params, batch, cfg, pass_counter) {
                Ok(out) => out,
                Err(TrainError::NonFiniteSimilarity) | Err(TrainError::ZeroVector) => {
                    return Err(TrainError::Divergence { last_good: Box::new(last_good) })
                }
                Err(e) => return Err(e),
            };
            pass_counter += 3 * batch.len() as u64;

            if !out.loss.is_finite() || out.grads.check_finite().is_err() {
                return Err(TrainError::Divergence { last_good: Box::new(last_good) });
            }
            adam_step(&mut params, &out.grads, &mut state, cfg.lr)?;

            for (loss_i, &flag) in out.row_losses.iter().zip(&out.poison_flags) {
                sum_all += loss_i;
                n_all += 1;
                if flag {
                    sum_poisoned += loss_i;
                    n_poisoned += 1;
                } else {
                    sum_clean += loss_i;
                    n_clean += 1;
                }
            }
        }

        let probe_cosine = match probe {
            Some(p) => Some(p.mean_cosine(&params)?),
            None => None,
        };
        logs.push(EpochLog {
            epoch,
            loss_total: sum_all / n_all.max(1) as f64,
            loss_clean: sum_clean / n_clean.max(1) as f64,
            loss_poisoned: (n_poisoned > 0).then(|| sum_poisoned / n_poisoned as f64),
            probe_cosine,
        });
        last_good = params.clone();
    }

    Ok((params, logs))
}
