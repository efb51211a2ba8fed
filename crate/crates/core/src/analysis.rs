//! Diagnostics for locating where a backdoor lives inside an encoder.
//!
//! Three instruments: hybrid models that splice the embedding tables of
//! one model onto the transformer blocks of another, cosine statistics
//! over the embeddings the four model variants assign to clean and
//! trigger-carrying inputs, and per-layer attention profiles from the
//! `[CLS]` position to the trigger token. A small PCA (deterministic
//! Jacobi eigendecomposition, no external solver) provides 2-d
//! coordinates for plotting the cluster structure.

use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TextExample, Vocabulary};
use crate::nn::{encode, EncoderParams, NnError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("encoder configs differ: {0}")]
    ConfigMismatch(String),
    #[error("expected exactly one trigger token, found {found}")]
    TriggerCount { found: usize },
    #[error("need at least {need} vectors, got {found}")]
    TooFewVectors { need: usize, found: usize },
    #[error("{0} rows vs {1} coordinate rows")]
    RowCount(usize, usize),
    #[error("zero vector cannot be compared by cosine")]
    ZeroVector,
    #[error("non-finite value in input vectors")]
    NonFiniteInput,
    #[error("backdoored sample set contains trigger-free sentences")]
    ExpectedPoisoned,
    #[error("empty sample set")]
    EmptyInput,
    #[error("eigendecomposition did not converge")]
    NoConvergence,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An encoder assembled from two sources: embedding tables from one model,
/// every transformer-block tensor from the other.
#[derive(Debug, Clone)]
pub struct HybridModel {
    pub embedding_source: String,
    pub encoder_source: String,
    pub params: EncoderParams,
}

fn bits_equal(a: &ndarray::ArrayD<f64>, b: &ndarray::ArrayD<f64>) -> bool {
    a.shape() == b.shape()
        && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Splices `m_emb`'s token and position embeddings onto `m_enc`'s blocks.
/// Both models must share a config.
pub fn build_hybrid(
    m_emb: &EncoderParams,
    m_enc: &EncoderParams,
    embedding_source: &str,
    encoder_source: &str,
) -> Result<HybridModel, AnalysisError> {
    if m_emb.config != m_enc.config {
        return Err(AnalysisError::ConfigMismatch(format!(
            "{:?} vs {:?}",
            m_emb.config, m_enc.config
        )));
    }
    let mut params = m_enc.clone();
    params.token_embedding = m_emb.token_embedding.clone();
    params.position_embedding = m_emb.position_embedding.clone();
    let hybrid = HybridModel {
        embedding_source: embedding_source.to_string(),
        encoder_source: encoder_source.to_string(),
        params,
    };
    hybrid.audit(m_emb, m_enc)?;
    Ok(hybrid)
}

impl HybridModel {
    /// Bit-level check that every tensor matches its declared source:
    /// embedding tables against `m_emb`, block tensors against `m_enc`.
    pub fn audit(&self, m_emb: &EncoderParams, m_enc: &EncoderParams) -> Result<(), AnalysisError> {
        let mut mismatch = None;
        self.params.visit(|name, tensor| {
            if mismatch.is_some() {
                return;
            }
            let from_emb = name == "token_embedding" || name == "position_embedding";
            let source = if from_emb { m_emb } else { m_enc };
            let mut found = false;
            source.visit(|src_name, src_tensor| {
                if src_name == name {
                    found = true;
                    if !bits_equal(&tensor.to_owned(), &src_tensor.to_owned()) {
                        mismatch = Some(name.to_string());
                    }
                }
            });
            if !found {
                mismatch = Some(name.to_string());
            }
        });
        match mismatch {
            Some(name) => Err(AnalysisError::ConfigMismatch(format!(
                "tensor '{name}' does not match its source"
            ))),
            None => Ok(()),
        }
    }
}

/// One embedded sample in the cluster dump.
#[derive(Debug, Clone)]
pub struct ClusterRow {
    pub sample_id: usize,
    pub model_id: String,
    pub is_poisoned: bool,
    pub vector: Array1<f64>,
}

/// Per-sample model-agreement statistics. "Within" pairs are the model
/// pairs expected to collapse into one cluster after an attack (the
/// clean model with the clean-encoder hybrid; the backdoored model with
/// the backdoored-encoder hybrid); "cross" spans the two groups.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    /// Mean cos(hybrid_emb(x), clean(x)) over backdoored x.
    pub within_clean_group: f64,
    /// Mean cos(hybrid_enc(x), backdoored(x)) over backdoored x.
    pub within_backdoored_group: f64,
    /// Mean cosine across the two groups on backdoored inputs.
    pub cross_group: f64,
    /// Smallest per-model-pair mean cosine on clean inputs.
    pub clean_pair_min: f64,
    /// Mean over all six model pairs on clean inputs.
    pub clean_pair_mean: f64,
    pub n_clean: usize,
    pub n_backdoored: usize,
}

fn unit(v: ArrayView1<f64>) -> Result<Array1<f64>, AnalysisError> {
    let norm = v.dot(&v).sqrt();
    if !norm.is_finite() {
        return Err(AnalysisError::NonFiniteInput);
    }
    if norm == 0.0 {
        return Err(AnalysisError::ZeroVector);
    }
    Ok(&v / norm)
}

/// Embeds `clean` and `backdoored` with all four model variants and
/// reports the group-agreement cosines. Model ids in the returned rows
/// are `clean`, `backdoored`, `hybrid-emb` (backdoored embeddings, clean
/// blocks) and `hybrid-enc` (clean embeddings, backdoored blocks).
pub fn embedding_clusters(
    clean_model: &EncoderParams,
    backdoored_model: &EncoderParams,
    hybrid_emb: &HybridModel,
    hybrid_enc: &HybridModel,
    clean: &[TextExample],
    backdoored: &[TextExample],
) -> Result<(Vec<ClusterRow>, ClusterReport), AnalysisError> {
    if clean.is_empty() || backdoored.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    if backdoored.iter().any(|x| !x.poisoned) {
        return Err(AnalysisError::ExpectedPoisoned);
    }
    let models: [(&str, &EncoderParams); 4] = [
        ("clean", clean_model),
        ("backdoored", backdoored_model),
        ("hybrid-emb", &hybrid_emb.params),
        ("hybrid-enc", &hybrid_enc.params),
    ];
    for (id, m) in &models[1..] {
        if m.config != clean_model.config {
            return Err(AnalysisError::ConfigMismatch(format!("model '{id}'")));
        }
    }

    let mut rows = Vec::new();
    // embeddings[m][i]: unit embedding of sample i under model m, clean
    // samples first.
    let mut clean_units: Vec<Vec<Array1<f64>>> = Vec::new();
    let mut bd_units: Vec<Vec<Array1<f64>>> = Vec::new();
    for (model_id, params) in &models {
        let mut cu = Vec::with_capacity(clean.len());
        for (i, x) in clean.iter().enumerate() {
            let (emb, _) = encode(params, x, None)?;
            rows.push(ClusterRow {
                sample_id: i,
                model_id: model_id.to_string(),
                is_poisoned: false,
                vector: emb.clone(),
            });
            cu.push(unit(emb.view())?);
        }
        clean_units.push(cu);
        let mut bu = Vec::with_capacity(backdoored.len());
        for (i, x) in backdoored.iter().enumerate() {
            let (emb, _) = encode(params, x, None)?;
            rows.push(ClusterRow {
                sample_id: i,
                model_id: model_id.to_string(),
                is_poisoned: true,
                vector: emb.clone(),
            });
            bu.push(unit(emb.view())?);
        }
        bd_units.push(bu);
    }

    let pair_mean = |a: &[Array1<f64>], b: &[Array1<f64>]| -> f64 {
        a.iter().zip(b).map(|(u, v)| u.dot(v)).sum::<f64>() / a.len() as f64
    };
    // Index map: 0 clean, 1 backdoored, 2 hybrid-emb, 3 hybrid-enc.
    let within_clean_group = pair_mean(&bd_units[2], &bd_units[0]);
    let within_backdoored_group = pair_mean(&bd_units[3], &bd_units[1]);
    let cross_pairs = [(2, 3), (2, 1), (0, 3), (0, 1)];
    let cross_group = cross_pairs
        .iter()
        .map(|&(a, b)| pair_mean(&bd_units[a], &bd_units[b]))
        .sum::<f64>()
        / cross_pairs.len() as f64;

    let mut clean_pair_min = f64::INFINITY;
    let mut clean_pair_sum = 0.0;
    let mut n_pairs = 0;
    for a in 0..4 {
        for b in (a + 1)..4 {
            let m = pair_mean(&clean_units[a], &clean_units[b]);
            clean_pair_min = clean_pair_min.min(m);
            clean_pair_sum += m;
            n_pairs += 1;
        }
    }

    let report = ClusterReport {
        within_clean_group,
        within_backdoored_group,
        cross_group,
        clean_pair_min,
        clean_pair_mean: clean_pair_sum / n_pairs as f64,
        n_clean: clean.len(),
        n_backdoored: backdoored.len(),
    };
    Ok((rows, report))
}

/// 2-d PCA output. `components` holds the two principal directions as
/// rows; `eigenvalues` are their covariance eigenvalues, and
/// `explained_ratio` divides by total variance.
#[derive(Debug, Clone)]
pub struct Projection {
    pub coords: Array2<f64>,
    pub components: Array2<f64>,
    pub eigenvalues: [f64; 2],
    pub explained_ratio: [f64; 2],
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors-as-columns), unsorted.
fn jacobi_eigen(matrix: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>), AnalysisError> {
    let d = matrix.nrows();
    let mut a = matrix.clone();
    let mut v = Array2::eye(d);
    let off = |a: &Array2<f64>| -> f64 {
        let mut s = 0.0;
        for p in 0..d {
            for q in 0..d {
                if p != q {
                    s += a[[p, q]] * a[[p, q]];
                }
            }
        }
        s
    };
    let scale: f64 = matrix.iter().map(|x| x * x).sum::<f64>().max(1e-300);
    for _sweep in 0..100 {
        if off(&a) <= 1e-24 * scale {
            return Ok((a.diag().to_owned(), v));
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let tau = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = a[[i, p]];
                    let aiq = a[[i, q]];
                    a[[i, p]] = c * aip - s * aiq;
                    a[[i, q]] = s * aip + c * aiq;
                }
                for j in 0..d {
                    let apj = a[[p, j]];
                    let aqj = a[[q, j]];
                    a[[p, j]] = c * apj - s * aqj;
                    a[[q, j]] = s * apj + c * aqj;
                }
                for i in 0..d {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    if off(&a) <= 1e-18 * scale {
        return Ok((a.diag().to_owned(), v));
    }
    Err(AnalysisError::NoConvergence)
}

/// Projects row vectors onto their top-2 principal components. The
/// decomposition is a deterministic Jacobi iteration; each component's
/// sign is fixed by making its largest-magnitude entry positive.
pub fn project_2d(data: ArrayView2<f64>) -> Result<Projection, AnalysisError> {
    let n = data.nrows();
    if n < 3 {
        return Err(AnalysisError::TooFewVectors { need: 3, found: n });
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(AnalysisError::NonFiniteInput);
    }
    let d = data.ncols();
    let mean = data.mean_axis(Axis(0)).expect("n >= 3");
    let centered = &data - &mean.broadcast((n, d)).expect("broadcast mean");
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let (eigenvalues, eigenvectors) = jacobi_eigen(&cov)?;

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        eigenvalues[j].partial_cmp(&eigenvalues[i]).expect("finite eigenvalues")
    });
    let total: f64 = eigenvalues.iter().map(|&e| e.max(0.0)).sum::<f64>().max(1e-300);

    let mut components = Array2::zeros((2, d));
    let mut top = [0.0; 2];
    for (slot, &idx) in order.iter().take(2).enumerate() {
        let mut component = eigenvectors.column(idx).to_owned();
        // Deterministic sign: largest-|entry| made positive.
        let mut lead = 0;
        for (i, x) in component.iter().enumerate() {
            if x.abs() > component[lead].abs() {
                lead = i;
            }
        }
        if component[lead] < 0.0 {
            component.mapv_inplace(|x| -x);
        }
        components.row_mut(slot).assign(&component);
        top[slot] = eigenvalues[idx];
    }
    let coords = centered.dot(&components.t());
    Ok(Projection {
        coords,
        components,
        eigenvalues: top,
        explained_ratio: [top[0].max(0.0) / total, top[1].max(0.0) / total],
    })
}

/// Writes the projection dump: one row per embedded sample with its 2-d
/// coordinates.
pub fn write_projection_tsv(
    path: &Path,
    rows: &[ClusterRow],
    coords: ArrayView2<f64>,
) -> Result<(), AnalysisError> {
    if rows.len() != coords.nrows() {
        return Err(AnalysisError::RowCount(rows.len(), coords.nrows()));
    }
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "sample_id\tmodel_id\tis_poisoned\tx\ty")?;
    for (row, coord) in rows.iter().zip(coords.rows()) {
        writeln!(
            file,
            "{}\t{}\t{}\t{:.6}\t{:.6}",
            row.sample_id,
            row.model_id,
            row.is_poisoned as u8,
            coord[0],
            coord[1]
        )?;
    }
    Ok(())
}

/// Mean attention, per layer and averaged over heads, that the `[CLS]`
/// position pays to the single trigger token of a sentence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub per_layer: Vec<f64>,
    /// Trigger index in the token sequence, before the `[CLS]` prepend.
    pub trigger_position: usize,
}

impl AttentionProfile {
    /// Mean over the second half of the layers.
    pub fn late_mean(&self) -> f64 {
        let start = self.per_layer.len() / 2;
        let tail = &self.per_layer[start..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

pub fn attention_profile(
    params: &EncoderParams,
    example: &TextExample,
    vocab: &Vocabulary,
) -> Result<AttentionProfile, AnalysisError> {
    let trigger_positions: Vec<usize> = example
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, &id)| vocab.is_trigger(id))
        .map(|(i, _)| i)
        .collect();
    if trigger_positions.len() != 1 {
        return Err(AnalysisError::TriggerCount { found: trigger_positions.len() });
    }
    let trigger_position = trigger_positions[0];
    let (_, record) = encode(params, example, None)?;
    // Column offset by one for the prepended [CLS]; row 0 is [CLS] itself.
    let col = trigger_position + 1;
    let per_layer = record
        .layers
        .iter()
        .map(|heads| {
            let n_heads = heads.shape()[0];
            (0..n_heads).map(|h| heads[[h, 0, col]]).sum::<f64>() / n_heads as f64
        })
        .collect();
    Ok(AttentionProfile { per_layer, trigger_position })
}
