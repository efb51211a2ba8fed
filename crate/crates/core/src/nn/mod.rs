//! Tiny transformer sentence encoder with hand-written backprop.
//!
//! All arithmetic is f64 in memory; checkpoints quantize to little-endian
//! f32 on disk. A `[CLS]` token is prepended at encode time and its final
//! hidden state is the sentence embedding. Dropout is driven by an explicit
//! mask descriptor so any forward pass can be replayed exactly.

mod adam;
mod backward;
mod checkpoint;
mod encoder;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use encoder::{encode, AttentionRecord};
pub(crate) use backward::backward as backward_tape;
pub(crate) use checkpoint::{read_container, write_container, KIND_HEAD};
pub(crate) use encoder::{forward, ForwardTape};

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng_for;

/// Epsilon inside layer-norm variance.
pub(crate) const LN_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    VocabMismatch { id: usize, vocab_size: usize },
    #[error("non-finite gradient in tensor '{0}'")]
    NonFiniteGradient(String),
    #[error("unknown gradient tensor '{0}'")]
    UnknownTensor(String),
    #[error("invalid learning rate {0}")]
    InvalidLearningRate(f64),
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("shape mismatch for tensor '{tensor}': expected {expected:?}, found {found:?}")]
    ShapeMismatch { tensor: String, expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
    pub max_seq_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            dropout_rate: 0.1,
            max_seq_len: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.vocab_size < 3 {
            return Err(NnError::InvalidConfig("vocab_size must cover the special tokens".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(NnError::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(NnError::InvalidConfig("n_layers, d_ff, max_seq_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnError::InvalidConfig(format!(
                "dropout_rate {} must lie in [0,1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
}

/// Full parameter set. Tensors are addressable by stable names
/// (`token_embedding`, `layer0.attn.wq`, `layer1.ln2.gamma`, ...) in a
/// canonical visit order used by the optimizer and gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

/// Quantizes through f32 so in-memory values round-trip checkpoints exactly.
fn f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

impl EncoderParams {
    /// Fresh parameters: Xavier-style normal init for matrices, zeros for
    /// biases, ones for layer-norm gains. Values are drawn on the f32 grid
    /// so a fresh model survives a checkpoint round-trip bit-exactly.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = rng_for(seed, "init");
        let d = config.d_model;

        let mut draw_matrix = |rows: usize, cols: usize, std: f64| -> Array2<f64> {
            let dist = Normal::new(0.0, std).expect("valid std");
            Array2::from_shape_simple_fn((rows, cols), || f32_grid(dist.sample(&mut rng)))
        };

        let token_embedding = draw_matrix(config.vocab_size, d, 0.1);
        let position_embedding = draw_matrix(config.max_seq_len + 1, d, 0.1);
        let proj_std = (2.0 / (2.0 * d as f64)).sqrt();
        let ffn1_std = (2.0 / (d + config.d_ff) as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                wq: draw_matrix(d, d, proj_std),
                bq: Array1::zeros(d),
                wk: draw_matrix(d, d, proj_std),
                bk: Array1::zeros(d),
                wv: draw_matrix(d, d, proj_std),
                bv: Array1::zeros(d),
                wo: draw_matrix(d, d, proj_std),
                bo: Array1::zeros(d),
                w1: draw_matrix(d, config.d_ff, ffn1_std),
                b1: Array1::zeros(config.d_ff),
                w2: draw_matrix(config.d_ff, d, ffn1_std),
                b2: Array1::zeros(d),
                ln1_gamma: Array1::ones(d),
                ln1_beta: Array1::zeros(d),
                ln2_gamma: Array1::ones(d),
                ln2_beta: Array1::zeros(d),
            })
            .collect();

        Ok(Self { config: config.clone(), token_embedding, position_embedding, layers })
    }

    /// Visits every tensor as (name, view) in canonical order.
    pub fn visit<F: FnMut(&str, ArrayViewD<'_, f64>)>(&self, mut f: F) {
        f("token_embedding", self.token_embedding.view().into_dyn());
        f("position_embedding", self.position_embedding.view().into_dyn());
        for (i, l) in self.layers.iter().enumerate() {
            let pairs: [(&str, ArrayViewD<'_, f64>); 16] = [
                ("attn.wq", l.wq.view().into_dyn()),
                ("attn.bq", l.bq.view().into_dyn()),
                ("attn.wk", l.wk.view().into_dyn()),
                ("attn.bk", l.bk.view().into_dyn()),
                ("attn.wv", l.wv.view().into_dyn()),
                ("attn.bv", l.bv.view().into_dyn()),
                ("attn.wo", l.wo.view().into_dyn()),
                ("attn.bo", l.bo.view().into_dyn()),
                ("ffn.w1", l.w1.view().into_dyn()),
                ("ffn.b1", l.b1.view().into_dyn()),
                ("ffn.w2", l.w2.view().into_dyn()),
                ("ffn.b2", l.b2.view().into_dyn()),
                ("ln1.gamma", l.ln1_gamma.view().into_dyn()),
                ("ln1.beta", l.ln1_beta.view().into_dyn()),
                ("ln2.gamma", l.ln2_gamma.view().into_dyn()),
                ("ln2.beta", l.ln2_beta.view().into_dyn()),
            ];
            for (suffix, view) in pairs {
                f(&format!("layer{i}.{suffix}"), view);
            }
        }
    }

    /// Mutable variant of [`visit`](Self::visit), same order.
    pub fn visit_mut<F: FnMut(&str, ArrayViewMutD<'_, f64>)>(&mut self, mut f: F) {
        f("token_embedding", self.token_embedding.view_mut().into_dyn());
        f("position_embedding", self.position_embedding.view_mut().into_dyn());
        for (i, l) in self.layers.iter_mut().enumerate() {
            let pairs: [(&str, ArrayViewMutD<'_, f64>); 16] = [
                ("attn.wq", l.wq.view_mut().into_dyn()),
                ("attn.bq", l.bq.view_mut().into_dyn()),
                ("attn.wk", l.wk.view_mut().into_dyn()),
                ("attn.bk", l.bk.view_mut().into_dyn()),
                ("attn.wv", l.wv.view_mut().into_dyn()),
                ("attn.bv", l.bv.view_mut().into_dyn()),
                ("attn.wo", l.wo.view_mut().into_dyn()),
                ("attn.bo", l.bo.view_mut().into_dyn()),
                ("ffn.w1", l.w1.view_mut().into_dyn()),
                ("ffn.b1", l.b1.view_mut().into_dyn()),
                ("ffn.w2", l.w2.view_mut().into_dyn()),
                ("ffn.b2", l.b2.view_mut().into_dyn()),
                ("ln1.gamma", l.ln1_gamma.view_mut().into_dyn()),
                ("ln1.beta", l.ln1_beta.view_mut().into_dyn()),
                ("ln2.gamma", l.ln2_gamma.view_mut().into_dyn()),
                ("ln2.beta", l.ln2_beta.view_mut().into_dyn()),
            ];
            for (suffix, view) in pairs {
                f(&format!("layer{i}.{suffix}"), view);
            }
        }
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(|name, _| names.push(name.to_string()));
        names
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, v| n += v.len());
        n
    }

    /// Rounds every parameter to the f32 grid, matching what a checkpoint
    /// round-trip would produce.
    pub fn quantize_f32(&mut self) {
        self.visit_mut(|_, mut v| v.mapv_inplace(f32_grid));
    }
}

/// Named gradient accumulator keyed by tensor name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, name: &str, grad: ArrayViewD<'_, f64>) {
        match self.map.get_mut(name) {
            Some(acc) => *acc += &grad,
            None => {
                self.map.insert(name.to_string(), grad.to_owned());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Scales every gradient in place (used for batch averaging).
    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    /// Errors with the first offending tensor name if any entry is NaN or
    /// infinite.
    pub fn check_finite(&self) -> Result<(), NnError> {
        for (name, g) in &self.map {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(NnError::NonFiniteGradient(name.clone()));
            }
        }
        Ok(())
    }
}

/// Descriptor for a reproducible dropout pattern. The same (seed,
/// pass_index) pair always produces the same masks; different pass indices
/// give independent masks, which is how unsupervised positives are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutMask {
    pub seed: u64,
    pub pass_index: u64,
}

/// Materialized inverted-dropout scale matrices (entries 0 or 1/(1-rate)),
/// one per dropout site.
pub(crate) struct MaskSet {
    pub emb: Array2<f64>,
    pub attn: Vec<Array2<f64>>,
    pub ffn: Vec<Array2<f64>>,
}

pub(crate) fn materialize_masks(config: &EncoderConfig, t_len: usize, mask: &DropoutMask) -> MaskSet {
    let rate = config.dropout_rate;
    let d = config.d_model;
    let site = |name: &str| -> Array2<f64> {
        if rate == 0.0 {
            return Array2::ones((t_len, d));
        }
        let stream = format!("dropout.pass{}.{}", mask.pass_index, name);
        let mut rng = rng_for(mask.seed, &stream);
        let keep = 1.0 / (1.0 - rate);
        Array2::from_shape_simple_fn((t_len, d), || {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
    };
    let emb = site("emb");
    let attn = (0..config.n_layers).map(|i| site(&format!("layer{i}.attn"))).collect();
    let ffn = (0..config.n_layers).map(|i| site(&format!("layer{i}.ffn"))).collect();
    MaskSet { emb, attn, ffn }
}

/// Sentence embedding: the final-layer `[CLS]` hidden state.
pub type EmbeddingVector = Array1<f64>;
