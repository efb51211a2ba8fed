//! Forward pass.
//!
//! Post-layer-norm transformer blocks:
//!   h -> attention -> dropout -> +h -> LN1 -> FFN(GELU) -> dropout -> + -> LN2
//! The tape stores every intermediate needed for the backward pass, plus
//! per-head attention matrices for inspection.

use ndarray::{s, Array1, Array2, Array3};

use crate::corpus::TextExample;

use super::{materialize_masks, DropoutMask, EmbeddingVector, EncoderParams, NnError, LN_EPS};

/// Softmax attention weights per layer, shape (heads, T, T); rows sum to 1.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layers: Vec<Array3<f64>>,
}

pub(crate) struct LayerTape {
    pub input: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub attn: Array3<f64>,
    pub ctx: Array2<f64>,
    pub attn_mask: Option<Array2<f64>>,
    pub ln1_out: Array2<f64>,
    pub ln1_xhat: Array2<f64>,
    pub ln1_istd: Array1<f64>,
    pub ffn_pre: Array2<f64>,
    pub ffn_act: Array2<f64>,
    pub ffn_mask: Option<Array2<f64>>,
    pub ln2_xhat: Array2<f64>,
    pub ln2_istd: Array1<f64>,
}

pub(crate) struct ForwardTape {
    pub tokens_with_cls: Vec<usize>,
    pub emb_mask: Option<Array2<f64>>,
    pub layers: Vec<LayerTape>,
    pub output: Array2<f64>,
}

impl ForwardTape {
    pub fn cls_embedding(&self) -> EmbeddingVector {
        self.output.row(0).to_owned()
    }

    pub fn attention_record(&self) -> AttentionRecord {
        AttentionRecord { layers: self.layers.iter().map(|l| l.attn.clone()).collect() }
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Layer norm over the feature axis; returns (out, xhat, inverse std).
pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let t = x.nrows();
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut istd = Array1::zeros(t);
    for r in 0..t {
        let row = x.row(r);
        let mean = row.sum() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        istd[r] = inv;
        for c in 0..x.ncols() {
            xhat[[r, c]] = (x[[r, c]] - mean) * inv;
        }
    }
    let out = &xhat * gamma + beta;
    (out, xhat, istd)
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

/// Runs the encoder over `tokens` (without `[CLS]`; it is prepended here).
/// `mask: None` is evaluation mode (no dropout).
pub(crate) fn forward(
    params: &EncoderParams,
    tokens: &[usize],
    mask: Option<&DropoutMask>,
) -> Result<ForwardTape, NnError> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(NnError::EmptySequence);
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(NnError::SequenceTooLong { len: tokens.len(), max: cfg.max_seq_len });
    }
    for &id in tokens {
        if id >= cfg.vocab_size {
            return Err(NnError::VocabMismatch { id, vocab_size: cfg.vocab_size });
        }
    }

    let mut tokens_with_cls = Vec::with_capacity(tokens.len() + 1);
    tokens_with_cls.push(crate::corpus::CLS_ID);
    tokens_with_cls.extend_from_slice(tokens);
    let t_len = tokens_with_cls.len();
    let d = cfg.d_model;
    let dh = cfg.head_dim();

    let masks = mask.map(|m| materialize_masks(cfg, t_len, m));

    let mut h = Array2::zeros((t_len, d));
    for (pos, &tok) in tokens_with_cls.iter().enumerate() {
        let row = &params.token_embedding.row(tok) + &params.position_embedding.row(pos);
        h.row_mut(pos).assign(&row);
    }
    let emb_mask = masks.as_ref().map(|m| m.emb.clone());
    if let Some(m) = &emb_mask {
        h *= m;
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, lp) in params.layers.iter().enumerate() {
        let input = h.clone();
        let q = input.dot(&lp.wq) + &lp.bq;
        let k = input.dot(&lp.wk) + &lp.bk;
        let v = input.dot(&lp.wv) + &lp.bv;

        let mut attn = Array3::zeros((cfg.n_heads, t_len, t_len));
        let mut ctx = Array2::zeros((t_len, d));
        let scale = 1.0 / (dh as f64).sqrt();
        for head in 0..cfg.n_heads {
            let cols = head * dh..(head + 1) * dh;
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k.slice(s![.., cols.clone()]);
            let vh = v.slice(s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|x| x * scale);
            softmax_rows(&mut scores);
            let ctx_h = scores.dot(&vh);
            ctx.slice_mut(s![.., cols]).assign(&ctx_h);
            attn.slice_mut(s![head, .., ..]).assign(&scores);
        }

        let attn_proj = ctx.dot(&lp.wo) + &lp.bo;
        let attn_mask = masks.as_ref().map(|m| m.attn[li].clone());
        let attn_dropped = match &attn_mask {
            Some(m) => &attn_proj * m,
            None => attn_proj,
        };
        let res1 = &input + &attn_dropped;
        let (ln1_out, ln1_xhat, ln1_istd) = layer_norm(&res1, &lp.ln1_gamma, &lp.ln1_beta);

        let ffn_pre = ln1_out.dot(&lp.w1) + &lp.b1;
        let ffn_act = ffn_pre.mapv(gelu);
        let ffn_out = ffn_act.dot(&lp.w2) + &lp.b2;
        let ffn_mask = masks.as_ref().map(|m| m.ffn[li].clone());
        let ffn_dropped = match &ffn_mask {
            Some(m) => &ffn_out * m,
            None => ffn_out,
        };
        let res2 = &ln1_out + &ffn_dropped;
        let (ln2_out, ln2_xhat, ln2_istd) = layer_norm(&res2, &lp.ln2_gamma, &lp.ln2_beta);

        layers.push(LayerTape {
            input,
            q,
            k,
            v,
            attn,
            ctx,
            attn_mask,
            ln1_out,
            ln1_xhat,
            ln1_istd,
            ffn_pre,
            ffn_act,
            ffn_mask,
            ln2_xhat,
            ln2_istd,
        });
        h = ln2_out;
    }

    Ok(ForwardTape { tokens_with_cls, emb_mask, layers, output: h })
}

/// Encodes a sentence to its embedding and per-layer attention maps.
/// `mask: None` disables dropout (evaluation mode).
pub fn encode(
    params: &EncoderParams,
    example: &TextExample,
    mask: Option<&DropoutMask>,
) -> Result<(EmbeddingVector, AttentionRecord), NnError> {
    let tape = forward(params, &example.tokens, mask)?;
    Ok((tape.cls_embedding(), tape.attention_record()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use crate::corpus::Vocabulary;
    use crate::nn::EncoderConfig;

    fn micro_config(vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: 4,
            n_layers: 2,
            n_heads: 2,
            d_ff: 8,
            dropout_rate: 0.1,
            max_seq_len: 16,
        }
    }

    fn example(tokens: &[usize]) -> TextExample {
        TextExample { tokens: tokens.to_vec(), raw: String::new(), poisoned: false, truncated: false }
    }

    #[test]
    fn eval_mode_is_deterministic_and_finite() {
        let cfg = micro_config(10);
        let p = EncoderParams::init(&cfg, 1).unwrap();
        let ex = example(&[3, 4, 5, 6]);
        let (e1, a1) = encode(&p, &ex, None).unwrap();
        let (e2, _) = encode(&p, &ex, None).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.len(), cfg.d_model);
        assert!(e1.iter().all(|x| x.is_finite()));
        assert_eq!(a1.layers.len(), cfg.n_layers);
        assert_eq!(a1.layers[0].dim(), (cfg.n_heads, 5, 5));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = micro_config(10);
        let p = EncoderParams::init(&cfg, 2).unwrap();
        let (_, record) = encode(&p, &example(&[3, 4, 5, 6, 7]), None).unwrap();
        for layer in &record.layers {
            for head in 0..layer.dim().0 {
                for row in 0..layer.dim().1 {
                    let sum: f64 = layer.slice(s![head, row, ..]).sum();
                    assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
                }
            }
        }
    }

    #[test]
    fn uniform_attention_when_query_key_weights_are_zero() {
        let cfg = micro_config(10);
        let mut p = EncoderParams::init(&cfg, 3).unwrap();
        for l in &mut p.layers {
            l.wq.fill(0.0);
            l.bq.fill(0.0);
            l.wk.fill(0.0);
            l.bk.fill(0.0);
        }
        let tokens = [3, 4, 5, 6, 7, 3];
        let (_, record) = encode(&p, &example(&tokens), None).unwrap();
        let expect = 1.0 / (tokens.len() + 1) as f64;
        for layer in &record.layers {
            for &w in layer.iter() {
                assert!((w - expect).abs() < 1e-12, "weight {w} != uniform {expect}");
            }
        }
    }

    #[test]
    fn same_mask_reproduces_dropout_forward() {
        let cfg = micro_config(10);
        let p = EncoderParams::init(&cfg, 4).unwrap();
        let ex = example(&[3, 4, 5]);
        let m = DropoutMask { seed: 11, pass_index: 0 };
        let (e1, _) = encode(&p, &ex, Some(&m)).unwrap();
        let (e2, _) = encode(&p, &ex, Some(&m)).unwrap();
        assert_eq!(e1, e2);
        let (e3, _) = encode(&p, &ex, Some(&DropoutMask { seed: 11, pass_index: 1 })).unwrap();
        assert_ne!(e1, e3);
        let (e4, _) = encode(&p, &ex, None).unwrap();
        assert_ne!(e1, e4);
    }

    #[test]
    fn sequence_length_and_vocab_guards() {
        let cfg = micro_config(10);
        let p = EncoderParams::init(&cfg, 5).unwrap();
        let long = example(&[3; 17]);
        assert!(matches!(
            encode(&p, &long, None),
            Err(NnError::SequenceTooLong { len: 17, max: 16 })
        ));
        let bad = example(&[3, 99]);
        assert!(matches!(
            encode(&p, &bad, None),
            Err(NnError::VocabMismatch { id: 99, vocab_size: 10 })
        ));
        assert!(matches!(encode(&p, &example(&[]), None), Err(NnError::EmptySequence)));
    }

    #[test]
    fn exact_max_length_accepted() {
        let cfg = micro_config(10);
        let p = EncoderParams::init(&cfg, 6).unwrap();
        let ex = example(&[3; 16]);
        let (e, _) = encode(&p, &ex, None).unwrap();
        assert!(e.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn tokenized_sentence_encodes() {
        let lines: Vec<String> = vec!["fun for adults and children".into()];
        let vocab = Vocabulary::build(&lines, &["cf".to_string()]).unwrap();
        let mut cfg = micro_config(vocab.size());
        cfg.max_seq_len = 64;
        let p = EncoderParams::init(&cfg, 7).unwrap();
        let ex = tokenize("fun for children", &vocab, cfg.max_seq_len).unwrap();
        let (e, _) = encode(&p, &ex, None).unwrap();
        assert_eq!(e.len(), cfg.d_model);
    }

    #[test]
    fn gelu_matches_reference_values() {
        assert!((gelu(0.0)).abs() < 1e-15);
        assert!((gelu(1.0) - 0.8411919906082768).abs() < 1e-12);
        assert!((gelu(-1.0) + 0.15880800939172324).abs() < 1e-12);
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_prime(x)).abs() < 1e-8, "gelu'({x})");
        }
    }

    #[test]
    fn layer_norm_rows_are_normalized() {
        let x = ndarray::arr2(&[[1.0, 2.0, 3.0, 4.0], [-5.0, 0.0, 5.0, 10.0]]);
        let gamma = Array1::ones(4);
        let beta = Array1::zeros(4);
        let (out, _, _) = layer_norm(&x, &gamma, &beta);
        for row in out.rows() {
            let mean = row.sum() / 4.0;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
