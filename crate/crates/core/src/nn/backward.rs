//! Reverse-mode gradients through the taped forward pass.

use ndarray::{s, Array1, Array2, Axis};

use super::encoder::{gelu_prime, ForwardTape};
use super::{EncoderParams, Gradients};

/// Layer-norm backward. `dy` is the gradient at the LN output.
/// Returns (dx, dgamma, dbeta).
fn layer_norm_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    istd: &Array1<f64>,
    gamma: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let d = dy.ncols() as f64;
    let dgamma = (dy * xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dxhat = dy * gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let dxh = dxhat.row(r);
        let xh = xhat.row(r);
        let mean_dxh = dxh.sum() / d;
        let mean_dxh_xh = dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        let inv = istd[r];
        for c in 0..dy.ncols() {
            dx[[r, c]] = inv * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    (dx, dgamma, dbeta)
}

/// Softmax backward applied row-wise: ds = a * (da - sum(da * a)).
fn softmax_backward_rows(da: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
    let mut ds = Array2::zeros(da.raw_dim());
    for r in 0..da.nrows() {
        let dot: f64 = da.row(r).iter().zip(a.row(r).iter()).map(|(x, y)| x * y).sum();
        for c in 0..da.ncols() {
            ds[[r, c]] = a[[r, c]] * (da[[r, c]] - dot);
        }
    }
    ds
}

/// Backpropagates `d_output` (gradient at the final hidden states, T x d)
/// through the tape, accumulating parameter gradients into `grads`.
pub(crate) fn backward(
    params: &EncoderParams,
    tape: &ForwardTape,
    d_output: &Array2<f64>,
    grads: &mut Gradients,
) {
    let cfg = &params.config;
    let dh_dim = cfg.head_dim();
    let scale = 1.0 / (dh_dim as f64).sqrt();

    let mut d_h = d_output.clone();
    for (li, (lp, lt)) in params.layers.iter().zip(&tape.layers).enumerate().rev() {
        let prefix = format!("layer{li}");

        let (d_res2, dg2, db2_ln) = layer_norm_backward(&d_h, &lt.ln2_xhat, &lt.ln2_istd, &lp.ln2_gamma);
        grads.accumulate(&format!("{prefix}.ln2.gamma"), dg2.view().into_dyn());
        grads.accumulate(&format!("{prefix}.ln2.beta"), db2_ln.view().into_dyn());

        let mut d_ln1_out = d_res2.clone();
        let d_ffn_out = match &lt.ffn_mask {
            Some(m) => &d_res2 * m,
            None => d_res2,
        };
        grads.accumulate(
            &format!("{prefix}.ffn.w2"),
            lt.ffn_act.t().dot(&d_ffn_out).view().into_dyn(),
        );
        grads.accumulate(&format!("{prefix}.ffn.b2"), d_ffn_out.sum_axis(Axis(0)).view().into_dyn());
        let d_act = d_ffn_out.dot(&lp.w2.t());
        let d_pre = &d_act * &lt.ffn_pre.mapv(gelu_prime);
        grads.accumulate(
            &format!("{prefix}.ffn.w1"),
            lt.ln1_out.t().dot(&d_pre).view().into_dyn(),
        );
        grads.accumulate(&format!("{prefix}.ffn.b1"), d_pre.sum_axis(Axis(0)).view().into_dyn());
        d_ln1_out += &d_pre.dot(&lp.w1.t());

        let (d_res1, dg1, db1_ln) =
            layer_norm_backward(&d_ln1_out, &lt.ln1_xhat, &lt.ln1_istd, &lp.ln1_gamma);
        grads.accumulate(&format!("{prefix}.ln1.gamma"), dg1.view().into_dyn());
        grads.accumulate(&format!("{prefix}.ln1.beta"), db1_ln.view().into_dyn());

        let mut d_input = d_res1.clone();
        let d_attn_proj = match &lt.attn_mask {
            Some(m) => &d_res1 * m,
            None => d_res1,
        };
        grads.accumulate(
            &format!("{prefix}.attn.wo"),
            lt.ctx.t().dot(&d_attn_proj).view().into_dyn(),
        );
        grads.accumulate(
            &format!("{prefix}.attn.bo"),
            d_attn_proj.sum_axis(Axis(0)).view().into_dyn(),
        );
        let d_ctx = d_attn_proj.dot(&lp.wo.t());

        let t_len = d_ctx.nrows();
        let mut d_q = Array2::zeros((t_len, cfg.d_model));
        let mut d_k = Array2::zeros((t_len, cfg.d_model));
        let mut d_v = Array2::zeros((t_len, cfg.d_model));
        for head in 0..cfg.n_heads {
            let cols = head * dh_dim..(head + 1) * dh_dim;
            let d_ctx_h = d_ctx.slice(s![.., cols.clone()]).to_owned();
            let a = lt.attn.slice(s![head, .., ..]).to_owned();
            let vh = lt.v.slice(s![.., cols.clone()]).to_owned();
            let qh = lt.q.slice(s![.., cols.clone()]).to_owned();
            let kh = lt.k.slice(s![.., cols.clone()]).to_owned();

            let d_a = d_ctx_h.dot(&vh.t());
            let d_vh = a.t().dot(&d_ctx_h);
            let mut d_s = softmax_backward_rows(&d_a, &a);
            d_s.mapv_inplace(|x| x * scale);
            let d_qh = d_s.dot(&kh);
            let d_kh = d_s.t().dot(&qh);

            d_q.slice_mut(s![.., cols.clone()]).assign(&d_qh);
            d_k.slice_mut(s![.., cols.clone()]).assign(&d_kh);
            d_v.slice_mut(s![.., cols]).assign(&d_vh);
        }

        for (tag, d_mat, w) in
            [("q", &d_q, &lp.wq), ("k", &d_k, &lp.wk), ("v", &d_v, &lp.wv)]
        {
            grads.accumulate(
                &format!("{prefix}.attn.w{tag}"),
                lt.input.t().dot(d_mat).view().into_dyn(),
            );
            grads.accumulate(
                &format!("{prefix}.attn.b{tag}"),
                d_mat.sum_axis(Axis(0)).view().into_dyn(),
            );
            d_input += &d_mat.dot(&w.t());
        }

        d_h = d_input;
    }

    let d_emb = match &tape.emb_mask {
        Some(m) => &d_h * m,
        None => d_h,
    };
    let mut d_token = Array2::zeros(params.token_embedding.raw_dim());
    let mut d_position = Array2::zeros(params.position_embedding.raw_dim());
    for (pos, &tok) in tape.tokens_with_cls.iter().enumerate() {
        let row = d_emb.row(pos);
        d_token.row_mut(tok).zip_mut_with(&row, |a, b| *a += b);
        d_position.row_mut(pos).zip_mut_with(&row, |a, b| *a += b);
    }
    grads.accumulate("token_embedding", d_token.view().into_dyn());
    grads.accumulate("position_embedding", d_position.view().into_dyn());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::encoder::forward;
    use crate::nn::{DropoutMask, EncoderConfig};
    use ndarray::ArrayD;
    use rand::Rng;

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

    /// Scalar probe loss: sum of output hidden states weighted by a fixed
    /// random matrix. Its gradient at the output is the matrix itself.
    fn probe_loss(
        params: &EncoderParams,
        tokens: &[usize],
        mask: Option<&DropoutMask>,
        weights: &Array2<f64>,
    ) -> f64 {
        let tape = forward(params, tokens, mask).unwrap();
        (&tape.output * weights).sum()
    }

    fn finite_difference_check(mask: Option<DropoutMask>) {
        let cfg = micro_config(9);
        let params = EncoderParams::init(&cfg, 12).unwrap();
        let tokens = [3, 7, 4, 5];
        let t_len = tokens.len() + 1;
        let mut rng = crate::rng::rng_for(99, "probe-weights");
        let weights = Array2::from_shape_simple_fn((t_len, cfg.d_model), || rng.gen::<f64>() - 0.5);

        let tape = forward(&params, &tokens, mask.as_ref()).unwrap();
        let mut grads = Gradients::new();
        backward(&params, &tape, &weights, &mut grads);

        let h = 1e-5;
        let names = params.tensor_names();
        for name in names {
            let analytic: ArrayD<f64> = grads.get(&name).unwrap().clone();
            let n = analytic.len();
            let stride = (n / 7).max(1);
            for flat in (0..n).step_by(stride) {
                let mut plus = params.clone();
                plus.visit_mut(|nm, mut v| {
                    if nm == name {
                        *v.iter_mut().nth(flat).unwrap() += h;
                    }
                });
                let mut minus = params.clone();
                minus.visit_mut(|nm, mut v| {
                    if nm == name {
                        *v.iter_mut().nth(flat).unwrap() -= h;
                    }
                });
                let fd = (probe_loss(&plus, &tokens, mask.as_ref(), &weights)
                    - probe_loss(&minus, &tokens, mask.as_ref(), &weights))
                    / (2.0 * h);
                let an = *analytic.iter().nth(flat).unwrap();
                let abs_err = (fd - an).abs();
                let rel_err = abs_err / an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    abs_err < 1e-8 || rel_err < 1e-5,
                    "{name}[{flat}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_eval_mode() {
        finite_difference_check(None);
    }

    #[test]
    fn gradients_match_finite_differences_with_dropout() {
        finite_difference_check(Some(DropoutMask { seed: 21, pass_index: 3 }));
    }

    #[test]
    fn repeated_token_accumulates_embedding_gradient() {
        let cfg = micro_config(9);
        let params = EncoderParams::init(&cfg, 1).unwrap();
        let tape = forward(&params, &[3, 3, 3], None).unwrap();
        let d_out = Array2::ones((4, cfg.d_model));
        let mut grads = Gradients::new();
        backward(&params, &tape, &d_out, &mut grads);
        let g = grads.get("token_embedding").unwrap();
        let row3: f64 = g.slice(s![3, ..]).iter().map(|x| x.abs()).sum();
        assert!(row3 > 0.0);
        let row8: f64 = g.slice(s![8, ..]).iter().map(|x| x.abs()).sum();
        assert_eq!(row8, 0.0, "untouched token must have zero gradient");
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = ndarray::arr2(&[[0.3, -1.2, 0.7, 2.0], [1.0, 1.1, -0.4, 0.0]]);
        let gamma = ndarray::arr1(&[1.1, 0.9, 1.2, 0.8]);
        let beta = ndarray::arr1(&[0.1, -0.2, 0.0, 0.3]);
        let dy = ndarray::arr2(&[[0.5, -0.3, 0.2, 0.9], [-0.1, 0.4, 0.8, -0.6]]);

        let (out0, xhat, istd) = crate::nn::encoder::layer_norm(&x, &gamma, &beta);
        let loss0 = (&out0 * &dy).sum();
        let (dx, dgamma, dbeta) = layer_norm_backward(&dy, &xhat, &istd, &gamma);

        let h = 1e-6;
        for r in 0..2 {
            for c in 0..4 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let (outp, _, _) = crate::nn::encoder::layer_norm(&xp, &gamma, &beta);
                let fd = ((&outp * &dy).sum() - loss0) / h;
                assert!((fd - dx[[r, c]]).abs() < 1e-4, "dx[{r},{c}] {fd} vs {}", dx[[r, c]]);
            }
        }
        for c in 0..4 {
            let mut gp = gamma.clone();
            gp[c] += h;
            let (outp, _, _) = crate::nn::encoder::layer_norm(&x, &gp, &beta);
            let fd = ((&outp * &dy).sum() - loss0) / h;
            assert!((fd - dgamma[c]).abs() < 1e-4);
            let mut bp = beta.clone();
            bp[c] += h;
            let (outp, _, _) = crate::nn::encoder::layer_norm(&x, &gamma, &bp);
            let fd = ((&outp * &dy).sum() - loss0) / h;
            assert!((fd - dbeta[c]).abs() < 1e-4);
        }
    }
}
