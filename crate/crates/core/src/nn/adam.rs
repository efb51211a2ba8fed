//! Adam optimizer over named tensors.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::{EncoderParams, Gradients, NnError};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First/second moment estimates keyed by tensor name; lazily initialized
/// to zeros on first use.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update. Tensors without a gradient entry are left untouched.
pub fn adam_step(
    params: &mut EncoderParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), NnError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(NnError::InvalidLearningRate(lr));
    }
    grads.check_finite()?;
    let names = params.tensor_names();
    for (name, _) in grads.iter() {
        if !names.iter().any(|n| n == name) {
            return Err(NnError::UnknownTensor(name.clone()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - BETA1.powi(t);
    let bias2 = 1.0 - BETA2.powi(t);

    params.visit_mut(|name, mut tensor| {
        let g = match grads.get(name) {
            Some(g) => g,
            None => return,
        };
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
        for ((p, &gi), (mi, vi)) in
            tensor.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    });
    Ok(())
}
