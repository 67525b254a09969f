use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::DecayMode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
}

/// First and second moments per parameter name, plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

/// One bias-corrected Adam update of every `(name, parameter, decays)`
/// entry. Moments are created lazily as zeros.
pub fn adam_step<'p>(
    params: impl IntoIterator<Item = (&'p str, &'p mut Tensor<f32>, bool)>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let step = state.t + 1;
    let lr = match cfg.decay_mode {
        DecayMode::Weight => cfg.lr,
        DecayMode::Lr => cfg.lr / (1.0 + cfg.weight_decay * state.t as f64),
    };
    let shrink = match cfg.decay_mode {
        DecayMode::Weight => lr * cfg.weight_decay,
        DecayMode::Lr => 0.0,
    };
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);

    // Validate everything before touching any state.
    let mut work = Vec::new();
    for (name, param, decays) in params {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::State(format!("no gradient for parameter {name}")))?;
        if g.shape() != param.shape() {
            return Err(Error::State(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                param.shape()
            )));
        }
        for moments in [&state.m, &state.v] {
            if let Some(t) = moments.get(name) {
                if t.shape() != param.shape() {
                    return Err(Error::State(format!(
                        "optimizer moment for {name} has shape {:?}, parameter {:?}",
                        t.shape(),
                        param.shape()
                    )));
                }
            }
        }
        work.push((name, param, decays, g));
    }

    for (name, param, decays, g) in work {
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let decay = if decays { shrink } else { 0.0 };
        for (((p, &gi), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi as f64;
            let m_new = cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * gi;
            let v_new = cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * gi * gi;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            let theta = *p as f64;
            *p = (theta - lr * m_hat / (v_hat.sqrt() + cfg.eps) - decay * theta) as f32;
        }
        if !param.is_finite() {
            return Err(Error::NonFinite { op: "adam_step" });
        }
    }
    state.t = step;
    Ok(())
}
