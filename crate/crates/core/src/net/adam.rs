use serde::{Deserialize, Serialize};

use super::params::Params;
use crate::error::{MfmError, Result};
use crate::linalg::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(MfmError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    names: Vec<String>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<P: Params>(params: &P, config: AdamConfig) -> Self {
        let named = params.named();
        AdamState {
            config,
            step: 0,
            names: named.iter().map(|(n, _)| n.clone()).collect(),
            m: named.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: named.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update over every parameter.
pub fn adam_step<P: Params>(params: &mut P, grads: &P, state: &mut AdamState) -> Result<()> {
    adam_step_filtered(params, grads, state, &|_| true)
}

/// Adam update restricted to parameters whose name satisfies `trainable`.
/// Frozen parameters and their moments are left untouched.
pub fn adam_step_filtered<P: Params>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<()> {
    let gs = grads.named();
    if gs.len() != state.names.len() {
        return Err(MfmError::shape("gradient buffer does not match optimizer state"));
    }
    for ((name, g), (sname, m)) in gs.iter().zip(state.names.iter().zip(&state.m)) {
        if name != sname || g.shape() != m.shape() {
            return Err(MfmError::shape(format!(
                "gradient '{name}' {:?} does not match optimizer slot '{sname}' {:?}",
                g.shape(),
                m.shape()
            )));
        }
        if !g.is_finite() {
            return Err(MfmError::NonFinite(format!("gradient of '{name}'")));
        }
    }

    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    let ps = params.named_mut();
    for (((name, p), (_, g)), (m, v)) in ps
        .into_iter()
        .zip(gs)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if !trainable(&name) {
            continue;
        }
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
            vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
