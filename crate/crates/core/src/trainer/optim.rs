use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{Real, Tensor};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn validate(&self) -> Result<()> {
        let beta = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0) || !beta(self.beta1) || !beta(self.beta2) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments, aligned with the parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<S: Real = f32> {
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Real> OptimState<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        OptimState { step: 0, m: zeros(), v: zeros() }
    }
}

/// One decoupled-weight-decay Adam step:
/// `θ ← θ − lr·(m̂/(√v̂ + eps) + wd·θ)` with bias-corrected moments.
pub fn adamw_step<S: Real>(params: &mut ModelParams<S>, grads: &[Tensor<S>], state: &mut OptimState<S>, h: &AdamW) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adamw_step", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let g = gv.to_f64();
            let m1 = h.beta1 * mv.to_f64() + (1.0 - h.beta1) * g;
            let v1 = h.beta2 * vv.to_f64() + (1.0 - h.beta2) * g * g;
            *mv = S::from_f64(m1);
            *vv = S::from_f64(v1);
            let (m_hat, v_hat) = (m1 / c1, v1 / c2);
            let theta = pv.to_f64();
            *pv = S::from_f64(theta - h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * theta));
        }
    }
    Ok(())
}
