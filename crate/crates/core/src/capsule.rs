//! Capsule clustering stream: primary capsules, routing by agreement, and
//! the projection of routed capsules back to a latent feature map.
//!
//! Internally the routing tensors are laid out parents-first:
//! predictions `[γ, β, C_Û, H_U, W_U]`, logits and couplings `[γ, β, H_U, W_U]`.
//! [`CapsuleState`] reports them in children-first order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ReduceKind, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsuleConfig {
    /// Input (primary) capsules β.
    pub beta: usize,
    /// Parent capsules γ.
    pub gamma: usize,
    /// Primary capsule dimension C_U.
    pub c_u: usize,
    /// Prediction dimension C_Û.
    pub c_u_hat: usize,
    /// Primary conv kernel; the grid is `latent - kernel + 1` per side.
    pub kernel: usize,
    pub routing_iters: usize,
}

impl Default for CapsuleConfig {
    fn default() -> Self {
        CapsuleConfig { beta: 32, gamma: 32, c_u: 16, c_u_hat: 16, kernel: 8, routing_iters: 3 }
    }
}

impl CapsuleConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.beta, self.gamma, self.c_u, self.c_u_hat, self.kernel, self.routing_iters];
        if dims.contains(&0) {
            return Err(Error::Config(format!("capsule dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Side of the capsule grid for a latent of side `latent`.
    pub fn grid(&self, latent: usize) -> Option<usize> {
        latent.checked_sub(self.kernel).map(|g| g + 1)
    }
}

/// Tape handles of the capsule parameters.
#[derive(Clone, Copy, Debug)]
pub struct CapsuleVars {
    /// `[β·C_U, C_X, k, k]`: the β primary convolutions stacked.
    pub primary_w: Var,
    pub primary_b: Var,
    /// `[β, γ, C_Û, C_U]`, shared over grid locations.
    pub w: Var,
    /// Transposed-conv projection `[β, C_X, k, k]`.
    pub proj_w: Var,
    pub proj_b: Var,
}

/// Plain snapshot of one forward pass through the capsule stream.
#[derive(Clone, Debug)]
pub struct CapsuleState<S: Real = f32> {
    /// `[β, C_U, H_U, W_U]`
    pub u: Tensor<S>,
    /// `[γ, β, C_Û, H_U, W_U]`
    pub uhat: Tensor<S>,
    /// `[β, γ, H_U, W_U]` logits behind the final couplings.
    pub b: Tensor<S>,
    /// `[β, γ, H_U, W_U]`
    pub c: Tensor<S>,
    /// `[γ, C_Û, H_U, W_U]`
    pub v: Tensor<S>,
}

/// Handles produced by [`capsule_stream`].
#[derive(Clone, Copy, Debug)]
pub struct CapsuleTrace {
    pub u: Var,
    pub uhat: Var,
    pub routing: Routing,
    pub weighted: Var,
    pub features: Var,
}

impl CapsuleTrace {
    pub fn state<S: Real>(&self, tape: &Tape<S>) -> CapsuleState<S> {
        let children_first = |v: Var| -> Tensor<S> {
            let t = tape.value(v);
            let s = t.shape();
            let (g, b, rest) = (s[0], s[1], s[2] * s[3]);
            let mut out = Tensor::zeros([b, g, s[2], s[3]]);
            for j in 0..g {
                for i in 0..b {
                    let src = &t.data()[(j * b + i) * rest..][..rest];
                    out.data_mut()[(i * g + j) * rest..][..rest].copy_from_slice(src);
                }
            }
            out
        };
        CapsuleState {
            u: tape.value(self.u).clone(),
            uhat: tape.value(self.uhat).clone(),
            b: children_first(self.routing.logits),
            c: children_first(self.routing.c),
            v: tape.value(self.routing.v).clone(),
        }
    }
}

/// `[C_X, S, S]` latent to `[β, C_U, G, G]` primary capsules.
pub fn primary_capsules<S: Real>(tape: &mut Tape<S>, x: Var, w: Var, b: Option<Var>, beta: usize) -> Result<Var> {
    let out = tape.conv2d(x, w, b, 1, 0)?;
    let s = tape.shape(out).to_vec();
    if s.len() != 3 || s[0] % beta != 0 {
        return Err(Error::shape("primary_capsules", format!("{} filters not divisible into {beta} capsules", s[0])));
    }
    tape.reshape(out, &[beta, s[0] / beta, s[1], s[2]])
}

/// `û_{j|i} = W_ij u_i` at every location: `[β, C_U, G, G]` to `[γ, β, C_Û, G, G]`.
pub fn capsule_predictions<S: Real>(tape: &mut Tape<S>, u: Var, w: Var) -> Result<Var> {
    let us = tape.shape(u).to_vec();
    let ws = tape.shape(w).to_vec();
    let (&[beta, c_u, gh, gw], &[wb, gamma, d, wc]) = (&us[..], &ws[..]) else {
        return Err(Error::shape("capsule_predictions", format!("u {us:?}, W {ws:?}")));
    };
    if wb != beta || wc != c_u {
        return Err(Error::shape(
            "capsule_predictions",
            format!("W {ws:?} expects {wb} capsules of dim {wc}, u has {beta} of dim {c_u}"),
        ));
    }
    let l = gh * gw;
    let wm = tape.reshape(w, &[beta, gamma * d, c_u])?;
    let um = tape.reshape(u, &[beta, c_u, l])?;
    let p = tape.matmul(wm, um)?;
    let p = tape.reshape(p, &[beta, gamma, d, l])?;
    let p = tape.permute(p, &[1, 0, 2, 3])?;
    tape.reshape(p, &[gamma, beta, d, gh, gw])
}

/// `s ||s|| / (1 + ||s||²)` along `axis`, i.e. length `||s||²/(1+||s||²)`
/// in the direction of `s`; zero at `s = 0`.
pub fn squash<S: Real>(tape: &mut Tape<S>, s: Var, axis: usize) -> Result<Var> {
    let n = tape.reduce(ReduceKind::L2Norm, s, &[axis], true)?;
    let n2 = tape.square(n)?;
    let den = tape.add_scalar(n2, 1.0);
    let scale = tape.div(n, den)?;
    tape.mul(s, scale)
}

/// Routing outputs, parents-first.
#[derive(Clone, Copy, Debug)]
pub struct Routing {
    /// Logits `[γ, β, G, G]` used for the final couplings.
    pub logits: Var,
    /// Couplings `[γ, β, G, G]`, a softmax over parents.
    pub c: Var,
    /// Parent activities `[γ, C_Û, G, G]`.
    pub v: Var,
}

/// Routing by agreement on predictions `[γ, β, C_Û, G, G]`, independently per
/// grid location. Logits start at zero and are not updated after the final
/// iteration; gradients flow through every iteration.
pub fn routing_by_agreement<S: Real>(tape: &mut Tape<S>, uhat: Var, iters: usize) -> Result<Routing> {
    if iters == 0 {
        return Err(Error::Config("routing needs at least one iteration".into()));
    }
    let s = tape.shape(uhat).to_vec();
    let [gamma, beta, d, gh, gw] = s[..] else {
        return Err(Error::shape("routing_by_agreement", format!("expected [γ,β,C,H,W], got {s:?}")));
    };
    let mut logits = tape.constant(Tensor::zeros([gamma, beta, 1, gh, gw]));
    let mut c;
    let mut v;
    let mut iter = 0;
    loop {
        c = tape.softmax(logits, 0)?;
        let weighted = tape.mul(uhat, c)?;
        let s_j = tape.reduce(ReduceKind::Sum, weighted, &[1], true)?;
        v = squash(tape, s_j, 2)?;
        iter += 1;
        if iter == iters {
            break;
        }
        let agree = tape.mul(uhat, v)?;
        let agree = tape.reduce(ReduceKind::Sum, agree, &[2], true)?;
        logits = tape.add(logits, agree)?;
    }
    Ok(Routing {
        logits: tape.reshape(logits, &[gamma, beta, gh, gw])?,
        c: tape.reshape(c, &[gamma, beta, gh, gw])?,
        v: tape.reshape(v, &[gamma, d, gh, gw])?,
    })
}

/// `Û_i = Σ_j c_ij û_{j|i}`: `[γ, β, C_Û, G, G]` with couplings `[γ, β, G, G]`
/// to `[β, C_Û, G, G]`.
pub fn weighted_predictions<S: Real>(tape: &mut Tape<S>, uhat: Var, c: Var) -> Result<Var> {
    let s = tape.shape(uhat).to_vec();
    let cs = tape.shape(c).to_vec();
    if s.len() != 5 || cs != [s[0], s[1], s[3], s[4]] {
        return Err(Error::shape("weighted_predictions", format!("predictions {s:?}, couplings {cs:?}")));
    }
    let c = tape.reshape(c, &[s[0], s[1], 1, s[3], s[4]])?;
    let p = tape.mul(uhat, c)?;
    tape.reduce(ReduceKind::Sum, p, &[0], false)
}

/// Capsule lengths `[β, G, G]` projected by a transposed convolution to
/// `[C_X, S, S]`.
pub fn capsule_features<S: Real>(tape: &mut Tape<S>, weighted: Var, proj_w: Var, proj_b: Option<Var>) -> Result<Var> {
    if tape.shape(weighted).len() != 4 {
        return Err(Error::shape("capsule_features", format!("expected [β,C,H,W], got {:?}", tape.shape(weighted))));
    }
    let norms = tape.reduce(ReduceKind::L2Norm, weighted, &[1], false)?;
    tape.conv_transpose2d(norms, proj_w, proj_b, 1, 0)
}

/// Latent `[C_X, S, S]` through the full capsule stream to `C` of the same shape.
pub fn capsule_stream<S: Real>(tape: &mut Tape<S>, x: Var, p: &CapsuleVars, cfg: &CapsuleConfig) -> Result<CapsuleTrace> {
    cfg.validate()?;
    let u = primary_capsules(tape, x, p.primary_w, Some(p.primary_b), cfg.beta)?;
    let uhat = capsule_predictions(tape, u, p.w)?;
    let routing = routing_by_agreement(tape, uhat, cfg.routing_iters)?;
    let weighted = weighted_predictions(tape, uhat, routing.c)?;
    let features = capsule_features(tape, weighted, p.proj_w, Some(p.proj_b))?;
    Ok(CapsuleTrace { u, uhat, routing, weighted, features })
}
