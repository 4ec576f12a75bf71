//! Composite layers built from tape primitives, plus weight initializers.

use super::{Real, Rng, Tape, Tensor, Var};
use crate::error::Result;

/// Kaiming-uniform (fan-in, ReLU gain) initializer:
/// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn kaiming_uniform<S: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<S> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| S::from_f64(rng.uniform_in(-bound, bound)))
}

/// Conv weight `[c_out, c_in, k, k]` with Kaiming-uniform init.
pub fn conv_weight<S: Real>(c_out: usize, c_in: usize, k: usize, rng: &mut Rng) -> Tensor<S> {
    kaiming_uniform(&[c_out, c_in, k, k], c_in * k * k, rng)
}

/// 1x1-convolution projections of a single-head attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub k_b: Var,
    pub v_w: Var,
    pub v_b: Var,
}

/// Single-head dot-product self-attention over the `H*W` positions of a
/// `[C,H,W]` map. Scores are scaled by `C^-1/2` and normalized over key
/// positions. Returns the attended values `[C,H,W]` and the `[HW, HW]`
/// attention matrix (rows = queries).
pub fn self_attention<S: Real>(tape: &mut Tape<S>, x: Var, p: &AttentionVars) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    let [c, h, w] = shape[..] else {
        return Err(crate::Error::shape("self_attention", format!("expected [C,H,W], got {shape:?}")));
    };
    let l = h * w;
    let q = tape.conv2d(x, p.q_w, Some(p.q_b), 1, 0)?;
    let k = tape.conv2d(x, p.k_w, Some(p.k_b), 1, 0)?;
    let v = tape.conv2d(x, p.v_w, Some(p.v_b), 1, 0)?;
    let q = tape.reshape(q, &[c, l])?;
    let k = tape.reshape(k, &[c, l])?;
    let v = tape.reshape(v, &[c, l])?;
    let q_t = tape.permute(q, &[1, 0])?;
    let scores = tape.matmul(q_t, k)?;
    let scores = tape.mul_scalar(scores, 1.0 / (c as f64).sqrt());
    let attn = tape.softmax(scores, 1)?;
    let attn_t = tape.permute(attn, &[1, 0])?;
    let out = tape.matmul(v, attn_t)?;
    let out = tape.reshape(out, &[c, h, w])?;
    Ok((out, attn))
}
