//! Underwater image formation: `I_deg = I_clear * T + B * (1 - T)`.
//!
//! Images are `[3,H,W]`; transmission and background maps are `[H,W]` and
//! broadcast over the color channels. Maps with a single element act as
//! spatially constant values.

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Division floor for the enhancer (caps amplification at 10x).
pub const T_MIN: f64 = 0.1;
/// Denominator guard of the expected-transmission ratio.
pub const EXPECTED_T_EPS: f64 = 1e-6;

fn image_dims(op: &'static str, img: &[usize]) -> Result<(usize, usize)> {
    match img {
        [3, h, w] => Ok((*h, *w)),
        _ => Err(Error::shape(op, format!("expected image [3,H,W], got {img:?}"))),
    }
}

/// Expands a map to a per-pixel accessor; `[H,W]` or any single-element shape.
fn map_values<'a, S: Real>(op: &'static str, map: &'a Tensor<S>, h: usize, w: usize) -> Result<impl Fn(usize) -> S + 'a> {
    let ok = map.shape() == [h, w] || map.numel() == 1;
    if !ok {
        return Err(Error::shape(op, format!("map {:?} does not match image {h}x{w}", map.shape())));
    }
    let single = map.numel() == 1;
    Ok(move |p: usize| if single { map.data()[0] } else { map.data()[p] })
}

fn check_unit(op: &'static str, name: &str, t: &Tensor<impl Real>) -> Result<()> {
    match t.data().iter().position(|v| !(v.to_f64() >= 0.0 && v.to_f64() <= 1.0)) {
        Some(index) => Err(Error::Domain { op, index, detail: format!("{name} outside [0,1]") }),
        None => Ok(()),
    }
}

/// `clear * t + b * (1 - t)`.
pub fn degrade<S: Real>(clear: &Tensor<S>, t: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w) = image_dims("degrade", clear.shape())?;
    check_unit("degrade", "transmission", t)?;
    check_unit("degrade", "background", b)?;
    let tv = map_values("degrade", t, h, w)?;
    let bv = map_values("degrade", b, h, w)?;
    let hw = h * w;
    Ok(Tensor::from_fn(clear.shape().to_vec(), |i| {
        let p = i % hw;
        let (t, b) = (tv(p), bv(p));
        clear.data()[i] * t + b * (S::ONE - t)
    }))
}

/// `t = exp(-nu * d)`.
pub fn transmission_from_depth<S: Real>(depth: &Tensor<S>, nu: f64) -> Result<Tensor<S>> {
    if !(nu >= 0.0) {
        return Err(Error::Domain { op: "transmission_from_depth", index: 0, detail: format!("attenuation {nu} < 0") });
    }
    if let Some(index) = depth.data().iter().position(|d| !(d.to_f64() >= 0.0)) {
        return Err(Error::Domain { op: "transmission_from_depth", index, detail: "negative depth".into() });
    }
    let nu = S::from_f64(nu);
    Ok(depth.map(|d| (-(nu * d)).exp()))
}

/// Parameter-free inversion `(tilde - b (1 - t')) / t'` with `t' = max(t, t_min)`.
/// The result is not clamped; see [`finalize`].
pub fn enhance<S: Real>(tilde: &Tensor<S>, t_hat: &Tensor<S>, b_hat: &Tensor<S>, t_min: f64) -> Result<Tensor<S>> {
    let (h, w) = image_dims("enhance", tilde.shape())?;
    if !(t_min > 0.0) {
        return Err(Error::Config(format!("t_min must be positive, got {t_min}")));
    }
    let tv = map_values("enhance", t_hat, h, w)?;
    let bv = map_values("enhance", b_hat, h, w)?;
    let floor = S::from_f64(t_min);
    let hw = h * w;
    Ok(Tensor::from_fn(tilde.shape().to_vec(), |i| {
        let p = i % hw;
        let t = tv(p).max(floor);
        (tilde.data()[i] - bv(p) * (S::ONE - t)) / t
    }))
}

/// Clamps an image to `[0,1]` for storage.
pub fn finalize<S: Real>(img: &Tensor<S>) -> Tensor<S> {
    img.map(|v| v.max(S::ZERO).min(S::ONE))
}

/// Transmission implied by a (degraded, clear, background) triple: the
/// per-channel ratio `(deg - b) / (clear - b + eps)`, averaged over channels
/// and clamped to `[0,1]`.
pub fn expected_transmission<S: Real>(deg: &Tensor<S>, clear: &Tensor<S>, b_hat: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
    let (h, w) = image_dims("expected_transmission", deg.shape())?;
    if clear.shape() != deg.shape() {
        return Err(Error::shape("expected_transmission", format!("clear {:?} vs degraded {:?}", clear.shape(), deg.shape())));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let bv = map_values("expected_transmission", b_hat, h, w)?;
    let hw = h * w;
    let eps = S::from_f64(eps);
    let third = S::from_f64(1.0 / 3.0);
    Ok(Tensor::from_fn([h, w], |p| {
        let b = bv(p);
        let mut acc = S::ZERO;
        for c in 0..3 {
            let i = c * hw + p;
            acc += (deg.data()[i] - b) / (clear.data()[i] - b + eps);
        }
        let t = acc * third;
        // 0/0 only when clear sits exactly at -eps from b
        if t.to_f64().is_nan() {
            S::ONE
        } else {
            t.max(S::ZERO).min(S::ONE)
        }
    }))
}

fn var_image_dims<S: Real>(tape: &Tape<S>, op: &'static str, img: Var, maps: &[Var]) -> Result<()> {
    let (h, w) = image_dims(op, tape.shape(img))?;
    for &m in maps {
        let s = tape.shape(m);
        if s != [h, w] && s.iter().product::<usize>() != 1 {
            return Err(Error::shape(op, format!("map {s:?} does not match image {h}x{w}")));
        }
    }
    Ok(())
}

/// Differentiable [`degrade`]; evaluates in the same order, so values are
/// bit-identical to the plain version.
pub fn degrade_on<S: Real>(tape: &mut Tape<S>, clear: Var, t: Var, b: Var) -> Result<Var> {
    var_image_dims(tape, "degrade", clear, &[t, b])?;
    let direct = tape.mul(clear, t)?;
    let one_minus = tape.rsub_scalar(1.0, t);
    let veil = tape.mul(b, one_minus)?;
    tape.add(direct, veil)
}

/// Differentiable [`enhance`]; the transmission floor passes no gradient
/// where it is active.
pub fn enhance_on<S: Real>(tape: &mut Tape<S>, tilde: Var, t_hat: Var, b_hat: Var, t_min: f64) -> Result<Var> {
    var_image_dims(tape, "enhance", tilde, &[t_hat, b_hat])?;
    if !(t_min > 0.0) {
        return Err(Error::Config(format!("t_min must be positive, got {t_min}")));
    }
    let t = tape.clamp(t_hat, t_min, f64::INFINITY);
    let one_minus = tape.rsub_scalar(1.0, t);
    let veil = tape.mul(b_hat, one_minus)?;
    let num = tape.sub(tilde, veil)?;
    tape.div(num, t)
}
