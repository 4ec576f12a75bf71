//! Training objective: reconstruction, Laplacian-pyramid, cycle and
//! transmission terms, `total = rec + lap + eta * (cycle + transmission)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::physics;

/// Per-level weights of the pyramid loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// `ω_k = 1 / 2^k`
    #[default]
    Exponential,
    /// `ω_k = 1`
    Uniform,
}

/// How an L1 distance is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Which terms take part in the total; disabled terms report 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossTerms {
    pub rec: bool,
    pub lap: bool,
    pub cycle: bool,
    pub transmission: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms { rec: true, lap: true, cycle: true, transmission: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Pyramid levels L.
    pub levels: usize,
    pub weights: WeightScheme,
    /// Scale η of the physics terms.
    pub eta: f64,
    /// Denominator guard of the expected transmission.
    pub eps: f64,
    pub reduction: Reduction,
    pub terms: LossTerms,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            levels: 3,
            weights: WeightScheme::Exponential,
            eta: 1e-4,
            eps: physics::EXPECTED_T_EPS,
            reduction: Reduction::Mean,
            terms: LossTerms::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        if !(self.eta >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("need eta >= 0 and eps > 0, got eta={} eps={}", self.eta, self.eps)));
        }
        Ok(())
    }

    pub fn omega(&self) -> Vec<f64> {
        (0..self.levels)
            .map(|k| match self.weights {
                WeightScheme::Exponential => 0.5f64.powi(k as i32),
                WeightScheme::Uniform => 1.0,
            })
            .collect()
    }
}

/// Scalar value of every term for one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rec: f64,
    pub lap: f64,
    pub cycle: f64,
    pub transmission: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.rec, self.lap, self.cycle, self.transmission, self.total].iter().all(|v| v.is_finite())
    }

    /// Elementwise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.rec += r.rec;
            m.lap += r.lap;
            m.cycle += r.cycle;
            m.transmission += r.transmission;
            m.total += r.total;
        }
        LossReport { rec: m.rec / n, lap: m.lap / n, cycle: m.cycle / n, transmission: m.transmission / n, total: m.total / n }
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={:.6e} rec={:.6e} lap={:.6e} cycle={:.6e} transmission={:.6e}",
            self.total, self.rec, self.lap, self.cycle, self.transmission
        )
    }
}

/// `[G_0 .. G_{L-1}]` with `G_0 = img`, `G_k = avg_pool2(G_{k-1})`.
pub fn gaussian_pyramid<S: Real>(tape: &mut Tape<S>, img: Var, levels: usize) -> Result<Vec<Var>> {
    let s = tape.shape(img).to_vec();
    if levels == 0 || s.len() < 2 {
        return Err(Error::shape("gaussian_pyramid", format!("{levels} levels of {s:?}")));
    }
    let f = 1usize << (levels - 1);
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h % f != 0 || w % f != 0 {
        return Err(Error::shape("gaussian_pyramid", format!("{h}x{w} is not divisible by 2^{}", levels - 1)));
    }
    let mut out = vec![img];
    for _ in 1..levels {
        let next = tape.avg_pool2(*out.last().unwrap())?;
        out.push(next);
    }
    Ok(out)
}

/// `λ_k = G_k - up(G_{k+1})` for `k < L-1`, `λ_{L-1} = G_{L-1}`.
pub fn laplacian_pyramid<S: Real>(tape: &mut Tape<S>, img: Var, levels: usize) -> Result<Vec<Var>> {
    let g = gaussian_pyramid(tape, img, levels)?;
    let mut out = Vec::with_capacity(levels);
    for k in 0..levels - 1 {
        let up = tape.upsample_nearest2(g[k + 1])?;
        out.push(tape.sub(g[k], up)?);
    }
    out.push(g[levels - 1]);
    Ok(out)
}

/// Inverse of [`laplacian_pyramid`]: `λ_0 + up(λ_1 + up(λ_2 + ...))`.
pub fn reconstruct_laplacian<S: Real>(tape: &mut Tape<S>, levels: &[Var]) -> Result<Var> {
    let (&last, rest) = levels
        .split_last()
        .ok_or_else(|| Error::shape("reconstruct_laplacian", "empty pyramid"))?;
    let mut acc = last;
    for &band in rest.iter().rev() {
        let up = tape.upsample_nearest2(acc)?;
        acc = tape.add(band, up)?;
    }
    Ok(acc)
}

fn l1<S: Real>(tape: &mut Tape<S>, op: &'static str, a: Var, b: Var, reduction: Reduction) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    match reduction {
        Reduction::Mean => tape.mean_all(d),
        Reduction::Sum => tape.sum_all(d),
    }
}

pub fn loss_rec<S: Real>(tape: &mut Tape<S>, clear: Var, enhanced: Var, cfg: &LossConfig) -> Result<Var> {
    l1(tape, "loss_rec", clear, enhanced, cfg.reduction)
}

/// `Σ_k ω_k · L1(λ_k(enhanced), λ_k(clear))`.
pub fn loss_lap<S: Real>(tape: &mut Tape<S>, clear: Var, enhanced: Var, cfg: &LossConfig) -> Result<Var> {
    if tape.shape(clear) != tape.shape(enhanced) {
        return Err(Error::shape("loss_lap", format!("{:?} vs {:?}", tape.shape(clear), tape.shape(enhanced))));
    }
    let lc = laplacian_pyramid(tape, clear, cfg.levels)?;
    let le = laplacian_pyramid(tape, enhanced, cfg.levels)?;
    let mut total: Option<Var> = None;
    for ((c, e), w) in lc.into_iter().zip(le).zip(cfg.omega()) {
        let term = l1(tape, "loss_lap", e, c, cfg.reduction)?;
        let term = tape.mul_scalar(term, w);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("levels >= 1"))
}

/// L1 between the observed image and its recomposition from the clear image
/// with the estimated physics.
pub fn loss_cycle<S: Real>(tape: &mut Tape<S>, deg: Var, clear: Var, t_hat: Var, b_hat: Var, cfg: &LossConfig) -> Result<Var> {
    let recomposed = physics::degrade_on(tape, clear, t_hat, b_hat)?;
    l1(tape, "loss_cycle", deg, recomposed, cfg.reduction)
}

/// Constant target of the transmission term, computed from current values.
pub fn transmission_target<S: Real>(tape: &Tape<S>, deg: Var, clear: Var, b_hat: Var, cfg: &LossConfig) -> Result<Tensor<S>> {
    physics::expected_transmission(tape.value(deg), tape.value(clear), tape.value(b_hat), cfg.eps)
}

/// L1 between `t_hat` and the expected transmission; no gradient reaches the
/// target. Pass `target` to pin it to a precomputed map.
pub fn loss_transmission<S: Real>(
    tape: &mut Tape<S>,
    deg: Var,
    clear: Var,
    t_hat: Var,
    b_hat: Var,
    cfg: &LossConfig,
    target: Option<&Tensor<S>>,
) -> Result<Var> {
    let target = match target {
        Some(t) => t.clone(),
        None => transmission_target(tape, deg, clear, b_hat, cfg)?,
    };
    let tv = tape.constant(target);
    l1(tape, "loss_transmission", tv, t_hat, cfg.reduction)
}

/// Tape handles of every term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rec: Var,
    pub lap: Var,
    pub cycle: Var,
    pub transmission: Var,
    pub total: Var,
}

impl LossVars {
    pub fn report<S: Real>(&self, tape: &Tape<S>) -> LossReport {
        let v = |x: Var| tape.value(x).item().to_f64();
        LossReport {
            rec: v(self.rec),
            lap: v(self.lap),
            cycle: v(self.cycle),
            transmission: v(self.transmission),
            total: v(self.total),
        }
    }
}

/// Image-space quantities the objective compares.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs {
    pub enhanced: Var,
    pub t_hat: Var,
    pub b_hat: Var,
    pub clear: Var,
    pub deg: Var,
}

pub fn total_loss_on<S: Real>(
    tape: &mut Tape<S>,
    x: &LossInputs,
    cfg: &LossConfig,
    transmission_target: Option<&Tensor<S>>,
) -> Result<LossVars> {
    cfg.validate()?;
    let zero = tape.constant(Tensor::scalar(S::ZERO));
    let on = cfg.terms;
    let rec = if on.rec { loss_rec(tape, x.clear, x.enhanced, cfg)? } else { zero };
    let lap = if on.lap { loss_lap(tape, x.clear, x.enhanced, cfg)? } else { zero };
    let cycle = if on.cycle { loss_cycle(tape, x.deg, x.clear, x.t_hat, x.b_hat, cfg)? } else { zero };
    let transmission = if on.transmission {
        loss_transmission(tape, x.deg, x.clear, x.t_hat, x.b_hat, cfg, transmission_target)?
    } else {
        zero
    };
    let image = tape.add(rec, lap)?;
    let phys = tape.add(cycle, transmission)?;
    let phys = tape.mul_scalar(phys, cfg.eta);
    let total = tape.add(image, phys)?;
    Ok(LossVars { rec, lap, cycle, transmission, total })
}

/// Evaluates every term on plain tensors.
pub fn total_loss<S: Real>(
    enhanced: &Tensor<S>,
    t_hat: &Tensor<S>,
    b_hat: &Tensor<S>,
    clear: &Tensor<S>,
    deg: &Tensor<S>,
    cfg: &LossConfig,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let x = LossInputs {
        enhanced: tape.constant(enhanced.clone()),
        t_hat: tape.constant(t_hat.clone()),
        b_hat: tape.constant(b_hat.clone()),
        clear: tape.constant(clear.clone()),
        deg: tape.constant(deg.clone()),
    };
    Ok(total_loss_on(&mut tape, &x, cfg, None)?.report(&tape))
}

/// Max abs error of decomposing `img` and reassembling it.
pub fn laplacian_roundtrip_error<S: Real>(img: &Tensor<S>, levels: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(img.clone());
    let pyr = laplacian_pyramid(&mut tape, v, levels)?;
    let back = reconstruct_laplacian(&mut tape, &pyr)?;
    Ok(tape.value(back).max_abs_diff(img))
}
