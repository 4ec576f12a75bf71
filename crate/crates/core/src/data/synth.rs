//! Procedural clear images and smooth physics fields for synthetic pairs.

use serde::{Deserialize, Serialize};

use super::pnm::quantize_image;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    pub b_lo: f64,
    pub b_hi: f64,
    /// Blur width of the transmission and background fields, in pixels.
    pub sigma_field: f64,
    pub count: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            height: 32,
            width: 32,
            t_lo: 0.2,
            t_hi: 0.95,
            b_lo: 0.1,
            b_hi: 0.9,
            sigma_field: 8.0,
            count: 64,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |lo: f64, hi: f64| (0.0..=1.0).contains(&lo) && lo < hi && hi <= 1.0;
        if !unit(self.t_lo, self.t_hi) || !unit(self.b_lo, self.b_hi) {
            return Err(Error::Config(format!(
                "need 0 <= lo < hi <= 1 for t [{}, {}] and b [{}, {}]",
                self.t_lo, self.t_hi, self.b_lo, self.b_hi
            )));
        }
        if self.height == 0 || self.width == 0 || !(self.sigma_field >= 0.0) {
            return Err(Error::Config("synthetic size must be positive and sigma_field >= 0".into()));
        }
        Ok(())
    }
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn blur_axis(src: &[f64], h: usize, w: usize, k: &[f64], along_rows: bool) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let off = i as isize - r;
                let (yy, xx) = if along_rows {
                    (y, (x as isize + off).clamp(0, w as isize - 1) as usize)
                } else {
                    ((y as isize + off).clamp(0, h as isize - 1) as usize, x)
                };
                acc += kv * src[yy * w + xx];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Spatially smooth random field in `[lo, hi]`.
///
/// Uniform white noise is blurred with a truncated Gaussian (radius `3σ`,
/// replicated borders), standardized by the standard deviation blurred
/// uniform noise has in theory, and mapped through `0.5 + z/6` clamped to
/// `[0,1]` onto `[lo, hi]`. Fixing the scale in advance (rather than
/// stretching each field to its own extremes) keeps wide blurs nearly flat.
pub fn smooth_field(rng: &mut Rng, height: usize, width: usize, lo: f64, hi: f64, sigma: f64) -> Tensor {
    let noise: Vec<f64> = (0..height * width).map(|_| rng.uniform()).collect();
    let k = gaussian_taps(sigma);
    let blurred = blur_axis(&blur_axis(&noise, height, width, &k, true), height, width, &k, false);
    let gain: f64 = k.iter().map(|v| v * v).sum();
    let std = gain / 12f64.sqrt();
    Tensor::from_fn([height, width], |i| {
        let z = (blurred[i] - 0.5) / std;
        let u = (0.5 + z / 6.0).clamp(0.0, 1.0);
        (lo + (hi - lo) * u).clamp(lo, hi) as f32
    })
}

fn color(rng: &mut Rng) -> [f64; 3] {
    [rng.uniform(), rng.uniform(), rng.uniform()]
}

/// Procedural "clear" scene on the 8-bit grid: a two-color gradient, a few
/// soft colored blobs and sometimes a faint stripe texture.
pub fn synthetic_clear(rng: &mut Rng, height: usize, width: usize) -> Tensor {
    let (hf, wf) = (height as f64, width as f64);
    let (c0, c1) = (color(rng), color(rng));
    let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut px = vec![[0.0f64; 3]; height * width];
    for y in 0..height {
        for x in 0..width {
            let s = (((x as f64 + 0.5) / wf - 0.5) * ca + ((y as f64 + 0.5) / hf - 0.5) * sa + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                px[y * width + x][c] = c0[c] + (c1[c] - c0[c]) * s;
            }
        }
    }
    let blobs = 2 + rng.below(4);
    for _ in 0..blobs {
        let (cy, cx) = (rng.uniform_in(0.0, hf), rng.uniform_in(0.0, wf));
        let r = rng.uniform_in(0.08, 0.3) * hf.min(wf);
        let col = color(rng);
        let alpha = rng.uniform_in(0.5, 1.0);
        for y in 0..height {
            for x in 0..width {
                let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                let m = alpha * (-d2 / (2.0 * r * r)).exp();
                let p = &mut px[y * width + x];
                for c in 0..3 {
                    p[c] = p[c] * (1.0 - m) + col[c] * m;
                }
            }
        }
    }
    if rng.coin(0.5) {
        let amp = rng.uniform_in(0.03, 0.1);
        let freq = rng.uniform_in(2.0, 6.0) * std::f64::consts::TAU;
        let phi = rng.uniform_in(0.0, std::f64::consts::TAU);
        let (ca, sa) = (phi.cos(), phi.sin());
        for y in 0..height {
            for x in 0..width {
                let u = (x as f64 / wf) * ca + (y as f64 / hf) * sa;
                let d = amp * (freq * u).sin();
                px[y * width + x].iter_mut().for_each(|v| *v += d);
            }
        }
    }
    let plane = height * width;
    let img = Tensor::from_fn([3, height, width], |i| px[i % plane][i / plane].clamp(0.0, 1.0) as f32);
    quantize_image(&img)
}
