use std::fs;
use std::path::{Path, PathBuf};

use super::pnm::{self, quantize};
use super::synth::{smooth_field, synthetic_clear, SyntheticConfig};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::physics;

const SYNTH_STREAM: u64 = 0x5359_4e54 << 32;
const EPOCH_STREAM: u64 = 0x4550_4f43 << 32;

/// Ground-truth formation parameters of a synthetic pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Physics {
    pub t: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub name: String,
    pub clear: Tensor,
    pub degraded: Tensor,
    /// Known only for synthetic data.
    pub truth: Option<Physics>,
}

impl PairedSample {
    /// Pair with `degraded = degrade(clear, t, b)`.
    pub fn from_physics(name: impl Into<String>, clear: Tensor, t: Tensor, b: Tensor) -> Result<Self> {
        let degraded = physics::degrade(&clear, &t, &b)?;
        Ok(PairedSample { name: name.into(), clear, degraded, truth: Some(Physics { t, b }) })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.clear.shape()[1], self.clear.shape()[2])
    }
}

/// Draws smooth `t` and `b` fields and degrades `clear` with them.
pub fn make_synthetic_pair(name: impl Into<String>, clear: Tensor, cfg: &SyntheticConfig, rng: &mut Rng) -> Result<PairedSample> {
    cfg.validate()?;
    let [3, h, w] = clear.shape()[..] else {
        return Err(Error::shape("make_synthetic_pair", format!("expected [3,H,W], got {:?}", clear.shape())));
    };
    let t = smooth_field(rng, h, w, cfg.t_lo, cfg.t_hi, cfg.sigma_field);
    let b = smooth_field(rng, h, w, cfg.b_lo, cfg.b_hi, cfg.sigma_field);
    PairedSample::from_physics(name, clear, t, b)
}

/// Window and mirror choice applied identically to every plane of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropFlip {
    pub y: usize,
    pub x: usize,
    pub size: usize,
    pub flip: bool,
}

impl CropFlip {
    /// Uniform offset, horizontal flip with probability 1/2.
    pub fn sample(height: usize, width: usize, size: usize, rng: &mut Rng) -> Result<Self> {
        if size == 0 || size > height || size > width {
            return Err(Error::shape("random_crop_flip", format!("crop {size} does not fit {height}x{width}")));
        }
        let y = rng.below(height - size + 1);
        let x = rng.below(width - size + 1);
        let flip = rng.coin(0.5);
        Ok(CropFlip { y, x, size, flip })
    }

    /// Applies to `[C,H,W]` or `[H,W]` tensors.
    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        let s = t.shape();
        let (c, h, w) = match *s {
            [c, h, w] => (c, h, w),
            [h, w] => (1, h, w),
            _ => return Err(Error::shape("crop", format!("expected [C,H,W] or [H,W], got {s:?}"))),
        };
        let n = self.size;
        if self.y + n > h || self.x + n > w {
            return Err(Error::shape("crop", format!("window {self:?} outside {h}x{w}")));
        }
        let mut shape = s.to_vec();
        let rank = shape.len();
        shape[rank - 2] = n;
        shape[rank - 1] = n;
        let mut out = Tensor::zeros(shape);
        for ch in 0..c {
            for yy in 0..n {
                for xx in 0..n {
                    let sx = if self.flip { self.x + n - 1 - xx } else { self.x + xx };
                    out.data_mut()[(ch * n + yy) * n + xx] = t.data()[(ch * h + self.y + yy) * w + sx];
                }
            }
        }
        Ok(out)
    }

    pub fn apply_sample(&self, s: &PairedSample) -> Result<PairedSample> {
        let truth = match &s.truth {
            Some(p) => Some(Physics { t: self.apply(&p.t)?, b: self.apply(&p.b)? }),
            None => None,
        };
        Ok(PairedSample { name: s.name.clone(), clear: self.apply(&s.clear)?, degraded: self.apply(&s.degraded)?, truth })
    }
}

pub fn random_crop_flip(img: &Tensor, size: usize, rng: &mut Rng) -> Result<Tensor> {
    let s = img.shape();
    if s.len() < 2 {
        return Err(Error::shape("random_crop_flip", format!("expected an image, got {s:?}")));
    }
    CropFlip::sample(s[s.len() - 2], s[s.len() - 1], size, rng)?.apply(img)
}

/// In-memory paired dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    /// `cfg.count` synthetic pairs; sample `i` depends only on `(cfg, i)`.
    pub fn synthetic(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let samples = (0..cfg.count)
            .map(|i| {
                let mut rng = Rng::with_stream(cfg.seed, SYNTH_STREAM + i as u64);
                let clear = synthetic_clear(&mut rng, cfg.height, cfg.width);
                make_synthetic_pair(format!("{i:05}"), clear, cfg, &mut rng)
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Reads `<root>/clear/*.ppm` with filename-matched `<root>/degraded/*.ppm`;
    /// `<root>/truth/<name>.t.pfm` and `.b.pfm` are picked up when present.
    pub fn load_dir(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let clear_dir = root.join("clear");
        let entries = fs::read_dir(&clear_dir).map_err(|e| Error::io(&clear_dir, e))?;
        let mut names = Vec::new();
        for e in entries {
            let path = e.map_err(|e| Error::io(&clear_dir, e))?.path();
            if path.extension().is_some_and(|x| x == "ppm") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    names.push(stem.to_string());
                }
            }
        }
        names.sort();
        if names.is_empty() {
            return Err(Error::EmptyDataset(format!("no .ppm files in {}", clear_dir.display())));
        }
        let mut samples = Vec::with_capacity(names.len());
        for name in names {
            let clear = pnm::read_image(clear_dir.join(format!("{name}.ppm")))?;
            let degraded = pnm::read_image(root.join("degraded").join(format!("{name}.ppm")))?;
            if clear.shape() != degraded.shape() {
                return Err(Error::shape("load_dir", format!("{name}: clear {:?} vs degraded {:?}", clear.shape(), degraded.shape())));
            }
            let (tp, bp) = truth_paths(root, &name);
            let truth = if tp.exists() && bp.exists() {
                Some(Physics { t: pnm::read_map(&tp)?, b: pnm::read_map(&bp)? })
            } else {
                None
            };
            samples.push(PairedSample { name, clear, degraded, truth });
        }
        Ok(Dataset { samples })
    }

    /// Writes the layout [`Dataset::load_dir`] reads. Images go through the
    /// 8-bit PPM grid; truth maps are stored exactly.
    pub fn save_dir(&self, root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let root = root.as_ref();
        let mut written = Vec::new();
        for s in &self.samples {
            let c = root.join("clear").join(format!("{}.ppm", s.name));
            let d = root.join("degraded").join(format!("{}.ppm", s.name));
            pnm::write_image(&c, &s.clear)?;
            pnm::write_image(&d, &s.degraded)?;
            written.extend([c, d]);
            if let Some(p) = &s.truth {
                let (tp, bp) = truth_paths(root, &s.name);
                pnm::write_map(&tp, &p.t)?;
                pnm::write_map(&bp, &p.b)?;
                written.extend([tp, bp]);
            }
        }
        Ok(written)
    }
}

fn truth_paths(root: &Path, name: &str) -> (PathBuf, PathBuf) {
    let dir = root.join("truth");
    (dir.join(format!("{name}.t.pfm")), dir.join(format!("{name}.b.pfm")))
}

/// Outcome of [`verify_pairs`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairCheck {
    pub checked: usize,
    /// Samples without truth maps.
    pub skipped: usize,
    pub mismatched: Vec<String>,
}

/// Re-degrades every clear image with its stored truth maps and compares the
/// 8-bit result with the stored degraded image byte for byte.
pub fn verify_pairs(ds: &Dataset) -> Result<PairCheck> {
    let mut report = PairCheck::default();
    for s in &ds.samples {
        let Some(p) = &s.truth else {
            report.skipped += 1;
            continue;
        };
        let again = physics::degrade(&s.clear, &p.t, &p.b)?;
        let same = again.data().iter().zip(s.degraded.data()).all(|(a, b)| quantize(*a) == quantize(*b));
        report.checked += 1;
        if !same {
            report.mismatched.push(s.name.clone());
        }
    }
    Ok(report)
}

/// Epoch-wise shuffled fixed-size batches over `n` samples; the last partial
/// batch is dropped. Batch `k` of epoch `e` is a pure function of
/// `(seed, n, batch, e, k)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Batcher {
    pub seed: u64,
    pub n: usize,
    pub batch: usize,
}

impl Batcher {
    pub fn new(seed: u64, n: usize, batch: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyDataset("no samples to batch".into()));
        }
        if batch == 0 || batch > n {
            return Err(Error::EmptyDataset(format!("batch {batch} yields no full batch from {n} samples")));
        }
        Ok(Batcher { seed, n, batch })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch
    }

    pub fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n).collect();
        Rng::with_stream(self.seed, EPOCH_STREAM + epoch).shuffle(&mut order);
        order
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let order = self.permutation(epoch);
        order.chunks_exact(self.batch).map(<[usize]>::to_vec).collect()
    }

    /// Batch consumed at global step `step` (0-based).
    pub fn at_step(&self, step: usize) -> Vec<usize> {
        let per = self.batches_per_epoch();
        let order = self.permutation((step / per) as u64);
        let k = step % per;
        order[k * self.batch..(k + 1) * self.batch].to_vec()
    }

    /// Endless stream of batches starting at `step`.
    pub fn iter_from(self, step: usize) -> impl Iterator<Item = Vec<usize>> {
        let per = self.batches_per_epoch();
        (step / per..).flat_map(move |e| self.epoch(e as u64)).skip(step % per)
    }
}
