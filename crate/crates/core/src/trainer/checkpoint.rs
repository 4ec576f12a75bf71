//! Checkpoint file layout (all integers little-endian u32):
//!
//! ```text
//! "PICEVAE1" | version | meta length | meta JSON
//! | tensor count | { name length | name | rank | extents.. | f32 payload }..
//! | CRC32 of everything before it
//! ```
//!
//! Optimizer moments are stored as extra tensors named `optim.m.<param>` and
//! `optim.v.<param>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimState, TrainConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::losses::LossReport;
use crate::model::ModelParams;
use crate::numerics::{RngState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PICEVAE1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optim: Option<OptimState>,
    /// Completed optimizer steps.
    pub step: u64,
    /// Augmentation generator, so a resumed run draws the same crops.
    pub rng: Option<RngState>,
    pub history: Vec<LossReport>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: TrainConfig,
    step: u64,
    rng: Option<RngState>,
    optim_step: Option<u64>,
    history: Vec<LossReport>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit the checkpoint's u32 fields")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank())?;
    for &e in t.shape() {
        put_u32(out, e)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            config: self.config.clone(),
            step: self.step,
            rng: self.rng.clone(),
            optim_step: self.optim.as_ref().map(|o| o.step),
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        let n_opt = if self.optim.is_some() { 2 } else { 0 };
        put_u32(&mut out, self.params.len() * (1 + n_opt))?;
        for (name, t) in self.params.iter() {
            put_tensor(&mut out, name, t)?;
        }
        if let Some(o) = &self.optim {
            for (kind, moments) in [("m", &o.m), ("v", &o.v)] {
                for ((name, _), t) in self.params.iter().zip(moments) {
                    put_tensor(&mut out, &format!("optim.{kind}.{name}"), t)?;
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic").map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnknownVersion(version).into());
        }
        let len = r.u32("metadata length")? as usize;
        let meta: Meta = serde_json::from_slice(r.take(len, "metadata")?)
            .map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            tensors.push(r.tensor()?);
        }
        let body_end = r.pos;
        let stored = r.u32("checksum")?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)).into());
        }
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed }.into());
        }

        let mut params = ModelParams::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in tensors {
            if let Some(rest) = name.strip_prefix("optim.m.") {
                m.push((rest.to_string(), t));
            } else if let Some(rest) = name.strip_prefix("optim.v.") {
                v.push((rest.to_string(), t));
            } else {
                params.insert(name, t).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            }
        }
        let optim = match meta.optim_step {
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(CheckpointError::Malformed("moments without optimizer step".into()).into()),
            Some(step) => {
                let aligned = |ms: &[(String, Tensor)]| {
                    ms.len() == params.len()
                        && ms.iter().zip(params.iter()).all(|((n, t), (pn, pt))| n == pn && t.shape() == pt.shape())
                };
                if !aligned(&m) || !aligned(&v) {
                    return Err(CheckpointError::Malformed("optimizer moments do not match parameters".into()).into());
                }
                Some(OptimState { step, m: m.into_iter().map(|x| x.1).collect(), v: v.into_iter().map(|x| x.1).collect() })
            }
        };
        Ok(Checkpoint { config: meta.config, params, optim, step: meta.step, rng: meta.rng, history: meta.history })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor(&mut self) -> std::result::Result<(String, Tensor), CheckpointError> {
        let len = self.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u32("tensor extents")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} is too large")))?;
        let raw = self.take(n, "tensor payload")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok((name, t))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, ck.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
