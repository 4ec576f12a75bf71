//! Binary PPM (`P6`, maxval 255) for images and little-endian grayscale PFM
//! (`Pf`) for float maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, PnmError, Result};
use crate::numerics::Tensor;

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space(&mut self) {
        while let Some(&c) = self.bytes.get(self.pos) {
            if c == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str) -> std::result::Result<&'a str, PnmError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|c| !c.is_ascii_whitespace() && *c != b'#') {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PnmError::MalformedHeader(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| PnmError::MalformedHeader(format!("non-ASCII {what}")))
    }

    fn number(&mut self, what: &str) -> std::result::Result<u32, PnmError> {
        let tok = self.token(what)?;
        tok.parse()
            .map_err(|_| PnmError::MalformedHeader(format!("{what} {tok:?} is not a decimal integer")))
    }

    /// Exactly one whitespace byte separates the header from the payload.
    fn end(&mut self) -> std::result::Result<usize, PnmError> {
        match self.bytes.get(self.pos) {
            Some(c) if c.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(PnmError::MalformedHeader("header must end with a single whitespace byte".into())),
        }
    }
}

fn magic(bytes: &[u8], expected: &'static str) -> std::result::Result<(), PnmError> {
    if bytes.len() < 2 || &bytes[..2] != expected.as_bytes() {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(PnmError::BadMagic { found, expected });
    }
    Ok(())
}

fn dims(h: &mut Header<'_>) -> std::result::Result<(usize, usize), PnmError> {
    let w = h.number("width")? as usize;
    let ht = h.number("height")? as usize;
    if w == 0 || ht == 0 {
        return Err(PnmError::MalformedHeader(format!("zero extent {w}x{ht}")));
    }
    Ok((w, ht))
}

/// Decodes a `P6` pixmap into a `[3,H,W]` image with values `v / 255`.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor, PnmError> {
    magic(bytes, "P6")?;
    let mut h = Header { bytes, pos: 2 };
    let (w, ht) = dims(&mut h)?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(PnmError::UnsupportedMaxval(maxval));
    }
    let start = h.end()?;
    let n = w * ht * 3;
    let payload = &bytes[start..];
    if payload.len() < n {
        return Err(PnmError::Truncated { expected: n, found: payload.len() });
    }
    let plane = w * ht;
    let mut out = Tensor::zeros([3, ht, w]);
    for (p, px) in payload[..n].chunks_exact(3).enumerate() {
        for c in 0..3 {
            out.data_mut()[c * plane + p] = px[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Nearest 8-bit level of a value clamped to `[0,1]`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[3,H,W]` image as `P6`; values are clamped and rounded.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let [3, h, w] = img.shape()[..] else {
        return Err(Error::shape("encode_ppm", format!("expected [3,H,W], got {:?}", img.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = w * h;
    out.reserve(plane * 3);
    for p in 0..plane {
        for c in 0..3 {
            out.push(quantize(img.data()[c * plane + p]));
        }
    }
    Ok(out)
}

/// Decodes a grayscale `Pf` float map to `[H,W]`. Rows are stored bottom to
/// top; a negative scale marks little-endian data.
pub fn decode_pfm(bytes: &[u8]) -> std::result::Result<Tensor, PnmError> {
    magic(bytes, "Pf")?;
    let mut h = Header { bytes, pos: 2 };
    let (w, ht) = dims(&mut h)?;
    let scale_tok = h.token("scale")?;
    let scale: f32 = scale_tok
        .parse()
        .map_err(|_| PnmError::MalformedHeader(format!("scale {scale_tok:?} is not a number")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(PnmError::MalformedHeader(format!("invalid scale {scale}")));
    }
    let start = h.end()?;
    let n = w * ht * 4;
    let payload = &bytes[start..];
    if payload.len() < n {
        return Err(PnmError::Truncated { expected: n, found: payload.len() });
    }
    let mut out = Tensor::zeros([ht, w]);
    for (i, b) in payload[..n].chunks_exact(4).enumerate() {
        let raw = [b[0], b[1], b[2], b[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, col) = (ht - 1 - i / w, i % w);
        out.data_mut()[row * w + col] = v;
    }
    Ok(out)
}

pub fn encode_pfm(map: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = map.shape()[..] else {
        return Err(Error::shape("encode_pfm", format!("expected [H,W], got {:?}", map.shape())));
    };
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for row in (0..h).rev() {
        for v in &map.data()[row * w..(row + 1) * w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_ppm(&read(path)?).map_err(|source| Error::Pnm { path: path.into(), source })
}

/// Writes an image as 8-bit PPM, clamping to `[0,1]`.
pub fn write_image(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    write(path.as_ref(), &encode_ppm(img)?)
}

pub fn read_map(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_pfm(&read(path)?).map_err(|source| Error::Pnm { path: path.into(), source })
}

pub fn write_map(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    write(path.as_ref(), &encode_pfm(map)?)
}

/// Rounds an image to the 8-bit grid PPM stores.
pub fn quantize_image(img: &Tensor) -> Tensor {
    img.map(|v| quantize(v) as f32 / 255.0)
}
