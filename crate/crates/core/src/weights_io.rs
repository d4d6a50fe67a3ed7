//! Flat binary weight files.
//!
//! Layout (little endian): magic `ICLW1`, `d: u64`, `L: u64`, `shared: u8`,
//! `activation: u8`, then for each stored layer `A` row-major as `f64`
//! followed by `u` as `f64`. Looped files store one layer regardless of `L`.

use thiserror::Error;

use crate::attention::{Activation, RestrictedLayer, RestrictedWeights};
use crate::linalg::{Mat, Vector};

pub const MAGIC: &[u8; 5] = b"ICLW1";
/// Guards against absurd headers before allocating.
const MAX_DIM: u64 = 1 << 16;
const MAX_DEPTH: u64 = 1 << 24;

#[derive(Debug, Error, PartialEq)]
pub enum WeightFileError {
    #[error("offset {offset}: bad magic, expected \"ICLW1\"")]
    BadMagic { offset: usize },
    #[error("offset {offset}: file ends inside field `{field}`")]
    Truncated { offset: usize, field: String },
    #[error("offset {offset}: invalid value for `{field}`: {reason}")]
    InvalidField {
        offset: usize,
        field: &'static str,
        reason: String,
    },
    #[error("offset {offset}: {extra} trailing bytes")]
    TrailingBytes { offset: usize, extra: usize },
}

/// Weights together with the depth recorded in the header.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub weights: RestrictedWeights,
    pub depth: usize,
}

/// `depth` is recorded for looped weights; multilayer weights always record
/// their own layer count.
pub fn serialize_weights(w: &RestrictedWeights, depth: usize) -> Vec<u8> {
    let d = w.d();
    let stored = w.layers().len();
    let depth = if w.is_shared() { depth } else { stored };
    let mut out = Vec::with_capacity(MAGIC.len() + 18 + stored * (d * d + d) * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(d as u64).to_le_bytes());
    out.extend_from_slice(&(depth as u64).to_le_bytes());
    out.push(u8::from(w.is_shared()));
    out.push(w.activation().code());
    for layer in w.layers() {
        for i in 0..d {
            for j in 0..d {
                out.extend_from_slice(&layer.a[(i, j)].to_le_bytes());
            }
        }
        for x in layer.u.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: impl FnOnce() -> String) -> Result<&'a [u8], WeightFileError> {
        if self.buf.len() - self.pos < n {
            return Err(WeightFileError::Truncated {
                offset: self.pos,
                field: field(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, field: &'static str) -> Result<u64, WeightFileError> {
        let b = self.take(8, || field.to_string())?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn u8(&mut self, field: &'static str) -> Result<u8, WeightFileError> {
        Ok(self.take(1, || field.to_string())?[0])
    }

    fn f64(&mut self, field: impl FnOnce() -> String) -> Result<f64, WeightFileError> {
        let b = self.take(8, field)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn deserialize_weights(bytes: &[u8]) -> Result<WeightFile, WeightFileError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), || "magic".into()).map_err(|_| WeightFileError::BadMagic { offset: 0 })?;
    if magic != MAGIC {
        return Err(WeightFileError::BadMagic { offset: 0 });
    }
    let off = r.pos;
    let d = r.u64("d")?;
    if d == 0 || d > MAX_DIM {
        return Err(WeightFileError::InvalidField {
            offset: off,
            field: "d",
            reason: format!("{d} outside 1..={MAX_DIM}"),
        });
    }
    let off = r.pos;
    let depth = r.u64("L")?;
    if depth == 0 || depth > MAX_DEPTH {
        return Err(WeightFileError::InvalidField {
            offset: off,
            field: "L",
            reason: format!("{depth} outside 1..={MAX_DEPTH}"),
        });
    }
    let off = r.pos;
    let shared = match r.u8("shared")? {
        0 => false,
        1 => true,
        v => {
            return Err(WeightFileError::InvalidField {
                offset: off,
                field: "shared",
                reason: format!("flag {v} is not 0 or 1"),
            })
        }
    };
    let off = r.pos;
    let code = r.u8("activation")?;
    let activation = Activation::from_code(code).ok_or_else(|| WeightFileError::InvalidField {
        offset: off,
        field: "activation",
        reason: format!("unknown code {code}"),
    })?;

    let (d, depth) = (d as usize, depth as usize);
    let stored = if shared { 1 } else { depth };
    let mut layers = Vec::with_capacity(stored.min(1024));
    for t in 0..stored {
        let mut a = Mat::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                a[(i, j)] = r.f64(|| format!("layer {t} A[{i},{j}]"))?;
            }
        }
        let mut u = Vector::zeros(d);
        for i in 0..d {
            u[i] = r.f64(|| format!("layer {t} u[{i}]"))?;
        }
        layers.push(RestrictedLayer { a, u });
    }
    if r.pos != bytes.len() {
        return Err(WeightFileError::TrailingBytes {
            offset: r.pos,
            extra: bytes.len() - r.pos,
        });
    }
    let weights = if shared {
        RestrictedWeights::looped(layers.pop().expect("one layer"), activation)
    } else {
        RestrictedWeights::multilayer(layers, activation)
    }
    .expect("shapes checked while reading");
    Ok(WeightFile { weights, depth })
}
