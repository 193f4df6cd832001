//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "MOEDHZCK"
//! version  u32
//! header   u32 length + UTF-8 TOML (rng convention, precision, seed, step, [model])
//! count    u32
//! tensor*  u32 name length, name, u8 element width (4 or 8), u32 rank,
//!          u64 dims, little-endian elements
//! ```
//!
//! All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numcore::{Precision, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOEDHZCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters are drawn from `rand_chacha::ChaCha8Rng::seed_from_u64(seed)`
/// via `rand` 0.9, uniform in `f64` and then cast.
pub const RNG_CONVENTION: &str = "chacha8-rand0.9-seed_from_u64";

#[derive(Serialize, Deserialize)]
struct Header {
    rng: String,
    precision: Precision,
    seed: u64,
    step: u64,
    model: ModelConfig,
}

/// Named tensors plus the configuration needed to rebuild the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("truncated file"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("non-UTF-8 string"))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Precision a checkpoint file was written at, read from its header.
pub fn stored_precision(path: &Path) -> Result<Precision> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(8).map_err(|_| corrupt("not a checkpoint"))? != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    r.u32()?;
    let header: Header =
        toml::from_str(&r.string()?).map_err(|e| corrupt(format!("header: {e}")))?;
    Ok(header.precision)
}

impl<T: Scalar> Checkpoint<T> {
    /// Finds a tensor by name.
    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Header text as stored in the file.
    pub fn header_text(&self) -> Result<String> {
        let header = Header {
            rng: RNG_CONVENTION.into(),
            precision: T::PRECISION,
            seed: self.seed,
            step: self.step,
            model: self.config.clone(),
        };
        toml::to_string(&header).map_err(|e| corrupt(format!("header: {e}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.header_text()?);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.push(T::PRECISION.byte_width() as u8);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint. Elements stored at the other precision are
    /// converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8).map_err(|_| corrupt("not a checkpoint"))? != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let header: Header =
            toml::from_str(&r.string()?).map_err(|e| corrupt(format!("header: {e}")))?;
        if header.rng != RNG_CONVENTION {
            return Err(corrupt(format!("unknown RNG convention {:?}", header.rng)));
        }
        header.model.validate()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let width = r.u8()? as usize;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| corrupt("shape overflow"))?;
            let raw = r.take(
                n.checked_mul(width)
                    .ok_or_else(|| corrupt("size overflow"))?,
            )?;
            let data: Vec<T> = match width {
                4 => raw
                    .chunks_exact(4)
                    .map(|b| T::of(f32::read_le(b) as f64))
                    .collect(),
                8 => raw
                    .chunks_exact(8)
                    .map(|b| T::of(f64::read_le(b)))
                    .collect(),
                w => return Err(corrupt(format!("tensor {name}: element width {w}"))),
            };
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes after the last tensor"));
        }
        Ok(Checkpoint {
            config: header.model,
            seed: header.seed,
            step: header.step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
