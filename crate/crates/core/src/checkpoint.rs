//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "GCTRCKPT"
//! version    u32
//! spec       u64 length + UTF-8 canonical model spec
//! adam       u64 step, f64 learning_rate, beta1, beta2, eps
//! tensors    u32 count, then per tensor:
//!              u32 name length + UTF-8 name
//!              u32 ndim + u64 dims
//!              f64 values, f64 first moments, f64 second moments
//! checksum   32-byte SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Model, ModelError, ModelSpec, Parameterized};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{AdamConfig, AdamState};

pub const MAGIC: &[u8; 8] = b"GCTRCKPT";
pub const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch: file is truncated or corrupt")]
    Checksum,
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
    #[error("checkpoint was written for a different model:\n  {}", .0.join("\n  "))]
    SpecMismatch(Vec<String>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn into_model(self) -> Result<(Model, AdamState)> {
        let mut model = Model::new(self.spec, 0)?;
        model.load_params(&self.params)?;
        Ok((model, self.adam))
    }
}

pub fn encode(model: &Model, adam: &AdamState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let spec = model.spec().to_canonical();
    out.extend_from_slice(&(spec.len() as u64).to_le_bytes());
    out.extend_from_slice(spec.as_bytes());
    out.extend_from_slice(&adam.step.to_le_bytes());
    for v in [
        adam.config.learning_rate,
        adam.config.beta1,
        adam.config.beta2,
        adam.config.eps,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (i, (name, value, _)) in params.iter().enumerate() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
        for d in value.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        let zeros;
        let (m, v) = if adam.matches(params) {
            (&adam.m[i], &adam.v[i])
        } else {
            zeros = Tensor::zeros(value.shape());
            (&zeros, &zeros)
        };
        for t in [value, m, v] {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save_checkpoint(path: &Path, model: &Model, adam: &AdamState) -> Result<()> {
    fs::write(path, encode(model, adam))?;
    Ok(())
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
            .ok_or_else(|| CheckpointError::Malformed("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| CheckpointError::Malformed("invalid UTF-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(CheckpointError::Checksum);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }

    let mut r = Reader { buf: body, pos: 12 };
    let spec_len = r.u64()? as usize;
    let spec = ModelSpec::from_canonical(&r.string(spec_len)?)?;
    let step = r.u64()?;
    let config = AdamConfig {
        learning_rate: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
    };
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    let mut m = Vec::with_capacity(count);
    let mut v = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mk = |data| Tensor::new(shape.clone(), data).map_err(|e| CheckpointError::Malformed(e.to_string()));
        let value = mk(r.f64s(n)?)?;
        m.push(mk(r.f64s(n)?)?);
        v.push(mk(r.f64s(n)?)?);
        params
            .register(name, value)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(Checkpoint {
        spec,
        params,
        adam: AdamState { config, step, m, v },
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

/// Loads and refuses checkpoints whose spec differs from `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelSpec) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    let diff = ck.spec.diff(expected);
    if !diff.is_empty() {
        return Err(CheckpointError::SpecMismatch(diff));
    }
    Ok(ck)
}
