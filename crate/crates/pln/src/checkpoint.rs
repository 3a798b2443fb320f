//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "PLNCKPT1"
//! hash       u64      model config hash
//! config     u32 len + UTF-8 JSON of the model config
//! epochs     u64      completed epochs
//! step       u64      optimizer step
//! count      u32      number of tensor entries
//! entry      u32 name len, name, u32 ndim, u64 dims..., f64 data...
//! digest     32 bytes SHA-256 of everything above
//! ```
//!
//! All integers and floats are little-endian. Parameters come first in
//! layout order, followed by `adam.m/<name>` and `adam.v/<name>` entries.

use std::fs;
use std::path::Path;

use pln_core::autodiff::{AdamState, ParamStore};
use pln_core::branch::{ModelConfig, Pln};
use pln_core::Tensor;
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 8] = b"PLNCKPT1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint digest mismatch; the file is corrupt")]
    Digest,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("config hash mismatch: checkpoint {stored:016x}, config {expected:016x}; {detail}")]
    HashMismatch {
        stored: u64,
        expected: u64,
        detail: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    pub epochs_done: usize,
}

impl Checkpoint {
    pub fn new(model: &Pln, adam: &AdamState, epochs_done: usize) -> Self {
        Self {
            config: model.config().clone(),
            params: model.params().clone(),
            adam: adam.clone(),
            epochs_done,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.config.hash().to_le_bytes());
        let json = serde_json::to_string(&self.config).expect("config serializes");
        put_u32(&mut out, json.len());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&(self.epochs_done as u64).to_le_bytes());
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        put_u32(&mut out, 3 * self.params.len());
        for (_, name, t) in self.params.iter() {
            put_entry(&mut out, name, t.shape(), t.data());
        }
        for (prefix, bufs) in [("adam.m/", &self.adam.m), ("adam.v/", &self.adam.v)] {
            for ((_, name, t), buf) in self.params.iter().zip(bufs) {
                put_entry(&mut out, &format!("{prefix}{name}"), t.shape(), buf);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 32 {
            return Err(CheckpointError::Truncated);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Digest);
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let hash = r.u64()?;
        let json_len = r.u32()?;
        let json = std::str::from_utf8(r.take(json_len)?)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let config: ModelConfig =
            serde_json::from_str(json).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if config.hash() != hash {
            return Err(CheckpointError::Malformed(
                "stored hash does not match the stored config".into(),
            ));
        }
        let epochs_done = r.u64()? as usize;
        let step = r.u64()?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?
                .to_string();
            let ndim = r.u32()?;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if name.starts_with("adam.m/") {
                m.push(data);
            } else if name.starts_with("adam.v/") {
                v.push(data);
            } else {
                if params.find(&name).is_some() {
                    return Err(CheckpointError::Malformed(format!("duplicate entry {name}")));
                }
                let t = Tensor::new(&shape, data)
                    .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
                params.add(&name, t);
            }
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(CheckpointError::Malformed("optimizer state incomplete".into()));
        }
        Ok(Self {
            config,
            params,
            adam: AdamState { step, m, v },
            epochs_done,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Refuses a checkpoint trained under a different model config.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<(), CheckpointError> {
        if self.config.hash() == expected.hash() {
            return Ok(());
        }
        Err(CheckpointError::HashMismatch {
            stored: self.config.hash(),
            expected: expected.hash(),
            detail: config_diff(&self.config, expected),
        })
    }

    pub fn into_model(self) -> anyhow::Result<(Pln, AdamState, usize)> {
        let model = Pln::from_params(self.config, self.params)?;
        Ok((model, self.adam, self.epochs_done))
    }
}

/// Human-readable list of fields that differ.
pub fn config_diff(a: &ModelConfig, b: &ModelConfig) -> String {
    let (va, vb) = (
        serde_json::to_value(a).expect("config serializes"),
        serde_json::to_value(b).expect("config serializes"),
    );
    let (Some(ma), Some(mb)) = (va.as_object(), vb.as_object()) else {
        return String::new();
    };
    let diffs: Vec<String> = ma
        .iter()
        .filter(|(k, x)| mb.get(*k) != Some(x))
        .map(|(k, x)| format!("{k}: checkpoint {x}, config {}", mb.get(k).cloned().unwrap_or_default()))
        .collect();
    if diffs.is_empty() {
        "configs differ".into()
    } else {
        format!("differing fields: {}", diffs.join("; "))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
