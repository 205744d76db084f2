//! Binary checkpoint codec and transfer-learning weight surgery.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GVPC" | u32 version | u32 len, config text (UTF-8)
//! repeated: u32 len, name | u32 rank | u64 dims[rank] | f64 payload
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use crate::config::{model_text, parse_model_text, ConfigError};
use crate::model::{GvpGnnModel, ModelConfig, ModelError};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"GVPC";
pub const VERSION: u32 = 1;

/// Default transfer set: the embedding and the first two layers.
pub const TRANSFER_PREFIXES: [&str; 3] = ["embed", "layer.0", "layer.1"];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint text is not UTF-8")]
    Utf8,
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("tensor {name}: rank {rank} unsupported")]
    Rank { name: String, rank: u32 },
    #[error("tensor {name}: shape {got:?} does not match expected {expected:?}")]
    ShapeMismatch { name: String, expected: (usize, usize), got: (usize, usize) },
    #[error("tensor {0} missing from checkpoint")]
    Missing(String),
    #[error("checkpoint tensor {0} is not part of the model")]
    Unexpected(String),
    #[error("tensor {0} appears twice")]
    Duplicate(String),
    #[error("prefix {0:?} matches no model tensor")]
    UnknownPrefix(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(self.buf.len()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self) -> Result<&'a str, CheckpointError> {
        let n = self.u32()? as usize;
        core::str::from_utf8(self.take(n)?).map_err(|_| CheckpointError::Utf8)
    }
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn from_model(model: &GvpGnnModel) -> Self {
        Self {
            config: model.config().clone(),
            seed: model.seed(),
            tensors: model.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_text(&mut out, &model_text(&self.config, self.seed));
        for (name, t) in &self.tensors {
            put_text(&mut out, name);
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4).map_err(|_| CheckpointError::Magic)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let (config, seed) = parse_model_text(r.text()?)?;
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        while r.pos < bytes.len() {
            let name = String::from(r.text()?);
            let rank = r.u32()?;
            if rank != 2 {
                return Err(CheckpointError::Rank { name, rank });
            }
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let len = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or(CheckpointError::Truncated(bytes.len()))?;
            let data = r.take(len)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if tensors.iter().any(|(n, _)| *n == name) {
                return Err(CheckpointError::Duplicate(name));
            }
            tensors.push((name, Tensor::from_vec(rows, cols, data)));
        }
        Ok(Self { config, seed, tensors })
    }

    /// Copies every tensor into `model`. Validation happens first, so a
    /// failed load leaves `model` untouched.
    pub fn load_into(&self, model: &mut GvpGnnModel) -> Result<(), CheckpointError> {
        let mut plan = Vec::new();
        for (name, t) in model.named_tensors() {
            let src = self.tensor(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if src.shape() != t.shape() {
                return Err(CheckpointError::ShapeMismatch { name, expected: t.shape(), got: src.shape() });
            }
            plan.push(src);
        }
        if let Some((extra, _)) = self.tensors.iter().find(|(n, _)| !model.named_tensors().iter().any(|(m, _)| m == n)) {
            return Err(CheckpointError::Unexpected(extra.clone()));
        }
        for ((_, dst), src) in model.named_tensors_mut().into_iter().zip(plan) {
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn to_model(&self) -> Result<GvpGnnModel, CheckpointError> {
        let mut model = GvpGnnModel::new(self.config.clone(), self.seed)?;
        self.load_into(&mut model)?;
        Ok(model)
    }
}

/// `name` equals `prefix` or continues it after a dot. A trailing `.*` on
/// the prefix is ignored.
pub fn matches_prefix(name: &str, prefix: &str) -> bool {
    let p = prefix.strip_suffix(".*").unwrap_or(prefix);
    name == p || name.strip_prefix(p).is_some_and(|rest| rest.starts_with('.'))
}

/// Re-initializes `model` from its own seed, then copies the checkpoint
/// tensors whose names fall under `prefixes`. Returns the new model and the
/// copied names in canonical order.
pub fn transfer_load(ckpt: &Checkpoint, model: &GvpGnnModel, prefixes: &[&str]) -> Result<(GvpGnnModel, Vec<String>), CheckpointError> {
    let mut fresh = model.reinitialized();
    for p in prefixes {
        if !fresh.named_tensors().iter().any(|(n, _)| matches_prefix(n, p)) {
            return Err(CheckpointError::UnknownPrefix(String::from(*p)));
        }
    }
    let mut copied = Vec::new();
    let mut plan = Vec::new();
    for (name, t) in fresh.named_tensors() {
        if !prefixes.iter().any(|p| matches_prefix(&name, p)) {
            continue;
        }
        let src = ckpt.tensor(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        if src.shape() != t.shape() {
            return Err(CheckpointError::ShapeMismatch { name, expected: t.shape(), got: src.shape() });
        }
        plan.push(src.clone());
        copied.push(name);
    }
    let mut plan = plan.into_iter();
    for (name, dst) in fresh.named_tensors_mut() {
        if prefixes.iter().any(|p| matches_prefix(&name, p)) {
            *dst = plan.next().expect("one planned tensor per match");
        }
    }
    Ok((fresh, copied))
}

/// Parses a comma-separated prefix list; an empty string is the empty set.
pub fn parse_prefixes(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(|p| String::from(p)).collect()
}
