//! Binary checkpoints.
//!
//! Layout: the magic `VHRNNCKP`, a little-endian `u32` version, then records
//! `[kind u8][name_len u32][name][payload_len u64][payload][crc32 u32]`, the
//! checksum covering everything in the record before it. The last record is
//! an end marker carrying the record count. Floats are little-endian `f64`.

use std::path::Path;

use thiserror::Error;
use vhrnn::models::{Model, ModelConfig};
use vhrnn::objectives::{OptimConfig, OptimState};
use vhrnn::tensor::Tensor;

use crate::config::{ConfigError, RunConfig};

pub const MAGIC: &[u8; 8] = b"VHRNNCKP";
pub const VERSION: u32 = 1;

const KIND_CONFIG: u8 = 1;
const KIND_STATE: u8 = 2;
const KIND_PARAM: u8 = 3;
const KIND_ADAM_M: u8 = 4;
const KIND_ADAM_V: u8 = 5;
const KIND_END: u8 = 0xff;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checksum mismatch in record {index} ({name:?})")]
    Checksum { index: usize, name: String },
    #[error("malformed record {index}: {msg}")]
    Malformed { index: usize, msg: String },
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: Vec<(String, Tensor)>,
    /// Adam step count and moments, aligned with `params`.
    pub optim_step: u64,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    /// Last completed epoch.
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_valid: f64,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, model: &Model, optim: &OptimState, epoch: usize, best_epoch: usize, best_valid: f64) -> Self {
        use vhrnn::models::StepModel;
        Self {
            config: config.clone(),
            params: model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            optim_step: optim.step,
            adam_m: optim.m.clone(),
            adam_v: optim.v.clone(),
            epoch,
            best_epoch,
            best_valid,
        }
    }

    /// Builds the stored model under `cfg`, which defaults to the stored
    /// model config; a mismatch names the first missing or unknown parameter.
    pub fn model(&self, cfg: Option<&ModelConfig>) -> std::result::Result<Model, vhrnn::models::ModelError> {
        let cfg = cfg.unwrap_or(&self.config.model).clone();
        Model::from_params(cfg, self.params.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn optim_state(&self, cfg: OptimConfig) -> OptimState {
        OptimState {
            cfg,
            step: self.optim_step,
            m: self.adam_m.clone(),
            v: self.adam_v.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let rec = |out: &mut Vec<u8>, kind: u8, name: &str, payload: &[u8]| {
            let start = out.len();
            out.push(kind);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        };
        rec(&mut out, KIND_CONFIG, "config", self.config.to_toml().as_bytes());
        let mut state = Vec::new();
        state.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        state.extend_from_slice(&(self.best_epoch as u64).to_le_bytes());
        state.extend_from_slice(&self.best_valid.to_le_bytes());
        state.extend_from_slice(&self.optim_step.to_le_bytes());
        rec(&mut out, KIND_STATE, "state", &state);
        for (i, (name, t)) in self.params.iter().enumerate() {
            rec(&mut out, KIND_PARAM, name, &encode_tensor(t));
            if let (Some(m), Some(v)) = (self.adam_m.get(i), self.adam_v.get(i)) {
                rec(&mut out, KIND_ADAM_M, name, &encode_tensor(m));
                rec(&mut out, KIND_ADAM_V, name, &encode_tensor(v));
            }
        }
        let moments = (0..self.params.len())
            .filter(|&i| self.adam_m.get(i).is_some() && self.adam_v.get(i).is_some())
            .count();
        let total = (3 + self.params.len() + 2 * moments) as u64;
        rec(&mut out, KIND_END, "end", &total.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let mut config = None;
        let mut state = None;
        let mut params: Vec<(String, Tensor)> = Vec::new();
        let (mut adam_m, mut adam_v) = (Vec::new(), Vec::new());
        let mut index = 0usize;
        loop {
            let start = r.pos;
            let kind = r.take(1)?[0];
            let name_len = r.u32()? as usize;
            let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
            let len = r.u64()?;
            let len = usize::try_from(len).map_err(|_| CheckpointError::Truncated(r.pos))?;
            let payload = r.take(len)?;
            let body_end = r.pos;
            let crc = r.u32()?;
            if crc32fast::hash(&bytes[start..body_end]) != crc {
                return Err(CheckpointError::Checksum { index, name });
            }
            let malformed = |msg: &str| CheckpointError::Malformed {
                index,
                msg: msg.to_string(),
            };
            match kind {
                KIND_CONFIG => {
                    let text = std::str::from_utf8(payload).map_err(|_| malformed("config is not UTF-8"))?;
                    config = Some(RunConfig::parse(text, &[])?);
                }
                KIND_STATE => {
                    if payload.len() != 32 {
                        return Err(malformed("state record has wrong length"));
                    }
                    let word = |i: usize| u64::from_le_bytes(payload[8 * i..8 * i + 8].try_into().expect("8 bytes"));
                    state = Some((word(0) as usize, word(1) as usize, f64::from_bits(word(2)), word(3)));
                }
                KIND_PARAM => params.push((name, decode_tensor(payload).ok_or_else(|| malformed("bad tensor"))?)),
                KIND_ADAM_M => adam_m.push(decode_tensor(payload).ok_or_else(|| malformed("bad tensor"))?),
                KIND_ADAM_V => adam_v.push(decode_tensor(payload).ok_or_else(|| malformed("bad tensor"))?),
                KIND_END => {
                    let n = payload
                        .try_into()
                        .map(u64::from_le_bytes)
                        .map_err(|_| malformed("end record has wrong length"))?;
                    if n as usize != index + 1 {
                        return Err(malformed("record count does not match end marker"));
                    }
                    if r.pos != bytes.len() {
                        return Err(malformed("trailing bytes after end marker"));
                    }
                    break;
                }
                other => return Err(malformed(&format!("unknown record kind {other}"))),
            }
            index += 1;
        }
        let config = config.ok_or_else(|| CheckpointError::Malformed {
            index,
            msg: "missing config record".into(),
        })?;
        let (epoch, best_epoch, best_valid, optim_step) = state.ok_or_else(|| CheckpointError::Malformed {
            index,
            msg: "missing state record".into(),
        })?;
        if adam_m.len() != adam_v.len() || (!adam_m.is_empty() && adam_m.len() != params.len()) {
            return Err(CheckpointError::Malformed {
                index,
                msg: "optimizer moments do not match parameters".into(),
            });
        }
        Ok(Self {
            config,
            params,
            optim_step,
            adam_m,
            adam_v,
            epoch,
            best_epoch,
            best_valid,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * (t.shape().len() + t.numel()));
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_tensor(b: &[u8]) -> Option<Tensor> {
    let ndim = u32::from_le_bytes(b.get(..4)?.try_into().ok()?) as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut pos = 4;
    for _ in 0..ndim {
        shape.push(u64::from_le_bytes(b.get(pos..pos + 8)?.try_into().ok()?) as usize);
        pos += 8;
    }
    let n: usize = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
    let body = b.get(pos..)?;
    if body.len() != n.checked_mul(8)? {
        return None;
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data).ok()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
