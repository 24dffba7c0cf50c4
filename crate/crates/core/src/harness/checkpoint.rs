//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RTMI"  u32 version  [u8; 32] config digest  u64 step
//! u32 tensor count
//!   per tensor: u32 name length, name (UTF-8), u32 rank, rank × u32 dims,
//!               prod(dims) × f32 values
//! u32 tag length, tag (UTF-8), u32 state length, state bytes
//! ```
//!
//! Tensor names are prefixed `param/`, `adam.m/`, `adam.v/` and `ema/`;
//! `state/matched_latents` and `state/acceptance` hold the matching
//! state carried between pool refreshes.

use std::path::Path;

use crate::imle::{Adam, AdamConfig, TrainState};
use crate::params::ParamSet;
use crate::rng::{self, RNG_TAG};
use crate::tensor::DiffTensor;

pub const MAGIC: &[u8; 4] = b"RTMI";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("checkpoint was written for config {found}, not {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub step: u64,
    pub tensors: Vec<(String, DiffTensor)>,
    pub rng_tag: String,
    pub rng_state: Vec<u8>,
}

const P_PARAM: &str = "param/";
const P_M: &str = "adam.m/";
const P_V: &str = "adam.v/";
const P_EMA: &str = "ema/";
const MATCHED: &str = "state/matched_latents";
const ACCEPTANCE: &str = "state/acceptance";

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated { offset: self.buf.len() })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        buf.extend_from_slice(&self.digest);
        buf.extend_from_slice(&self.step.to_le_bytes());
        put_u32(&mut buf, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut buf, name);
            put_u32(&mut buf, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut buf, d as u32);
            }
            for v in t.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_str(&mut buf, &self.rng_tag);
        put_u32(&mut buf, self.rng_state.len() as u32);
        buf.extend_from_slice(&self.rng_state);
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if bytes.len() < 4 {
            return Err(if MAGIC.starts_with(bytes) {
                CheckpointError::Truncated { offset: bytes.len() }
            } else {
                CheckpointError::BadMagic
            });
        }
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let step = r.u64()?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= bytes.len())
                .ok_or(CheckpointError::Truncated { offset: bytes.len() })?;
            let raw = r.take(len * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = DiffTensor::new(&shape, values).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        let rng_tag = r.string()?;
        let n = r.u32()? as usize;
        let rng_state = r.take(n)?.to_vec();
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            digest,
            step,
            tensors,
            rng_tag,
            rng_state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        let io = |e: std::io::Error| CheckpointError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        std::fs::write(&tmp, self.encode()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::decode(&bytes)
    }

    /// Fails unless the checkpoint was written for a config with `digest`.
    pub fn verify(&self, digest: &[u8; 32]) -> Result<(), CheckpointError> {
        if &self.digest != digest {
            return Err(CheckpointError::DigestMismatch {
                expected: super::config::hex12(digest),
                found: super::config::hex12(&self.digest),
            });
        }
        Ok(())
    }

    pub fn from_state(digest: [u8; 32], state: &TrainState) -> Self {
        let mut tensors = Vec::new();
        for (prefix, set) in [
            (P_PARAM, &state.params),
            (P_M, &state.adam.m),
            (P_V, &state.adam.v),
            (P_EMA, &state.ema),
        ] {
            for (name, t) in set.iter() {
                tensors.push((format!("{prefix}{name}"), t.detach()));
            }
        }
        if let Some(m) = &state.matched {
            let d = m.len() / state.matched_rows.max(1);
            let t = DiffTensor::new(&[state.matched_rows, d], m.clone()).expect("matched latents are [n, d]");
            tensors.push((MATCHED.to_string(), t));
        }
        let acc = DiffTensor::new(&[2], vec![state.accepted as f32, state.pool as f32]).expect("two values");
        tensors.push((ACCEPTANCE.to_string(), acc));
        Self {
            digest,
            step: state.step,
            tensors,
            rng_tag: RNG_TAG.to_string(),
            rng_state: rng::state_bytes(state.seed),
        }
    }

    /// Rebuilds a training state. `template` fixes the expected parameter
    /// layout; `lr` configures the restored optimiser.
    pub fn to_state(&self, template: &ParamSet, lr: f64) -> Result<TrainState, CheckpointError> {
        if self.rng_tag != RNG_TAG {
            return Err(CheckpointError::Malformed(format!("unknown rng algorithm `{}`", self.rng_tag)));
        }
        let seed = rng::seed_from_state(&self.rng_state).ok_or_else(|| CheckpointError::Malformed("rng state must be 8 bytes".into()))?;
        let mut sets = [ParamSet::new(), ParamSet::new(), ParamSet::new(), ParamSet::new()];
        let mut matched = None;
        let mut acceptance = None;
        for (name, t) in &self.tensors {
            let slot = [P_PARAM, P_M, P_V, P_EMA].iter().position(|p| name.starts_with(p));
            match (slot, name.as_str()) {
                (Some(i), _) => {
                    let prefix = [P_PARAM, P_M, P_V, P_EMA][i];
                    sets[i].insert(&name[prefix.len()..], t.clone());
                }
                (None, MATCHED) => matched = Some(t.clone()),
                (None, ACCEPTANCE) if t.len() == 2 => acceptance = Some(t.values().to_vec()),
                _ => return Err(CheckpointError::Malformed(format!("unexpected tensor `{name}`"))),
            }
        }
        let [params, m, v, ema] = sets;
        for (label, set) in [("param", &params), ("adam.m", &m), ("adam.v", &v), ("ema", &ema)] {
            template
                .check_layout(set)
                .map_err(|e| CheckpointError::Malformed(format!("{label}: {e}")))?;
        }
        let acceptance = acceptance.ok_or_else(|| CheckpointError::Malformed(format!("missing `{ACCEPTANCE}`")))?;
        let (accepted, pool) = (acceptance[0] as usize, acceptance[1] as usize);
        let matched_rows = matched.as_ref().map_or(0, |t| t.shape()[0]);
        Ok(TrainState {
            params,
            adam: Adam {
                cfg: AdamConfig::new(lr),
                m,
                v,
                t: self.step,
            },
            ema,
            step: self.step,
            seed,
            matched: matched.map(|t| t.values().to_vec()),
            matched_rows,
            accepted,
            pool,
        })
    }
}
