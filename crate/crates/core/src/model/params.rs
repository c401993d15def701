//! Named parameter tensors and the `OCTAUNW1` checkpoint format.
//!
//! Checkpoint layout (integers u32 little-endian):
//! magic `OCTAUNW1`, config JSON length + UTF-8 JSON [`UNetConfig`],
//! tensor count, then per tensor: name length + UTF-8 name, rank, dims,
//! f32 LE payload.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Architecture, UNetConfig};
use super::tensor::Real;
use super::ModelError;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OCTAUNW1";

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    /// Running batch-norm statistics are not learnable.
    pub learnable: bool,
}

/// All tensors of one network, in architecture order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub config: UNetConfig,
    pub tensors: Vec<ParamTensor<T>>,
}

pub type ModelParams = Params<f32>;

/// Parameter gradients; running-statistic entries stay zero.
pub type Gradients<T> = Params<T>;

impl<T: Real> Params<T> {
    pub fn zeros_like(&self) -> Self {
        Params {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![T::zero(); t.data.len()],
                    learnable: t.learnable,
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_learnable(&self) -> usize {
        self.tensors.iter().filter(|t| t.learnable).map(|t| t.data.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t
                        .data
                        .iter()
                        .map(|x| U::from_f64(x.to_f64().unwrap_or(0.0)).unwrap_or(U::zero()))
                        .collect(),
                    learnable: t.learnable,
                })
                .collect(),
        }
    }

    /// Checks every tensor's name and shape against the config's architecture.
    pub fn audit(&self) -> Result<Architecture, ModelError> {
        let arch = Architecture::new(&self.config)?;
        if arch.slots.len() != self.tensors.len() {
            return Err(ModelError::ShapeAudit(format!(
                "expected {} tensors, found {}",
                arch.slots.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape, learnable), t) in arch.slots.iter().zip(&self.tensors) {
            let len: usize = shape.iter().product();
            if *name != t.name || *shape != t.shape || t.data.len() != len || *learnable != t.learnable {
                return Err(ModelError::ShapeAudit(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, name, shape
                )));
            }
        }
        Ok(arch)
    }
}

/// Deterministic initialization: conv weights `U(-b, b)` with
/// `b = sqrt(6 / fan_in)`, zero biases, unit BN scale, zero BN shift,
/// running statistics (0, 1).
pub fn build_params(cfg: &UNetConfig, seed: u64) -> Result<ModelParams, ModelError> {
    let arch = Architecture::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = arch
        .slots
        .iter()
        .map(|(name, shape, learnable)| {
            let len: usize = shape.iter().product();
            let data = if name.ends_with(".weight") {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let bound = (6.0 / fan_in).sqrt() as f32;
                (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
            } else if name.ends_with("gamma") || name.ends_with("running_var") {
                vec![1.0; len]
            } else {
                vec![0.0; len]
            };
            ParamTensor {
                name: name.clone(),
                shape: shape.clone(),
                data,
                learnable: *learnable,
            }
        })
        .collect();
    Ok(Params {
        config: cfg.clone(),
        tensors,
    })
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg = serde_json::to_vec(&params.config).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for t in &params.tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], ModelError> {
        if self.bytes.len() - self.pos < len {
            return Err(ModelError::Checkpoint(format!(
                "truncated at offset {}: needed {len} bytes",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn utf8(&mut self, len: usize) -> Result<&'a str, ModelError> {
        let at = self.pos;
        std::str::from_utf8(self.take(len)?)
            .map_err(|_| ModelError::Checkpoint(format!("invalid UTF-8 at offset {at}")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams, ModelError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic at offset 0".into()));
    }
    let cfg_len = cur.u32()?;
    let config: UNetConfig = serde_json::from_str(cur.utf8(cfg_len)?)
        .map_err(|e| ModelError::Checkpoint(format!("config block: {e}")))?;
    let count = cur.u32()?;
    let arch = Architecture::new(&config)?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()?;
        let name = cur.utf8(name_len)?.to_string();
        let rank = cur.u32()?;
        let shape = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        let data = cur
            .take(4 * len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let learnable = arch
            .slots
            .iter()
            .find(|(n, _, _)| *n == name)
            .is_none_or(|(_, _, l)| *l);
        tensors.push(ParamTensor {
            name,
            shape,
            data,
            learnable,
        });
    }
    if cur.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes at offset {}",
            bytes.len() - cur.pos,
            cur.pos
        )));
    }
    let params = Params { config, tensors };
    params.audit()?;
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|e| ModelError::Io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams, ModelError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ModelError::Io(path.display().to_string(), e))?;
    decode_checkpoint(&bytes)
}
