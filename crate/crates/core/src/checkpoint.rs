//! Single-file checkpoints.
//!
//! Layout (little-endian): the 8-byte magic `SLOTCKPT`, a `u32` format
//! version, a `u64` manifest length, the JSON manifest, then the payload of
//! raw `f32` values. The manifest lists every tensor with its byte offset in
//! the payload, echoes the run configuration and records the payload's
//! SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelDims};
use crate::nn::{ParamStore, Tensor};
use crate::training::{OptimizerState, Stage};

const MAGIC: &[u8; 8] = b"SLOTCKPT";
pub const FORMAT_VERSION: u32 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Next step index; every draw is derived from `(seed, step)`.
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    dims: ModelDims,
    config: serde_json::Value,
    stage: Stage,
    step: u64,
    optimizer_step: u64,
    rng: RngState,
    payload_sha256: String,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub opt: OptimizerState<f32>,
    pub config: serde_json::Value,
    pub stage: Stage,
    /// Completed updates in `stage`.
    pub step: u64,
    pub rng: RngState,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: &str, t: &Tensor<f32>, trainable: bool| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                dtype: "f32".to_string(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                trainable,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, e) in self.model.params.iter() {
            push(name, &e.tensor, e.trainable);
        }
        for (name, t) in &self.opt.m {
            push(&format!("{ADAM_M}{name}"), t, false);
        }
        for (name, t) in &self.opt.v {
            push(&format!("{ADAM_V}{name}"), t, false);
        }
        let manifest = Manifest {
            tensors,
            dims: self.model.dims.clone(),
            config: self.config.clone(),
            stage: self.stage,
            step: self.step,
            optimizer_step: self.opt.step,
            rng: self.rng.clone(),
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let text = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(20 + text.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic: not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < len {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("malformed manifest: {e}")))?;
        let payload = &body[len..];
        let expected: usize = manifest.tensors.iter().map(|t| 4 * t.shape.iter().product::<usize>()).sum();
        if payload.len() != expected {
            return Err(bad(format!("payload is {} bytes, manifest describes {expected}", payload.len())));
        }
        if hex(&Sha256::digest(payload)) != manifest.payload_sha256 {
            return Err(bad("payload checksum mismatch"));
        }
        let mut params = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(bad(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = payload
                .get(start..start + 4 * n)
                .ok_or_else(|| bad(format!("tensor `{}` lies outside the payload", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| bad(format!("tensor `{}`: {err}", e.name)))?;
            if let Some(name) = e.name.strip_prefix(ADAM_M) {
                m.insert(name.to_string(), t);
            } else if let Some(name) = e.name.strip_prefix(ADAM_V) {
                v.insert(name.to_string(), t);
            } else {
                params.insert(&e.name, t, e.trainable)?;
            }
        }
        Ok(Self {
            model: Model {
                dims: manifest.dims,
                params,
            },
            opt: OptimizerState {
                m,
                v,
                step: manifest.optimizer_step,
            },
            config: manifest.config,
            stage: manifest.stage,
            step: manifest.step,
            rng: manifest.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn ckpt() -> Checkpoint {
        let model = Model::<f32>::init(&ModelDims::tiny(), 1).unwrap();
        let mut opt = OptimizerState::default();
        opt.m.insert("sa.w_q".into(), Tensor::full(&[4, 4], 0.25));
        opt.v.insert("sa.w_q".into(), Tensor::full(&[4, 4], 1e-3));
        opt.step = 3;
        Checkpoint {
            model,
            opt,
            config: serde_json::json!({"k": 2, "theta": 0.9}),
            stage: Stage::Stage2,
            step: 3,
            rng: RngState { seed: 7, step: 3 },
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = ckpt();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = ckpt().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut ver = bytes;
        ver[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&ver), Err(Error::Checkpoint(m)) if m.contains("version")));
    }
}
