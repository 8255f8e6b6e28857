//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"UVLG" | version: u32 | header_len: u64 | header: UTF-8 JSON | payload
//! ```
//!
//! The header holds the model config, one entry per storage cell
//! (`name`, `shape`, `dtype`, byte `offset` into the payload, `aliases`) and
//! an opaque training-state object. Tied names are listed as aliases of the
//! cell they share. Entries named `optim.*` are auxiliary tensors (optimizer
//! moments) rather than model parameters.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Network};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"UVLG";
const EXTRA_PREFIX: &str = "optim.";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    #[serde(default)]
    pub aliases: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub state: serde_json::Value,
}

impl Checkpoint {
    /// Serialize a model and training state.
    pub fn to_bytes(model: &Model<f32>, state: &serde_json::Value) -> Result<Vec<u8>> {
        Self::to_bytes_with(model, state, &[])
    }

    /// Serialize with auxiliary tensors, whose names must start with `optim.`.
    pub fn to_bytes_with(
        model: &Model<f32>,
        state: &serde_json::Value,
        extras: &[(String, Tensor<f32>)],
    ) -> Result<Vec<u8>> {
        let store = &model.params;
        let mut payload = Vec::with_capacity(store.num_scalars() * 4);
        let mut tensors = Vec::with_capacity(store.len());
        for id in store.ids() {
            let cell = store.get(id);
            let aliases = store
                .names()
                .filter(|&(n, i)| i == id && n != cell.name)
                .map(|(n, _)| n.to_string())
                .collect();
            tensors.push(TensorEntry {
                name: cell.name.clone(),
                shape: cell.value.shape().to_vec(),
                dtype: f32::DTYPE.to_string(),
                offset: payload.len() as u64,
                aliases,
            });
            for &v in cell.value.data() {
                v.write_le(&mut payload);
            }
        }
        for (name, t) in extras {
            if !name.starts_with(EXTRA_PREFIX) {
                return Err(Error::Checkpoint(format!("auxiliary tensor `{name}` lacks the `{EXTRA_PREFIX}` prefix")));
            }
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: f32::DTYPE.to_string(),
                offset: payload.len() as u64,
                aliases: Vec::new(),
            });
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        }
        let header = Checkpoint {
            config: model.net.config.clone(),
            tensors,
            state: state.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parse only the header.
    pub fn read_header(bytes: &[u8]) -> Result<(Checkpoint, usize)> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a UVLG checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Checkpoint = serde_json::from_slice(&bytes[16..end])?;
        Ok((header, end))
    }

    /// Rebuild the model and return it with the stored training state.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Model<f32>, serde_json::Value)> {
        let (model, state, _) = Self::from_bytes_with(bytes)?;
        Ok((model, state))
    }

    /// Like [`Checkpoint::from_bytes`], also returning auxiliary tensors.
    #[allow(clippy::type_complexity)]
    pub fn from_bytes_with(bytes: &[u8]) -> Result<(Model<f32>, serde_json::Value, Vec<(String, Tensor<f32>)>)> {
        let (header, start) = Self::read_header(bytes)?;
        let payload = &bytes[start..];
        let mut params = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::build(&header.config, &mut params, &mut rng)?;
        let model_entries = header.tensors.iter().filter(|e| !e.name.starts_with(EXTRA_PREFIX)).count();
        if model_entries != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {model_entries} tensors, config implies {}",
                params.len()
            )));
        }
        let read = |entry: &TensorEntry| -> Result<Tensor<f32>> {
            let n: usize = entry.shape.iter().product();
            let off = entry.offset as usize;
            let bytes = payload
                .get(off..off + n * f32::BYTES)
                .ok_or_else(|| Error::Checkpoint(format!("payload truncated at `{}`", entry.name)))?;
            let data: Vec<f32> = bytes.chunks_exact(f32::BYTES).map(f32::read_le).collect();
            Tensor::new(&entry.shape, data)
        };
        let mut extras = Vec::new();
        for entry in &header.tensors {
            if entry.dtype != f32::DTYPE {
                return Err(Error::Checkpoint(format!("unsupported dtype {}", entry.dtype)));
            }
            if entry.name.starts_with(EXTRA_PREFIX) {
                extras.push((entry.name.clone(), read(entry)?));
                continue;
            }
            let id = params
                .id(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", entry.name)))?;
            for alias in &entry.aliases {
                if params.id(alias) != Some(id) {
                    return Err(Error::Checkpoint(format!(
                        "alias `{alias}` does not resolve to `{}`",
                        entry.name
                    )));
                }
            }
            let cell = params.get(id);
            if cell.value.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    entry.name,
                    entry.shape,
                    cell.value.shape()
                )));
            }
            params.get_mut(id).value = read(entry)?;
        }
        Ok((Model { net, params }, header.state, extras))
    }

    pub fn save(path: &Path, model: &Model<f32>, state: &serde_json::Value) -> Result<()> {
        let bytes = Self::to_bytes(model, state)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Model<f32>, serde_json::Value)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn load_header(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::read_header(&bytes)?.0)
    }
}
