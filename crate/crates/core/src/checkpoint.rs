//! Single-file checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CG2P" | version: u32 | header_len: u64 | header: JSON (header_len bytes)
//!        | payload: f32 per element, tensors in directory order
//!        | crc32 of every preceding byte: u32
//! ```
//!
//! The header carries the model config, an optional training config, the step
//! count, the tensor directory and a free-form `extra` object.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelConfig, ModelParameters, Tensor};
use crate::optim::AdamWState;
use crate::scalar::Scalar;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"CG2P";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Decoded container: header plus one `f32` buffer per directory entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub payloads: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.header.tensors.len() != self.payloads.len() {
            return Err(Error::Checkpoint("directory and payload counts differ".into()));
        }
        for (entry, data) in self.header.tensors.iter().zip(&self.payloads) {
            if entry.elements != data.len() || entry.shape.iter().product::<usize>() != data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} does not match its directory entry",
                    entry.name
                )));
            }
        }
        let header = serde_json::to_vec(&self.header)?;
        let elements: usize = self.payloads.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 4 * elements);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for data in &self.payloads {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_owned());
        if bytes.len() < 20 {
            return Err(bad("file too short"));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc.try_into().expect("four bytes"));
        if crc32fast::hash(body) != stored {
            return Err(bad("CRC mismatch"));
        }
        if &body[..4] != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().expect("four bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(body[8..16].try_into().expect("eight bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(16))
            .filter(|&end| end <= body.len())
            .ok_or_else(|| bad("header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&body[16..header_end])
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut payload = &body[header_end..];
        let mut payloads = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            if entry.shape.iter().product::<usize>() != entry.elements {
                return Err(Error::Checkpoint(format!(
                    "tensor {} shape disagrees with its element count",
                    entry.name
                )));
            }
            let n = entry
                .elements
                .checked_mul(4)
                .filter(|&n| n <= payload.len())
                .ok_or_else(|| bad("payload shorter than directory"))?;
            let (chunk, rest) = payload.split_at(n);
            payloads.push(
                chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
                    .collect(),
            );
            payload = rest;
        }
        if !payload.is_empty() {
            return Err(bad("payload longer than directory"));
        }
        Ok(Checkpoint { header, payloads })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Packs parameters (converted to `f32`) with their config.
    pub fn from_params<T: Scalar>(
        params: &ModelParameters<T>,
        train_config: Option<&TrainConfig>,
        step: u64,
        extra: serde_json::Value,
    ) -> Self {
        let (tensors, payloads) = params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| {
                (
                    TensorEntry {
                        name,
                        shape: t.shape().to_vec(),
                        elements: t.len(),
                    },
                    t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
                )
            })
            .unzip();
        Checkpoint {
            header: Header {
                model_config: params.config().clone(),
                train_config: train_config.cloned(),
                step,
                tensors,
                extra,
            },
            payloads,
        }
    }

    /// Rebuilds parameters, checking every tensor name and shape.
    pub fn to_params<T: Scalar>(&self) -> Result<ModelParameters<T>> {
        let tensors = self.tensors_with_prefix::<T>("")?;
        ModelParameters::from_named(&self.header.model_config, tensors)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn tensors_with_prefix<T: Scalar>(&self, prefix: &str) -> Result<Vec<(String, Tensor<T>)>> {
        self.header
            .tensors
            .iter()
            .zip(&self.payloads)
            .filter_map(|(entry, data)| {
                entry.name.strip_prefix(prefix).map(|name| {
                    if entry.shape.iter().product::<usize>() != data.len() {
                        return Err(Error::Checkpoint(format!("tensor {} has the wrong length", entry.name)));
                    }
                    let values = data.iter().map(|&v| T::of(f64::from(v))).collect();
                    Ok((name.to_owned(), Tensor::from_vec(&entry.shape, values)))
                })
            })
            .collect()
    }

    /// Optimizer moments as a sibling container (`adam.m.*` and `adam.v.*` tensors).
    pub fn from_optimizer<T: Scalar>(state: &AdamWState<T>) -> Self {
        let m = Self::from_params(&state.first_moment, None, state.step, serde_json::Value::Null);
        let v = Self::from_params(&state.second_moment, None, state.step, serde_json::Value::Null);
        let mut header = m.header.clone();
        header.tensors = m
            .header
            .tensors
            .iter()
            .map(|e| TensorEntry {
                name: format!("adam.m.{}", e.name),
                ..e.clone()
            })
            .chain(v.header.tensors.iter().map(|e| TensorEntry {
                name: format!("adam.v.{}", e.name),
                ..e.clone()
            }))
            .collect();
        Checkpoint {
            header,
            payloads: m.payloads.into_iter().chain(v.payloads).collect(),
        }
    }

    pub fn to_optimizer<T: Scalar>(&self) -> Result<AdamWState<T>> {
        let cfg = &self.header.model_config;
        let build = |prefix: &str| {
            ModelParameters::from_named(cfg, self.tensors_with_prefix::<T>(prefix)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))
        };
        Ok(AdamWState {
            step: self.header.step,
            first_moment: build("adam.m.")?,
            second_moment: build("adam.v.")?,
        })
    }
}

/// Writes through a temporary file in the same directory, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
