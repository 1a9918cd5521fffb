//! Checkpoint files: one JSON header line naming every array with its shape and
//! byte offset, then the arrays as raw little-endian `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VERSION: &str = "lm4mt-ckpt-1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Absent for files that hold optimizer state rather than a model.
    pub config: Option<ModelConfig>,
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    config: Option<ModelConfig>,
    meta: serde_json::Value,
    arrays: Vec<Entry>,
}

fn bad(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let arrays = self
            .arrays
            .iter()
            .map(|a| {
                let e = Entry {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    offset,
                };
                offset += 4 * a.data.len() as u64;
                e
            })
            .collect();
        let header = Header {
            version: VERSION.to_string(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            arrays,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.reserve(offset as usize);
        for a in &self.arrays {
            for x in &a.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad(path, "missing header line"))?;
        let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(path, format!("bad header: {e}")))?;
        if header.version != VERSION {
            return Err(bad(path, format!("unsupported version {:?}", header.version)));
        }
        let body = &bytes[nl + 1..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            let raw = body
                .get(start..end)
                .ok_or_else(|| bad(path, format!("array {} runs past the end of the file", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            config: header.config,
            meta: header.meta,
            arrays,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Name of the first array whose name or shape differs, if any.
    pub fn first_mismatch(&self, other: &Checkpoint) -> Option<String> {
        for (i, a) in self.arrays.iter().enumerate() {
            match other.arrays.get(i) {
                Some(b) if b.name == a.name && b.shape == a.shape => {}
                _ => return Some(a.name.clone()),
            }
        }
        other.arrays.get(self.arrays.len()).map(|b| b.name.clone())
    }
}

impl Model<f32> {
    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            config: Some(self.config().clone()),
            meta,
            arrays: self
                .names()
                .iter()
                .zip(self.params())
                .map(|(name, t)| NamedArray {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt
            .config
            .clone()
            .ok_or_else(|| Error::contract("checkpoint carries no model config"))?;
        let arrays = ckpt
            .arrays
            .iter()
            .map(|a| Ok((a.name.clone(), Tensor::new(a.shape.clone(), a.data.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        Model::from_arrays(config, arrays)
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        self.to_checkpoint(meta).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
