//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `PEANCKPT`, a little-endian `u32` version, a
//! `u64` header length, the JSON header, every tensor as little-endian `f32`
//! in header order, and finally the SHA-256 of all preceding bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"PEANCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub section: Section,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    pub config: AdamWConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// What the weights belong to, e.g. `"recognizer"` or `"pean"`.
    pub kind: String,
    #[serde(default)]
    pub stage: Option<String>,
    /// Optimisation steps taken so far.
    #[serde(default)]
    pub step: u64,
    /// Together with `step` this determines every random draw of the next step.
    #[serde(default)]
    pub seed: u64,
    /// Echo of the configuration that produced the weights.
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub meta: serde_json::Value,
    #[serde(default)]
    pub optimizer: Option<OptimizerMeta>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub data: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Self {
            header: Header {
                kind: kind.to_string(),
                stage: None,
                step: 0,
                seed: 0,
                config,
                meta: serde_json::Value::Null,
                optimizer: None,
                tensors: Vec::new(),
            },
            data: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, section: Section, t: &Tensor<f32>) {
        self.header.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            section,
        });
        self.data.push(t.data().to_vec());
    }

    fn find(&self, name: &str, section: Section) -> Option<(&TensorEntry, &[f32])> {
        self.header
            .tensors
            .iter()
            .zip(&self.data)
            .find(|(e, _)| e.name == name && e.section == section)
            .map(|(e, d)| (e, d.as_slice()))
    }

    pub fn names(&self, section: Section) -> Vec<&str> {
        self.header
            .tensors
            .iter()
            .filter(|e| e.section == section)
            .map(|e| e.name.as_str())
            .collect()
    }

    /// Adds every parameter and buffer of `store`.
    pub fn add_store(&mut self, store: &ParamStore<f32>) {
        for (_, p) in store.iter() {
            let section = if p.trainable { Section::Param } else { Section::Buffer };
            self.push(&p.name, section, &p.value);
        }
    }

    pub fn add_optimizer(&mut self, opt: &AdamW<f32>, store: &ParamStore<f32>) {
        for (id, p) in store.iter() {
            self.push(&p.name, Section::AdamM, &opt.m[id.index()]);
            self.push(&p.name, Section::AdamV, &opt.v[id.index()]);
        }
        self.header.optimizer = Some(OptimizerMeta {
            step: opt.step,
            config: opt.cfg.clone(),
        });
    }

    /// Copies stored values into `store`. Every problem is reported in one
    /// error, one entry per parameter. With `strict`, each parameter of
    /// `store` must be present; otherwise missing ones keep their values.
    /// Returns the names loaded.
    pub fn restore_store(&self, store: &mut ParamStore<f32>, strict: bool) -> Result<Vec<String>> {
        let mut problems = Vec::new();
        let mut loaded = Vec::new();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get(id);
            let section = if p.trainable { Section::Param } else { Section::Buffer };
            match self.find(&p.name, section) {
                None if strict => problems.push(format!("{}: missing", p.name)),
                None => {}
                Some((e, _)) if e.shape != p.value.shape() => {
                    problems.push(format!("{}: expected {:?}, found {:?}", p.name, p.value.shape(), e.shape))
                }
                Some((e, d)) => {
                    let t = Tensor::new(&e.shape, d.to_vec())?;
                    let name = p.name.clone();
                    store.get_mut(id).value = t;
                    loaded.push(name);
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        Ok(loaded)
    }

    /// Rebuilds the optimizer state for `store`, if the checkpoint holds one.
    pub fn restore_optimizer(&self, store: &ParamStore<f32>) -> Result<Option<AdamW<f32>>> {
        let Some(meta) = &self.header.optimizer else {
            return Ok(None);
        };
        let mut opt = AdamW::new(store, meta.config.clone());
        opt.step = meta.step;
        let mut problems = Vec::new();
        for (id, p) in store.iter() {
            // weights the checkpoint does not hold start with fresh moments
            if self.find(&p.name, Section::Param).is_none() && self.find(&p.name, Section::Buffer).is_none() {
                continue;
            }
            for (section, slot) in [(Section::AdamM, &mut opt.m), (Section::AdamV, &mut opt.v)] {
                match self.find(&p.name, section) {
                    Some((e, d)) if e.shape == p.value.shape() => slot[id.index()] = Tensor::new(&e.shape, d.to_vec())?,
                    Some((e, _)) => problems.push(format!("{} ({section:?}): shape {:?}", p.name, e.shape)),
                    None => problems.push(format!("{} ({section:?}): missing", p.name)),
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        Ok(Some(opt))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(header.len() + 64 + self.data.iter().map(|d| 4 * d.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (e, d) in self.header.tensors.iter().zip(&self.data) {
            if e.shape.iter().product::<usize>() != d.len() {
                return Err(Error::Checkpoint(format!("{}: data does not match shape {:?}", e.name, e.shape)));
            }
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (file truncated or corrupted)".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_bytes = body.get(20..20 + hlen).ok_or_else(|| bad("header runs past end of file".into()))?;
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| bad(format!("header: {e}")))?;
        let mut pos = 20 + hlen;
        let mut data = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = body
                .get(pos..pos + 4 * n)
                .ok_or_else(|| bad(format!("tensor {} runs past end of file", e.name)))?;
            data.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            );
            pos += 4 * n;
        }
        if pos != body.len() {
            return Err(bad(format!("{} trailing bytes", body.len() - pos)));
        }
        Ok(Self { header, data })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::dataset::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Hex SHA-256 over every value of `store` (names, shapes and bits).
pub fn store_digest(store: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for (_, p) in store.iter() {
        h.update(p.name.as_bytes());
        for d in p.value.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
