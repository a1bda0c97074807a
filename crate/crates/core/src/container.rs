//! `KWSF` single-file model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "KWSF"  u32 version  u32 meta_len  meta_len bytes of UTF-8 JSON
//! u32 tensor_count
//! per tensor: u32 name_len, name, u8 dtype (0 = f32, 1 = i8), u32 rank, rank x u64 dims,
//!             raw data, and for i8 a trailing f32 scale
//! ```

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{CmvnStats, FeatureConfig};
use crate::models::{BackboneConfig, KwsModel, ModelMeta};
use crate::nncore::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"KWSF";
pub const FORMAT_VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8 { values: Vec<i8>, scale: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn f32(name: impl Into<String>, t: &Tensor<f32>) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: TensorData::F32(t.data().to_vec()),
        }
    }

    pub fn as_f32(&self) -> Result<Tensor<f32>> {
        match &self.data {
            TensorData::F32(v) => Tensor::from_vec(&self.shape, v.clone()),
            TensorData::I8 { .. } => Err(Error::Container(format!("tensor {} is int8, expected f32", self.name))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    /// Metadata JSON exactly as stored.
    pub metadata: String,
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Container(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

impl Container {
    pub fn new(metadata: String, tensors: Vec<NamedTensor>) -> Self {
        Self { metadata, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(match t.data {
                TensorData::F32(_) => 0,
                TensorData::I8 { .. } => 1,
            });
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::I8 { values, scale } => {
                    out.extend(values.iter().map(|&q| q as u8));
                    out.extend_from_slice(&scale.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Container("not a KWSF file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Container(format!(
                "unsupported format version {version} (this build reads version {FORMAT_VERSION})"
            )));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let metadata = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|_| Error::Container("metadata is not UTF-8".into()))?
            .to_string();
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::new();
        let mut names = HashSet::new();
        for _ in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Container("tensor name is not UTF-8".into()))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(Error::Container(format!("duplicate tensor {name}")));
            }
            let dtype = r.u8("dtype")?;
            let rank = r.u32("rank")? as usize;
            if rank > MAX_RANK {
                return Err(Error::Container(format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut n: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64("dimension")?).map_err(|_| Error::Container("dimension overflow".into()))?;
                n = n.checked_mul(d).ok_or_else(|| Error::Container(format!("tensor {name} is too large")))?;
                shape.push(d);
            }
            let data = match dtype {
                0 => {
                    let bytes = n.checked_mul(4).filter(|&b| b <= r.remaining()).ok_or_else(|| Error::Container(format!("truncated data for {name}")))?;
                    let raw = r.take(bytes, "tensor data")?;
                    TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
                }
                1 => {
                    let raw = r.take(n, "tensor data")?;
                    let values = raw.iter().map(|&b| b as i8).collect();
                    let scale = f32::from_le_bytes(r.take(4, "int8 scale")?.try_into().expect("4 bytes"));
                    TensorData::I8 { values, scale }
                }
                other => return Err(Error::Container(format!("unknown dtype code {other} for {name}"))),
            };
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Container(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Training state carried by checkpoint files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointInfo {
    pub epoch: usize,
    pub dev_metric: f64,
    pub step: u64,
    pub seed: u64,
    pub min_duration_frames: usize,
}

/// The metadata block of a model or checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMetadata {
    pub architecture: BackboneConfig,
    pub num_keywords: usize,
    pub feature_config: FeatureConfig,
    pub cmvn: CmvnStats,
    pub provenance: ModelMeta,
    pub folded: bool,
    pub quantized: bool,
    #[serde(default)]
    pub checkpoint: Option<CheckpointInfo>,
}

impl ModelMetadata {
    pub fn of(model: &KwsModel<f32>) -> Self {
        Self {
            architecture: model.config.clone(),
            num_keywords: model.num_keywords,
            feature_config: model.feature_config.clone(),
            cmvn: model.cmvn.clone(),
            provenance: model.meta.clone(),
            folded: model.is_folded(),
            quantized: false,
            checkpoint: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metadata serialises")
    }

    pub fn parse(container: &Container) -> Result<Self> {
        serde_json::from_str(&container.metadata).map_err(|e| Error::Container(format!("bad metadata: {e}")))
    }
}

/// Float model (and optional extra tensors such as optimizer state) as a container.
pub fn model_container(model: &KwsModel<f32>, meta: ModelMetadata, extra: Vec<NamedTensor>) -> Container {
    let mut tensors: Vec<NamedTensor> = model.params.iter().map(|p| NamedTensor::f32(&p.name, &p.value)).collect();
    tensors.extend(extra);
    Container::new(meta.to_json(), tensors)
}

/// Rebuilds a float model; tensors not belonging to the model are ignored.
pub fn model_from_container(container: &Container) -> Result<(KwsModel<f32>, ModelMetadata)> {
    let meta = ModelMetadata::parse(container)?;
    if meta.quantized {
        return Err(Error::Container("container holds an int8 model".into()));
    }
    let template = KwsModel::<f32>::build(meta.architecture.clone(), meta.num_keywords, meta.cmvn.clone(), meta.provenance.seed)?;
    let template = if meta.folded { template.fold_inference() } else { template };
    let mut params = ParamStore::new();
    for p in template.params.iter() {
        let t = container
            .tensor(&p.name)
            .ok_or_else(|| Error::Container(format!("missing tensor {}", p.name)))?;
        params.add(p.name.clone(), t.as_f32()?, p.trainable)?;
    }
    let model = KwsModel::from_parts(
        meta.architecture.clone(),
        meta.num_keywords,
        meta.cmvn.clone(),
        meta.feature_config.clone(),
        meta.provenance.clone(),
        meta.folded,
        params,
    )?;
    Ok((model, meta))
}

pub fn save_model(model: &KwsModel<f32>, path: &Path) -> Result<()> {
    model_container(model, ModelMetadata::of(model), Vec::new()).save(path)
}

pub fn load_model(path: &Path) -> Result<KwsModel<f32>> {
    Ok(model_from_container(&Container::load(path)?)?.0)
}
