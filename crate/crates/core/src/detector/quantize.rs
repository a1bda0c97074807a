use std::collections::BTreeMap;
use std::path::Path;

use crate::container::{Container, ModelMetadata, NamedTensor, TensorData};
use crate::error::{Error, Result};
use crate::models::KwsModel;
use crate::nncore::{ParamStore, Tensor};

/// Symmetric per-tensor int8 weights: `w ≈ q * scale`, `|q| <= 127`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub q: Vec<i8>,
    pub scale: f32,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Vec<f32> {
        self.q.iter().map(|&v| v as f32 * self.scale).collect()
    }
}

/// `scale = max|w| / 127`, `q = round(w / scale)` clamped to ±127. An all-zero tensor gets scale 1.
pub fn quantize_tensor(w: &[f32]) -> (Vec<i8>, f32) {
    let max = w.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return (vec![0; w.len()], 1.0);
    }
    let scale = max / 127.0;
    let q = w.iter().map(|&v| (v / scale).round().clamp(-127.0, 127.0) as i8).collect();
    (q, scale)
}

/// A folded model whose weight matrices are stored as int8. Biases stay float.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    /// Folded float model; its weight tensors hold the dequantized values.
    pub dequantized: KwsModel<f32>,
    pub weights: BTreeMap<String, QuantizedTensor>,
}

fn is_weight(name: &str) -> bool {
    name.ends_with(".weight")
}

/// Quantizes every weight tensor of a folded model.
pub fn quantize(model: &KwsModel<f32>) -> Result<QuantizedModel> {
    if !model.is_folded() {
        return Err(Error::InvalidConfig("quantization needs a folded model".into()));
    }
    let mut weights = BTreeMap::new();
    let mut dequantized = model.clone();
    for p in dequantized.params.iter_mut().filter(|p| is_weight(&p.name)) {
        let (q, scale) = quantize_tensor(p.value.data());
        let qt = QuantizedTensor {
            shape: p.value.shape().to_vec(),
            q,
            scale,
        };
        p.value = Tensor::from_vec(&qt.shape, qt.dequantize())?;
        weights.insert(p.name.clone(), qt);
    }
    Ok(QuantizedModel { dequantized, weights })
}

impl QuantizedModel {
    pub fn to_container(&self) -> Container {
        let mut meta = ModelMetadata::of(&self.dequantized);
        meta.quantized = true;
        let tensors = self
            .dequantized
            .params
            .iter()
            .map(|p| match self.weights.get(&p.name) {
                Some(qt) => NamedTensor {
                    name: p.name.clone(),
                    shape: qt.shape.clone(),
                    data: TensorData::I8 {
                        values: qt.q.clone(),
                        scale: qt.scale,
                    },
                },
                None => NamedTensor::f32(&p.name, &p.value),
            })
            .collect();
        Container::new(meta.to_json(), tensors)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = ModelMetadata::parse(c)?;
        if !meta.quantized || !meta.folded {
            return Err(Error::Container("container does not hold a folded int8 model".into()));
        }
        let template = KwsModel::<f32>::build(meta.architecture.clone(), meta.num_keywords, meta.cmvn.clone(), meta.provenance.seed)?.fold_inference();
        let mut params = ParamStore::new();
        let mut weights = BTreeMap::new();
        for p in template.params.iter() {
            let t = c.tensor(&p.name).ok_or_else(|| Error::Container(format!("missing tensor {}", p.name)))?;
            let value = match &t.data {
                TensorData::I8 { values, scale } => {
                    if values.contains(&i8::MIN) {
                        return Err(Error::Container(format!("tensor {} holds -128", p.name)));
                    }
                    let qt = QuantizedTensor {
                        shape: t.shape.clone(),
                        q: values.clone(),
                        scale: *scale,
                    };
                    let v = Tensor::from_vec(&qt.shape, qt.dequantize())?;
                    weights.insert(p.name.clone(), qt);
                    v
                }
                TensorData::F32(_) => t.as_f32()?,
            };
            params.add(p.name.clone(), value, p.trainable)?;
        }
        let dequantized = KwsModel::from_parts(
            meta.architecture,
            meta.num_keywords,
            meta.cmvn,
            meta.feature_config,
            meta.provenance,
            true,
            params,
        )?;
        Ok(Self { dequantized, weights })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
