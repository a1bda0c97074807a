use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BackboneConfig, BackboneKind};
use crate::dataio::Batch;
use crate::error::{Error, Result};
use crate::features::{CmvnStats, FeatureConfig};
use crate::nncore::{init_bound, ConvGeometry, Gradients, Graph, Mode, NodeId, ParamStore, Real, Tensor, BN_EPS};

/// A causal convolution followed by batch norm (or, once folded, by nothing: the norm
/// lives in the convolution bias).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub name: String,
    pub geom: ConvGeometry,
}

impl ConvUnit {
    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn bn(&self, field: &str) -> String {
        format!("{}.bn.{field}", self.name)
    }
}

/// Units joined by ReLU, then a residual connection and a final ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub units: Vec<ConvUnit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub blocks: Vec<Block>,
    /// Blocks whose outputs are summed to form the backbone output.
    pub taps: Vec<usize>,
}

impl Layout {
    pub fn from_config(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_channels;
        let k = cfg.kernel_size;
        let mut blocks = Vec::new();
        let sep = |i: usize, d: usize, groups: usize| -> Result<Block> {
            Ok(Block {
                units: vec![
                    ConvUnit {
                        name: format!("backbone.{i}.dw"),
                        geom: ConvGeometry::depthwise(k, h, d)?,
                    },
                    ConvUnit {
                        name: format!("backbone.{i}.pw"),
                        geom: ConvGeometry::pointwise(h, h, groups)?,
                    },
                ],
            })
        };
        let dtc = |i: usize, d: usize| -> Result<Block> {
            Ok(Block {
                units: vec![
                    ConvUnit {
                        name: format!("backbone.{i}.dw"),
                        geom: ConvGeometry::depthwise(k, h, d)?,
                    },
                    ConvUnit {
                        name: format!("backbone.{i}.pw1"),
                        geom: ConvGeometry::pointwise(h, h, 1)?,
                    },
                    ConvUnit {
                        name: format!("backbone.{i}.pw2"),
                        geom: ConvGeometry::pointwise(h, h, 1)?,
                    },
                ],
            })
        };
        let mut taps = Vec::new();
        match cfg.kind {
            BackboneKind::Tcn => {
                for (i, &d) in cfg.dilations.iter().enumerate() {
                    blocks.push(Block {
                        units: vec![ConvUnit {
                            name: format!("backbone.{i}.conv"),
                            geom: ConvGeometry::new(k, h, h, d, 1)?,
                        }],
                    });
                }
            }
            BackboneKind::Dstcn | BackboneKind::Gdstcn => {
                for (i, &d) in cfg.dilations.iter().enumerate() {
                    blocks.push(sep(i, d, cfg.groups)?);
                }
            }
            BackboneKind::Mdtc => {
                for _ in 0..cfg.mdtc_pre_blocks {
                    blocks.push(dtc(blocks.len(), 1)?);
                }
                for _ in 0..cfg.mdtc_stacks {
                    for &d in &cfg.dilations {
                        blocks.push(dtc(blocks.len(), d)?);
                    }
                    taps.push(blocks.len() - 1);
                }
            }
        }
        if taps.is_empty() {
            taps.push(blocks.len() - 1);
        }
        Ok(Self { blocks, taps })
    }

    pub fn units(&self) -> impl Iterator<Item = &ConvUnit> {
        self.blocks.iter().flat_map(|b| b.units.iter())
    }
}

/// Descriptive metadata stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub init: String,
    pub seed: u64,
    pub keywords: Vec<String>,
    pub thresholds: Vec<f64>,
}

/// Per-frame keyword posteriors of one utterance, `values[t * num_keywords + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSequence {
    pub values: Vec<f32>,
    pub frames: usize,
    pub num_keywords: usize,
    pub frame_shift_ms: f64,
}

impl PosteriorSequence {
    pub fn at(&self, t: usize, k: usize) -> f32 {
        self.values[t * self.num_keywords + k]
    }

    pub fn column(&self, k: usize) -> Vec<f32> {
        (0..self.frames).map(|t| self.at(t, k)).collect()
    }

    /// Largest posterior of keyword `k` over all frames.
    pub fn peak(&self, k: usize) -> f32 {
        (0..self.frames).map(|t| self.at(t, k)).fold(0.0, f32::max)
    }
}

/// Nodes produced by recording a forward pass.
#[derive(Debug, Clone)]
pub struct Recorded {
    /// Posteriors `[batch x frames x keywords]`.
    pub output: NodeId,
    /// Parameter index and the graph leaf holding it.
    pub params: Vec<(usize, NodeId)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KwsModel<T> {
    pub config: BackboneConfig,
    pub num_keywords: usize,
    pub cmvn: CmvnStats,
    pub feature_config: FeatureConfig,
    pub params: ParamStore<T>,
    pub meta: ModelMeta,
    folded: bool,
    layout: Layout,
}

struct BnUpdate<T> {
    mean_idx: usize,
    var_idx: usize,
    mean: Vec<T>,
    var: Vec<T>,
}

impl<T: Real> KwsModel<T> {
    /// Builds a freshly initialised model: Kaiming-uniform weights with bound
    /// `1/sqrt(fan_in)`, zero biases, unit norm scales.
    pub fn build(config: BackboneConfig, num_keywords: usize, cmvn: CmvnStats, seed: u64) -> Result<Self> {
        let layout = Layout::from_config(&config)?;
        if num_keywords == 0 {
            return Err(Error::InvalidConfig("at least one keyword is required".into()));
        }
        cmvn.validate()?;
        if cmvn.dim() != config.input_dim {
            return Err(Error::InvalidConfig(format!(
                "cmvn dim {} != model input dim {}",
                cmvn.dim(),
                config.input_dim
            )));
        }
        let feature_config = FeatureConfig {
            num_mels: config.input_dim,
            ..FeatureConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize], fan_in: usize| -> Tensor<T> {
            let b = init_bound(fan_in);
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| T::of(rng.gen_range(-b..b))).collect()).expect("shape")
        };
        let h = config.hidden_channels;
        let mut params = ParamStore::new();
        params.add("input.weight", uniform(&[config.input_dim, h], config.input_dim), true)?;
        params.add("input.bias", Tensor::zeros(&[h]), true)?;
        for unit in layout.units() {
            let g = unit.geom;
            let shape = g.weight_shape();
            params.add(unit.weight(), uniform(&shape, g.kernel * g.in_per_group()), true)?;
            let c = g.out_channels;
            params.add(unit.bn("weight"), Tensor::full(&[c], T::one()), true)?;
            params.add(unit.bn("bias"), Tensor::zeros(&[c]), true)?;
            params.add(unit.bn("running_mean"), Tensor::zeros(&[c]), false)?;
            params.add(unit.bn("running_var"), Tensor::full(&[c], T::one()), false)?;
        }
        for k in 0..num_keywords {
            params.add(format!("head.{k}.weight"), uniform(&[h, 1], h), true)?;
            params.add(format!("head.{k}.bias"), Tensor::zeros(&[1]), true)?;
        }
        Ok(Self {
            config,
            num_keywords,
            cmvn,
            feature_config,
            params,
            meta: ModelMeta {
                init: "kaiming_uniform".into(),
                seed,
                keywords: (0..num_keywords).map(|k| format!("keyword{k}")).collect(),
                thresholds: vec![0.5; num_keywords],
            },
            folded: false,
            layout,
        })
    }

    /// Reassembles a model from stored parts, checking that every expected tensor is present.
    pub fn from_parts(
        config: BackboneConfig,
        num_keywords: usize,
        cmvn: CmvnStats,
        feature_config: FeatureConfig,
        meta: ModelMeta,
        folded: bool,
        params: ParamStore<T>,
    ) -> Result<Self> {
        let mut template = Self::build(config, num_keywords, cmvn, meta.seed)?;
        if folded {
            template = template.fold_inference();
        }
        if template.params.len() != params.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (want, got) in template.params.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() || want.trainable != got.trainable {
                return Err(Error::DimensionMismatch(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        template.params = params;
        template.feature_config = feature_config;
        template.meta = meta;
        Ok(template)
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn is_folded(&self) -> bool {
        self.folded
    }

    pub fn hidden_channels(&self) -> usize {
        self.config.hidden_channels
    }

    /// Trainable element count; CMVN statistics and norm running stats are excluded.
    pub fn count_params(&self) -> usize {
        self.params.trainable_count()
    }

    /// Past frames each convolution needs, in execution order.
    pub fn layer_contexts(&self) -> Vec<usize> {
        self.layout.units().map(|u| u.geom.context()).collect()
    }

    /// Number of input frames that influence one output frame.
    pub fn receptive_field(&self) -> usize {
        1 + self.layer_contexts().iter().sum::<usize>()
    }

    pub fn cast<U: Real>(&self) -> KwsModel<U> {
        KwsModel {
            config: self.config.clone(),
            num_keywords: self.num_keywords,
            cmvn: self.cmvn.clone(),
            feature_config: self.feature_config.clone(),
            params: self.params.cast(),
            meta: self.meta.clone(),
            folded: self.folded,
            layout: self.layout.clone(),
        }
    }

    fn value(&self, name: &str) -> &Tensor<T> {
        &self.params.get(name).unwrap_or_else(|| panic!("parameter {name} missing")).value
    }

    /// Normalises raw features with the embedded CMVN statistics.
    pub fn normalize_features(&self, raw: &[f32], dim: usize) -> Result<Vec<T>> {
        if dim != self.cmvn.dim() {
            return Err(Error::DimensionMismatch(format!("features have {dim} dims, model expects {}", self.cmvn.dim())));
        }
        Ok(raw
            .chunks_exact(dim)
            .flat_map(|row| {
                row.iter()
                    .zip(&self.cmvn.mean)
                    .zip(&self.cmvn.inv_stddev)
                    .map(|((&v, m), s)| T::of(((v as f64 - m) * s) as f32 as f64))
            })
            .collect())
    }

    fn record_inner(
        &self,
        g: &mut Graph<T>,
        features: &[f32],
        dim: usize,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Recorded> {
        if mode == Mode::Train && self.folded {
            return Err(Error::InvalidConfig("a folded model cannot be trained".into()));
        }
        let batch = g.batch();
        let frames = g.frames();
        if features.len() != batch * frames * dim {
            return Err(Error::DimensionMismatch(format!(
                "feature buffer of {} values for {batch} x {frames} x {dim}",
                features.len()
            )));
        }
        let x = Tensor::from_vec(&[batch, frames, dim], self.normalize_features(features, dim)?)?;
        let x = g.input(x)?;
        let train = mode == Mode::Train;
        let mut params = Vec::new();
        let mut leaf = |g: &mut Graph<T>, name: &str| -> Result<NodeId> {
            let idx = self.params.index_of(name).ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name}")))?;
            let p = self.params.at(idx);
            let id = g.leaf(p.value.clone(), train && p.trainable)?;
            params.push((idx, id));
            Ok(id)
        };
        let w = leaf(g, "input.weight")?;
        let b = leaf(g, "input.bias")?;
        let mut h = g.linear(x, w, Some(b))?;
        let mut outputs = Vec::with_capacity(self.layout.blocks.len());
        for block in &self.layout.blocks {
            let residual = h;
            let mut y = h;
            for (i, unit) in block.units.iter().enumerate() {
                let w = leaf(g, &unit.weight())?;
                if self.folded {
                    let b = leaf(g, &unit.bias())?;
                    y = g.conv(y, w, Some(b), unit.geom)?;
                } else {
                    y = g.conv(y, w, None, unit.geom)?;
                    let gamma = leaf(g, &unit.bn("weight"))?;
                    let beta = leaf(g, &unit.bn("bias"))?;
                    let mean_name = unit.bn("running_mean");
                    let var_name = unit.bn("running_var");
                    if train {
                        let mut mean = self.value(&mean_name).data().to_vec();
                        let mut var = self.value(&var_name).data().to_vec();
                        y = g.batchnorm_train(y, gamma, beta, &mut mean, &mut var)?;
                        updates.push(BnUpdate {
                            mean_idx: self.params.index_of(&mean_name).expect("mean"),
                            var_idx: self.params.index_of(&var_name).expect("var"),
                            mean,
                            var,
                        });
                    } else {
                        y = g.batchnorm_infer(y, gamma, beta, self.value(&mean_name).data(), self.value(&var_name).data())?;
                    }
                }
                if i + 1 < block.units.len() {
                    y = g.relu(y)?;
                }
            }
            y = g.add(y, residual)?;
            y = g.relu(y)?;
            if train && self.config.dropout > 0.0 {
                if let Some(r) = rng.as_deref_mut() {
                    y = g.dropout(y, self.config.dropout, r)?;
                }
            }
            outputs.push(y);
            h = y;
        }
        let mut out = outputs[self.layout.taps[0]];
        for &t in &self.layout.taps[1..] {
            out = g.add(out, outputs[t])?;
        }
        let mut ws = Vec::with_capacity(self.num_keywords);
        let mut bs = Vec::with_capacity(self.num_keywords);
        for k in 0..self.num_keywords {
            ws.push(leaf(g, &format!("head.{k}.weight"))?);
            bs.push(leaf(g, &format!("head.{k}.bias"))?);
        }
        let w = g.concat(&ws)?;
        let b = g.concat(&bs)?;
        let logits = g.linear(out, w, Some(b))?;
        let output = g.sigmoid(logits)?;
        Ok(Recorded { output, params })
    }

    /// Records a forward pass on `g`. In train mode batch norm uses batch statistics and
    /// the running statistics are updated.
    pub fn record(&mut self, g: &mut Graph<T>, features: &[f32], dim: usize, mode: Mode, rng: Option<&mut ChaCha8Rng>) -> Result<Recorded> {
        let mut updates = Vec::new();
        let rec = self.record_inner(g, features, dim, mode, rng, &mut updates)?;
        for u in updates {
            self.params.at_mut(u.mean_idx).value.data_mut().copy_from_slice(&u.mean);
            self.params.at_mut(u.var_idx).value.data_mut().copy_from_slice(&u.var);
        }
        Ok(rec)
    }

    /// Inference-mode forward on an existing graph, leaving the model untouched.
    pub fn record_infer(&self, g: &mut Graph<T>, features: &[f32], dim: usize) -> Result<Recorded> {
        self.record_inner(g, features, dim, Mode::Infer, None, &mut Vec::new())
    }

    /// Adds the gradients of a recorded pass into the parameters' gradient buffers.
    pub fn accumulate_grads(&mut self, rec: &Recorded, grads: &Gradients<T>) {
        for &(idx, node) in &rec.params {
            if let Some(gr) = grads.get(node) {
                let p = self.params.at_mut(idx);
                if p.trainable {
                    p.grad.add_assign(gr);
                }
            }
        }
    }

    /// Raw posterior tensor `[batch x frames x keywords]` for padded features.
    pub fn forward_raw(&self, features: &[f32], dim: usize, lengths: &[usize], frames: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new(lengths.to_vec(), frames)?;
        let rec = self.record_infer(&mut g, features, dim)?;
        Ok(g.value(rec.output).clone())
    }

    /// Inference-mode posteriors for every utterance of a batch.
    pub fn forward(&self, batch: &Batch) -> Result<Vec<PosteriorSequence>> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let out = self.forward_raw(&batch.features, batch.dim, &batch.lengths, batch.max_frames)?;
        let k = self.num_keywords;
        Ok(batch
            .lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| {
                let base = b * batch.max_frames * k;
                PosteriorSequence {
                    values: out.data()[base..base + len * k].iter().map(|v| v.f64() as f32).collect(),
                    frames: len,
                    num_keywords: k,
                    frame_shift_ms: self.feature_config.shift_ms,
                }
            })
            .collect())
    }

    /// Posteriors of a single utterance given its raw `[frames x dim]` features.
    pub fn forward_utterance(&self, features: &[f32], dim: usize) -> Result<PosteriorSequence> {
        let frames = features.len() / dim.max(1);
        let out = self.forward_raw(features, dim, &[frames], frames)?;
        Ok(PosteriorSequence {
            values: out.data().iter().map(|v| v.f64() as f32).collect(),
            frames,
            num_keywords: self.num_keywords,
            frame_shift_ms: self.feature_config.shift_ms,
        })
    }

    /// Folds every batch norm into the preceding convolution, which gains a bias.
    /// Folding an already folded model returns it unchanged.
    pub fn fold_inference(&self) -> Self {
        if self.folded {
            return self.clone();
        }
        let mut folded = ParamStore::new();
        let mut bn_names = std::collections::HashSet::new();
        let units: std::collections::HashMap<String, &ConvUnit> = self.layout.units().map(|u| (u.weight(), u)).collect();
        for p in self.params.iter() {
            if bn_names.contains(&p.name) {
                continue;
            }
            let Some(unit) = units.get(&p.name) else {
                folded.add(p.name.clone(), p.value.clone(), p.trainable).expect("unique");
                continue;
            };
            let fields = ["weight", "bias", "running_mean", "running_var"].map(|f| unit.bn(f));
            let [gamma, beta, mean, var] = fields.each_ref().map(|n| self.value(n).data().iter().map(|v| v.f64()).collect::<Vec<f64>>());
            bn_names.extend(fields);
            let scale: Vec<f64> = gamma.iter().zip(&var).map(|(g, v)| g / (v + BN_EPS).sqrt()).collect();
            let cout = unit.geom.out_channels;
            let mut w = p.value.clone();
            for (i, v) in w.data_mut().iter_mut().enumerate() {
                *v = T::of(v.f64() * scale[i % cout]);
            }
            let bias: Vec<T> = (0..cout).map(|o| T::of(beta[o] - mean[o] * scale[o])).collect();
            folded.add(p.name.clone(), w, true).expect("unique");
            folded.add(unit.bias(), Tensor::from_vec(&[cout], bias).expect("shape"), true).expect("unique");
        }
        Self {
            params: folded,
            folded: true,
            ..self.clone()
        }
    }
}
