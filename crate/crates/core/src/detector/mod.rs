//! Frame-synchronous streaming runtime with per-layer causal caches and keyword triggering.

mod quantize;

use serde::{Deserialize, Serialize};

pub use quantize::{quantize, quantize_tensor, QuantizedModel, QuantizedTensor};

use crate::error::{Error, Result};
use crate::features::{FbankComputer, FeatureConfig, StreamingFbank};
use crate::models::KwsModel;
use crate::nncore::kernels::{self, ConvGeometry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Per-keyword firing thresholds; missing entries fall back to the model's own (0.5 unless set).
    pub thresholds: Vec<f64>,
    pub refractory_ms: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            thresholds: Vec::new(),
            refractory_ms: 1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub keyword: usize,
    /// Index of the emitting frame.
    pub frame: usize,
    /// End of the emitting frame's analysis window.
    pub time_ms: f64,
    pub score: f32,
}

/// First-crossing trigger with a per-keyword refractory window.
#[derive(Debug, Clone, PartialEq)]
pub struct Trigger {
    thresholds: Vec<f32>,
    refractory_frames: usize,
    blocked_until: Vec<usize>,
}

impl Trigger {
    pub fn new(thresholds: Vec<f32>, refractory_frames: usize) -> Self {
        let n = thresholds.len();
        Self {
            thresholds,
            refractory_frames,
            blocked_until: vec![0; n],
        }
    }

    /// Keywords firing at `frame` given its posteriors.
    pub fn step(&mut self, frame: usize, posteriors: &[f32]) -> Vec<(usize, f32)> {
        let mut fired = Vec::new();
        for (k, &p) in posteriors.iter().enumerate() {
            if frame >= self.blocked_until[k] && p >= self.thresholds[k] {
                fired.push((k, p));
                self.blocked_until[k] = frame + self.refractory_frames.max(1);
            }
        }
        fired
    }

    pub fn reset(&mut self) {
        self.blocked_until.fill(0);
    }
}

#[derive(Debug, Clone)]
struct Unit {
    geom: ConvGeometry,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

/// Weights of a folded model laid out for frame-by-frame execution.
#[derive(Debug, Clone)]
pub struct StreamModel {
    model: KwsModel<f32>,
    input_w: Vec<f32>,
    input_b: Vec<f32>,
    blocks: Vec<Vec<Unit>>,
    taps: Vec<usize>,
    head_w: Vec<f32>,
    head_b: Vec<f32>,
}

impl StreamModel {
    /// Folds the model if needed.
    pub fn new(model: &KwsModel<f32>) -> Self {
        let model = model.fold_inference();
        let data = |n: &str| model.params.get(n).unwrap_or_else(|| panic!("parameter {n} missing")).value.data().to_vec();
        let h = model.hidden_channels();
        let k = model.num_keywords;
        let blocks = model
            .layout()
            .blocks
            .iter()
            .map(|b| {
                b.units
                    .iter()
                    .map(|u| Unit {
                        geom: u.geom,
                        weight: data(&u.weight()),
                        bias: data(&u.bias()),
                    })
                    .collect()
            })
            .collect();
        let mut head_w = vec![0.0; h * k];
        let mut head_b = vec![0.0; k];
        for j in 0..k {
            let w = data(&format!("head.{j}.weight"));
            for r in 0..h {
                head_w[r * k + j] = w[r];
            }
            head_b[j] = data(&format!("head.{j}.bias"))[0];
        }
        Self {
            input_w: data("input.weight"),
            input_b: data("input.bias"),
            taps: model.layout().taps.clone(),
            blocks,
            head_w,
            head_b,
            model,
        }
    }

    /// Runtime over the dequantized int8 weights.
    pub fn quantized(q: &QuantizedModel) -> Self {
        Self::new(&q.dequantized)
    }

    pub fn model(&self) -> &KwsModel<f32> {
        &self.model
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        &self.model.feature_config
    }

    pub fn num_keywords(&self) -> usize {
        self.model.num_keywords
    }
}

/// Past input frames of one convolution, at most `context` of them.
#[derive(Debug, Clone, PartialEq)]
struct FrameCache {
    context: usize,
    channels: usize,
    frames: usize,
    data: Vec<f32>,
}

impl FrameCache {
    fn new(context: usize, channels: usize) -> Self {
        Self {
            context,
            channels,
            frames: 0,
            data: Vec::with_capacity(context * channels),
        }
    }

    /// History followed by `new`, and the number of history frames.
    fn extended(&self, new: &[f32]) -> (Vec<f32>, usize) {
        let mut v = Vec::with_capacity(self.data.len() + new.len());
        v.extend_from_slice(&self.data);
        v.extend_from_slice(new);
        (v, self.frames)
    }

    fn update(&mut self, combined: &[f32]) {
        let total = combined.len() / self.channels;
        let keep = total.min(self.context);
        self.data.clear();
        self.data.extend_from_slice(&combined[(total - keep) * self.channels..]);
        self.frames = keep;
    }

    fn clear(&mut self) {
        self.data.clear();
        self.frames = 0;
    }
}

/// Everything a stream carries between calls.
#[derive(Debug, Clone)]
pub struct StreamState {
    fbank: StreamingFbank,
    caches: Vec<FrameCache>,
    frames_emitted: usize,
    trigger: Trigger,
}

impl StreamState {
    pub fn frames_emitted(&self) -> usize {
        self.frames_emitted
    }

    /// Capacity, in frames, of every convolution cache in execution order.
    pub fn cache_capacities(&self) -> Vec<usize> {
        self.caches.iter().map(|c| c.context).collect()
    }

    /// Frames currently held by every cache.
    pub fn cached_frames(&self) -> Vec<usize> {
        self.caches.iter().map(|c| c.frames).collect()
    }

    pub fn pending_samples(&self) -> usize {
        self.fbank.pending_samples()
    }
}

/// New posterior frames (`values[t * num_keywords + k]`) and detections from one call.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StreamOutput {
    pub first_frame: usize,
    pub frames: usize,
    pub posteriors: Vec<f32>,
    pub detections: Vec<Detection>,
}

/// A streaming keyword detector over one audio stream.
#[derive(Debug, Clone)]
pub struct Detector {
    model: StreamModel,
    config: DetectorConfig,
    state: StreamState,
}

impl Detector {
    pub fn new(model: StreamModel, config: DetectorConfig) -> Result<Self> {
        if config.refractory_ms < 0.0 || config.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidConfig("thresholds must be in [0, 1] and refractory_ms >= 0".into()));
        }
        if config.thresholds.len() > model.num_keywords() {
            return Err(Error::InvalidConfig(format!(
                "{} thresholds for {} keywords",
                config.thresholds.len(),
                model.num_keywords()
            )));
        }
        let state = Self::fresh_state(&model, &config)?;
        Ok(Self { model, config, state })
    }

    pub fn float(model: &KwsModel<f32>, config: DetectorConfig) -> Result<Self> {
        Self::new(StreamModel::new(model), config)
    }

    pub fn int8(model: &QuantizedModel, config: DetectorConfig) -> Result<Self> {
        Self::new(StreamModel::quantized(model), config)
    }

    fn fresh_state(model: &StreamModel, config: &DetectorConfig) -> Result<StreamState> {
        let fc = model.feature_config();
        let thresholds = (0..model.num_keywords())
            .map(|k| {
                let meta = model.model().meta.thresholds.get(k).copied().unwrap_or(0.5);
                config.thresholds.get(k).copied().unwrap_or(meta) as f32
            })
            .collect();
        let refractory = (config.refractory_ms / fc.shift_ms).round() as usize;
        Ok(StreamState {
            fbank: StreamingFbank::new(FbankComputer::new(fc)?),
            caches: model
                .blocks
                .iter()
                .flatten()
                .map(|u| FrameCache::new(u.geom.context(), u.geom.in_channels))
                .collect(),
            frames_emitted: 0,
            trigger: Trigger::new(thresholds, refractory),
        })
    }

    pub fn state(&self) -> &StreamState {
        &self.state
    }

    pub fn model(&self) -> &StreamModel {
        &self.model
    }

    /// Clears caches, counters and refractory timers.
    pub fn reset(&mut self) {
        self.state.fbank.reset();
        for c in &mut self.state.caches {
            c.clear();
        }
        self.state.frames_emitted = 0;
        self.state.trigger.reset();
    }

    /// Consumes samples and returns every frame they complete.
    pub fn push_audio(&mut self, samples: &[f32], sample_rate: u32) -> Result<StreamOutput> {
        let fc = self.model.feature_config();
        if sample_rate != fc.sample_rate {
            return Err(Error::SampleRateMismatch {
                expected: fc.sample_rate,
                got: sample_rate,
            });
        }
        let feats = self.state.fbank.push(samples);
        self.push_features(&feats)
    }

    /// Runs already computed raw feature rows through the network.
    pub fn push_features(&mut self, feats: &[f32]) -> Result<StreamOutput> {
        let m = &self.model;
        let dim = m.model.cmvn.dim();
        let n = feats.len() / dim;
        let first_frame = self.state.frames_emitted;
        if n == 0 {
            return Ok(StreamOutput {
                first_frame,
                ..Default::default()
            });
        }
        let h = m.model.hidden_channels();
        let k = m.num_keywords();
        let x = m.model.normalize_features(feats, dim)?;
        let mut cur = vec![0.0f32; n * h];
        kernels::linear_rows(&x, dim, &m.input_w, h, Some(&m.input_b), &mut cur);
        let mut outputs: Vec<Vec<f32>> = Vec::with_capacity(m.blocks.len());
        let mut cache_idx = 0;
        for block in &m.blocks {
            let mut y = cur.clone();
            for (i, unit) in block.iter().enumerate() {
                let cache = &mut self.state.caches[cache_idx];
                cache_idx += 1;
                let (combined, hist) = cache.extended(&y);
                let cout = unit.geom.out_channels;
                let mut out = vec![0.0f32; n * cout];
                kernels::conv_rows(&unit.geom, &combined, hist + n, &unit.weight, Some(&unit.bias), hist, &mut out);
                cache.update(&combined);
                if i + 1 < block.len() {
                    relu(&mut out);
                }
                y = out;
            }
            for (a, &b) in y.iter_mut().zip(&cur) {
                *a += b;
            }
            relu(&mut y);
            cur = y.clone();
            outputs.push(y);
        }
        let mut out = outputs[m.taps[0]].clone();
        for &t in &m.taps[1..] {
            for (a, &b) in out.iter_mut().zip(&outputs[t]) {
                *a += b;
            }
        }
        let mut post = vec![0.0f32; n * k];
        kernels::linear_rows(&out, h, &m.head_w, k, Some(&m.head_b), &mut post);
        for p in &mut post {
            *p = kernels::sigmoid(*p);
        }
        if let Some(bad) = post.iter().find(|p| !p.is_finite()) {
            return Err(Error::NonFiniteValue(format!("posterior {bad}")));
        }
        let fc = m.feature_config();
        let mut detections = Vec::new();
        for t in 0..n {
            let frame = first_frame + t;
            for (kw, score) in self.state.trigger.step(frame, &post[t * k..(t + 1) * k]) {
                detections.push(Detection {
                    keyword: kw,
                    frame,
                    time_ms: frame as f64 * fc.shift_ms + fc.window_ms,
                    score,
                });
            }
        }
        self.state.frames_emitted += n;
        Ok(StreamOutput {
            first_frame,
            frames: n,
            posteriors: post,
            detections,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }
}

fn relu(v: &mut [f32]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Streams a whole clip through a fresh detector in chunks of `chunk` samples.
pub fn stream_clip(detector: &mut Detector, samples: &[f32], sample_rate: u32, chunk: usize) -> Result<StreamOutput> {
    let mut all = StreamOutput {
        first_frame: detector.state().frames_emitted(),
        ..Default::default()
    };
    for c in samples.chunks(chunk.max(1)) {
        let out = detector.push_audio(c, sample_rate)?;
        all.frames += out.frames;
        all.posteriors.extend(out.posteriors);
        all.detections.extend(out.detections);
    }
    Ok(all)
}
