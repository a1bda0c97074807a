use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{ClipSource, ManifestEntry, WavFiles};
use super::resample::{resample, speed_perturb};
use crate::error::{Error, Result};
use crate::features::{spec_augment_in_place, FbankComputer, FeatureConfig, FeatureMatrix, SpecAugmentPolicy};

/// On-the-fly waveform and feature augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Speed factors, one drawn uniformly per utterance.
    pub speed_factors: Vec<f64>,
    pub spec_augment: SpecAugmentPolicy,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            speed_factors: vec![0.9, 1.0, 1.1],
            spec_augment: SpecAugmentPolicy::default(),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            speed_factors: vec![1.0],
            spec_augment: SpecAugmentPolicy::disabled(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.speed_factors.iter().all(|&f| f == 1.0) && self.spec_augment.is_identity()
    }

    pub fn validate(&self) -> Result<()> {
        if self.speed_factors.is_empty() || self.speed_factors.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::InvalidConfig("speed_factors must be a non-empty list of positive numbers".into()));
        }
        Ok(())
    }
}

/// Feature extraction plus augmentation applied to every training utterance.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub fbank: FbankComputer,
    pub augment: AugmentConfig,
}

impl Pipeline {
    pub fn new(features: &FeatureConfig, augment: AugmentConfig) -> Result<Self> {
        augment.validate()?;
        Ok(Self {
            fbank: FbankComputer::new(features)?,
            augment,
        })
    }

    pub fn features(&self) -> &FeatureConfig {
        self.fbank.config()
    }
}

/// Padded mini-batch, time-major per utterance: `features[u][t][d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Vec<f32>,
    pub max_frames: usize,
    pub dim: usize,
    pub lengths: Vec<usize>,
    pub labels: Vec<i32>,
    pub end_frames: Vec<Option<usize>>,
    pub keys: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn utterance(&self, i: usize) -> &[f32] {
        let stride = self.max_frames * self.dim;
        &self.features[i * stride..i * stride + self.lengths[i] * self.dim]
    }

    /// Right-pads utterance features with zeros to the longest one.
    pub fn collate(feats: Vec<FeatureMatrix>, entries: &[ManifestEntry], end_frames: Vec<Option<usize>>) -> Result<Self> {
        if feats.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let dim = feats[0].num_mels;
        if feats.iter().any(|f| f.num_mels != dim) {
            return Err(Error::DimensionMismatch("utterances disagree on feature dim".into()));
        }
        let max_frames = feats.iter().map(|f| f.frames).max().unwrap_or(0);
        let mut features = vec![0.0f32; feats.len() * max_frames * dim];
        for (chunk, f) in features.chunks_exact_mut(max_frames * dim).zip(&feats) {
            chunk[..f.values.len()].copy_from_slice(&f.values);
        }
        Ok(Self {
            features,
            max_frames,
            dim,
            lengths: feats.iter().map(|f| f.frames).collect(),
            labels: entries.iter().map(|e| e.label).collect(),
            end_frames,
            keys: entries.iter().map(|e| e.key.clone()).collect(),
        })
    }
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finaliser over the combination of two words.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b3_e50f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn utterance_seed(seed: u64, key: &str) -> u64 {
    mix_seed(seed, stable_hash(key.as_bytes()))
}

/// Load and bring the clip to the pipeline's sample rate, then compute features. No augmentation.
pub fn unaugmented_features(source: &dyn ClipSource, entry: &ManifestEntry, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    let run = || {
        let clip = source.load(entry)?;
        let clip = resample(&clip, cfg.sample_rate)?;
        FbankComputer::new(cfg)?.compute(&clip.samples)
    };
    run().map_err(|e| e.for_utterance(&entry.key))
}

/// Features of one utterance after augmentation. Returns the features and the adjusted end frame.
pub fn augmented_features(
    source: &dyn ClipSource,
    entry: &ManifestEntry,
    pipeline: &Pipeline,
    seed: u64,
) -> Result<(FeatureMatrix, Option<usize>)> {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(utterance_seed(seed, &entry.key));
        let factor = *pipeline.augment.speed_factors.choose(&mut rng).unwrap_or(&1.0);
        let clip = source.load(entry)?;
        let clip = resample(&clip, pipeline.features().sample_rate)?;
        let clip = speed_perturb(&clip, factor)?;
        let mut feat = pipeline.fbank.compute(&clip.samples)?;
        spec_augment_in_place(&mut feat, &pipeline.augment.spec_augment, &mut rng);
        let end = entry
            .end_frame
            .map(|e| ((e as f64 / factor).round() as usize).clamp(1, feat.frames));
        Ok((feat, end))
    };
    run().map_err(|e: Error| e.for_utterance(&entry.key))
}

/// Builds a batch from any clip source. Output depends only on `(entries, pipeline, seed)`.
pub fn make_batch_from(
    source: &dyn ClipSource,
    entries: &[ManifestEntry],
    pipeline: &Pipeline,
    seed: u64,
) -> Result<Batch> {
    if entries.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let items: Vec<(FeatureMatrix, Option<usize>)> = entries
        .par_iter()
        .map(|e| augmented_features(source, e, pipeline, seed))
        .collect::<Result<_>>()?;
    let (feats, ends) = items.into_iter().unzip();
    Batch::collate(feats, entries, ends)
}

pub fn make_batch(entries: &[ManifestEntry], pipeline: &Pipeline, seed: u64) -> Result<Batch> {
    make_batch_from(&WavFiles, entries, pipeline, seed)
}
