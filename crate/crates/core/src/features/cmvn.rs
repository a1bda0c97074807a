use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FeatureConfig, FeatureMatrix};
use crate::dataio::{unaugmented_features, ClipSource, ManifestEntry, WavFiles};
use crate::error::{Error, Result};

/// Smallest standard deviation used when inverting; constant dimensions map to 1e6.
pub const MIN_STDDEV: f64 = 1e-6;

/// Global per-dimension mean and inverse standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    pub inv_stddev: Vec<f64>,
    pub frame_count: u64,
}

impl CmvnStats {
    /// Stats that leave features unchanged.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            inv_stddev: vec![1.0; dim],
            frame_count: 2,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.inv_stddev.len() || self.mean.is_empty() {
            return Err(Error::DimensionMismatch("cmvn mean/inv_stddev lengths differ".into()));
        }
        if self.inv_stddev.iter().any(|&v| !(v > 0.0 && v.is_finite())) || self.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("cmvn inv_stddev must be finite and positive".into()));
        }
        if self.frame_count < 2 {
            return Err(Error::InvalidConfig("cmvn needs at least 2 frames".into()));
        }
        Ok(())
    }
}

/// Streaming mean/variance accumulator (Welford, with Chan's merge).
#[derive(Debug, Clone, PartialEq)]
pub struct CmvnAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl CmvnAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn add_frame(&mut self, frame: &[f32]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(frame) {
            let x = x as f64;
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
    }

    pub fn add_matrix(&mut self, feat: &FeatureMatrix) {
        for t in 0..feat.frames {
            self.add_frame(feat.row(t));
        }
    }

    pub fn merge(&mut self, other: &CmvnAccumulator) {
        if other.count == 0 {
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn finish(&self) -> Result<CmvnStats> {
        if self.count < 2 {
            return Err(Error::InvalidConfig(format!(
                "cmvn needs at least 2 frames, saw {}",
                self.count
            )));
        }
        let n = self.count as f64;
        let inv_stddev = self
            .m2
            .iter()
            .map(|&s| 1.0 / (s / n).max(0.0).sqrt().max(MIN_STDDEV))
            .collect();
        Ok(CmvnStats {
            mean: self.mean.clone(),
            inv_stddev,
            frame_count: self.count,
        })
    }
}

/// Global CMVN over the unaugmented features of every manifest entry.
pub fn compute_cmvn_from(
    source: &dyn ClipSource,
    entries: &[ManifestEntry],
    cfg: &FeatureConfig,
) -> Result<CmvnStats> {
    if entries.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let partials: Vec<CmvnAccumulator> = entries
        .par_iter()
        .map(|e| {
            let feat = unaugmented_features(source, e, cfg)?;
            let mut acc = CmvnAccumulator::new(cfg.num_mels);
            acc.add_matrix(&feat);
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    // merge in manifest order so the result does not depend on scheduling
    let mut total = CmvnAccumulator::new(cfg.num_mels);
    for p in &partials {
        total.merge(p);
    }
    total.finish()
}

pub fn compute_cmvn(entries: &[ManifestEntry], cfg: &FeatureConfig) -> Result<CmvnStats> {
    compute_cmvn_from(&WavFiles, entries, cfg)
}

pub fn apply_cmvn(feat: &FeatureMatrix, stats: &CmvnStats) -> Result<FeatureMatrix> {
    if feat.num_mels != stats.dim() {
        return Err(Error::DimensionMismatch(format!(
            "features have {} dims, cmvn has {}",
            feat.num_mels,
            stats.dim()
        )));
    }
    let mut out = feat.clone();
    for row in out.values.chunks_exact_mut(feat.num_mels) {
        for ((v, m), s) in row.iter_mut().zip(&stats.mean).zip(&stats.inv_stddev) {
            *v = ((*v as f64 - m) * s) as f32;
        }
    }
    Ok(out)
}
