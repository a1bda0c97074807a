//! Utterance-level training objectives over per-frame keyword posteriors.
//!
//! Frame windows are written 1-based (`j = m+1 ..= N`) to match the usual statement of
//! the objectives; internally frame `j` lives at index `j - 1`.
//!
//! Every objective pools a posterior statistic per (utterance, keyword), clamps it into
//! `[PROB_FLOOR, 1 - PROB_FLOOR]` and applies binary cross-entropy. A label `k >= 0`
//! makes keyword `k` a positive and every other keyword a negative for that utterance;
//! label `-1` is negative for every keyword. Negatives always pool with a max over all
//! valid frames.

use serde::{Deserialize, Serialize};

use crate::dataio::{ClipSource, ManifestEntry};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::nncore::Real;

pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    MaxPooling,
    VadMean,
    VadMax,
    WeaklyConstraint,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [Self::MaxPooling, Self::VadMean, Self::VadMax, Self::WeaklyConstraint];

    pub fn needs_end_frames(self) -> bool {
        self != Self::MaxPooling
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Minimum keyword duration `m` in frames; estimated from the training set when unset.
    pub min_duration_frames: Option<usize>,
    pub vad_mean_interval: usize,
    pub vad_max_range: usize,
    pub constraint_epochs: usize,
    pub min_duration_quantile: f64,
    pub min_duration_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::MaxPooling,
            min_duration_frames: None,
            vad_mean_interval: 5,
            vad_max_range: 40,
            constraint_epochs: 5,
            min_duration_quantile: 0.05,
            min_duration_scale: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vad_mean_interval == 0 || self.vad_max_range == 0 {
            return Err(Error::InvalidConfig("loss intervals must be at least 1 frame".into()));
        }
        if !(self.min_duration_quantile > 0.0 && self.min_duration_quantile <= 1.0) || !(self.min_duration_scale >= 0.0) {
            return Err(Error::InvalidConfig("min-duration quantile must be in (0, 1] and scale >= 0".into()));
        }
        Ok(())
    }
}

/// Padded posteriors `values[(b * frames + t) * num_keywords + k]` with per-utterance metadata.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorBatch<'a, T> {
    pub values: &'a [T],
    pub frames: usize,
    pub num_keywords: usize,
    pub lengths: &'a [usize],
    pub labels: &'a [i32],
    /// 1-based frame at which the keyword ends, for positives.
    pub end_frames: &'a [Option<usize>],
}

impl<T: Real> PosteriorBatch<'_, T> {
    fn at(&self, b: usize, t: usize, k: usize) -> f64 {
        self.values[self.index(b, t, k)].f64()
    }

    fn index(&self, b: usize, t: usize, k: usize) -> usize {
        (b * self.frames + t) * self.num_keywords + k
    }

    fn check(&self) -> Result<()> {
        let b = self.lengths.len();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.labels.len() != b || self.end_frames.len() != b || self.values.len() != b * self.frames * self.num_keywords {
            return Err(Error::DimensionMismatch("posterior batch fields disagree".into()));
        }
        for (i, (&len, &label)) in self.lengths.iter().zip(self.labels).enumerate() {
            if len == 0 || len > self.frames {
                return Err(Error::DimensionMismatch(format!("utterance {i} has length {len}")));
            }
            if label < -1 || label >= self.num_keywords as i32 {
                return Err(Error::DimensionMismatch(format!("label {label} with {} keywords", self.num_keywords)));
            }
        }
        Ok(())
    }

    /// First frame index with the largest value of keyword `k` in `lo..hi`.
    fn argmax(&self, b: usize, k: usize, lo: usize, hi: usize) -> usize {
        let mut best = lo;
        for t in lo + 1..hi {
            if self.at(b, t, k) > self.at(b, best, k) {
                best = t;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    /// Mean of `per_utterance`.
    pub value: f64,
    pub per_utterance: Vec<f64>,
    /// 1-based frame picked for the positive keyword; `None` for negatives and mean pooling.
    pub selected_frame: Vec<Option<usize>>,
}

/// A loss value together with its gradient with respect to every posterior cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub result: LossResult,
    pub grad: Vec<T>,
}

fn clamp(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    (c, c == p)
}

/// `-ln p` and its derivative for a pooled positive statistic.
fn positive_term(p: f64) -> (f64, f64) {
    let (c, inside) = clamp(p);
    (-c.ln(), if inside { -1.0 / c } else { 0.0 })
}

/// `-ln(1 - p)` and its derivative for a pooled negative statistic.
fn negative_term(p: f64) -> (f64, f64) {
    let (c, inside) = clamp(p);
    (-(1.0 - c).ln(), if inside { 1.0 / (1.0 - c) } else { 0.0 })
}

/// Pooling applied to the positive keyword of an utterance.
#[derive(Debug, Clone, Copy)]
enum PositivePool {
    /// Max over 0-based frames `lo..len`.
    MaxFrom(usize),
    /// Max over the `range` frames ending at the end frame.
    MaxBeforeEnd(usize),
    /// Mean over the `interval` frames ending at the end frame.
    MeanBeforeEnd(usize),
}

fn end_window(post: &PosteriorBatch<'_, impl Real>, b: usize, width: usize) -> Result<(usize, usize)> {
    let end = post.end_frames[b].ok_or_else(|| Error::MissingEndFrame(format!("utterance {b}")))?;
    let end = end.clamp(1, post.lengths[b]);
    Ok((end.saturating_sub(width), end))
}

fn pooled_loss<T: Real>(post: &PosteriorBatch<'_, T>, pool: PositivePool) -> Result<LossOutput<T>> {
    post.check()?;
    let batch = post.lengths.len();
    let mut grad = vec![T::zero(); post.values.len()];
    let mut per_utterance = Vec::with_capacity(batch);
    let mut selected_frame = Vec::with_capacity(batch);
    let scale = 1.0 / batch as f64;
    for b in 0..batch {
        let len = post.lengths[b];
        let mut total = 0.0;
        let mut selected = None;
        for k in 0..post.num_keywords {
            if post.labels[b] == k as i32 {
                let window = match pool {
                    PositivePool::MaxFrom(lo) => Ok((lo, len)),
                    PositivePool::MaxBeforeEnd(range) => end_window(post, b, range),
                    PositivePool::MeanBeforeEnd(interval) => end_window(post, b, interval),
                };
                let (lo, hi) = window?;
                if let PositivePool::MeanBeforeEnd(_) = pool {
                    let n = (hi - lo) as f64;
                    let mean = (lo..hi).map(|t| post.at(b, t, k)).sum::<f64>() / n;
                    let (l, d) = positive_term(mean);
                    total += l;
                    for t in lo..hi {
                        grad[post.index(b, t, k)] = T::of(d * scale / n);
                    }
                } else {
                    let t = post.argmax(b, k, lo, hi);
                    let (l, d) = positive_term(post.at(b, t, k));
                    total += l;
                    grad[post.index(b, t, k)] = T::of(d * scale);
                    selected = Some(t + 1);
                }
            } else {
                let t = post.argmax(b, k, 0, len);
                let (l, d) = negative_term(post.at(b, t, k));
                total += l;
                grad[post.index(b, t, k)] = T::of(d * scale);
            }
        }
        per_utterance.push(total);
        selected_frame.push(selected);
    }
    let value = per_utterance.iter().sum::<f64>() / batch as f64;
    Ok(LossOutput {
        result: LossResult {
            value,
            per_utterance,
            selected_frame,
        },
        grad,
    })
}

/// Max-pooling objective: a positive takes its best frame among `m+1 ..= N`.
pub fn max_pooling_loss<T: Real>(post: &PosteriorBatch<'_, T>, m: usize) -> Result<LossOutput<T>> {
    post.check()?;
    let min_pos = post
        .lengths
        .iter()
        .zip(post.labels)
        .filter(|(_, &l)| l >= 0)
        .map(|(&n, _)| n)
        .min();
    if let Some(min_len) = min_pos {
        if m >= min_len {
            return Err(Error::MinDurationTooLarge { m, min_len });
        }
    }
    pooled_loss(post, PositivePool::MaxFrom(m))
}

/// Cross-entropy on the mean posterior of the `interval` frames ending at the end frame.
pub fn vad_mean_loss<T: Real>(post: &PosteriorBatch<'_, T>, interval: usize) -> Result<LossOutput<T>> {
    pooled_loss(post, PositivePool::MeanBeforeEnd(interval.max(1)))
}

/// Max pooling restricted to the `range` frames ending at the end frame.
pub fn vad_max_loss<T: Real>(post: &PosteriorBatch<'_, T>, range: usize) -> Result<LossOutput<T>> {
    pooled_loss(post, PositivePool::MaxBeforeEnd(range.max(1)))
}

/// `vad_max_loss` for epochs `1 ..= constraint_epochs`, `max_pooling_loss` afterwards.
pub fn weakly_constraint_loss<T: Real>(
    post: &PosteriorBatch<'_, T>,
    epoch: usize,
    constraint_epochs: usize,
    range: usize,
    m: usize,
) -> Result<LossOutput<T>> {
    if epoch <= constraint_epochs {
        vad_max_loss(post, range)
    } else {
        max_pooling_loss(post, m)
    }
}

/// Dispatches on `cfg.kind`. `epoch` is 1-based.
pub fn compute_loss<T: Real>(post: &PosteriorBatch<'_, T>, cfg: &LossConfig, m: usize, epoch: usize) -> Result<LossOutput<T>> {
    match cfg.kind {
        LossKind::MaxPooling => max_pooling_loss(post, m),
        LossKind::VadMean => vad_mean_loss(post, cfg.vad_mean_interval),
        LossKind::VadMax => vad_max_loss(post, cfg.vad_max_range),
        LossKind::WeaklyConstraint => weakly_constraint_loss(post, epoch, cfg.constraint_epochs, cfg.vad_max_range, m),
    }
}

/// `floor(scale * q)` where `q` is the nearest-rank `quantile` of the positive lengths.
pub fn min_duration_from_lengths(lengths: &[usize], quantile: f64, scale: f64) -> Result<usize> {
    if lengths.is_empty() {
        return Err(Error::NoPositives);
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let rank = ((quantile * sorted.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let q = sorted[rank.min(sorted.len()) - 1];
    Ok((scale * q as f64).floor() as usize)
}

/// Frame count of an entry after resampling to the feature rate.
pub fn entry_frames(source: &dyn ClipSource, entry: &ManifestEntry, cfg: &FeatureConfig) -> Result<usize> {
    if let Some(n) = entry.duration_frames {
        return Ok(n);
    }
    let clip = source.load(entry)?;
    let samples = if clip.sample_rate == cfg.sample_rate {
        clip.samples.len()
    } else {
        (clip.samples.len() as f64 * cfg.sample_rate as f64 / clip.sample_rate as f64).round() as usize
    };
    Ok(cfg.num_frames(samples))
}

/// Minimum keyword duration `m` estimated from the positive training utterances.
pub fn estimate_min_duration(
    source: &dyn ClipSource,
    entries: &[ManifestEntry],
    cfg: &FeatureConfig,
    quantile: f64,
    scale: f64,
) -> Result<usize> {
    let lengths = entries
        .iter()
        .filter(|e| e.label >= 0)
        .map(|e| entry_frames(source, e, cfg))
        .collect::<Result<Vec<_>>>()?;
    min_duration_from_lengths(&lengths, quantile, scale)
}
