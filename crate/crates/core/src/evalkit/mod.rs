//! Test-set scoring: utterance peaks, false alarms per hour, FRR at a fixed FAH, DET curves
//! and argmax classification accuracy.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{resample, ClipSource, ManifestEntry};
use crate::detector::{Detector, DetectorConfig, Trigger};
use crate::error::{Error, Result};
use crate::features::FbankComputer;
use crate::models::KwsModel;

/// Number of points in the default threshold grid.
pub const DEFAULT_GRID_POINTS: usize = 1001;

/// How false alarms on negative audio are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmMode {
    /// Each negative utterance raises at most one alarm: when its peak reaches the threshold.
    PeakScore,
    /// Refractory-debounced detector events on long negative streams.
    StreamEvents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub key: String,
    pub label: i32,
    /// Max posterior over valid frames, one per keyword.
    pub peaks: Vec<f64>,
    pub duration_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    /// False alarms per hour.
    pub fah: f64,
    /// False rejection rate in percent.
    pub frr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetCurve {
    pub keyword: usize,
    pub mode: AlarmMode,
    pub points: Vec<DetPoint>,
}

/// `n` evenly spaced thresholds covering [0, 1].
pub fn threshold_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

fn record_from(entry: &ManifestEntry, values: &[f32], frames: usize, k: usize, seconds: f64) -> ScoreRecord {
    let peaks = (0..k)
        .map(|j| (0..frames).map(|t| values[t * k + j]).fold(f32::NEG_INFINITY, f32::max) as f64)
        .collect();
    ScoreRecord {
        key: entry.key.clone(),
        label: entry.label,
        peaks,
        duration_seconds: seconds,
    }
}

/// Offline forward of every utterance; peaks are taken over valid frames only.
pub fn score_manifest(model: &KwsModel<f32>, source: &dyn ClipSource, entries: &[ManifestEntry]) -> Result<Vec<ScoreRecord>> {
    let model = model.fold_inference();
    let fbank = FbankComputer::new(&model.feature_config)?;
    let sr = model.feature_config.sample_rate;
    entries
        .par_iter()
        .map(|e| {
            let run = || {
                let clip = resample(&source.load(e)?, sr)?;
                let feats = fbank.compute(&clip.samples)?;
                let post = model.forward_utterance(&feats.values, feats.num_mels)?;
                Ok(record_from(e, &post.values, post.frames, post.num_keywords, clip.samples.len() as f64 / sr as f64))
            };
            run().map_err(|err: Error| err.for_utterance(&e.key))
        })
        .collect()
}

/// Like [`score_manifest`] but each utterance is pushed through a fresh streaming detector
/// in chunks of `chunk` samples.
pub fn score_manifest_streaming(
    model: &KwsModel<f32>,
    source: &dyn ClipSource,
    entries: &[ManifestEntry],
    chunk: usize,
) -> Result<Vec<ScoreRecord>> {
    let template = Detector::float(model, DetectorConfig::default())?;
    let sr = model.feature_config.sample_rate;
    entries
        .par_iter()
        .map(|e| {
            let run = || {
                let clip = resample(&source.load(e)?, sr)?;
                let mut d = template.clone();
                let out = crate::detector::stream_clip(&mut d, &clip.samples, sr, chunk)?;
                if out.frames == 0 {
                    return Err(Error::TooShort {
                        samples: clip.samples.len(),
                        window: model.feature_config.window_samples(),
                    });
                }
                Ok(record_from(e, &out.posteriors, out.frames, model.num_keywords, clip.samples.len() as f64 / sr as f64))
            };
            run().map_err(|err: Error| err.for_utterance(&e.key))
        })
        .collect()
}

fn split_scores(scores: &[ScoreRecord], k: usize) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut seconds = 0.0;
    for s in scores {
        let peak = *s
            .peaks
            .get(k)
            .ok_or_else(|| Error::DimensionMismatch(format!("{} has no score for keyword {k}", s.key)))?;
        if s.label == k as i32 {
            pos.push(peak);
        } else {
            neg.push(peak);
            seconds += s.duration_seconds;
        }
    }
    if pos.is_empty() {
        return Err(Error::NoPositives);
    }
    if neg.is_empty() {
        return Err(Error::NoNegatives);
    }
    if seconds <= 0.0 {
        return Err(Error::InvalidConfig("negative audio has zero duration".into()));
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    Ok((pos, neg, seconds / 3600.0))
}

fn frr_at(sorted_pos: &[f64], theta: f64) -> f64 {
    100.0 * sorted_pos.partition_point(|&p| p < theta) as f64 / sorted_pos.len() as f64
}

/// DET curve for keyword `k` under the peak-score convention. Every utterance whose label is
/// not `k` counts as negative audio.
pub fn det_curve(scores: &[ScoreRecord], k: usize, grid: &[f64]) -> Result<DetCurve> {
    let (pos, neg, hours) = split_scores(scores, k)?;
    let mut thresholds = grid.to_vec();
    thresholds.sort_by(f64::total_cmp);
    let points = thresholds
        .into_iter()
        .map(|theta| DetPoint {
            threshold: theta,
            fah: (neg.len() - neg.partition_point(|&p| p < theta)) as f64 / hours,
            frr: frr_at(&pos, theta),
        })
        .collect();
    Ok(DetCurve {
        keyword: k,
        mode: AlarmMode::PeakScore,
        points,
    })
}

/// Posteriors of one keyword over a long negative recording.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeStream {
    pub posteriors: Vec<f32>,
    pub hours: f64,
}

/// Number of refractory-debounced events a threshold produces on one posterior track.
pub fn count_events(posteriors: &[f32], threshold: f64, refractory_frames: usize) -> usize {
    let mut trigger = Trigger::new(vec![threshold as f32], refractory_frames);
    posteriors.iter().enumerate().filter(|(t, p)| !trigger.step(*t, &[**p]).is_empty()).count()
}

/// DET curve whose false alarms are detector events on negative streams. Event counts are not
/// monotone in the threshold in general (debouncing restarts at different frames), so FAH at
/// each threshold is the largest FAH seen at that or any higher threshold.
pub fn det_curve_events(
    positives: &[ScoreRecord],
    streams: &[NegativeStream],
    k: usize,
    grid: &[f64],
    refractory_frames: usize,
) -> Result<DetCurve> {
    let mut pos: Vec<f64> = positives
        .iter()
        .filter(|s| s.label == k as i32)
        .map(|s| s.peaks.get(k).copied().ok_or_else(|| Error::DimensionMismatch(format!("{} has no score for keyword {k}", s.key))))
        .collect::<Result<_>>()?;
    if pos.is_empty() {
        return Err(Error::NoPositives);
    }
    if streams.is_empty() {
        return Err(Error::NoNegatives);
    }
    let hours: f64 = streams.iter().map(|s| s.hours).sum();
    if hours <= 0.0 {
        return Err(Error::InvalidConfig("negative audio has zero duration".into()));
    }
    pos.sort_by(f64::total_cmp);
    let mut thresholds = grid.to_vec();
    thresholds.sort_by(f64::total_cmp);
    let events: Vec<usize> = thresholds
        .par_iter()
        .map(|&theta| streams.iter().map(|s| count_events(&s.posteriors, theta, refractory_frames)).sum())
        .collect();
    let mut points: Vec<DetPoint> = thresholds
        .iter()
        .zip(&events)
        .map(|(&theta, &e)| DetPoint {
            threshold: theta,
            fah: e as f64 / hours,
            frr: frr_at(&pos, theta),
        })
        .collect();
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].fah = points[i].fah.max(points[i + 1].fah);
    }
    Ok(DetCurve {
        keyword: k,
        mode: AlarmMode::StreamEvents,
        points,
    })
}

/// FRR at the smallest threshold whose FAH does not exceed `target_fah`.
pub fn frr_at_fah(curve: &DetCurve, target_fah: f64) -> Result<f64> {
    if curve.points.is_empty() {
        return Err(Error::InvalidConfig("empty DET curve".into()));
    }
    curve
        .points
        .iter()
        .find(|p| p.fah <= target_fah)
        .map(|p| p.frr)
        .ok_or(Error::TargetUnreachable(target_fah))
}

/// Index of the highest peak, ties going to the lowest index.
pub fn predict(peaks: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in peaks.iter().enumerate() {
        if p > peaks[best] {
            best = i;
        }
    }
    best
}

/// Percentage of utterances whose argmax keyword equals their label.
pub fn classify_accuracy(scores: &[ScoreRecord]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if let Some(s) = scores.iter().find(|s| s.label < 0) {
        return Err(Error::NegativeLabelPresent(s.key.clone()));
    }
    let correct = scores.iter().filter(|s| predict(&s.peaks) == s.label as usize).count();
    Ok(100.0 * correct as f64 / scores.len() as f64)
}

/// Scores a labelled manifest and classifies each utterance by its highest head.
pub fn classify_manifest(model: &KwsModel<f32>, source: &dyn ClipSource, entries: &[ManifestEntry]) -> Result<f64> {
    if let Some(e) = entries.iter().find(|e| e.label < 0) {
        return Err(Error::NegativeLabelPresent(e.key.clone()));
    }
    classify_accuracy(&score_manifest(model, source, entries)?)
}

pub fn write_scores(path: &Path, scores: &[ScoreRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in scores {
        let line = serde_json::to_string(s).expect("score record serialises");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !(rec.duration_seconds > 0.0) {
            return Err(Error::Manifest {
                line: i + 1,
                msg: "duration_seconds must be positive".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// `threshold,fah,frr` with six decimals.
pub fn det_csv(curve: &DetCurve) -> String {
    let mut s = String::from("threshold,fah,frr\n");
    for p in &curve.points {
        s.push_str(&format!("{:.6},{:.6},{:.6}\n", p.threshold, p.fah, p.frr));
    }
    s
}

pub fn write_det_csv(path: &Path, curve: &DetCurve) -> Result<()> {
    std::fs::write(path, det_csv(curve)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
