//! Synthetic keyword corpus: each keyword is a fixed sequence of tones, rendered with random
//! pitch and tempo jitter over background noise. Negatives are random tone sequences and noise.
//!
//! Clips are rendered on demand from their key, so arbitrarily large corpora cost no memory.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{utterance_seed, write_manifest, write_wav, AudioClip, ClipSource, ManifestEntry};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub num_keywords: usize,
    pub positives_per_keyword: usize,
    pub negative_clips: usize,
    pub clip_seconds: f64,
    pub negative_clip_seconds: f64,
    /// Relative pitch jitter: frequencies scale by a factor in `1 ± pitch_jitter`.
    pub pitch_jitter: f64,
    /// Relative tempo jitter applied to tone durations.
    pub tempo_jitter: f64,
    /// Peak amplitude of the uniform background noise, drawn per clip from this range.
    pub noise_min: f64,
    pub noise_max: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            num_keywords: 2,
            positives_per_keyword: 1000,
            negative_clips: 720,
            clip_seconds: 1.5,
            negative_clip_seconds: 10.0,
            pitch_jitter: 0.05,
            tempo_jitter: 0.10,
            noise_min: 0.005,
            noise_max: 0.05,
            seed: 777,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Tone {
    start: usize,
    len: usize,
    freq: f64,
    amp: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Plan {
    samples: usize,
    tones: Vec<Tone>,
    noise: f64,
    /// Sample index just past the keyword, for positives.
    keyword_end: Option<usize>,
}

/// Tone frequencies (Hz) and durations (s) of keyword `k`.
pub fn keyword_template(k: usize) -> Vec<(f64, f64)> {
    match k {
        0 => vec![(700.0, 0.12), (1100.0, 0.12), (1500.0, 0.15)],
        1 => vec![(1400.0, 0.10), (900.0, 0.10), (600.0, 0.14), (1000.0, 0.10)],
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + k as u64);
            (0..3 + k % 2).map(|_| (rng.gen_range(400.0..2000.0), rng.gen_range(0.08..0.15))).collect()
        }
    }
}

fn keyword_key(k: usize, i: usize) -> String {
    format!("kw{k}_{i:05}")
}

fn negative_key(i: usize) -> String {
    format!("neg_{i:05}")
}

/// Renders clips from manifest keys produced by [`SynthSource::entries`].
#[derive(Debug, Clone)]
pub struct SynthSource {
    pub cfg: SynthConfig,
}

impl SynthSource {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        if cfg.num_keywords == 0 || cfg.clip_seconds <= 0.6 || cfg.negative_clip_seconds <= 0.0 || cfg.noise_max < cfg.noise_min {
            return Err(Error::InvalidConfig(format!("bad synthetic corpus settings {cfg:?}")));
        }
        Ok(Self { cfg })
    }

    fn rng(&self, key: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(utterance_seed(self.cfg.seed, key))
    }

    fn secs(&self, s: f64) -> usize {
        (s * self.cfg.sample_rate as f64).round() as usize
    }

    fn keyword_tones(&self, k: usize, rng: &mut ChaCha8Rng) -> (Vec<Tone>, usize) {
        let pitch = 1.0 + rng.gen_range(-self.cfg.pitch_jitter..=self.cfg.pitch_jitter);
        let tempo = 1.0 + rng.gen_range(-self.cfg.tempo_jitter..=self.cfg.tempo_jitter);
        let mut at = 0;
        let mut tones = Vec::new();
        for (f, d) in keyword_template(k) {
            let len = self.secs(d * tempo);
            tones.push(Tone {
                start: at,
                len,
                freq: f * pitch,
                amp: rng.gen_range(0.2..0.4),
            });
            at += len;
        }
        (tones, at)
    }

    fn random_tones(&self, rng: &mut ChaCha8Rng, from: usize, to: usize) -> Vec<Tone> {
        let mut tones = Vec::new();
        let mut at = from + self.secs(rng.gen_range(0.0..0.3));
        while at < to {
            let len = self.secs(rng.gen_range(0.06..0.2));
            if at + len > to {
                break;
            }
            if rng.gen_bool(0.7) {
                tones.push(Tone {
                    start: at,
                    len,
                    freq: rng.gen_range(300.0..2500.0),
                    amp: rng.gen_range(0.1..0.4),
                });
            }
            at += len + self.secs(rng.gen_range(0.0..0.4));
        }
        tones
    }

    fn plan(&self, key: &str, label: i32) -> Plan {
        let mut rng = self.rng(key);
        let noise = rng.gen_range(self.cfg.noise_min..=self.cfg.noise_max);
        if label < 0 {
            let samples = self.secs(self.cfg.negative_clip_seconds);
            let tones = if rng.gen_bool(0.8) { self.random_tones(&mut rng, 0, samples) } else { Vec::new() };
            return Plan {
                samples,
                tones,
                noise,
                keyword_end: None,
            };
        }
        let samples = self.secs(self.cfg.clip_seconds);
        let (mut tones, len) = self.keyword_tones(label as usize, &mut rng);
        // the keyword ends somewhere in the second half of the clip
        let lo = (samples / 2).max(len);
        let end = rng.gen_range(lo..=samples - self.secs(0.02));
        let start = end - len;
        for t in &mut tones {
            t.start += start;
        }
        Plan {
            samples,
            tones,
            noise,
            keyword_end: Some(end),
        }
    }

    fn render(&self, plan: &Plan, key: &str) -> Vec<f32> {
        let sr = self.cfg.sample_rate as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(utterance_seed(self.cfg.seed ^ 0xa5a5, key));
        let mut out: Vec<f64> = (0..plan.samples).map(|_| rng.gen_range(-plan.noise..=plan.noise)).collect();
        let ramp = self.secs(0.005).max(1);
        for t in &plan.tones {
            for i in 0..t.len.min(plan.samples.saturating_sub(t.start)) {
                let edge = i.min(t.len - 1 - i);
                let env = if edge < ramp { 0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos() } else { 1.0 };
                out[t.start + i] += t.amp * env * (2.0 * PI * t.freq * i as f64 / sr).sin();
            }
        }
        // snap to the 16-bit grid so in-memory and on-disk corpora agree exactly
        out.iter()
            .map(|&x| ((x.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0) as f32)
            .collect()
    }

    /// 1-based frame whose analysis window first covers the keyword's last sample.
    fn end_frame(&self, end_sample: usize, samples: usize) -> usize {
        let fc = FeatureConfig {
            sample_rate: self.cfg.sample_rate,
            ..FeatureConfig::default()
        };
        let (win, hop) = (fc.window_samples(), fc.shift_samples());
        let t = end_sample.saturating_sub(win).div_ceil(hop);
        (t + 1).min(fc.num_frames(samples).max(1))
    }

    /// Positives `kw{k}_{i}` for every keyword, then negatives `neg_{i}`.
    pub fn entries(&self) -> Vec<ManifestEntry> {
        let mut out = Vec::new();
        for k in 0..self.cfg.num_keywords {
            for i in 0..self.cfg.positives_per_keyword {
                let key = keyword_key(k, i);
                let plan = self.plan(&key, k as i32);
                out.push(ManifestEntry {
                    wav: PathBuf::from(format!("{key}.wav")),
                    label: k as i32,
                    end_frame: plan.keyword_end.map(|e| self.end_frame(e, plan.samples)),
                    duration_frames: None,
                    key,
                });
            }
        }
        for i in 0..self.cfg.negative_clips {
            let key = negative_key(i);
            out.push(ManifestEntry {
                wav: PathBuf::from(format!("{key}.wav")),
                label: -1,
                end_frame: None,
                duration_frames: None,
                key,
            });
        }
        out
    }

    /// Renders `entries` as WAV files into `dir` and writes `manifest.jsonl` there.
    pub fn write_corpus(&self, entries: &[ManifestEntry], dir: &Path, manifest_name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::with_capacity(entries.len());
        for e in entries {
            let clip = self.load(e)?;
            let path = dir.join(format!("{}.wav", e.key));
            write_wav(&path, &clip)?;
            written.push(ManifestEntry {
                wav: PathBuf::from(format!("{}.wav", e.key)),
                ..e.clone()
            });
        }
        let manifest = dir.join(manifest_name);
        write_manifest(&manifest, &written)?;
        Ok(manifest)
    }

    /// A continuous stream of `seconds` built from fresh clips (keys prefixed `stream{seed}`).
    /// Returns the audio and the keyword index plus end sample of every embedded keyword.
    pub fn stream(&self, seconds: f64, keyword_rate: f64, seed: u64) -> Result<(AudioClip, Vec<(usize, usize)>)> {
        let total = self.secs(seconds);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::with_capacity(total);
        let mut events = Vec::new();
        let mut i = 0;
        while samples.len() < total {
            let key = format!("stream{seed}_{i}");
            i += 1;
            let label = if rng.gen_bool(keyword_rate.clamp(0.0, 1.0)) {
                rng.gen_range(0..self.cfg.num_keywords) as i32
            } else {
                -1
            };
            let mut plan = self.plan(&key, label);
            if label < 0 {
                plan.samples = plan.samples.min(self.secs(self.cfg.clip_seconds));
                plan.tones.retain(|t| t.start + t.len <= plan.samples);
            }
            let audio = self.render(&plan, &key);
            if let Some(end) = plan.keyword_end {
                events.push((label as usize, samples.len() + end));
            }
            samples.extend(audio);
        }
        samples.truncate(total);
        events.retain(|&(_, e)| e <= total);
        Ok((AudioClip::new(samples, self.cfg.sample_rate)?, events))
    }
}

impl ClipSource for SynthSource {
    fn load(&self, entry: &ManifestEntry) -> Result<AudioClip> {
        let plan = self.plan(&entry.key, entry.label);
        AudioClip::new(self.render(&plan, &entry.key), self.cfg.sample_rate)
    }
}

/// Splits entries into positives and negatives, preserving order.
pub fn split_by_label(entries: &[ManifestEntry]) -> (Vec<ManifestEntry>, Vec<ManifestEntry>) {
    entries.iter().cloned().partition(|e| e.label >= 0)
}

/// Deterministic train/dev/test split: within each label, every tenth entry (offset 8) goes
/// to dev and every tenth (offset 9) to test.
pub fn split_train_dev_test(entries: &[ManifestEntry]) -> (Vec<ManifestEntry>, Vec<ManifestEntry>, Vec<ManifestEntry>) {
    let mut seen = std::collections::BTreeMap::new();
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for e in entries {
        let i = seen.entry(e.label).or_insert(0usize);
        match *i % 10 {
            8 => dev.push(e.clone()),
            9 => test.push(e.clone()),
            _ => train.push(e.clone()),
        }
        *i += 1;
    }
    (train, dev, test)
}
