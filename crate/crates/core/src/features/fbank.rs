use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};

use super::{FeatureConfig, FeatureMatrix};
use crate::dataio::AudioClip;
use crate::error::{Error, Result};

fn mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

/// Triangular filter restricted to the FFT bins where it is non-zero.
#[derive(Debug, Clone)]
struct MelFilter {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Precomputed window, filter bank and FFT plan for one [`FeatureConfig`].
#[derive(Clone)]
pub struct FbankComputer {
    cfg: FeatureConfig,
    window: Vec<f64>,
    filters: Vec<MelFilter>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FbankComputer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FbankComputer").field("cfg", &self.cfg).finish()
    }
}

impl FbankComputer {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.window_samples();
        // Povey window: Hann raised to 0.85, never exactly zero inside the frame.
        let window = (0..n)
            .map(|i| {
                let denom = (n.max(2) - 1) as f64;
                (0.5 - 0.5 * (2.0 * PI * i as f64 / denom).cos()).powf(0.85)
            })
            .collect();
        let fft_size = cfg.fft_size();
        let bin_hz = cfg.sample_rate as f64 / fft_size as f64;
        let mel_low = mel(cfg.low_freq);
        let mel_high = mel(cfg.upper_freq());
        let delta = (mel_high - mel_low) / (cfg.num_mels + 1) as f64;
        let filters = (0..cfg.num_mels)
            .map(|b| {
                let left = mel_low + b as f64 * delta;
                let center = left + delta;
                let right = center + delta;
                let mut first_bin = None;
                let mut weights = Vec::new();
                for i in 0..fft_size / 2 {
                    let m = mel(i as f64 * bin_hz);
                    if m > left && m < right {
                        let w = if m <= center {
                            (m - left) / (center - left)
                        } else {
                            (right - m) / (right - center)
                        };
                        first_bin.get_or_insert(i);
                        weights.push(w);
                    } else if first_bin.is_some() {
                        break;
                    }
                }
                MelFilter {
                    first_bin: first_bin.unwrap_or(0),
                    weights,
                }
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(fft_size);
        Ok(Self {
            cfg: cfg.clone(),
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Computes one frame of log-mel energies from exactly one window of samples.
    pub fn frame(&self, samples: &[f32], out: &mut [f32]) {
        let n = self.window.len();
        debug_assert_eq!(samples.len(), n);
        let mut buf = vec![Complex::new(0.0f64, 0.0); self.cfg.fft_size()];
        let mut frame: Vec<f64> = samples.iter().map(|&s| s as f64).collect();
        let k = self.cfg.preemphasis;
        for i in (1..n).rev() {
            frame[i] -= k * frame[i - 1];
        }
        frame[0] -= k * frame[0];
        for ((b, x), w) in buf.iter_mut().zip(&frame).zip(&self.window) {
            b.re = x * w;
        }
        self.fft.process(&mut buf);
        for (o, f) in out.iter_mut().zip(&self.filters) {
            let energy: f64 = f
                .weights
                .iter()
                .zip(&buf[f.first_bin..])
                .map(|(w, c)| w * c.norm_sqr())
                .sum();
            *o = energy.max(self.cfg.log_floor).ln() as f32;
        }
    }

    /// Computes features for a whole sample buffer.
    pub fn compute(&self, samples: &[f32]) -> Result<FeatureMatrix> {
        let window = self.cfg.window_samples();
        let frames = self.cfg.num_frames(samples.len());
        if frames == 0 {
            return Err(Error::TooShort {
                samples: samples.len(),
                window,
            });
        }
        let shift = self.cfg.shift_samples();
        let mels = self.cfg.num_mels;
        let mut values = vec![0.0f32; frames * mels];
        for (t, out) in values.chunks_exact_mut(mels).enumerate() {
            self.frame(&samples[t * shift..t * shift + window], out);
        }
        FeatureMatrix::new(values, frames, mels)
    }
}

/// Log-mel filter-bank features of a clip recorded at `cfg.sample_rate`.
pub fn fbank(clip: &AudioClip, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::SampleRateMismatch {
            expected: cfg.sample_rate,
            got: clip.sample_rate,
        });
    }
    FbankComputer::new(cfg)?.compute(&clip.samples)
}

/// Incremental front end: frames come out exactly as [`fbank`] would produce them for the prefix.
#[derive(Debug, Clone)]
pub struct StreamingFbank {
    computer: FbankComputer,
    pending: Vec<f32>,
}

impl StreamingFbank {
    pub fn new(computer: FbankComputer) -> Self {
        let cap = computer.cfg.window_samples() + computer.cfg.shift_samples();
        Self {
            computer,
            pending: Vec::with_capacity(cap),
        }
    }

    /// Appends samples and returns the newly completed frames (row-major).
    pub fn push(&mut self, samples: &[f32]) -> Vec<f32> {
        let window = self.computer.cfg.window_samples();
        let shift = self.computer.cfg.shift_samples();
        let mels = self.computer.cfg.num_mels;
        self.pending.extend_from_slice(samples);
        let frames = self.computer.cfg.num_frames(self.pending.len());
        let mut out = vec![0.0f32; frames * mels];
        for (t, row) in out.chunks_exact_mut(mels).enumerate() {
            self.computer.frame(&self.pending[t * shift..t * shift + window], row);
        }
        self.pending.drain(..frames * shift);
        out
    }

    pub fn pending_samples(&self) -> usize {
        self.pending.len()
    }

    pub fn reset(&mut self) {
        self.pending.clear();
    }
}
