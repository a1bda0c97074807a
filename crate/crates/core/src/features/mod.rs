//! Log-mel filter-bank features, global CMVN and SpecAugment masking.

mod cmvn;
mod fbank;
mod specaug;

pub use cmvn::{apply_cmvn, compute_cmvn, compute_cmvn_from, CmvnAccumulator, CmvnStats};
pub use fbank::{fbank, FbankComputer, StreamingFbank};
pub use specaug::{spec_augment, spec_augment_in_place, SpecAugmentPolicy};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub shift_ms: f64,
    pub num_mels: usize,
    pub low_freq: f64,
    /// Upper mel bound in Hz; `None` means the Nyquist frequency.
    pub high_freq: Option<f64>,
    pub log_floor: f64,
    pub preemphasis: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            window_ms: 25.0,
            shift_ms: 10.0,
            num_mels: 40,
            low_freq: 20.0,
            high_freq: None,
            log_floor: 1e-10,
            preemphasis: 0.97,
        }
    }
}

impl FeatureConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn shift_samples(&self) -> usize {
        (self.sample_rate as f64 * self.shift_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate as f64 / 2.0
    }

    pub fn upper_freq(&self) -> f64 {
        self.high_freq.unwrap_or_else(|| self.nyquist())
    }

    /// Frames produced for `samples` input samples (0 when shorter than a window).
    pub fn num_frames(&self, samples: usize) -> usize {
        let window = self.window_samples();
        if samples < window {
            0
        } else {
            1 + (samples - window) / self.shift_samples()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(format!("feature config: {m}")));
        if self.sample_rate == 0 {
            return fail("sample_rate must be positive");
        }
        if !(self.shift_ms > 0.0 && self.shift_ms <= self.window_ms) {
            return fail("need 0 < shift_ms <= window_ms");
        }
        if self.shift_samples() == 0 || self.window_samples() == 0 {
            return fail("window and shift must span at least one sample");
        }
        if self.num_mels == 0 {
            return fail("num_mels must be >= 1");
        }
        if !(self.log_floor > 0.0) {
            return fail("log_floor must be positive");
        }
        if !(self.low_freq >= 0.0 && self.low_freq < self.upper_freq() && self.upper_freq() <= self.nyquist()) {
            return fail("need 0 <= low_freq < high_freq <= nyquist");
        }
        Ok(())
    }
}

/// Time-major `[frames x num_mels]` grid of log energies.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Vec<f32>,
    pub frames: usize,
    pub num_mels: usize,
}

impl FeatureMatrix {
    pub fn new(values: Vec<f32>, frames: usize, num_mels: usize) -> Result<Self> {
        if values.len() != frames * num_mels {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {frames}x{num_mels} features",
                values.len()
            )));
        }
        Ok(Self {
            values,
            frames,
            num_mels,
        })
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.num_mels..(t + 1) * self.num_mels]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.values[t * self.num_mels..(t + 1) * self.num_mels]
    }
}
