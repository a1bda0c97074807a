//! Band-limited (windowed-sinc) resampling and sox-style speed perturbation.

use std::f64::consts::PI;

use super::wav::AudioClip;
use crate::error::{Error, Result};

/// Half-width of the interpolation kernel, in input samples.
pub const TAPS_PER_SIDE: i64 = 16;

#[cfg(test)]
fn kernel(u: f64, cutoff: f64) -> f64 {
    let half = TAPS_PER_SIDE as f64;
    if u.abs() >= half {
        return 0.0;
    }
    let window = 0.5 * (1.0 + (PI * u / half).cos());
    let x = cutoff * u;
    let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
    cutoff * sinc * window
}

/// Evaluates the band-limited signal at position `base + frac` (input samples).
///
/// The sines and cosines of the kernel are stepped across the taps by angle addition, so
/// each output sample costs two trigonometric evaluations instead of two per tap.
fn interpolate(x: &[f32], base: i64, frac: f64, cutoff: f64) -> f32 {
    let half = TAPS_PER_SIDE as f64;
    let first = 1 - TAPS_PER_SIDE;
    let u0 = frac - first as f64;
    // sin(pi * cutoff * u) and cos(pi * u / half), u decreasing by 1 per tap
    let (mut s, mut c) = (PI * cutoff * u0).sin_cos();
    let (ds, dc) = (PI * cutoff).sin_cos();
    let (mut ws, mut wc) = (PI * u0 / half).sin_cos();
    let (dws, dwc) = (PI / half).sin_cos();
    let mut acc = 0.0f64;
    for j in first..=TAPS_PER_SIDE {
        let u = frac - j as f64;
        let idx = base + j;
        if u.abs() < half && idx >= 0 && idx < x.len() as i64 {
            let px = PI * cutoff * u;
            let sinc = if px == 0.0 { 1.0 } else { s / px };
            acc += x[idx as usize] as f64 * cutoff * sinc * 0.5 * (1.0 + wc);
        }
        (s, c) = (s * dc - c * ds, c * dc + s * ds);
        (ws, wc) = (ws * dwc - wc * dws, wc * dwc + ws * dws);
    }
    acc as f32
}

/// Resamples to `target_rate`. The output has `round(len * target / source)` samples.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::InvalidConfig("target sample rate must be positive".into()));
    }
    let source_rate = clip.sample_rate;
    if target_rate == source_rate {
        return Ok(clip.clone());
    }
    let (src, dst) = (source_rate as u64, target_rate as u64);
    let len = clip.samples.len() as u64;
    let out_len = ((len * dst + src / 2) / src).max(1);
    let cutoff = (dst as f64 / src as f64).min(1.0);
    let samples = (0..out_len)
        .map(|n| {
            let num = n * src;
            let base = (num / dst) as i64;
            let frac = (num % dst) as f64 / dst as f64;
            interpolate(&clip.samples, base, frac, cutoff)
        })
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: target_rate,
    })
}

/// Plays the clip `factor` times faster by resampling the time axis; pitch moves with speed.
pub fn speed_perturb(clip: &AudioClip, factor: f64) -> Result<AudioClip> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::InvalidConfig(format!("speed factor {factor} must be positive")));
    }
    if factor == 1.0 {
        return Ok(clip.clone());
    }
    let out_len = ((clip.samples.len() as f64 / factor).round() as usize).max(1);
    let cutoff = (1.0 / factor).min(1.0);
    let samples = (0..out_len)
        .map(|n| {
            let pos = n as f64 * factor;
            let base = pos.floor();
            interpolate(&clip.samples, base as i64, pos - base, cutoff)
        })
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn tone(freq: f64, rate: u32, len: usize) -> AudioClip {
        let samples = (0..len)
            .map(|n| (0.5 * (2.0 * PI * freq * n as f64 / rate as f64).sin()) as f32)
            .collect();
        AudioClip::new(samples, rate).unwrap()
    }

    /// Frequency (Hz) of the largest magnitude FFT bin, and the bin width.
    fn peak_frequency(clip: &AudioClip) -> (f64, f64) {
        let n = clip.samples.len();
        let mut buf: Vec<Complex<f64>> = clip
            .samples
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos();
                Complex::new(s as f64 * w, 0.0)
            })
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let (bin, _) = buf[..n / 2]
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.norm()))
            .fold((0, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        let width = clip.sample_rate as f64 / n as f64;
        (bin as f64 * width, width)
    }

    #[test]
    fn stepped_kernel_matches_direct_evaluation() {
        let x: Vec<f32> = (0..64).map(|i| ((i * 37 % 11) as f32 - 5.0) / 7.0).collect();
        for &cutoff in &[1.0, 1.0 / 1.1, 0.5, 0.9] {
            for &frac in &[0.0, 0.25, 0.5, 0.999] {
                let direct: f64 = ((1 - TAPS_PER_SIDE)..=TAPS_PER_SIDE)
                    .map(|j| x[(30 + j) as usize] as f64 * kernel(frac - j as f64, cutoff))
                    .sum();
                let stepped = interpolate(&x, 30, frac, cutoff);
                assert!((stepped as f64 - direct).abs() < 1e-6, "cutoff {cutoff} frac {frac}");
            }
        }
    }

    #[test]
    fn same_rate_is_identity() {
        let clip = tone(440.0, 16000, 1000);
        assert_eq!(resample(&clip, 16000).unwrap(), clip);
        assert_eq!(speed_perturb(&clip, 1.0).unwrap(), clip);
    }

    #[test]
    fn output_lengths() {
        let clip = tone(440.0, 16000, 16000);
        assert_eq!(resample(&clip, 8000).unwrap().samples.len(), 8000);
        assert_eq!(speed_perturb(&clip, 0.9).unwrap().samples.len(), 17778);
        assert_eq!(speed_perturb(&clip, 1.1).unwrap().samples.len(), 14545);
    }

    #[test]
    fn downsample_keeps_tone_frequency() {
        let out = resample(&tone(1000.0, 16000, 16000), 8000).unwrap();
        assert_eq!(out.sample_rate, 8000);
        let (peak, width) = peak_frequency(&out);
        assert!((peak - 1000.0).abs() <= width, "peak {peak}");
    }

    #[test]
    fn round_trip_keeps_tone_frequency() {
        let down = resample(&tone(1500.0, 16000, 16000), 8000).unwrap();
        let up = resample(&down, 16000).unwrap();
        assert_eq!(up.samples.len(), 16000);
        let (peak, width) = peak_frequency(&up);
        assert!((peak - 1500.0).abs() <= width, "peak {peak}");
    }

    #[test]
    fn speed_up_raises_pitch() {
        let out = speed_perturb(&tone(440.0, 16000, 32000), 1.1).unwrap();
        let (peak, width) = peak_frequency(&out);
        assert!((peak - 484.0).abs() <= width, "peak {peak}");
    }

    #[test]
    fn rejects_bad_arguments() {
        let clip = tone(440.0, 16000, 100);
        assert!(resample(&clip, 0).is_err());
        assert!(speed_perturb(&clip, 0.0).is_err());
    }
}
