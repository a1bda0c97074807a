//! RIFF/WAVE reading and writing, 16-bit PCM mono only.

use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio at a fixed sample rate, amplitudes in [-1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::MalformedWav("empty clip".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

const PCM_FORMAT: u16 = 1;

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes an in-memory WAV file.
pub fn parse_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::MalformedWav("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::MalformedWav(format!("truncated chunk {:?}", String::from_utf8_lossy(id))))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::MalformedWav("fmt chunk shorter than 16 bytes".into()));
                }
                fmt = Some((
                    u16_at(body, 0),
                    u16_at(body, 2),
                    u32_at(body, 4),
                    u16_at(body, 14),
                ));
            }
            b"data" => {
                data = Some(body);
                break;
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (len & 1);
    }
    let (format, channels, sample_rate, bits) =
        fmt.ok_or_else(|| Error::MalformedWav("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::MalformedWav("missing data chunk".into()))?;
    if format != PCM_FORMAT {
        return Err(Error::UnsupportedFormat(format!("format tag {format}, expected PCM")));
    }
    if channels != 1 {
        return Err(Error::UnsupportedFormat(format!("{channels} channels, expected mono")));
    }
    if bits != 16 {
        return Err(Error::UnsupportedFormat(format!("{bits}-bit samples, expected 16-bit")));
    }
    if sample_rate == 0 {
        return Err(Error::MalformedWav("zero sample rate".into()));
    }
    if data.len() % 2 != 0 {
        return Err(Error::MalformedWav("odd data chunk length".into()));
    }
    if data.is_empty() {
        return Err(Error::MalformedWav("data chunk has no samples".into()));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate,
    })
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes)
}

/// Encodes a clip as 16-bit PCM mono. Samples are clamped to the i16 range.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_wav(clip)).map_err(|e| Error::io(path, e))
}
