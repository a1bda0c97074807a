//! JSON Lines manifests and the clip sources that resolve them to audio.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::wav::{read_wav, AudioClip};
use crate::error::{Error, Result};

/// One utterance of a manifest. `label` is -1 for non-keyword audio, otherwise a keyword index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub key: String,
    pub wav: PathBuf,
    pub label: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_frame: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_frames: Option<usize>,
}

impl ManifestEntry {
    pub fn is_positive(&self) -> bool {
        self.label >= 0
    }
}

/// Parses manifest text, one JSON object per non-blank line. Unknown fields are ignored.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: line_no,
            msg: e.to_string(),
        })?;
        let bad = |msg: String| Error::Manifest { line: line_no, msg };
        if entry.label < -1 {
            return Err(bad(format!("label {} is below -1", entry.label)));
        }
        if entry.end_frame == Some(0) {
            return Err(bad("end_frame must be >= 1".into()));
        }
        if !seen.insert(entry.key.clone()) {
            return Err(bad(format!("duplicate key {:?}", entry.key)));
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Reads a manifest file. Relative wav paths are resolved against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = parse_manifest(&text)?;
    if let Some(dir) = path.parent() {
        for e in &mut entries {
            if e.wav.is_relative() {
                e.wav = dir.join(&e.wav);
            }
        }
    }
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Resolves manifest entries to audio.
pub trait ClipSource: Sync {
    fn load(&self, entry: &ManifestEntry) -> Result<AudioClip>;
}

/// Reads each entry's `wav` path from disk.
#[derive(Debug, Default, Clone, Copy)]
pub struct WavFiles;

impl ClipSource for WavFiles {
    fn load(&self, entry: &ManifestEntry) -> Result<AudioClip> {
        read_wav(&entry.wav)
    }
}

/// Clips held in memory, looked up by entry key.
#[derive(Debug, Default, Clone)]
pub struct MemoryClips {
    clips: HashMap<String, AudioClip>,
}

impl MemoryClips {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, clip: AudioClip) {
        self.clips.insert(key.into(), clip);
    }

    pub fn get(&self, key: &str) -> Option<&AudioClip> {
        self.clips.get(key)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

impl ClipSource for MemoryClips {
    fn load(&self, entry: &ManifestEntry) -> Result<AudioClip> {
        self.clips.get(&entry.key).cloned().ok_or_else(|| {
            Error::io(
                &entry.wav,
                std::io::Error::new(std::io::ErrorKind::NotFound, "clip not in memory store"),
            )
        })
    }
}
