//! Manifests, WAV audio, waveform augmentation and batch assembly.

mod batch;
mod manifest;
mod resample;
mod wav;

pub use batch::{
    augmented_features, make_batch, make_batch_from, mix_seed, stable_hash, unaugmented_features, utterance_seed,
    AugmentConfig, Batch, Pipeline,
};
pub use manifest::{parse_manifest, read_manifest, write_manifest, ClipSource, ManifestEntry, MemoryClips, WavFiles};
pub use resample::{resample, speed_perturb, TAPS_PER_SIDE};
pub use wav::{encode_wav, parse_wav, read_wav, write_wav, AudioClip};
