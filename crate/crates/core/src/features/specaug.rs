use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FeatureMatrix;

/// Time and frequency masking policy. Widths are drawn uniformly from `0..=max`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugmentPolicy {
    pub num_time_masks: usize,
    pub max_time_width: usize,
    pub num_freq_masks: usize,
    pub max_freq_width: usize,
}

impl Default for SpecAugmentPolicy {
    fn default() -> Self {
        Self {
            num_time_masks: 2,
            max_time_width: 50,
            num_freq_masks: 2,
            max_freq_width: 10,
        }
    }
}

impl SpecAugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            num_time_masks: 0,
            max_time_width: 0,
            num_freq_masks: 0,
            max_freq_width: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        (self.num_time_masks == 0 || self.max_time_width == 0)
            && (self.num_freq_masks == 0 || self.max_freq_width == 0)
    }
}

/// Draws `(start, width)` for one mask on an axis of `extent` cells.
fn draw_mask(rng: &mut impl Rng, max_width: usize, extent: usize) -> (usize, usize) {
    let width = rng.gen_range(0..=max_width.min(extent));
    let start = rng.gen_range(0..=extent - width);
    (start, width)
}

/// Applies masks in place using the caller's generator. Widths larger than an axis are
/// clamped to the axis extent so short utterances stay valid.
pub fn spec_augment_in_place(feat: &mut FeatureMatrix, policy: &SpecAugmentPolicy, rng: &mut impl Rng) {
    let (frames, mels) = (feat.frames, feat.num_mels);
    for _ in 0..policy.num_time_masks {
        let (start, width) = draw_mask(rng, policy.max_time_width, frames);
        feat.values[start * mels..(start + width) * mels].fill(0.0);
    }
    for _ in 0..policy.num_freq_masks {
        let (start, width) = draw_mask(rng, policy.max_freq_width, mels);
        for row in feat.values.chunks_exact_mut(mels) {
            row[start..start + width].fill(0.0);
        }
    }
}

pub fn spec_augment(feat: &FeatureMatrix, policy: &SpecAugmentPolicy, rng_seed: u64) -> FeatureMatrix {
    let mut out = feat.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    spec_augment_in_place(&mut out, policy, &mut rng);
    out
}
