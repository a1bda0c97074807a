//! Keyword-spotting networks: global CMVN, a linear projection, a causal convolutional
//! backbone and one independent sigmoid classifier per keyword.

mod config;
mod model;

pub use config::{BackboneConfig, BackboneKind};
pub use model::{Block, ConvUnit, KwsModel, Layout, ModelMeta, PosteriorSequence, Recorded};
