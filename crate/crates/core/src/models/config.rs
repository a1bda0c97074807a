use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneKind {
    #[serde(rename = "TCN")]
    Tcn,
    #[serde(rename = "DSTCN")]
    Dstcn,
    #[serde(rename = "GDSTCN")]
    Gdstcn,
    #[serde(rename = "MDTC")]
    Mdtc,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 4] = [Self::Tcn, Self::Dstcn, Self::Gdstcn, Self::Mdtc];

    pub fn name(self) -> &'static str {
        match self {
            Self::Tcn => "TCN",
            Self::Dstcn => "DSTCN",
            Self::Gdstcn => "GDSTCN",
            Self::Mdtc => "MDTC",
        }
    }
}

/// Backbone hyperparameters.
///
/// * `TCN`: one dilated causal conv per layer, `relu(bn(conv(x)) + x)`.
/// * `DSTCN` / `GDSTCN`: depthwise conv then pointwise conv (grouped for GDSTCN),
///   `relu(bn(pw(relu(bn(dw(x))))) + x)`.
/// * `MDTC`: `mdtc_pre_blocks` undilated blocks, then `mdtc_stacks` stacks that each
///   repeat the `dilations` schedule. A block is depthwise conv then two pointwise convs,
///   each followed by batch norm, with a residual connection. The outputs of every stack
///   are summed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    pub hidden_channels: usize,
    pub kernel_size: usize,
    /// Dilation per layer (per block within a stack for MDTC).
    pub dilations: Vec<usize>,
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(default)]
    pub mdtc_stacks: usize,
    #[serde(default)]
    pub mdtc_pre_blocks: usize,
    #[serde(default)]
    pub dropout: f64,
}

fn default_input_dim() -> usize {
    40
}

fn one() -> usize {
    1
}

impl BackboneConfig {
    /// Documented default sizes: TCN about 2M, DSTCN about 287k, GDSTCN about 124k and
    /// MDTC about 153k trainable parameters.
    pub fn default_for(kind: BackboneKind) -> Self {
        let base = Self {
            kind,
            input_dim: 40,
            hidden_channels: 256,
            kernel_size: 5,
            dilations: vec![1, 2, 4, 8],
            groups: 1,
            mdtc_stacks: 0,
            mdtc_pre_blocks: 0,
            dropout: 0.0,
        };
        match kind {
            BackboneKind::Tcn => Self {
                kernel_size: 3,
                dilations: vec![1, 2, 4, 8, 16, 1, 2, 4, 8, 16],
                ..base
            },
            BackboneKind::Dstcn => base,
            BackboneKind::Gdstcn => Self {
                groups: 4,
                dilations: vec![1, 2, 4, 8, 16, 32],
                ..base
            },
            BackboneKind::Mdtc => Self {
                hidden_channels: 64,
                mdtc_stacks: 4,
                mdtc_pre_blocks: 1,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_dim == 0 || self.hidden_channels == 0 || self.kernel_size == 0 || self.groups == 0 {
            return bad("backbone extents must be at least 1".into());
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad("dilation schedule must be non-empty with entries >= 1".into());
        }
        if !self.hidden_channels.is_multiple_of(self.groups) {
            return bad(format!("groups {} do not divide {} channels", self.groups, self.hidden_channels));
        }
        if self.groups != 1 && self.kind != BackboneKind::Gdstcn {
            return bad(format!("groups only apply to GDSTCN, not {}", self.kind.name()));
        }
        if self.kind == BackboneKind::Mdtc && self.mdtc_stacks == 0 {
            return bad("MDTC needs at least one stack".into());
        }
        if self.kind != BackboneKind::Mdtc && (self.mdtc_stacks != 0 || self.mdtc_pre_blocks != 0) {
            return bad("mdtc_* fields only apply to MDTC".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}
