use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::GrnDivisor;

/// Number of resolution stages (four encoder levels plus the bottleneck).
pub const NUM_STAGES: usize = 5;
/// Entries of the block-count and expansion-ratio tables: encoder 0–3,
/// bottleneck, decoder 3–0.
pub const LAYOUT_LEN: usize = 9;
/// Spatial extents must be multiples of this (four stride-2 downsamplings).
pub const SPATIAL_MULTIPLE: usize = 16;

/// Per-stage block counts and expansion ratios of the MedNeXt-v1 large
/// variant (kernel 3), the default stage layout.
pub mod layouts {
    pub const V1_LARGE_BLOCKS: [usize; 9] = [3, 4, 8, 8, 8, 8, 8, 4, 3];
    pub const V1_LARGE_RATIOS: [usize; 9] = [3, 4, 8, 8, 8, 8, 8, 4, 3];
    pub const V1_LARGE_BASE_CHANNELS: usize = 32;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub stage_blocks: [usize; LAYOUT_LEN],
    pub expansion_ratios: [usize; LAYOUT_LEN],
    pub kernel: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub deep_supervision_levels: usize,
    /// GRN inside every block's expanded path; off reproduces a v1-style net.
    pub grn: bool,
    pub grn_divisor: GrnDivisor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleVariant {
    Base,
    WidthX2,
}

impl std::str::FromStr for ScaleVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "base" => Ok(Self::Base),
            "width_x2" => Ok(Self::WidthX2),
            other => Err(format!("unknown variant `{other}` (expected base|width_x2)")),
        }
    }
}

impl NetworkConfig {
    /// The large stage layout at base width 32.
    pub fn v1_large(in_channels: usize, num_classes: usize) -> Self {
        Self {
            base_channels: layouts::V1_LARGE_BASE_CHANNELS,
            stage_blocks: layouts::V1_LARGE_BLOCKS,
            expansion_ratios: layouts::V1_LARGE_RATIOS,
            kernel: 3,
            num_classes,
            in_channels,
            deep_supervision_levels: 4,
            grn: true,
            grn_divisor: GrnDivisor::Sum,
        }
    }

    /// Uniform layout: `blocks` per stage, expansion `ratio` everywhere.
    pub fn uniform(
        base_channels: usize,
        blocks: usize,
        ratio: usize,
        in_channels: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            base_channels,
            stage_blocks: [blocks; LAYOUT_LEN],
            expansion_ratios: [ratio; LAYOUT_LEN],
            kernel: 3,
            num_classes,
            in_channels,
            deep_supervision_levels: 4,
            grn: true,
            grn_divisor: GrnDivisor::Sum,
        }
    }

    /// Desk-scale network: C=8, one block per stage, expansion 2, three
    /// supervised levels.
    pub fn tiny(in_channels: usize, num_classes: usize) -> Self {
        Self {
            deep_supervision_levels: 3,
            ..Self::uniform(8, 1, 2, in_channels, num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::Config {
                field: field.to_string(),
                reason,
            })
        };
        if self.base_channels == 0 {
            return bad("base_channels", "must be positive".into());
        }
        if let Some(i) = self.stage_blocks.iter().position(|&b| b == 0) {
            return bad("stage_blocks", format!("entry {i} is zero"));
        }
        if let Some(i) = self.expansion_ratios.iter().position(|&r| r == 0) {
            return bad("expansion_ratios", format!("entry {i} is zero"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad("kernel", format!("{} is not a positive odd size", self.kernel));
        }
        if self.num_classes == 0 {
            return bad("num_classes", "must be positive".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels", "must be positive".into());
        }
        if !(1..=NUM_STAGES).contains(&self.deep_supervision_levels) {
            return bad(
                "deep_supervision_levels",
                format!("{} is outside [1, {NUM_STAGES}]", self.deep_supervision_levels),
            );
        }
        Ok(())
    }

    /// Channel width of stage `s` (0 = full resolution, 4 = bottleneck).
    pub fn stage_width(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// True when the two configs differ at most in `num_classes`.
    pub fn same_backbone(&self, other: &NetworkConfig) -> bool {
        let mut o = other.clone();
        o.num_classes = self.num_classes;
        *self == o
    }
}

/// Compound-scaling transform. Width scaling doubles the base width only.
pub fn scale_config(base: &NetworkConfig, variant: ScaleVariant) -> NetworkConfig {
    let mut out = base.clone();
    if variant == ScaleVariant::WidthX2 {
        out.base_channels *= 2;
    }
    out
}
