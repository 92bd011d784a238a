use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morton::MAX_DEPTH;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Small,
    Base,
    Large,
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Segmentation,
    Classification,
}

/// Architecture of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub variant: Variant,
    /// Base width `C`; stages use `C, 2C, 4C, 4C`.
    pub channels: usize,
    pub block_counts: [usize; 4],
    /// Tokens per attention window (`K`).
    pub point_number: usize,
    /// Dilation used by every second block (`D`).
    pub dilation: usize,
    /// Heads per stage are `stage channels / head_divisor`.
    pub head_divisor: usize,
    pub mlp_ratio: usize,
    /// Depth of the octree whose leaves feed the embedding.
    pub octree_depth: u32,
    pub use_position: bool,
    pub use_color: bool,
    pub use_normal: bool,
    pub num_classes: usize,
    pub task: Task,
    pub fpn_channels: usize,
    pub head_hidden: usize,
    pub use_cpe: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl NetworkConfig {
    pub fn base() -> Self {
        Self {
            variant: Variant::Base,
            channels: 96,
            block_counts: [2, 2, 18, 2],
            point_number: 32,
            dilation: 4,
            head_divisor: 16,
            mlp_ratio: 4,
            octree_depth: 11,
            use_position: true,
            use_color: true,
            use_normal: true,
            num_classes: 20,
            task: Task::Segmentation,
            fpn_channels: 168,
            head_hidden: 168,
            use_cpe: true,
        }
    }

    pub fn small() -> Self {
        Self {
            variant: Variant::Small,
            block_counts: [2, 2, 6, 2],
            ..Self::base()
        }
    }

    pub fn large() -> Self {
        Self {
            variant: Variant::Large,
            channels: 192,
            ..Self::base()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "small" => Ok(Self::small()),
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            _ => Err(Error::Config(format!("unknown preset {name:?}"))),
        }
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        let c = self.channels;
        [c, 2 * c, 4 * c, 4 * c]
    }

    pub fn stage_heads(&self) -> [usize; 4] {
        self.stage_channels().map(|c| c / self.head_divisor)
    }

    /// Octree depths of the four stages (S/4 down to S/32).
    pub fn stage_depths(&self) -> [u32; 4] {
        let d = self.octree_depth;
        [d - 2, d - 3, d - 4, d - 5]
    }

    /// Input channels implied by the selected point signals.
    pub fn in_channels(&self) -> usize {
        3 * (self.use_position as usize + self.use_color as usize + self.use_normal as usize)
    }

    /// Dilation of block `b` within a stage.
    pub fn block_dilation(&self, b: usize) -> usize {
        if b.is_multiple_of(2) {
            1
        } else {
            self.dilation
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.head_divisor == 0 || !self.channels.is_multiple_of(self.head_divisor) {
            return bad(format!(
                "channels {} must be a positive multiple of head_divisor {}",
                self.channels, self.head_divisor
            ));
        }
        if self.point_number == 0 || self.dilation == 0 || self.mlp_ratio == 0 {
            return bad("point_number, dilation and mlp_ratio must be positive".into());
        }
        if !(7..=MAX_DEPTH).contains(&self.octree_depth) {
            return bad(format!("octree_depth {} must be in [7, {MAX_DEPTH}]", self.octree_depth));
        }
        if self.in_channels() == 0 {
            return bad("at least one of position, color, normal must be used".into());
        }
        if self.num_classes == 0 || self.fpn_channels == 0 || self.head_hidden == 0 {
            return bad("num_classes, fpn_channels and head_hidden must be positive".into());
        }
        Ok(())
    }
}
