//! Architecture configuration: channel plans for both encoders and the
//! difference head, with `tiny` and `darknet53-like` presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of anchor boxes per grid cell.
pub const ANCHORS_PER_SCALE: usize = 3;
/// Number of change categories (correct, to_del, to_add).
pub const NUM_CLASSES: usize = 3;
/// Channels per anchor: tx, ty, tw, th, confidence, class logits.
pub const FIELDS_PER_ANCHOR: usize = 5 + NUM_CLASSES;
/// Output channels of every detection head scale.
pub const HEAD_CHANNELS: usize = ANCHORS_PER_SCALE * FIELDS_PER_ANCHOR;
/// Strides of the three prediction scales, coarse to fine.
pub const SCALE_STRIDES: [usize; 3] = [32, 16, 8];

/// The raster-branch encoder: 11 conv layers, 3x3 kernels, five stride-2
/// layers placed so feature taps exist at strides 8, 16 and 32.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterEncoderPlan {
    /// Output channels of each of the 11 layers.
    pub channels: [usize; 11],
}

impl RasterEncoderPlan {
    /// Strides of the 11 layers; taps are taken after layers 5, 7 and 10
    /// (zero-based).
    pub const STRIDES: [usize; 11] = [2, 1, 2, 1, 2, 1, 2, 1, 2, 1, 1];
    pub const TAP_LAYERS: [usize; 3] = [5, 7, 10];

    /// Tap channels at strides (8, 16, 32).
    pub fn taps(&self) -> (usize, usize, usize) {
        (
            self.channels[Self::TAP_LAYERS[0]],
            self.channels[Self::TAP_LAYERS[1]],
            self.channels[Self::TAP_LAYERS[2]],
        )
    }
}

/// The camera-branch residual backbone: a stem conv followed by five
/// stride-2 stages of residual units; taps at the last three stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackbonePlan {
    pub stem_channels: usize,
    pub stage_channels: [usize; 5],
    pub blocks_per_stage: [usize; 5],
}

impl BackbonePlan {
    /// Tap channels at strides (8, 16, 32).
    pub fn taps(&self) -> (usize, usize, usize) {
        (
            self.stage_channels[2],
            self.stage_channels[3],
            self.stage_channels[4],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,
    /// Input spatial size; must be divisible by 32.
    pub input_size: usize,
    /// Channels of the rasterized map input (one per element kind).
    pub raster_channels: usize,
    pub raster_plan: RasterEncoderPlan,
    pub backbone: BackbonePlan,
    /// Hidden channels of the temporal ConvLSTM, equal to the coarsest PCD
    /// output channels.
    pub temporal: bool,
}

impl ModelConfig {
    /// The small preset used by the desk-scale experiments.
    pub fn tiny(input_size: usize) -> Self {
        ModelConfig {
            preset: "tiny".into(),
            input_size,
            raster_channels: 1,
            raster_plan: RasterEncoderPlan {
                channels: [8, 8, 16, 16, 24, 32, 48, 64, 96, 128, 128],
            },
            backbone: BackbonePlan {
                stem_channels: 8,
                stage_channels: [16, 24, 32, 64, 128],
                blocks_per_stage: [1, 1, 1, 1, 1],
            },
            temporal: false,
        }
    }

    /// A configuration following the Darknet-53 shape (without pretrained
    /// weights).
    pub fn darknet53_like(input_size: usize) -> Self {
        ModelConfig {
            preset: "darknet53-like".into(),
            input_size,
            raster_channels: 1,
            raster_plan: RasterEncoderPlan {
                channels: [32, 64, 64, 128, 128, 256, 256, 512, 512, 1024, 1024],
            },
            backbone: BackbonePlan {
                stem_channels: 32,
                stage_channels: [64, 128, 256, 512, 1024],
                blocks_per_stage: [1, 2, 8, 8, 4],
            },
            temporal: false,
        }
    }

    /// A micro plan for gradient tests at tiny spatial sizes.
    pub fn micro(input_size: usize) -> Self {
        ModelConfig {
            preset: "micro".into(),
            input_size,
            raster_channels: 1,
            raster_plan: RasterEncoderPlan {
                channels: [4, 4, 4, 4, 6, 4, 6, 6, 6, 8, 8],
            },
            backbone: BackbonePlan {
                stem_channels: 4,
                stage_channels: [4, 4, 4, 6, 8],
                blocks_per_stage: [1, 1, 1, 1, 1],
            },
            temporal: false,
        }
    }

    pub fn by_preset(name: &str, input_size: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(input_size)),
            "darknet53-like" => Ok(Self::darknet53_like(input_size)),
            "micro" => Ok(Self::micro(input_size)),
            other => Err(Error::schema(format!(
                "unknown model preset {other:?} (expected tiny, darknet53-like, or micro)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::contract(format!(
                "input_size must be a positive multiple of 32 (got {})",
                self.input_size
            )));
        }
        if self.raster_channels == 0 {
            return Err(Error::contract("raster_channels must be at least 1"));
        }
        let r = self.raster_plan.taps();
        let b = self.backbone.taps();
        if r != b {
            return Err(Error::contract(format!(
                "encoder taps must agree per scale for the cross difference: raster {r:?} vs backbone {b:?}"
            )));
        }
        for (i, &c) in self.raster_plan.channels.iter().enumerate() {
            if c == 0 {
                return Err(Error::contract(format!("raster layer {i} has 0 channels")));
            }
        }
        let (c8, c16, c32) = self.taps();
        for (name, c) in [("s8", c8), ("s16", c16), ("s32", c32)] {
            if c % 2 != 0 {
                return Err(Error::contract(format!(
                    "tap channels must be even so the difference head can halve them ({name} = {c})"
                )));
            }
        }
        Ok(())
    }

    /// Tap channels (stride 8, 16, 32) shared by both encoders.
    pub fn taps(&self) -> (usize, usize, usize) {
        self.raster_plan.taps()
    }

    /// Grid sizes of the three prediction scales, coarse to fine.
    pub fn grids(&self) -> [usize; 3] {
        [
            self.input_size / 32,
            self.input_size / 16,
            self.input_size / 8,
        ]
    }

    /// Channels per scale entering PCD (equal to the tap channels), coarse to
    /// fine.
    pub fn scale_channels(&self) -> [usize; 3] {
        let (c8, c16, c32) = self.taps();
        [c32, c16, c8]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::tiny(224).validate().unwrap();
        ModelConfig::darknet53_like(224).validate().unwrap();
        ModelConfig::micro(32).validate().unwrap();
    }

    #[test]
    fn grids_for_224() {
        assert_eq!(ModelConfig::tiny(224).grids(), [7, 14, 28]);
    }

    #[test]
    fn non_multiple_of_32_rejected() {
        assert!(ModelConfig::tiny(100).validate().is_err());
    }

    #[test]
    fn mismatched_taps_rejected() {
        let mut cfg = ModelConfig::tiny(64);
        cfg.backbone.stage_channels[4] = 64;
        assert!(cfg.validate().is_err());
    }
}
