//! The Diff-Net change detector: encoders, cross-difference head, anchors,
//! box decoding, NMS, and the temporal variant.

pub mod anchors;
pub mod config;
pub mod head;
pub mod model;
pub mod nms;

pub use anchors::{kmeans_anchors, AnchorPrior, AnchorSet};
pub use config::{
    BackbonePlan, ModelConfig, RasterEncoderPlan, ANCHORS_PER_SCALE, FIELDS_PER_ANCHOR,
    HEAD_CHANNELS, NUM_CLASSES, SCALE_STRIDES,
};
pub use head::{
    decode_box, decode_boxes, encode_box, field_channel, Detection, RawPrediction,
    ScalePrediction,
};
pub use model::{raw_values, to_input_tensor, DiffNet, FeaturePyramid, RawNodes, TemporalState};
pub use nms::{nms, NmsConfig, NmsMode};
