//! End-to-end HD-map change detection at desk scale.
//!
//! The pipeline rasterizes HD-map elements into the camera view, runs a
//! feature-difference network (dual pyramid encoders, parallel cross
//! difference, feature propagation, anchor-based decoding) to classify each
//! element as `correct`, `to_add`, or `to_del`, synthesizes its own labeled
//! single-image (SICD) and video (VSCD) datasets, and evaluates with
//! precision/recall/F-score, mAP, and clip-level top-1 voting.
//!
//! Entry points:
//! - [`map`] / [`camera`]: HD map model, ROI queries, projection, rasterization
//! - [`synth`]: SICD/VSCD label synthesis
//! - [`diffnet`]: the network, box decoding, NMS
//! - [`losses`] / [`training`]: the training objective and the optimizer loop
//! - [`eval`]: metrics and the detector+difference baseline
//! - [`cli`]: the `hmcd` command-line front end
//!
//! See the crate `examples/` directory for one runnable example per
//! capability.

pub mod boxes;
pub mod camera;
pub mod cli;
pub mod demo;
pub mod config;
pub mod diffnet;
pub mod error;
pub mod eval;
pub mod losses;
pub mod map;
pub mod nn;
pub mod synth;
pub mod training;

pub use error::{Error, Result};

/// Schema version of the JSON map file format.
pub const MAP_SCHEMA_VERSION: u32 = 1;
/// Schema version of per-frame label files and manifests.
pub const LABEL_SCHEMA_VERSION: u32 = 1;
/// Schema version of the weight checkpoint archive.
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
