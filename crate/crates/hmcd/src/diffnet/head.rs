//! Detection head tensors and the anchor box transform.
//!
//! Each scale predicts a `[24, S, S]` tensor: per anchor the channels are
//! `[tx, ty, tw, th, conf, p_correct, p_to_del, p_to_add]`. A box decodes as
//! `bx = (sigma(tx) + j) * stride`, `by = (sigma(ty) + i) * stride`,
//! `bw = pw * exp(tw)`, `bh = ph * exp(th)`.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::anchors::{AnchorPrior, AnchorSet};
use super::config::{ANCHORS_PER_SCALE, FIELDS_PER_ANCHOR, HEAD_CHANNELS, NUM_CLASSES};
use crate::boxes::BoxPx;
use crate::error::{Error, Result};
use crate::nn::{logit_scalar, sigmoid_scalar};
use crate::synth::ChangeCategory;

/// Channel index of a field for anchor slot `b`.
pub fn field_channel(b: usize, field: usize) -> usize {
    b * FIELDS_PER_ANCHOR + field
}

/// One decoded detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub geom: BoxPx,
    pub category: ChangeCategory,
    pub confidence: f64,
    pub class_probs: [f64; NUM_CLASSES],
}

/// Raw head output of one scale.
#[derive(Debug, Clone)]
pub struct ScalePrediction {
    /// `[24, S, S]`.
    pub tensor: Array3<f64>,
    pub stride: usize,
}

/// The three-scale raw prediction, coarse to fine.
#[derive(Debug, Clone)]
pub struct RawPrediction {
    pub scales: Vec<ScalePrediction>,
}

impl RawPrediction {
    pub fn validate(&self) -> Result<()> {
        for s in &self.scales {
            let (c, h, w) = s.tensor.dim();
            if c != HEAD_CHANNELS || h != w {
                return Err(Error::shape(format!(
                    "scale tensor must be [{HEAD_CHANNELS}, S, S], got [{c}, {h}, {w}]"
                )));
            }
        }
        Ok(())
    }
}

/// Decode one cell/anchor's regression channels into a pixel box.
pub fn decode_box(
    t: [f64; 4],
    i: usize,
    j: usize,
    stride: usize,
    anchor: &AnchorPrior,
) -> BoxPx {
    BoxPx {
        cx: (sigmoid_scalar(t[0]) + j as f64) * stride as f64,
        cy: (sigmoid_scalar(t[1]) + i as f64) * stride as f64,
        w: anchor.pw * t[2].exp(),
        h: anchor.ph * t[3].exp(),
    }
}

/// Invert [`decode_box`]: the regression targets that reproduce `b` at cell
/// `(i, j)`.
pub fn encode_box(b: &BoxPx, i: usize, j: usize, stride: usize, anchor: &AnchorPrior) -> [f64; 4] {
    [
        logit_scalar(b.cx / stride as f64 - j as f64),
        logit_scalar(b.cy / stride as f64 - i as f64),
        (b.w / anchor.pw).ln(),
        (b.h / anchor.ph).ln(),
    ]
}

fn softmax3(logits: [f64; 3]) -> [f64; 3] {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.map(|l| (l - m).exp());
    let sum: f64 = e.iter().sum();
    e.map(|v| v / sum)
}

/// Decode every cell/anchor above the confidence threshold into detections.
pub fn decode_boxes(
    raw: &RawPrediction,
    anchors: &AnchorSet,
    conf_thresh: f64,
) -> Result<Vec<Detection>> {
    raw.validate()?;
    let mut out = Vec::new();
    for (scale_idx, scale) in raw.scales.iter().enumerate() {
        let grid = scale.tensor.dim().1;
        let scale_anchors = anchors.for_scale(scale_idx);
        for b in 0..ANCHORS_PER_SCALE {
            for i in 0..grid {
                for j in 0..grid {
                    let conf = sigmoid_scalar(scale.tensor[(field_channel(b, 4), i, j)]);
                    if conf < conf_thresh {
                        continue;
                    }
                    let t = [
                        scale.tensor[(field_channel(b, 0), i, j)],
                        scale.tensor[(field_channel(b, 1), i, j)],
                        scale.tensor[(field_channel(b, 2), i, j)],
                        scale.tensor[(field_channel(b, 3), i, j)],
                    ];
                    let geom = decode_box(t, i, j, scale.stride, &scale_anchors[b]);
                    let class_probs = softmax3([
                        scale.tensor[(field_channel(b, 5), i, j)],
                        scale.tensor[(field_channel(b, 6), i, j)],
                        scale.tensor[(field_channel(b, 7), i, j)],
                    ]);
                    let best = (0..NUM_CLASSES)
                        .max_by(|&a, &c| class_probs[a].total_cmp(&class_probs[c]))
                        .unwrap();
                    out.push(Detection {
                        geom,
                        category: ChangeCategory::from_index(best).unwrap(),
                        confidence: conf,
                        class_probs,
                    });
                }
            }
        }
    }
    Ok(out)
}
