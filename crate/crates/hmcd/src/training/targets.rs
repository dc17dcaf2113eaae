//! Ground-truth assignment: each labeled box becomes one responsible
//! cell/anchor, with regression targets inverting the decode transform.

use crate::diffnet::{encode_box, AnchorSet, SCALE_STRIDES};
use crate::error::{Error, Result};
use crate::losses::{ResponsibleCell, ScaleTarget, TargetTensor};
use crate::synth::ChangeBox;

/// IoU of two centered shapes.
fn shape_iou(w1: f64, h1: f64, w2: f64, h2: f64) -> f64 {
    let inter = w1.min(w2) * h1.min(h2);
    inter / (w1 * h1 + w2 * h2 - inter)
}

/// Assign every label to the best-IoU anchor (ties to the lower anchor
/// index), producing per-scale responsibility masks, regression targets, and
/// one-hot class targets. Boxes smaller than one pixel are skipped with a
/// warning on stderr.
pub fn build_targets(
    labels: &[ChangeBox],
    anchors: &AnchorSet,
    input_size: usize,
) -> Result<TargetTensor> {
    if input_size == 0 || input_size % 32 != 0 {
        return Err(Error::contract(format!(
            "input_size must be a positive multiple of 32 (got {input_size})"
        )));
    }
    let mut scales: Vec<ScaleTarget> = SCALE_STRIDES
        .iter()
        .map(|&stride| ScaleTarget::empty(stride, input_size / stride))
        .collect();

    for label in labels {
        let b = &label.geom;
        if b.w < 1.0 || b.h < 1.0 {
            eprintln!(
                "warning: skipping sub-pixel box {:.2}x{:.2} at ({:.1}, {:.1})",
                b.w, b.h, b.cx, b.cy
            );
            continue;
        }
        let size = input_size as f64;
        if !(0.0..size).contains(&b.cx) || !(0.0..size).contains(&b.cy) {
            return Err(Error::contract(format!(
                "label center ({}, {}) outside the {input_size}px image",
                b.cx, b.cy
            )));
        }

        // Rank all nine anchors by shape IoU, best first; ties keep the lower
        // index because the sort is stable.
        let mut ranked: Vec<(usize, f64)> = anchors
            .priors
            .iter()
            .enumerate()
            .map(|(idx, a)| (idx, shape_iou(b.w, b.h, a.pw, a.ph)))
            .collect();
        ranked.sort_by(|x, y| y.1.total_cmp(&x.1));

        let mut placed = false;
        for (anchor_idx, _) in &ranked {
            // Anchor k belongs to scale 2 - k/3 (ascending areas, coarse
            // scale takes the largest three).
            let scale_idx = 2 - anchor_idx / 3;
            let slot = anchor_idx % 3;
            let scale = &mut scales[scale_idx];
            let stride = scale.stride;
            let j = ((b.cx / stride as f64) as usize).min(scale.grid - 1);
            let i = ((b.cy / stride as f64) as usize).min(scale.grid - 1);
            if scale.obj[(slot, i, j)] != 0 {
                continue;
            }
            scale.obj[(slot, i, j)] = 1;
            let anchor = anchors.priors[*anchor_idx];
            scale.cells.push(ResponsibleCell {
                anchor_slot: slot,
                i,
                j,
                t: encode_box(b, i, j, stride, &anchor),
                gt_box: *b,
                class_index: label.category.index(),
                anchor,
            });
            placed = true;
            break;
        }
        if !placed {
            eprintln!(
                "warning: no free anchor for box at ({:.1}, {:.1}); label dropped",
                b.cx, b.cy
            );
        }
    }

    Ok(TargetTensor { scales })
}
