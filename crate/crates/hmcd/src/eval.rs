//! Evaluation protocols: detection matching, precision/recall/F-score, mean
//! average precision, clip-level top-1 voting, and the conventional
//! detector + difference-post-process baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::BoxPx;
use crate::diffnet::Detection;
use crate::error::{Error, Result};
use crate::synth::{ChangeBox, ChangeCategory};

/// TP/FP/FN counts of one category at a fixed IoU threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Matching outcome across categories.
#[derive(Debug, Clone, Default)]
pub struct MatchResult {
    pub per_category: BTreeMap<&'static str, Counts>,
    /// (detection index, ground-truth index) pairs.
    pub matched: Vec<(usize, usize)>,
}

impl MatchResult {
    pub fn counts(&self, cat: ChangeCategory) -> Counts {
        self.per_category
            .get(cat.as_str())
            .copied()
            .unwrap_or_default()
    }
}

/// Greedy matching by descending confidence: each ground truth is matched at
/// most once, and only by a detection of the same category with IoU at or
/// above the threshold.
pub fn match_detections(
    dets: &[Detection],
    gts: &[ChangeBox],
    iou_thresh: f64,
) -> Result<MatchResult> {
    if !(0.0..1.0).contains(&iou_thresh) || iou_thresh == 0.0 {
        return Err(Error::contract(format!(
            "iou_thresh must lie in (0, 1), got {iou_thresh}"
        )));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));

    let mut gt_taken = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for cat in ChangeCategory::ALL {
        result.per_category.insert(cat.as_str(), Counts::default());
    }

    for &di in &order {
        let det = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] || gt.category != det.category {
                continue;
            }
            let iou = det.geom.iou(&gt.geom);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        let counts = result.per_category.get_mut(det.category.as_str()).unwrap();
        match best {
            Some((gi, _)) => {
                gt_taken[gi] = true;
                counts.tp += 1;
                result.matched.push((di, gi));
            }
            None => counts.fp += 1,
        }
    }
    for (gi, gt) in gts.iter().enumerate() {
        if !gt_taken[gi] {
            result.per_category.get_mut(gt.category.as_str()).unwrap().fn_ += 1;
        }
    }
    Ok(result)
}

/// Precision, recall, F-score triple with the 0-denominator convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

impl Prf {
    pub fn from_counts(c: &Counts) -> Prf {
        let precision = if c.tp + c.fp == 0 {
            0.0
        } else {
            c.tp as f64 / (c.tp + c.fp) as f64
        };
        let recall = if c.tp + c.fn_ == 0 {
            0.0
        } else {
            c.tp as f64 / (c.tp + c.fn_) as f64
        };
        let f_score = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f_score,
        }
    }
}

/// Per-category and micro-averaged precision/recall/F-score.
pub fn prf(result: &MatchResult) -> (BTreeMap<&'static str, Prf>, Prf) {
    let mut per = BTreeMap::new();
    let mut micro = Counts::default();
    for cat in ChangeCategory::ALL {
        let c = result.counts(cat);
        micro.tp += c.tp;
        micro.fp += c.fp;
        micro.fn_ += c.fn_;
        per.insert(cat.as_str(), Prf::from_counts(&c));
    }
    (per, Prf::from_counts(&micro))
}

/// A `(recall, precision)` point of a PR curve.
pub type PrPoint = (f64, f64);

/// Sum per-frame matching counts over a dataset.
pub fn match_detections_frames(
    dets: &[Vec<Detection>],
    gts: &[Vec<ChangeBox>],
    iou_thresh: f64,
) -> Result<MatchResult> {
    let mut total = MatchResult::default();
    for cat in ChangeCategory::ALL {
        total.per_category.insert(cat.as_str(), Counts::default());
    }
    for (d, g) in dets.iter().zip(gts.iter()) {
        let m = match_detections(d, g, iou_thresh)?;
        for (name, c) in &m.per_category {
            let t = total.per_category.get_mut(name).unwrap();
            t.tp += c.tp;
            t.fp += c.fp;
            t.fn_ += c.fn_;
        }
    }
    Ok(total)
}

/// Rank one category's detections across all frames by confidence and mark
/// each TP or FP against its own frame's ground truths (each GT claimable
/// once, best IoU wins).
fn rank_and_mark(
    dets: &[Vec<Detection>],
    gts: &[Vec<ChangeBox>],
    cat: ChangeCategory,
    iou_thresh: f64,
) -> (Vec<bool>, usize) {
    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(f, frame)| {
            frame
                .iter()
                .enumerate()
                .filter(|(_, d)| d.category == cat)
                .map(move |(i, _)| (f, i))
        })
        .collect();
    order.sort_by(|&(fa, ia), &(fb, ib)| {
        dets[fb][ib].confidence.total_cmp(&dets[fa][ia].confidence)
    });

    let gt_idx: Vec<(usize, usize)> = gts
        .iter()
        .enumerate()
        .flat_map(|(f, frame)| {
            frame
                .iter()
                .enumerate()
                .filter(|(_, g)| g.category == cat)
                .map(move |(i, _)| (f, i))
        })
        .collect();
    let mut taken = vec![false; gt_idx.len()];
    let mut flags = Vec::with_capacity(order.len());
    for &(f, di) in &order {
        let mut best: Option<(usize, f64)> = None;
        for (slot, &(gf, gi)) in gt_idx.iter().enumerate() {
            if taken[slot] || gf != f {
                continue;
            }
            let iou = dets[f][di].geom.iou(&gts[gf][gi].geom);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((slot, iou));
            }
        }
        match best {
            Some((slot, _)) => {
                taken[slot] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    (flags, gt_idx.len())
}

/// All-point interpolated average precision for one category over a dataset.
/// `None` when the category has no ground-truth boxes.
pub fn average_precision_frames(
    dets: &[Vec<Detection>],
    gts: &[Vec<ChangeBox>],
    cat: ChangeCategory,
    iou_thresh: f64,
) -> Result<Option<f64>> {
    if !(0.0..1.0).contains(&iou_thresh) || iou_thresh == 0.0 {
        return Err(Error::contract(format!(
            "iou_thresh must lie in (0, 1), got {iou_thresh}"
        )));
    }
    let (flags, n_gt) = rank_and_mark(dets, gts, cat, iou_thresh);
    if n_gt == 0 {
        return Ok(None);
    }
    // Precision at each rank, then its suffix maximum (the interpolation
    // envelope). Recall increases by exactly 1/n_gt at each TP, so
    // AP = sum of envelope precision at TP ranks, divided by n_gt once.
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(flags.len());
    for (rank, &is_tp) in flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
    }
    let mut envelope = precisions.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap_num = 0.0;
    for (rank, &is_tp) in flags.iter().enumerate() {
        if is_tp {
            ap_num += envelope[rank];
        }
    }
    Ok(Some(ap_num / n_gt as f64))
}

/// Single-image average precision.
pub fn average_precision(
    dets: &[Detection],
    gts: &[ChangeBox],
    cat: ChangeCategory,
    iou_thresh: f64,
) -> Result<Option<f64>> {
    average_precision_frames(&[dets.to_vec()], &[gts.to_vec()], cat, iou_thresh)
}

/// mAP over a dataset: the unweighted mean of per-category APs; categories
/// without ground truth are excluded with a warning.
pub fn map_metric_frames(
    dets: &[Vec<Detection>],
    gts: &[Vec<ChangeBox>],
    iou_thresh: f64,
) -> Result<(BTreeMap<&'static str, Option<f64>>, f64)> {
    let mut per = BTreeMap::new();
    let mut sum = 0.0;
    let mut n = 0usize;
    for cat in ChangeCategory::ALL {
        let ap = average_precision_frames(dets, gts, cat, iou_thresh)?;
        if let Some(v) = ap {
            sum += v;
            n += 1;
        } else {
            eprintln!(
                "warning: category {} has no ground-truth boxes; excluded from mAP",
                cat.as_str()
            );
        }
        per.insert(cat.as_str(), ap);
    }
    let map = if n == 0 { 0.0 } else { sum / n as f64 };
    Ok((per, map))
}

/// Single-image mAP.
pub fn map_metric(
    dets: &[Detection],
    gts: &[ChangeBox],
    iou_thresh: f64,
) -> Result<(BTreeMap<&'static str, Option<f64>>, f64)> {
    map_metric_frames(&[dets.to_vec()], &[gts.to_vec()], iou_thresh)
}

/// The PR curve of one category over a dataset (by descending confidence),
/// for CSV export.
pub fn pr_curve_frames(
    dets: &[Vec<Detection>],
    gts: &[Vec<ChangeBox>],
    cat: ChangeCategory,
    iou_thresh: f64,
) -> Result<Vec<PrPoint>> {
    if !(0.0..1.0).contains(&iou_thresh) || iou_thresh == 0.0 {
        return Err(Error::contract("iou_thresh must lie in (0, 1)"));
    }
    let (flags, n_gt) = rank_and_mark(dets, gts, cat, iou_thresh);
    let mut tp = 0usize;
    let mut out = Vec::with_capacity(flags.len());
    for (rank, &is_tp) in flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
        out.push((recall, tp as f64 / (rank + 1) as f64));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Clip-level classification

/// Verdict of clip-level majority voting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipVerdict {
    pub clip_id: String,
    pub predicted: ChangeCategory,
    /// Box counts per category: correct, to_del, to_add.
    pub counts: [usize; 3],
    pub vote_threshold: usize,
}

/// Count the detected boxes of each category across the clip's frames; when
/// the larger of the to_add/to_del counts exceeds the threshold, that event
/// is the verdict (ties go to to_add), otherwise the clip is `correct`.
pub fn clip_classify(
    clip_id: &str,
    frame_dets: &[Vec<Detection>],
    vote_threshold: usize,
) -> Result<ClipVerdict> {
    if frame_dets.is_empty() {
        return Err(Error::contract("empty clip"));
    }
    if vote_threshold < 1 {
        return Err(Error::contract("vote_threshold must be at least 1"));
    }
    let mut counts = [0usize; 3];
    for frame in frame_dets {
        for det in frame {
            counts[det.category.index()] += 1;
        }
    }
    let to_del = counts[ChangeCategory::ToDel.index()];
    let to_add = counts[ChangeCategory::ToAdd.index()];
    let predicted = if to_add.max(to_del) > vote_threshold {
        if to_add >= to_del {
            ChangeCategory::ToAdd
        } else {
            ChangeCategory::ToDel
        }
    } else {
        ChangeCategory::Correct
    };
    Ok(ClipVerdict {
        clip_id: clip_id.to_string(),
        predicted,
        counts,
        vote_threshold,
    })
}

// ---------------------------------------------------------------------------
// Detector + difference-post-process baseline

/// A category-free detection from a plain object detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlainDetection {
    #[serde(flatten)]
    pub geom: BoxPx,
    pub confidence: f64,
}

/// Associate plain detections with map projections and derive change boxes:
/// matched pairs are `correct`, unmatched detections `to_add`, unmatched
/// projections `to_del`.
///
/// `pre_nms` supplies the detector's pre-suppression candidates; an
/// unmatched projection then scores `1 - c` of its best-overlapping
/// candidate (confidence 1.0 when nothing overlaps).
pub fn baseline_diff(
    dets_plain: &[PlainDetection],
    projected: &[(String, BoxPx)],
    iou_thresh: f64,
    pre_nms: Option<&[PlainDetection]>,
) -> Result<Vec<Detection>> {
    if !(0.0..1.0).contains(&iou_thresh) || iou_thresh == 0.0 {
        return Err(Error::contract("iou_thresh must lie in (0, 1)"));
    }
    let mut order: Vec<usize> = (0..dets_plain.len()).collect();
    order.sort_by(|&a, &b| dets_plain[b].confidence.total_cmp(&dets_plain[a].confidence));

    let mut proj_taken = vec![false; projected.len()];
    let mut out = Vec::new();
    let one_hot = |cat: ChangeCategory| {
        let mut p = [0.0; 3];
        p[cat.index()] = 1.0;
        p
    };

    for &di in &order {
        let det = &dets_plain[di];
        let mut best: Option<(usize, f64)> = None;
        for (pi, (_, pbox)) in projected.iter().enumerate() {
            if proj_taken[pi] {
                continue;
            }
            let iou = det.geom.iou(pbox);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((pi, iou));
            }
        }
        match best {
            Some((pi, _)) => {
                proj_taken[pi] = true;
                out.push(Detection {
                    geom: det.geom,
                    category: ChangeCategory::Correct,
                    confidence: det.confidence,
                    class_probs: one_hot(ChangeCategory::Correct),
                });
            }
            None => out.push(Detection {
                geom: det.geom,
                category: ChangeCategory::ToAdd,
                confidence: det.confidence,
                class_probs: one_hot(ChangeCategory::ToAdd),
            }),
        }
    }
    for (pi, (_, pbox)) in projected.iter().enumerate() {
        if proj_taken[pi] {
            continue;
        }
        // Absent evidence scores 1.0; otherwise invert the strongest
        // overlapping pre-NMS candidate.
        let confidence = match pre_nms {
            Some(cands) => {
                let best = cands
                    .iter()
                    .filter(|c| c.geom.overlaps(pbox))
                    .map(|c| c.confidence)
                    .fold(f64::NAN, f64::max);
                if best.is_nan() {
                    1.0
                } else {
                    1.0 - best
                }
            }
            None => 1.0,
        };
        out.push(Detection {
            geom: *pbox,
            category: ChangeCategory::ToDel,
            confidence,
            class_probs: one_hot(ChangeCategory::ToDel),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(cx: f64, cy: f64, w: f64, h: f64, cat: ChangeCategory, conf: f64) -> Detection {
        let mut class_probs = [0.0; 3];
        class_probs[cat.index()] = 1.0;
        Detection {
            geom: BoxPx::new(cx, cy, w, h),
            category: cat,
            confidence: conf,
            class_probs,
        }
    }

    fn gt(cx: f64, cy: f64, w: f64, h: f64, cat: ChangeCategory) -> ChangeBox {
        ChangeBox {
            geom: BoxPx::new(cx, cy, w, h),
            category: cat,
            element_id: None,
        }
    }

    #[test]
    fn match_single_pair_above_threshold() {
        // IoU = 0.6: 10x10 boxes offset by 2.5 -> inter 75, union 125.
        let d = det(7.5, 5.0, 10.0, 10.0, ChangeCategory::Correct, 0.9);
        let g = gt(5.0, 5.0, 10.0, 10.0, ChangeCategory::Correct);
        assert!((d.geom.iou(&g.geom) - 0.6).abs() < 1e-9);
        let m = match_detections(&[d], &[g], 0.5).unwrap();
        assert_eq!(m.counts(ChangeCategory::Correct), Counts { tp: 1, fp: 0, fn_: 0 });
    }

    #[test]
    fn category_mismatch_counts_fp_and_fn() {
        let d = det(5.0, 5.0, 10.0, 10.0, ChangeCategory::ToAdd, 0.9);
        let g = gt(5.0, 5.0, 10.0, 10.0, ChangeCategory::Correct);
        let m = match_detections(&[d], &[g], 0.5).unwrap();
        assert_eq!(m.counts(ChangeCategory::ToAdd).fp, 1);
        assert_eq!(m.counts(ChangeCategory::Correct).fn_, 1);
    }

    #[test]
    fn duplicate_detections_yield_one_tp_one_fp() {
        let d1 = det(5.0, 5.0, 10.0, 10.0, ChangeCategory::Correct, 0.9);
        let d2 = det(5.5, 5.0, 10.0, 10.0, ChangeCategory::Correct, 0.8);
        let g = gt(5.0, 5.0, 10.0, 10.0, ChangeCategory::Correct);
        let m = match_detections(&[d1, d2], &[g], 0.5).unwrap();
        assert_eq!(m.counts(ChangeCategory::Correct), Counts { tp: 1, fp: 1, fn_: 0 });
    }

    #[test]
    fn tp_plus_fn_equals_gt_count() {
        let dets = vec![
            det(5.0, 5.0, 10.0, 10.0, ChangeCategory::Correct, 0.9),
            det(50.0, 5.0, 10.0, 10.0, ChangeCategory::ToDel, 0.7),
        ];
        let gts = vec![
            gt(5.0, 5.0, 10.0, 10.0, ChangeCategory::Correct),
            gt(30.0, 5.0, 10.0, 10.0, ChangeCategory::Correct),
            gt(50.0, 5.0, 10.0, 10.0, ChangeCategory::ToDel),
        ];
        let m = match_detections(&dets, &gts, 0.5).unwrap();
        for cat in ChangeCategory::ALL {
            let c = m.counts(cat);
            let n_gt = gts.iter().filter(|g| g.category == cat).count();
            assert_eq!(c.tp + c.fn_, n_gt, "category {}", cat.as_str());
        }
    }

    #[test]
    fn prf_hand_values() {
        let mut result = MatchResult::default();
        result
            .per_category
            .insert(ChangeCategory::Correct.as_str(), Counts { tp: 9, fp: 1, fn_: 1 });
        let (per, _) = prf(&result);
        let p = per[ChangeCategory::Correct.as_str()];
        assert!((p.precision - 0.9).abs() < 1e-12);
        assert!((p.recall - 0.9).abs() < 1e-12);
        assert!((p.f_score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn prf_zero_denominator_convention() {
        let result = MatchResult::default();
        let (per, micro) = prf(&result);
        for p in per.values() {
            assert_eq!(p.precision, 0.0);
            assert_eq!(p.recall, 0.0);
            assert_eq!(p.f_score, 0.0);
        }
        assert_eq!(micro.precision, 0.0);
    }

    #[test]
    fn ap_perfect_ranking_is_exactly_one() {
        let gts = vec![
            gt(5.0, 5.0, 10.0, 10.0, ChangeCategory::Correct),
            gt(30.0, 5.0, 10.0, 10.0, ChangeCategory::Correct),
            gt(60.0, 5.0, 10.0, 10.0, ChangeCategory::Correct),
        ];
        let dets: Vec<Detection> = gts
            .iter()
            .enumerate()
            .map(|(i, g)| {
                det(
                    g.geom.cx,
                    g.geom.cy,
                    g.geom.w,
                    g.geom.h,
                    ChangeCategory::Correct,
                    0.9 - 0.1 * i as f64,
                )
            })
            .collect();
        let ap = average_precision(&dets, &gts, ChangeCategory::Correct, 0.5)
            .unwrap()
            .unwrap();
        assert_eq!(ap, 1.0, "perfect AP must be exactly 1.0");
    }

    #[test]
    fn ap_low_iou_single_det_is_zero() {
        let g = gt(5.0, 5.0, 10.0, 10.0, ChangeCategory::Correct);
        let d = det(40.0, 5.0, 10.0, 10.0, ChangeCategory::Correct, 0.9);
        let ap = average_precision(&[d], &[g], ChangeCategory::Correct, 0.5)
            .unwrap()
            .unwrap();
        assert_eq!(ap, 0.0);
    }

    #[test]
    fn ap_hand_case_tp_fp_tp() {
        // Two GT; detections ranked TP (0.9), FP (0.8), TP (0.7).
        // PR points: (0.5, 1), (0.5, 0.5), (1.0, 2/3).
        // All-point AP = 0.5 * 1 + 0.5 * 2/3 = 5/6.
        let gts = vec![
            gt(5.0, 5.0, 10.0, 10.0, ChangeCategory::ToAdd),
            gt(30.0, 5.0, 10.0, 10.0, ChangeCategory::ToAdd),
        ];
        let dets = vec![
            det(5.0, 5.0, 10.0, 10.0, ChangeCategory::ToAdd, 0.9),
            det(60.0, 5.0, 10.0, 10.0, ChangeCategory::ToAdd, 0.8),
            det(30.0, 5.0, 10.0, 10.0, ChangeCategory::ToAdd, 0.7),
        ];
        let ap = average_precision(&dets, &gts, ChangeCategory::ToAdd, 0.5)
            .unwrap()
            .unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "ap = {ap}");
    }

    #[test]
    fn ap_is_rank_invariant_under_monotone_rescale() {
        let gts = vec![
            gt(5.0, 5.0, 10.0, 10.0, ChangeCategory::Correct),
            gt(30.0, 5.0, 10.0, 10.0, ChangeCategory::Correct),
        ];
        let dets = vec![
            det(5.0, 5.0, 10.0, 10.0, ChangeCategory::Correct, 0.9),
            det(60.0, 5.0, 10.0, 10.0, ChangeCategory::Correct, 0.5),
            det(30.0, 5.0, 10.0, 10.0, ChangeCategory::Correct, 0.2),
        ];
        let rescaled: Vec<Detection> = dets
            .iter()
            .map(|d| Detection {
                confidence: (d.confidence * 3.0).tanh() * 0.25 + 0.5,
                ..d.clone()
            })
            .collect();
        let a = average_precision(&dets, &gts, ChangeCategory::Correct, 0.5).unwrap();
        let b = average_precision(&rescaled, &gts, ChangeCategory::Correct, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ap_ranks_globally_but_matches_per_frame() {
        // One GT per frame at the same place; a cross-frame duplicate cannot
        // steal the other frame's ground truth.
        let g = gt(5.0, 5.0, 10.0, 10.0, ChangeCategory::Correct);
        let frames_gt = vec![vec![g.clone()], vec![g.clone()]];
        let frames_det = vec![
            vec![det(5.0, 5.0, 10.0, 10.0, ChangeCategory::Correct, 0.9)],
            vec![
                det(5.0, 5.0, 10.0, 10.0, ChangeCategory::Correct, 0.95),
                det(5.5, 5.0, 10.0, 10.0, ChangeCategory::Correct, 0.8),
            ],
        ];
        let ap = average_precision_frames(&frames_det, &frames_gt, ChangeCategory::Correct, 0.5)
            .unwrap()
            .unwrap();
        // Ranked: TP(0.95), TP(0.9), FP(0.8) -> AP = 1.0.
        assert_eq!(ap, 1.0);
        let m = match_detections_frames(&frames_det, &frames_gt, 0.5).unwrap();
        assert_eq!(m.counts(ChangeCategory::Correct), Counts { tp: 2, fp: 1, fn_: 0 });
    }

    #[test]
    fn map_excludes_empty_categories() {
        let gts = vec![gt(5.0, 5.0, 10.0, 10.0, ChangeCategory::Correct)];
        let dets = vec![det(5.0, 5.0, 10.0, 10.0, ChangeCategory::Correct, 0.9)];
        let (per, map) = map_metric(&dets, &gts, 0.5).unwrap();
        assert_eq!(per[ChangeCategory::ToAdd.as_str()], None);
        assert_eq!(map, 1.0);
    }

    #[test]
    fn clip_vote_above_threshold_picks_category() {
        let frames = vec![vec![
            det(5.0, 5.0, 4.0, 4.0, ChangeCategory::ToAdd, 0.9);
            5
        ]];
        let v = clip_classify("c0", &frames, 3).unwrap();
        assert_eq!(v.predicted, ChangeCategory::ToAdd);
    }

    #[test]
    fn clip_vote_below_threshold_is_correct() {
        let frames = vec![vec![
            det(5.0, 5.0, 4.0, 4.0, ChangeCategory::ToAdd, 0.9),
            det(9.0, 5.0, 4.0, 4.0, ChangeCategory::ToAdd, 0.9),
            det(15.0, 5.0, 4.0, 4.0, ChangeCategory::ToDel, 0.9),
        ]];
        let v = clip_classify("c0", &frames, 3).unwrap();
        assert_eq!(v.predicted, ChangeCategory::Correct);
    }

    #[test]
    fn clip_vote_is_permutation_invariant() {
        let f1 = vec![det(5.0, 5.0, 4.0, 4.0, ChangeCategory::ToDel, 0.9); 2];
        let f2 = vec![det(5.0, 5.0, 4.0, 4.0, ChangeCategory::ToDel, 0.8); 3];
        let a = clip_classify("c", &[f1.clone(), f2.clone()], 3).unwrap();
        let b = clip_classify("c", &[f2, f1], 3).unwrap();
        assert_eq!(a.predicted, b.predicted);
        assert_eq!(a.counts, b.counts);
    }

    #[test]
    fn clip_empty_errors() {
        assert!(clip_classify("c", &[], 3).is_err());
    }

    #[test]
    fn baseline_matches_are_correct_boxes() {
        let d = PlainDetection {
            geom: BoxPx::new(5.0, 5.0, 10.0, 10.0),
            confidence: 0.9,
        };
        let proj = vec![("e1".to_string(), BoxPx::new(5.5, 5.0, 10.0, 10.0))];
        let out = baseline_diff(&[d], &proj, 0.5, None).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].category, ChangeCategory::Correct);
    }

    #[test]
    fn baseline_unmatched_projection_is_to_del() {
        let proj = vec![("e1".to_string(), BoxPx::new(5.0, 5.0, 10.0, 10.0))];
        let out = baseline_diff(&[], &proj, 0.5, None).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].category, ChangeCategory::ToDel);
        assert_eq!(out[0].confidence, 1.0);
    }

    #[test]
    fn baseline_unmatched_detection_is_to_add() {
        let d = PlainDetection {
            geom: BoxPx::new(5.0, 5.0, 10.0, 10.0),
            confidence: 0.7,
        };
        let out = baseline_diff(&[d], &[], 0.5, None).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].category, ChangeCategory::ToAdd);
        assert_eq!(out[0].confidence, 0.7);
    }

    #[test]
    fn baseline_to_del_uses_one_minus_candidate_confidence() {
        let proj = vec![("e1".to_string(), BoxPx::new(5.0, 5.0, 10.0, 10.0))];
        let cands = vec![
            PlainDetection {
                geom: BoxPx::new(6.0, 5.0, 10.0, 10.0),
                confidence: 0.3,
            },
            PlainDetection {
                geom: BoxPx::new(5.0, 6.0, 10.0, 10.0),
                confidence: 0.2,
            },
            PlainDetection {
                geom: BoxPx::new(90.0, 90.0, 10.0, 10.0),
                confidence: 0.99,
            },
        ];
        let out = baseline_diff(&[], &proj, 0.5, Some(&cands)).unwrap();
        assert_eq!(out[0].category, ChangeCategory::ToDel);
        assert!((out[0].confidence - 0.7).abs() < 1e-12);
    }

    #[test]
    fn baseline_outputs_partition_inputs() {
        let dets = vec![
            PlainDetection {
                geom: BoxPx::new(5.0, 5.0, 10.0, 10.0),
                confidence: 0.9,
            },
            PlainDetection {
                geom: BoxPx::new(40.0, 5.0, 10.0, 10.0),
                confidence: 0.8,
            },
        ];
        let proj = vec![
            ("a".to_string(), BoxPx::new(5.5, 5.0, 10.0, 10.0)),
            ("b".to_string(), BoxPx::new(70.0, 5.0, 10.0, 10.0)),
        ];
        let out = baseline_diff(&dets, &proj, 0.5, None).unwrap();
        // One matched pair (one correct box) + one to_add + one to_del.
        assert_eq!(out.len(), 3);
        let count = |c: ChangeCategory| out.iter().filter(|d| d.category == c).count();
        assert_eq!(count(ChangeCategory::Correct), 1);
        assert_eq!(count(ChangeCategory::ToAdd), 1);
        assert_eq!(count(ChangeCategory::ToDel), 1);
    }
}
