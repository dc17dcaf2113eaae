//! The training objective: GIoU localization, focal confidence, and softmax
//! category losses, combined per scale with configurable weights.
//!
//! Every loss here returns both its value and an analytic gradient; the
//! gradient suites check them against central finite differences.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxPx;
use crate::diffnet::{
    decode_box, field_channel, AnchorPrior, RawPrediction, ANCHORS_PER_SCALE, NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::nn::sigmoid_scalar;

/// Loss weights and focal parameters. The three lambda weights default to
/// 1.0, the focal balance and exponent to 0.5 and 2.0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub lambda_obj: f64,
    pub lambda_noobj: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            alpha: 0.5,
            gamma: 2.0,
            lambda_obj: 1.0,
            lambda_noobj: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("gamma", self.gamma),
            ("lambda_obj", self.lambda_obj),
            ("lambda_noobj", self.lambda_noobj),
        ] {
            if v < 0.0 {
                return Err(Error::contract(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::contract("alpha must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One cell/anchor responsible for a ground-truth box.
#[derive(Debug, Clone)]
pub struct ResponsibleCell {
    pub anchor_slot: usize,
    /// Grid row.
    pub i: usize,
    /// Grid column.
    pub j: usize,
    /// Regression targets reproducing the box (reference for tests).
    pub t: [f64; 4],
    pub gt_box: BoxPx,
    pub class_index: usize,
    pub anchor: AnchorPrior,
}

/// Targets of one prediction scale.
#[derive(Debug, Clone)]
pub struct ScaleTarget {
    pub stride: usize,
    pub grid: usize,
    /// `[B, S, S]`, 1 at responsible cells.
    pub obj: Array3<u8>,
    pub cells: Vec<ResponsibleCell>,
}

impl ScaleTarget {
    pub fn empty(stride: usize, grid: usize) -> Self {
        ScaleTarget {
            stride,
            grid,
            obj: Array3::zeros((ANCHORS_PER_SCALE, grid, grid)),
            cells: Vec::new(),
        }
    }
}

/// Targets of all three scales, coarse to fine.
#[derive(Debug, Clone)]
pub struct TargetTensor {
    pub scales: Vec<ScaleTarget>,
}

impl TargetTensor {
    pub fn num_responsible(&self) -> usize {
        self.scales.iter().map(|s| s.cells.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// GIoU

fn check_box(b: &BoxPx, what: &str) -> Result<()> {
    if !(b.w > 0.0 && b.h > 0.0) {
        return Err(Error::contract(format!(
            "{what} box must have positive area (w={}, h={})",
            b.w, b.h
        )));
    }
    Ok(())
}

/// Generalized IoU: `IoU - |hull \ union| / |hull|`, in [-1, 1].
pub fn giou(a: &BoxPx, b: &BoxPx) -> Result<f64> {
    check_box(a, "first")?;
    check_box(b, "second")?;
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let cw = a.x2().max(b.x2()) - a.x1().min(b.x1());
    let ch = a.y2().max(b.y2()) - a.y1().min(b.y1());
    let hull = cw * ch;
    Ok(inter / union + union / hull - 1.0)
}

/// Gradient of `giou(a, b)` with respect to `a`'s (cx, cy, w, h).
/// Ties on box edges take the first-argument branch.
fn giou_grad_first(a: &BoxPx, b: &BoxPx) -> [f64; 4] {
    let (ax1, ay1, ax2, ay2) = (a.x1(), a.y1(), a.x2(), a.y2());
    let (bx1, by1, bx2, by2) = (b.x1(), b.y1(), b.x2(), b.y2());
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    let has_inter = iw > 0.0 && ih > 0.0;
    let inter = if has_inter { iw * ih } else { 0.0 };
    let union = a.area() + b.area() - inter;
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let hull = cw * ch;

    // Corner derivatives of the intersection.
    let di = if has_inter {
        [
            if ax1 >= bx1 { -ih } else { 0.0 },
            if ay1 >= by1 { -iw } else { 0.0 },
            if ax2 <= bx2 { ih } else { 0.0 },
            if ay2 <= by2 { iw } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };
    // Corner derivatives of a's own area.
    let da = [-a.h, -a.w, a.h, a.w];
    // Corner derivatives of the hull area.
    let dc = [
        if ax1 <= bx1 { -ch } else { 0.0 },
        if ay1 <= by1 { -cw } else { 0.0 },
        if ax2 >= bx2 { ch } else { 0.0 },
        if ay2 >= by2 { cw } else { 0.0 },
    ];

    // g = I/U + U/C - 1
    let mut corner = [0.0f64; 4];
    for k in 0..4 {
        let du = da[k] - di[k];
        corner[k] = di[k] / union - inter * du / (union * union) + du / hull
            - union * dc[k] / (hull * hull);
    }
    // Chain corners -> (cx, cy, w, h).
    [
        corner[0] + corner[2],
        corner[1] + corner[3],
        0.5 * (corner[2] - corner[0]),
        0.5 * (corner[3] - corner[1]),
    ]
}

/// GIoU with gradients for both boxes, each as d/d(cx, cy, w, h).
pub fn giou_grad(a: &BoxPx, b: &BoxPx) -> Result<(f64, [f64; 4], [f64; 4])> {
    let value = giou(a, b)?;
    Ok((value, giou_grad_first(a, b), giou_grad_first(b, a)))
}

/// Localization loss `1 - mean(GIoU)` over paired boxes; 0 when empty.
pub fn loss_giou(preds: &[BoxPx], gts: &[BoxPx]) -> Result<f64> {
    Ok(loss_giou_grad(preds, gts)?.0)
}

/// Localization loss with gradients with respect to each predicted box.
pub fn loss_giou_grad(preds: &[BoxPx], gts: &[BoxPx]) -> Result<(f64, Vec<[f64; 4]>)> {
    if preds.len() != gts.len() {
        return Err(Error::contract(format!(
            "paired lists required ({} predictions vs {} ground truths)",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = preds.len() as f64;
    let mut sum = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts.iter()) {
        let (v, dp, _) = giou_grad(p, g)?;
        sum += v;
        grads.push(dp.map(|d| -d / n));
    }
    Ok((1.0 - sum / n, grads))
}

// ---------------------------------------------------------------------------
// Focal confidence loss

/// Numerically stable sigmoid cross-entropy from the logit.
fn bce_with_logit(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

/// Focal-weighted term and its d/dlogit for one cell.
fn focal_term(z: f64, is_obj: bool, cfg: &LossConfig) -> (f64, f64) {
    let target = if is_obj { 1.0 } else { 0.0 };
    let weight = if is_obj {
        cfg.lambda_obj * cfg.alpha
    } else {
        cfg.lambda_noobj * (1.0 - cfg.alpha)
    };
    let c = sigmoid_scalar(z);
    let m = (target - c).abs();
    let bce = bce_with_logit(z, target);
    let value = weight * m.powf(cfg.gamma) * bce;
    let dmod = if m == 0.0 || cfg.gamma == 0.0 {
        0.0
    } else {
        cfg.gamma * m.powf(cfg.gamma - 1.0) * (c - target).signum() * bce * c * (1.0 - c)
    };
    let dbce = m.powf(cfg.gamma) * (c - target);
    (value, weight * (dmod + dbce))
}

/// Focal confidence loss over one scale's confidence logits `[B, S, S]`,
/// with the responsibility mask selecting object cells.
pub fn loss_conf(conf_logits: &Array3<f64>, obj: &Array3<u8>, cfg: &LossConfig) -> Result<f64> {
    Ok(loss_conf_grad(conf_logits, obj, cfg)?.0)
}

/// Focal confidence loss plus its gradient with respect to the logits.
pub fn loss_conf_grad(
    conf_logits: &Array3<f64>,
    obj: &Array3<u8>,
    cfg: &LossConfig,
) -> Result<(f64, Array3<f64>)> {
    if conf_logits.dim() != obj.dim() {
        return Err(Error::shape(format!(
            "confidence logits {:?} vs mask {:?}",
            conf_logits.dim(),
            obj.dim()
        )));
    }
    cfg.validate()?;
    let mut total = 0.0;
    let mut grad = Array3::zeros(conf_logits.dim());
    for (idx, &z) in conf_logits.indexed_iter() {
        let (v, d) = focal_term(z, obj[idx] != 0, cfg);
        total += v;
        grad[idx] = d;
    }
    Ok((total, grad))
}

// ---------------------------------------------------------------------------
// Category probability loss

/// Softmax cross-entropy summed over object cells. `logits` holds the class
/// logits of each responsible cell, `classes` the target indices.
pub fn loss_prob(logits: &[[f64; NUM_CLASSES]], classes: &[usize]) -> Result<f64> {
    Ok(loss_prob_grad(logits, classes)?.0)
}

/// Category loss plus d/dlogits per responsible cell.
pub fn loss_prob_grad(
    logits: &[[f64; NUM_CLASSES]],
    classes: &[usize],
) -> Result<(f64, Vec<[f64; NUM_CLASSES]>)> {
    if logits.len() != classes.len() {
        return Err(Error::shape(format!(
            "{} logit rows vs {} class targets",
            logits.len(),
            classes.len()
        )));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (row, &class) in logits.iter().zip(classes.iter()) {
        if class >= NUM_CLASSES {
            return Err(Error::contract(format!("class index {class} out of range")));
        }
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps = row.map(|l| (l - m).exp());
        let sum: f64 = exps.iter().sum();
        total += sum.ln() + m - row[class];
        let mut g = exps.map(|e| e / sum);
        g[class] -= 1.0;
        grads.push(g);
    }
    Ok((total, grads))
}

// ---------------------------------------------------------------------------
// Total loss over the three scales

/// Per-term loss values. `total` applies the lambda weights.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_giou: f64,
    pub l_conf: f64,
    pub l_prob: f64,
    pub total: f64,
    /// Number of responsible (object) cells that contributed.
    pub n_pairs: usize,
}

/// Weighted total loss of one image and its gradient with respect to the raw
/// prediction tensors.
///
/// `giou_norm` is the divisor of the GIoU mean: `None` uses this image's own
/// pair count; the trainer passes the batch-wide pair count so the batch
/// localization term is a mean over all responsible pairs of the batch.
pub fn total_loss(
    raw: &RawPrediction,
    targets: &TargetTensor,
    cfg: &LossConfig,
    giou_norm: Option<f64>,
) -> Result<(LossBreakdown, Vec<Array3<f64>>)> {
    raw.validate()?;
    cfg.validate()?;
    if raw.scales.len() != targets.scales.len() {
        return Err(Error::shape(format!(
            "{} prediction scales vs {} target scales",
            raw.scales.len(),
            targets.scales.len()
        )));
    }
    let n_pairs = targets.num_responsible();
    let giou_div = giou_norm.unwrap_or(n_pairs as f64);

    let mut grads: Vec<Array3<f64>> = raw
        .scales
        .iter()
        .map(|s| Array3::zeros(s.tensor.dim()))
        .collect();
    let mut giou_term = 0.0;
    let mut conf_total = 0.0;
    let mut prob_total = 0.0;

    for (scale_idx, (pred, target)) in raw.scales.iter().zip(targets.scales.iter()).enumerate() {
        let grid = pred.tensor.dim().1;
        if target.grid != grid || target.stride != pred.stride {
            return Err(Error::shape(format!(
                "scale {scale_idx}: prediction {}x{} stride {} vs target {}x{} stride {}",
                grid, grid, pred.stride, target.grid, target.grid, target.stride
            )));
        }

        // Confidence: gather logits, compute, scatter the gradient.
        let mut conf = Array3::zeros((ANCHORS_PER_SCALE, grid, grid));
        for b in 0..ANCHORS_PER_SCALE {
            for i in 0..grid {
                for j in 0..grid {
                    conf[(b, i, j)] = pred.tensor[(field_channel(b, 4), i, j)];
                }
            }
        }
        let (conf_loss, conf_grad) = loss_conf_grad(&conf, &target.obj, cfg)?;
        conf_total += conf_loss;
        for b in 0..ANCHORS_PER_SCALE {
            for i in 0..grid {
                for j in 0..grid {
                    grads[scale_idx][(field_channel(b, 4), i, j)] +=
                        cfg.lambda2 * conf_grad[(b, i, j)];
                }
            }
        }

        // Localization and category terms at the responsible cells.
        let mut class_logits = Vec::with_capacity(target.cells.len());
        let mut class_targets = Vec::with_capacity(target.cells.len());
        for cell in &target.cells {
            let t = [
                pred.tensor[(field_channel(cell.anchor_slot, 0), cell.i, cell.j)],
                pred.tensor[(field_channel(cell.anchor_slot, 1), cell.i, cell.j)],
                pred.tensor[(field_channel(cell.anchor_slot, 2), cell.i, cell.j)],
                pred.tensor[(field_channel(cell.anchor_slot, 3), cell.i, cell.j)],
            ];
            let pred_box = decode_box(t, cell.i, cell.j, pred.stride, &cell.anchor);
            let (g, dbox, _) = giou_grad(&pred_box, &cell.gt_box)?;
            if giou_div > 0.0 {
                giou_term += (1.0 - g) / giou_div;
                // Chain the box gradient through the decode transform.
                let sx = sigmoid_scalar(t[0]);
                let sy = sigmoid_scalar(t[1]);
                let dt = [
                    dbox[0] * pred.stride as f64 * sx * (1.0 - sx),
                    dbox[1] * pred.stride as f64 * sy * (1.0 - sy),
                    dbox[2] * pred_box.w,
                    dbox[3] * pred_box.h,
                ];
                for (f, d) in dt.iter().enumerate() {
                    grads[scale_idx][(field_channel(cell.anchor_slot, f), cell.i, cell.j)] +=
                        cfg.lambda1 * (-d / giou_div);
                }
            }

            class_logits.push([
                pred.tensor[(field_channel(cell.anchor_slot, 5), cell.i, cell.j)],
                pred.tensor[(field_channel(cell.anchor_slot, 6), cell.i, cell.j)],
                pred.tensor[(field_channel(cell.anchor_slot, 7), cell.i, cell.j)],
            ]);
            class_targets.push(cell.class_index);
        }
        let (prob_loss, prob_grads) = loss_prob_grad(&class_logits, &class_targets)?;
        prob_total += prob_loss;
        for (cell, g) in target.cells.iter().zip(prob_grads.iter()) {
            for (c, d) in g.iter().enumerate() {
                grads[scale_idx][(field_channel(cell.anchor_slot, 5 + c), cell.i, cell.j)] +=
                    cfg.lambda3 * d;
            }
        }
    }

    let breakdown = LossBreakdown {
        l_giou: giou_term,
        l_conf: conf_total,
        l_prob: prob_total,
        total: cfg.lambda1 * giou_term + cfg.lambda2 * conf_total + cfg.lambda3 * prob_total,
        n_pairs,
    };
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{encode_box, ScalePrediction, HEAD_CHANNELS};
    use crate::nn::gradcheck::numeric_gradient;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxPx {
        BoxPx::from_corners(x1, y1, x2, y2)
    }

    #[test]
    fn giou_identical_is_one() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert!((giou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn giou_half_overlap_hand_value() {
        // IoU = 1/3, hull = union -> GIoU = 1/3.
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(5.0, 0.0, 15.0, 10.0);
        assert!((giou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn giou_disjoint_hand_value() {
        // IoU = 0, hull 300, union 200 -> GIoU = -1/3.
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(20.0, 0.0, 30.0, 10.0);
        assert!((giou(&a, &b).unwrap() + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn giou_is_symmetric_and_bounded_by_iou() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let a = BoxPx::new(
                rng.gen_range(0.0..50.0),
                rng.gen_range(0.0..50.0),
                rng.gen_range(1.0..30.0),
                rng.gen_range(1.0..30.0),
            );
            let b = BoxPx::new(
                rng.gen_range(0.0..50.0),
                rng.gen_range(0.0..50.0),
                rng.gen_range(1.0..30.0),
                rng.gen_range(1.0..30.0),
            );
            let gab = giou(&a, &b).unwrap();
            let gba = giou(&b, &a).unwrap();
            assert!((gab - gba).abs() < 1e-12);
            assert!(gab <= a.iou(&b) + 1e-12);
            assert!((-1.0..=1.0).contains(&gab));
        }
    }

    #[test]
    fn giou_zero_area_errors() {
        let a = BoxPx::new(0.0, 0.0, 0.0, 5.0);
        let b = bx(0.0, 0.0, 1.0, 1.0);
        assert!(giou(&a, &b).is_err());
    }

    #[test]
    fn giou_matches_pixel_enumeration_oracle() {
        // Integer-grid boxes: areas equal pixel counts, so the enumerated
        // IoU/hull quantities are exact.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let ax1 = rng.gen_range(0..30) as f64;
            let ay1 = rng.gen_range(0..30) as f64;
            let a = bx(
                ax1,
                ay1,
                ax1 + rng.gen_range(1..20) as f64,
                ay1 + rng.gen_range(1..20) as f64,
            );
            let bx1_ = rng.gen_range(0..30) as f64;
            let by1 = rng.gen_range(0..30) as f64;
            let b = bx(
                bx1_,
                by1,
                bx1_ + rng.gen_range(1..20) as f64,
                by1 + rng.gen_range(1..20) as f64,
            );

            let mut inter = 0usize;
            let mut union = 0usize;
            let mut hull = 0usize;
            let hx1 = a.x1().min(b.x1()) as usize;
            let hx2 = a.x2().max(b.x2()) as usize;
            let hy1 = a.y1().min(b.y1()) as usize;
            let hy2 = a.y2().max(b.y2()) as usize;
            let contains = |bb: &BoxPx, px: usize, py: usize| {
                let x = px as f64 + 0.5;
                let y = py as f64 + 0.5;
                x > bb.x1() && x < bb.x2() && y > bb.y1() && y < bb.y2()
            };
            for py in hy1..hy2 {
                for px in hx1..hx2 {
                    let ina = contains(&a, px, py);
                    let inb = contains(&b, px, py);
                    if ina && inb {
                        inter += 1;
                    }
                    if ina || inb {
                        union += 1;
                    }
                    hull += 1;
                }
            }
            let oracle = inter as f64 / union as f64 - (hull - union) as f64 / hull as f64;
            let got = giou(&a, &b).unwrap();
            assert!(
                (got - oracle).abs() < 1e-2,
                "giou {got} vs pixel oracle {oracle}"
            );
        }
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let a = BoxPx::new(
                rng.gen_range(5.0..40.0),
                rng.gen_range(5.0..40.0),
                rng.gen_range(2.0..20.0),
                rng.gen_range(2.0..20.0),
            );
            let b = BoxPx::new(
                rng.gen_range(5.0..40.0),
                rng.gen_range(5.0..40.0),
                rng.gen_range(2.0..20.0),
                rng.gen_range(2.0..20.0),
            );
            let (_, da, db) = giou_grad(&a, &b).unwrap();
            let x =
                ArrayD::from_shape_vec(ndarray::IxDyn(&[4]), vec![a.cx, a.cy, a.w, a.h]).unwrap();
            let num = numeric_gradient(&x, |v| {
                let probe = BoxPx::new(v[[0]], v[[1]], v[[2]], v[[3]]);
                giou(&probe, &b).unwrap()
            });
            for k in 0..4 {
                let err = (da[k] - num[[k]]).abs() / da[k].abs().max(num[[k]].abs()).max(1e-4);
                assert!(err < 1e-6, "d(giou)/da[{k}] {} vs {}", da[k], num[[k]]);
            }
            let xb =
                ArrayD::from_shape_vec(ndarray::IxDyn(&[4]), vec![b.cx, b.cy, b.w, b.h]).unwrap();
            let numb = numeric_gradient(&xb, |v| {
                let probe = BoxPx::new(v[[0]], v[[1]], v[[2]], v[[3]]);
                giou(&a, &probe).unwrap()
            });
            for k in 0..4 {
                let err = (db[k] - numb[[k]]).abs() / db[k].abs().max(numb[[k]].abs()).max(1e-4);
                assert!(err < 1e-6, "d(giou)/db[{k}] {} vs {}", db[k], numb[[k]]);
            }
        }
    }

    #[test]
    fn loss_giou_hand_values() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        // Identical pairs -> 0.
        assert_eq!(loss_giou(&[a], &[a]).unwrap(), 0.0);
        // Single pair with GIoU -1/3 -> 4/3.
        let far = bx(20.0, 0.0, 30.0, 10.0);
        assert!((loss_giou(&[a], &[far]).unwrap() - 4.0 / 3.0).abs() < 1e-12);
        // Single pair with GIoU 1/3 -> 2/3.
        let half = bx(5.0, 0.0, 15.0, 10.0);
        assert!((loss_giou(&[a], &[half]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        // Empty -> 0 by definition.
        assert_eq!(loss_giou(&[], &[]).unwrap(), 0.0);
    }

    #[test]
    fn loss_giou_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let preds: Vec<BoxPx> = (0..4)
            .map(|_| {
                BoxPx::new(
                    rng.gen_range(10.0..50.0),
                    rng.gen_range(10.0..50.0),
                    rng.gen_range(3.0..15.0),
                    rng.gen_range(3.0..15.0),
                )
            })
            .collect();
        let gts: Vec<BoxPx> = preds
            .iter()
            .map(|p| BoxPx::new(p.cx + rng.gen_range(-4.0..4.0), p.cy + 2.0, p.w + 1.0, p.h))
            .collect();
        let (_, grads) = loss_giou_grad(&preds, &gts).unwrap();
        for (idx, g) in grads.iter().enumerate() {
            let x = ArrayD::from_shape_vec(
                ndarray::IxDyn(&[4]),
                vec![preds[idx].cx, preds[idx].cy, preds[idx].w, preds[idx].h],
            )
            .unwrap();
            let num = numeric_gradient(&x, |v| {
                let mut probe = preds.clone();
                probe[idx] = BoxPx::new(v[[0]], v[[1]], v[[2]], v[[3]]);
                loss_giou(&probe, &gts).unwrap()
            });
            for k in 0..4 {
                let err = (g[k] - num[[k]]).abs() / g[k].abs().max(num[[k]].abs()).max(1e-4);
                assert!(err < 1e-6, "pred {idx} coord {k}: {} vs {}", g[k], num[[k]]);
            }
        }
    }

    #[test]
    fn focal_loss_hand_value() {
        // Single object cell with C = 0.5: 1.0 * 0.5 * 0.25 * (-ln 0.5).
        let logits = Array3::from_elem((1, 1, 1), 0.0);
        let obj = Array3::from_elem((1, 1, 1), 1u8);
        let cfg = LossConfig::default();
        let v = loss_conf(&logits, &obj, &cfg).unwrap();
        let expect = 0.5 * 0.25 * (2.0f64).ln();
        assert!((v - expect).abs() < 1e-4, "{v} vs {expect}");
    }

    #[test]
    fn focal_loss_perfect_prediction_vanishes() {
        // Saturated logits on both sides: the modulating factor kills the loss.
        let mut logits = Array3::from_elem((1, 2, 2), -40.0);
        logits[(0, 0, 0)] = 40.0;
        let mut obj = Array3::from_elem((1, 2, 2), 0u8);
        obj[(0, 0, 0)] = 1;
        let v = loss_conf(&logits, &obj, &LossConfig::default()).unwrap();
        assert!(v < 1e-20, "loss {v}");
    }

    #[test]
    fn focal_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits = Array3::from_shape_fn((3, 4, 4), |_| rng.gen_range(-3.0..3.0));
        let obj = Array3::from_shape_fn((3, 4, 4), |_| u8::from(rng.gen_bool(0.2)));
        let cfg = LossConfig::default();
        let (_, grad) = loss_conf_grad(&logits, &obj, &cfg).unwrap();
        let num = numeric_gradient(&logits.clone().into_dyn(), |v| {
            let probe = v.clone().into_dimensionality().unwrap();
            loss_conf(&probe, &obj, &cfg).unwrap()
        });
        let err = crate::nn::gradcheck::max_rel_err(&grad.into_dyn(), &num);
        assert!(err < 1e-6, "focal grad rel err {err}");
    }

    #[test]
    fn loss_conf_shape_mismatch_errors() {
        let logits = Array3::zeros((3, 4, 4));
        let obj = Array3::zeros((3, 2, 2));
        assert!(loss_conf(&logits, &obj, &LossConfig::default()).is_err());
    }

    #[test]
    fn prob_loss_hand_values() {
        // Perfect one-hot prediction: ~0.
        let hot = [[30.0, 0.0, 0.0]];
        assert!(loss_prob(&hot, &[0]).unwrap() < 1e-12);
        // No object cells: 0.
        assert_eq!(loss_prob(&[], &[]).unwrap(), 0.0);
        // Uniform prediction vs one-hot: ln 3.
        let uniform = [[0.0, 0.0, 0.0]];
        assert!((loss_prob(&uniform, &[1]).unwrap() - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn prob_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits: Vec<[f64; 3]> = (0..5)
            .map(|_| {
                [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ]
            })
            .collect();
        let classes: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
        let (_, grads) = loss_prob_grad(&logits, &classes).unwrap();
        let flat: Vec<f64> = logits.iter().flatten().copied().collect();
        let x = ArrayD::from_shape_vec(ndarray::IxDyn(&[15]), flat).unwrap();
        let num = numeric_gradient(&x, |v| {
            let probe: Vec<[f64; 3]> = (0..5)
                .map(|r| [v[[3 * r]], v[[3 * r + 1]], v[[3 * r + 2]]])
                .collect();
            loss_prob(&probe, &classes).unwrap()
        });
        for r in 0..5 {
            for c in 0..3 {
                let a = grads[r][c];
                let n = num[[3 * r + c]];
                assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-4) < 1e-6);
            }
        }
    }

    fn toy_targets(grid: usize, stride: usize) -> TargetTensor {
        let anchor = AnchorPrior { pw: 12.0, ph: 24.0 };
        let gt = BoxPx::new(1.3 * stride as f64, 0.7 * stride as f64, 14.0, 22.0);
        let t = encode_box(&gt, 0, 1, stride, &anchor);
        let mut scale = ScaleTarget::empty(stride, grid);
        scale.obj[(1, 0, 1)] = 1;
        scale.cells.push(ResponsibleCell {
            anchor_slot: 1,
            i: 0,
            j: 1,
            t,
            gt_box: gt,
            class_index: 2,
            anchor,
        });
        TargetTensor {
            scales: vec![
                scale,
                ScaleTarget::empty(stride / 2, grid * 2),
                ScaleTarget::empty(stride / 4, grid * 4),
            ],
        }
    }

    fn toy_raw(grid: usize, rng: &mut ChaCha8Rng) -> RawPrediction {
        RawPrediction {
            scales: vec![
                ScalePrediction {
                    tensor: Array3::from_shape_fn((HEAD_CHANNELS, grid, grid), |_| {
                        rng.gen_range(-1.0..1.0)
                    }),
                    stride: 32,
                },
                ScalePrediction {
                    tensor: Array3::from_shape_fn((HEAD_CHANNELS, grid * 2, grid * 2), |_| {
                        rng.gen_range(-1.0..1.0)
                    }),
                    stride: 16,
                },
                ScalePrediction {
                    tensor: Array3::from_shape_fn((HEAD_CHANNELS, grid * 4, grid * 4), |_| {
                        rng.gen_range(-1.0..1.0)
                    }),
                    stride: 8,
                },
            ],
        }
    }

    #[test]
    fn total_loss_zero_at_perfect_prediction() {
        let targets = toy_targets(2, 32);
        // Build a prediction that exactly reproduces the targets.
        let mut raw = RawPrediction {
            scales: vec![
                ScalePrediction {
                    tensor: Array3::zeros((HEAD_CHANNELS, 2, 2)),
                    stride: 32,
                },
                ScalePrediction {
                    tensor: Array3::zeros((HEAD_CHANNELS, 4, 4)),
                    stride: 16,
                },
                ScalePrediction {
                    tensor: Array3::zeros((HEAD_CHANNELS, 8, 8)),
                    stride: 8,
                },
            ],
        };
        // Saturate all confidences to "no object", then fix the responsible cell.
        for s in raw.scales.iter_mut() {
            let grid = s.tensor.dim().1;
            for b in 0..ANCHORS_PER_SCALE {
                for i in 0..grid {
                    for j in 0..grid {
                        s.tensor[(field_channel(b, 4), i, j)] = -60.0;
                    }
                }
            }
        }
        let cell = targets.scales[0].cells[0].clone();
        for (f, v) in cell.t.iter().enumerate() {
            raw.scales[0].tensor[(field_channel(1, f), cell.i, cell.j)] = *v;
        }
        raw.scales[0].tensor[(field_channel(1, 4), cell.i, cell.j)] = 60.0;
        raw.scales[0].tensor[(field_channel(1, 5 + cell.class_index), cell.i, cell.j)] = 60.0;

        let (breakdown, _) = total_loss(&raw, &targets, &LossConfig::default(), None).unwrap();
        assert!(breakdown.total < 1e-9, "total {breakdown:?}");
    }

    #[test]
    fn total_loss_lambda_scaling_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let targets = toy_targets(2, 32);
        let raw = toy_raw(2, &mut rng);
        let base = LossConfig::default();
        let (b0, _) = total_loss(&raw, &targets, &base, None).unwrap();
        assert!(
            (b0.total - (b0.l_giou + b0.l_conf + b0.l_prob)).abs() < 1e-12,
            "unit lambdas sum the three terms"
        );
        let double_loc = LossConfig {
            lambda1: 2.0,
            ..base
        };
        let (b1, _) = total_loss(&raw, &targets, &double_loc, None).unwrap();
        assert!((b1.l_conf - b0.l_conf).abs() < 1e-12);
        assert!((b1.l_prob - b0.l_prob).abs() < 1e-12);
        assert!((b1.total - (2.0 * b0.l_giou + b0.l_conf + b0.l_prob)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let targets = toy_targets(2, 32);
        let raw = toy_raw(2, &mut rng);
        let cfg = LossConfig::default();
        let (_, grads) = total_loss(&raw, &targets, &cfg, None).unwrap();
        for scale in 0..3 {
            let num = numeric_gradient(&raw.scales[scale].tensor.clone().into_dyn(), |v| {
                let mut probe = raw.clone();
                probe.scales[scale].tensor = v.clone().into_dimensionality().unwrap();
                total_loss(&probe, &targets, &cfg, None).unwrap().0.total
            });
            let err = crate::nn::gradcheck::max_rel_err(&grads[scale].clone().into_dyn(), &num);
            assert!(err < 1e-6, "scale {scale} grad rel err {err}");
        }
    }
}
