//! Anchor box priors: shipped defaults and k-means (IoU distance) estimation
//! from training boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ANCHORS_PER_SCALE;
use crate::boxes::BoxPx;
use crate::error::{Error, Result};

/// Width/height prior in input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorPrior {
    pub pw: f64,
    pub ph: f64,
}

impl AnchorPrior {
    pub fn area(&self) -> f64 {
        self.pw * self.ph
    }
}

/// Nine priors sorted ascending by area; the coarsest scale takes the three
/// largest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub priors: [AnchorPrior; 9],
}

impl AnchorSet {
    pub fn new(mut priors: [AnchorPrior; 9]) -> Result<Self> {
        if priors.iter().any(|a| !(a.pw > 0.0 && a.ph > 0.0)) {
            return Err(Error::contract("anchor priors must be positive"));
        }
        priors.sort_by(|a, b| a.area().total_cmp(&b.area()));
        Ok(AnchorSet { priors })
    }

    /// Anchors for a scale index (0 = coarsest): the coarse scale gets the
    /// largest priors.
    pub fn for_scale(&self, scale: usize) -> [AnchorPrior; ANCHORS_PER_SCALE] {
        debug_assert!(scale < 3);
        let start = (2 - scale) * ANCHORS_PER_SCALE;
        [
            self.priors[start],
            self.priors[start + 1],
            self.priors[start + 2],
        ]
    }

    /// Fallback priors (in pixels) for a given input size, covering the
    /// tall-narrow shapes of traffic signals.
    pub fn default_for(input_size: usize) -> Self {
        let s = input_size as f64 / 224.0;
        let base = [
            (6.0, 12.0),
            (9.0, 18.0),
            (12.0, 24.0),
            (16.0, 32.0),
            (22.0, 44.0),
            (30.0, 60.0),
            (40.0, 80.0),
            (54.0, 108.0),
            (72.0, 144.0),
        ];
        AnchorSet::new(base.map(|(w, h)| AnchorPrior { pw: w * s, ph: h * s })).unwrap()
    }
}

/// IoU of two centered shapes.
fn shape_iou(w1: f64, h1: f64, w2: f64, h2: f64) -> f64 {
    let inter = w1.min(w2) * h1.min(h2);
    inter / (w1 * h1 + w2 * h2 - inter)
}

/// Estimate 9 priors by k-means with 1 - IoU distance over the training box
/// shapes. Falls back to the defaults when there are fewer boxes than
/// clusters.
pub fn kmeans_anchors(boxes: &[BoxPx], input_size: usize, seed: u64) -> AnchorSet {
    let shapes: Vec<(f64, f64)> = boxes
        .iter()
        .filter(|b| b.w > 0.0 && b.h > 0.0)
        .map(|b| (b.w, b.h))
        .collect();
    if shapes.len() < 9 {
        return AnchorSet::default_for(input_size);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ style init on the IoU distance.
    let mut centers: Vec<(f64, f64)> = vec![shapes[rng.gen_range(0..shapes.len())]];
    while centers.len() < 9 {
        let dists: Vec<f64> = shapes
            .iter()
            .map(|&(w, h)| {
                centers
                    .iter()
                    .map(|&(cw, ch)| 1.0 - shape_iou(w, h, cw, ch))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = dists.iter().sum();
        if total <= 0.0 {
            centers.push(shapes[rng.gen_range(0..shapes.len())]);
            continue;
        }
        let mut pick = rng.gen_range(0.0..total);
        let mut chosen = shapes.len() - 1;
        for (i, d) in dists.iter().enumerate() {
            if pick < *d {
                chosen = i;
                break;
            }
            pick -= d;
        }
        centers.push(shapes[chosen]);
    }

    for _ in 0..100 {
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); 9];
        for &(w, h) in &shapes {
            let best = (0..9)
                .max_by(|&a, &b| {
                    shape_iou(w, h, centers[a].0, centers[a].1)
                        .total_cmp(&shape_iou(w, h, centers[b].0, centers[b].1))
                })
                .unwrap();
            sums[best].0 += w;
            sums[best].1 += h;
            sums[best].2 += 1;
        }
        let mut moved = 0.0f64;
        for (i, (sw, sh, n)) in sums.iter().enumerate() {
            if *n == 0 {
                centers[i] = shapes[rng.gen_range(0..shapes.len())];
                moved += 1.0;
                continue;
            }
            let new = (sw / *n as f64, sh / *n as f64);
            moved += (new.0 - centers[i].0).abs() + (new.1 - centers[i].1).abs();
            centers[i] = new;
        }
        if moved < 1e-9 {
            break;
        }
    }

    AnchorSet::new(
        <[(f64, f64); 9]>::try_from(centers)
            .unwrap()
            .map(|(w, h)| AnchorPrior { pw: w, ph: h }),
    )
    .unwrap()
}
