//! Axis-aligned pixel-space boxes shared by rasterization, synthesis, losses,
//! and evaluation.

use serde::{Deserialize, Serialize};

/// A 2D box in pixel coordinates, stored center + size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPx {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxPx {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxPx { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxPx {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn x1(&self) -> f64 {
        self.cx - 0.5 * self.w
    }
    pub fn y1(&self) -> f64 {
        self.cy - 0.5 * self.h
    }
    pub fn x2(&self) -> f64 {
        self.cx + 0.5 * self.w
    }
    pub fn y2(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection_area(&self, other: &BoxPx) -> f64 {
        let iw = (self.x2().min(other.x2()) - self.x1().max(other.x1())).max(0.0);
        let ih = (self.y2().min(other.y2()) - self.y1().max(other.y1())).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BoxPx) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// True if the two boxes share any interior area.
    pub fn overlaps(&self, other: &BoxPx) -> bool {
        self.intersection_area(other) > 0.0
    }

    /// Grow the box by `margin` pixels on every side.
    pub fn inflated(&self, margin: f64) -> BoxPx {
        BoxPx {
            cx: self.cx,
            cy: self.cy,
            w: self.w + 2.0 * margin,
            h: self.h + 2.0 * margin,
        }
    }
}
