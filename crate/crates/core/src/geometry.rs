//! Box encodings, overlap measures and flips.
//!
//! Two encodings are used throughout: [`BoxN`] is the normalized
//! center-size form predicted by the detector and [`BoxA`] the absolute
//! corner form used by the evaluator and the annotation files.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};

/// Values this far outside `[0, 1]` are clamped rather than rejected.
pub const NORMALIZED_TOLERANCE: f64 = 1e-6;

/// Normalized `(cx, cy, w, h)` box, every component in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxN {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxN {
    /// Clamps components that graze the unit interval; rejects anything further out.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        for (name, v) in [("cx", cx), ("cy", cy), ("w", w), ("h", h)] {
            if !v.is_finite() || !(-NORMALIZED_TOLERANCE..=1.0 + NORMALIZED_TOLERANCE).contains(&v) {
                return Err(invalid_arg!("normalized box {name}={v} outside [0, 1]"));
            }
        }
        Ok(Self::saturating(cx, cy, w, h))
    }

    /// Clamps every component into `[0, 1]` unconditionally.
    pub fn saturating(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            cx: cx.clamp(0.0, 1.0),
            cy: cy.clamp(0.0, 1.0),
            w: w.clamp(0.0, 1.0),
            h: h.clamp(0.0, 1.0),
        }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::saturating(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Corner form in normalized units.
    pub fn corners(self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    /// Mirror about the vertical center line of the image.
    pub fn hflip(self) -> Self {
        Self {
            cx: 1.0 - self.cx,
            ..self
        }
    }
}

/// Absolute `(x1, y1, x2, y2)` box in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxA {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxA {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(invalid_arg!("non-finite box ({x1}, {y1}, {x2}, {y2})"));
        }
        if x1 > x2 || y1 > y2 {
            return Err(invalid_arg!("inverted box ({x1}, {y1}, {x2}, {y2})"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// From COCO `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn width(self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(self) -> f64 {
        self.width() * self.height()
    }

    /// Clips to `[0, width] x [0, height]`.
    pub fn clip(self, width: f64, height: f64) -> Self {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        Self {
            x1,
            y1,
            x2: self.x2.clamp(x1, width),
            y2: self.y2.clamp(y1, height),
        }
    }

    pub fn scale(self, sx: f64, sy: f64) -> Self {
        Self {
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            x2: self.x2 * sx,
            y2: self.y2 * sy,
        }
    }
}

/// One scored, labelled box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoxA,
    pub category: usize,
    pub score: f64,
}

/// Detections for one image.
pub type DetectionSet = Vec<Detection>;

fn check_dims(width: f64, height: f64) -> Result<()> {
    if !(width > 0.0 && height > 0.0) {
        return Err(invalid_arg!("image dimensions must be positive, got {width}x{height}"));
    }
    Ok(())
}

pub fn to_absolute(b: BoxN, width: f64, height: f64) -> Result<BoxA> {
    check_dims(width, height)?;
    Ok(BoxA {
        x1: (b.cx - 0.5 * b.w) * width,
        y1: (b.cy - 0.5 * b.h) * height,
        x2: (b.cx + 0.5 * b.w) * width,
        y2: (b.cy + 0.5 * b.h) * height,
    })
}

pub fn to_normalized(a: BoxA, width: f64, height: f64) -> Result<BoxN> {
    check_dims(width, height)?;
    BoxN::new(
        0.5 * (a.x1 + a.x2) / width,
        0.5 * (a.y1 + a.y2) / height,
        a.width() / width,
        a.height() / height,
    )
}

fn intersection(a: BoxA, b: BoxA) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

fn enclosing_area(a: BoxA, b: BoxA) -> f64 {
    (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1))
}

/// Intersection over union; 0 when the union has zero area.
pub fn iou(a: BoxA, b: BoxA) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU in `(-1, 1]`.
///
/// A zero-area pair scores `iou = 0`, so the result is
/// `-(enclosing - union) / enclosing`; coincident points give 0.
pub fn giou(a: BoxA, b: BoxA) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let enclosing = enclosing_area(a, b);
    if enclosing <= 0.0 {
        return 0.0;
    }
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    iou - (enclosing - union) / enclosing
}

/// GIoU of two normalized boxes (compared in corner form, unit image).
pub fn giou_normalized(a: BoxN, b: BoxN) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    giou(
        BoxA {
            x1: ax1,
            y1: ay1,
            x2: ax2,
            y2: ay2,
        },
        BoxA {
            x1: bx1,
            y1: by1,
            x2: bx2,
            y2: by2,
        },
    )
}

pub fn iou_normalized(a: BoxN, b: BoxN) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    iou(
        BoxA {
            x1: ax1,
            y1: ay1,
            x2: ax2,
            y2: ay2,
        },
        BoxA {
            x1: bx1,
            y1: by1,
            x2: bx2,
            y2: by2,
        },
    )
}

/// Mirrors a box across the vertical axis of an image `width` pixels wide.
pub fn hflip(b: BoxA, width: f64) -> BoxA {
    BoxA {
        x1: width - b.x2,
        y1: b.y1,
        x2: width - b.x1,
        y2: b.y2,
    }
}
