//! Axis-aligned boxes, overlap and the anchor-relative delta encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box in pixel coordinates, `(x_min, y_min, x_max, y_max)`.
///
/// Serialized as a 4-element array to match the manifest format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// From COCO's `(x, y, width, height)` convention.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    /// Zero for inverted or degenerate boxes.
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Strictly positive extent in both axes and non-negative coordinates.
    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max
            && self.y_min < self.y_max
            && self.x_min >= 0.0
            && self.y_min >= 0.0
            && [self.x_min, self.y_min, self.x_max, self.y_max]
                .iter()
                .all(|v| v.is_finite())
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        w.max(0.0) * h.max(0.0)
    }
}

/// Intersection over union. Degenerate (zero-area) boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let area_a = a.area();
    let area_b = b.area();
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let inter = a.intersection_area(b);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Huber-style loss: quadratic inside `|d| < beta`, linear outside.
pub fn smooth_l1(pred: f64, target: f64, beta: f64) -> f64 {
    let d = (pred - target).abs();
    if d < beta {
        0.5 * d * d / beta
    } else {
        d - 0.5 * beta
    }
}

/// Center/log-size offsets of a target box relative to a reference box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }
}

/// Largest log-scale change accepted when decoding, `ln(1000 / 16)`.
pub const DELTA_LOG_CLAMP: f64 = 4.135_166_556_742_356;

pub fn encode_delta(anchor: &BBox, target: &BBox) -> Result<BoxDelta> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if !(aw > 0.0 && ah > 0.0) {
        return Err(Error::config(format!(
            "cannot encode against degenerate reference box {anchor:?}"
        )));
    }
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    Ok(BoxDelta {
        dx: (tcx - acx) / aw,
        dy: (tcy - acy) / ah,
        dw: (target.width() / aw).ln(),
        dh: (target.height() / ah).ln(),
    })
}

pub fn decode_delta(anchor: &BBox, delta: &BoxDelta) -> BBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    let cx = acx + delta.dx * aw;
    let cy = acy + delta.dy * ah;
    let w = aw * delta.dw.min(DELTA_LOG_CLAMP).exp();
    let h = ah * delta.dh.min(DELTA_LOG_CLAMP).exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Delta encoding with fixed per-coordinate normalization, used for every
/// regression target the detector trains on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCoder {
    pub std: [f64; 4],
}

impl Default for BoxCoder {
    fn default() -> Self {
        Self {
            std: [0.1, 0.1, 0.2, 0.2],
        }
    }
}

impl BoxCoder {
    pub fn encode(&self, anchor: &BBox, target: &BBox) -> Result<[f64; 4]> {
        let d = encode_delta(anchor, target)?.to_array();
        Ok([
            d[0] / self.std[0],
            d[1] / self.std[1],
            d[2] / self.std[2],
            d[3] / self.std[3],
        ])
    }

    pub fn decode(&self, anchor: &BBox, normalized: [f64; 4]) -> BBox {
        let d = BoxDelta::from_array([
            normalized[0] * self.std[0],
            normalized[1] * self.std[1],
            normalized[2] * self.std[2],
            normalized[3] * self.std[3],
        ]);
        decode_delta(anchor, &d)
    }
}
