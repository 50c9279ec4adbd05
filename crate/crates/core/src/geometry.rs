//! Axis-aligned box arithmetic.
//!
//! Boxes are stored in corner form `(x_min, y_min, x_max, y_max)`. Proposals
//! are usually described as `[x, y, w, h]` with `(x, y)` the box center; use
//! [`BBox::from_center`] / [`BBox::center_form`] to move between the two, and
//! [`BBox::from_xywh`] / [`BBox::xywh`] for the top-left convention used by
//! annotation files.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Checked constructor: coordinates must be finite and ordered.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if !b.is_valid() {
            return Err(Error::InvalidBox(format!(
                "({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(b)
    }

    /// Box from center coordinates and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x_min: cx - 0.5 * w,
            y_min: cy - 0.5 * h,
            x_max: cx + 0.5 * w,
            y_max: cy + 0.5 * h,
        }
    }

    /// Box from a top-left corner and size.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox {
            x_min: x,
            y_min: y,
            x_max: x + w,
            y_max: y + h,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min <= self.x_max
            && self.y_min <= self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// `[cx, cy, w, h]`.
    pub fn center_form(&self) -> [f64; 4] {
        let (cx, cy) = self.center();
        [cx, cy, self.width(), self.height()]
    }

    /// `[x_min, y_min, w, h]`.
    pub fn xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px > self.x_min && px < self.x_max && py > self.y_min && py < self.y_max
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    /// Clip to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        BBox {
            x_min: cx(self.x_min),
            y_min: cy(self.y_min),
            x_max: cx(self.x_max),
            y_max: cy(self.y_max),
        }
    }

    pub fn scale(&self, factor: f64) -> BBox {
        BBox {
            x_min: self.x_min * factor,
            y_min: self.y_min * factor,
            x_max: self.x_max * factor,
            y_max: self.y_max * factor,
        }
    }
}

/// Intersection over union. Zero for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// FCOS centerness of the point `(px, py)` with respect to `gt`.
///
/// Points on the boundary or outside the box, and degenerate boxes, give 0.
pub fn centerness(px: f64, py: f64, gt: &BBox) -> f64 {
    if gt.area() <= 0.0 || !gt.contains_point(px, py) {
        return 0.0;
    }
    let l = px - gt.x_min;
    let r = gt.x_max - px;
    let t = py - gt.y_min;
    let b = gt.y_max - py;
    let ratio = (l.min(r) / l.max(r)) * (t.min(b) / t.max(b));
    ratio.sqrt().clamp(0.0, 1.0)
}

/// Regression offsets in the center / log-scale parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDeltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDeltas {
    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        BoxDeltas { dx, dy, dw, dh }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxDeltas::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

fn check_anchor(anchor: &BBox) -> Result<()> {
    let (w, h) = (anchor.width(), anchor.height());
    if !(w > 0.0 && h > 0.0) || !anchor.is_valid() {
        return Err(Error::InvalidAnchor {
            width: w,
            height: h,
        });
    }
    Ok(())
}

/// Offsets that move `anchor` onto `target`.
pub fn encode_deltas(anchor: &BBox, target: &BBox) -> Result<BoxDeltas> {
    check_anchor(anchor)?;
    let [ax, ay, aw, ah] = anchor.center_form();
    let [tx, ty, tw, th] = target.center_form();
    if !(tw > 0.0 && th > 0.0) {
        return Err(Error::InvalidBox(format!(
            "regression target must have positive area, got {target:?}"
        )));
    }
    Ok(BoxDeltas {
        dx: (tx - ax) / aw,
        dy: (ty - ay) / ah,
        dw: (tw / aw).ln(),
        dh: (th / ah).ln(),
    })
}

/// Inverse of [`encode_deltas`].
pub fn decode_deltas(anchor: &BBox, d: &BoxDeltas) -> Result<BBox> {
    check_anchor(anchor)?;
    let [ax, ay, aw, ah] = anchor.center_form();
    Ok(BBox::from_center(
        ax + d.dx * aw,
        ay + d.dy * ah,
        aw * d.dw.exp(),
        ah * d.dh.exp(),
    ))
}
