// SPDX-License-Identifier: Apache-2.0

//! Axis-aligned boxes in normalized center form and the overlap measures used
//! by matching, assembly and evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Box in normalized `(cx, cy, w, h)` form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 4]", into = "[f32; 4]")]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

/// Box in `(x1, y1, x2, y2)` corner form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corners {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl From<[f32; 4]> for BBox {
    fn from(a: [f32; 4]) -> Self {
        BBox { cx: a[0], cy: a[1], w: a[2], h: a[3] }
    }
}

impl From<BBox> for [f32; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_array(self) -> [f32; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn to_corners(self) -> Corners {
        Corners {
            x1: self.cx - 0.5 * self.w,
            y1: self.cy - 0.5 * self.h,
            x2: self.cx + 0.5 * self.w,
            y2: self.cy + 0.5 * self.h,
        }
    }

    pub fn from_corners(c: Corners) -> Result<Self> {
        c.validate()?;
        Ok(Self { cx: 0.5 * (c.x1 + c.x2), cy: 0.5 * (c.y1 + c.y2), w: c.x2 - c.x1, h: c.y2 - c.y1 })
    }

    pub fn area(self) -> f64 {
        self.w as f64 * self.h as f64
    }

    pub fn center(self) -> (f32, f32) {
        (self.cx, self.cy)
    }

    /// Range checks of the normalized form. Degenerate extents are allowed.
    pub fn is_valid(self) -> bool {
        let unit = |v: f32| (0.0..=1.0).contains(&v);
        unit(self.cx) && unit(self.cy) && unit(self.w) && unit(self.h)
    }
}

impl Corners {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn validate(self) -> Result<()> {
        if self.x1 > self.x2 || self.y1 > self.y2 || !(self.x1.is_finite() && self.y1.is_finite()) {
            return Err(CoreError::InvertedCorners { x1: self.x1, y1: self.y1, x2: self.x2, y2: self.y2 });
        }
        Ok(())
    }

    fn f64s(self) -> [f64; 4] {
        [self.x1 as f64, self.y1 as f64, self.x2 as f64, self.y2 as f64]
    }
}

struct Overlap {
    inter: f64,
    union: f64,
    enclosing: f64,
}

fn overlap(a: BBox, b: BBox) -> Overlap {
    let [ax1, ay1, ax2, ay2] = a.to_corners().f64s();
    let [bx1, by1, bx2, by2] = b.to_corners().f64s();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    let enclosing = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    Overlap { inter, union, enclosing }
}

pub fn iou(a: BBox, b: BBox) -> Result<f64> {
    let o = overlap(a, b);
    if o.union <= 0.0 {
        return Err(CoreError::ZeroAreaUnion);
    }
    Ok((o.inter / o.union).clamp(0.0, 1.0))
}

/// Generalized IoU. Degenerate inputs are fine as long as the enclosing box
/// has positive area.
pub fn giou(a: BBox, b: BBox) -> Result<f64> {
    let o = overlap(a, b);
    if o.enclosing <= 0.0 {
        return Err(CoreError::ZeroAreaEnclosing);
    }
    let iou = if o.union > 0.0 { o.inter / o.union } else { 0.0 };
    Ok(iou - (o.enclosing - o.union) / o.enclosing)
}

/// Box spanned by the two centers as opposite corners.
pub fn predicate_box_of(s: BBox, o: BBox) -> BBox {
    let c = Corners::new(s.cx.min(o.cx), s.cy.min(o.cy), s.cx.max(o.cx), s.cy.max(o.cy));
    BBox { cx: 0.5 * (c.x1 + c.x2), cy: 0.5 * (c.y1 + c.y2), w: c.x2 - c.x1, h: c.y2 - c.y1 }
}
