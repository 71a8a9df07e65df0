//! Box geometry in normalized `cx, cy, w, h` form.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Corners {
    pub fn from_cxcywh(b: [f64; 4]) -> Self {
        Self {
            x0: b[0] - 0.5 * b[2],
            y0: b[1] - 0.5 * b[3],
            x1: b[0] + 0.5 * b[2],
            y1: b[1] + 0.5 * b[3],
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

fn inter_union_enclosing(a: [f64; 4], b: [f64; 4]) -> (f64, f64, f64) {
    let (a, b) = (Corners::from_cxcywh(a), Corners::from_cxcywh(b));
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let cw = a.x1.max(b.x1) - a.x0.min(b.x0);
    let ch = a.y1.max(b.y1) - a.y0.min(b.y0);
    (inter, union, cw.max(0.0) * ch.max(0.0))
}

pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (inter, union, _) = inter_union_enclosing(a, b);
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU in `(-1, 1]`. Zero-area inputs give an IoU term of 0.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (inter, union, enclosing) = inter_union_enclosing(a, b);
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if enclosing > 0.0 {
        iou - (enclosing - union) / enclosing
    } else {
        iou
    }
}

/// Row-wise GIoU between tracked `pred (k×4)` and constant `target (k×4)`;
/// returns a `k×1` column.
///
/// Union and enclosing areas are floored at `floor` before dividing.
pub fn giou_rows<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, floor: T) -> Result<Var> {
    let half = T::lit(0.5);
    let corners = |g: &mut Graph<T>, b: Var| -> Result<[Var; 4]> {
        let cx = g.slice_cols(b, 0, 1)?;
        let cy = g.slice_cols(b, 1, 1)?;
        let w = g.slice_cols(b, 2, 1)?;
        let h = g.slice_cols(b, 3, 1)?;
        let hw = g.scale(w, half);
        let hh = g.scale(h, half);
        Ok([
            g.sub(cx, hw)?,
            g.sub(cy, hh)?,
            g.add(cx, hw)?,
            g.add(cy, hh)?,
        ])
    };
    let [ax0, ay0, ax1, ay1] = corners(g, pred)?;
    let [bx0, by0, bx1, by1] = corners(g, target)?;

    let area = |g: &mut Graph<T>, x0: Var, y0: Var, x1: Var, y1: Var| -> Result<Var> {
        let w = g.sub(x1, x0)?;
        let h = g.sub(y1, y0)?;
        let w = g.relu(w);
        let h = g.relu(h);
        g.mul(w, h)
    };
    let area_a = area(g, ax0, ay0, ax1, ay1)?;
    let area_b = area(g, bx0, by0, bx1, by1)?;

    let ix0 = g.maximum(ax0, bx0)?;
    let iy0 = g.maximum(ay0, by0)?;
    let ix1 = g.minimum(ax1, bx1)?;
    let iy1 = g.minimum(ay1, by1)?;
    let inter = area(g, ix0, iy0, ix1, iy1)?;

    let sum = g.add(area_a, area_b)?;
    let union = g.sub(sum, inter)?;
    let k = g.value(union).rows();
    let floor_t = g.constant(crate::tensor::Tensor::full(&[k, 1], floor));
    let union_safe = g.maximum(union, floor_t)?;
    let iou = g.div(inter, union_safe)?;

    let cx0 = g.minimum(ax0, bx0)?;
    let cy0 = g.minimum(ay0, by0)?;
    let cx1 = g.maximum(ax1, bx1)?;
    let cy1 = g.maximum(ay1, by1)?;
    let enclosing = area(g, cx0, cy0, cx1, cy1)?;
    let enclosing_safe = g.maximum(enclosing, floor_t)?;
    let gap = g.sub(enclosing_safe, union_safe)?;
    let penalty = g.div(gap, enclosing_safe)?;
    g.sub(iou, penalty)
}
