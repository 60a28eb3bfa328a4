//! Axis-aligned box types shared by the detector, loss and metrics layers.

use serde::{Deserialize, Serialize};

/// Ground-truth box in normalized image coordinates (center + extent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl TargetBox {
    /// Corner form in pixels on a square canvas.
    pub fn to_rect(&self, canvas: f64) -> Rect {
        Rect {
            x1: (self.cx - self.w / 2.0) * canvas,
            y1: (self.cy - self.h / 2.0) * canvas,
            x2: (self.cx + self.w / 2.0) * canvas,
            y2: (self.cy + self.h / 2.0) * canvas,
        }
    }
}

/// Predicted box in pixel corner coordinates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Detection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub confidence: f64,
    pub class_id: usize,
}

impl Detection {
    pub fn rect(&self) -> Rect {
        Rect {
            x1: self.x1,
            y1: self.y1,
            x2: self.x2,
            y2: self.y2,
        }
    }
}

/// Plain corner-form rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Rect {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Rect { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

/// Intersection over union; disjoint or degenerate boxes give 0.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - (area(enclosing) - area(union)) / area(enclosing)`.
/// Lies in [-1, 1]; the loss form is `1 - giou`.
pub fn giou(a: &Rect, b: &Rect) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    let ew = a.x2.max(b.x2) - a.x1.min(b.x1);
    let eh = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclosing = ew * eh;
    if enclosing <= 0.0 {
        return iou;
    }
    iou - (enclosing - union) / enclosing
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_is_one() {
        let a = Rect::new(1.0, 2.0, 5.0, 6.0);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_overlap_fixture() {
        let a = Rect::new(0.0, 0.0, 2.0, 2.0);
        let b = Rect::new(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = Rect::new(0.0, 0.0, 1.0, 1.0);
        let b = Rect::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn giou_identical_is_one() {
        let a = Rect::new(0.0, 0.0, 3.0, 4.0);
        assert_eq!(giou(&a, &a), 1.0);
    }

    #[test]
    fn giou_disjoint_fixture() {
        // unit boxes at opposite corners of a 3x3 enclosure
        let a = Rect::new(0.0, 0.0, 1.0, 1.0);
        let b = Rect::new(2.0, 2.0, 3.0, 3.0);
        assert!((giou(&a, &b) - (-7.0 / 9.0)).abs() < 1e-12);
    }

    #[test]
    fn giou_nested_equals_iou() {
        // b inside a with half the area: enclosing == union == area(a)
        let a = Rect::new(0.0, 0.0, 2.0, 2.0);
        let b = Rect::new(0.0, 0.0, 2.0, 1.0);
        assert_eq!(giou(&a, &b), iou(&a, &b));
        assert_eq!(giou(&a, &b), 0.5);
    }

    #[test]
    fn giou_zero_area_box() {
        let a = Rect::new(1.0, 1.0, 1.0, 1.0);
        let b = Rect::new(0.0, 0.0, 2.0, 2.0);
        let g = giou(&a, &b);
        // IoU term 0, enclosing is b: union = 4, enclosing = 4
        assert_eq!(g, 0.0);
    }
}
