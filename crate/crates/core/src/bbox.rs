use crate::error::{Error, Result};

/// Axis-aligned box, center and size normalized to the frame (`[0, 1]`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// From a top-left pixel box on a square `canvas`.
    pub fn from_pixels(x: f64, y: f64, w: f64, h: f64, canvas: usize) -> Self {
        let c = canvas as f64;
        Self::new((x + w / 2.0) / c, (y + h / 2.0) / c, w / c, h / c)
    }

    /// Top-left pixel box `(x, y, w, h)`.
    pub fn to_pixels(&self, canvas: usize) -> (f64, f64, f64, f64) {
        let c = canvas as f64;
        (
            (self.cx - self.w / 2.0) * c,
            (self.cy - self.h / 2.0) * c,
            self.w * c,
            self.h * c,
        )
    }

    /// `(x1, y1, x2, y2)` in normalized units.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Narrower or shorter than one pixel on `canvas`.
    pub fn is_degenerate(&self, canvas: usize) -> bool {
        let c = canvas as f64;
        !(self.w * c >= 1.0 && self.h * c >= 1.0) || !self.cx.is_finite() || !self.cy.is_finite()
    }

    pub fn check(&self, canvas: usize) -> Result<()> {
        if self.is_degenerate(canvas) {
            return Err(Error::DegenerateBox(format!("{self:?} on a {canvas}px canvas")));
        }
        Ok(())
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Generalized IoU in `[-1, 1]`.
    pub fn giou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let hull = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
        if union <= 0.0 || hull <= 0.0 {
            return 0.0;
        }
        inter / union - (hull - union) / hull
    }

    /// Center distance in pixels on `canvas`.
    pub fn center_error_px(&self, other: &BBox, canvas: usize) -> f64 {
        let c = canvas as f64;
        ((self.cx - other.cx) * c).hypot((self.cy - other.cy) * c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_round_trip() {
        let b = BBox::from_pixels(10.0, 20.0, 30.0, 16.0, 128);
        let (x, y, w, h) = b.to_pixels(128);
        assert!((x - 10.0).abs() < 1e-12 && (y - 20.0).abs() < 1e-12);
        assert!((w - 30.0).abs() < 1e-12 && (h - 16.0).abs() < 1e-12);
    }

    #[test]
    fn identical_boxes_have_unit_iou_and_giou() {
        let b = BBox::new(0.4, 0.6, 0.2, 0.3);
        assert!((b.iou(&b) - 1.0).abs() < 1e-12);
        assert!((b.giou(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn far_disjoint_boxes_approach_minus_one() {
        let a = BBox::new(0.01, 0.01, 0.01, 0.01);
        let b = BBox::new(0.99, 0.99, 0.01, 0.01);
        assert_eq!(a.iou(&b), 0.0);
        assert!(a.giou(&b) < -0.99);
    }

    #[test]
    fn degenerate_under_one_pixel() {
        assert!(BBox::new(0.5, 0.5, 0.5 / 128.0, 0.2).is_degenerate(128));
        assert!(!BBox::new(0.5, 0.5, 1.0 / 128.0, 0.2).is_degenerate(128));
    }
}
