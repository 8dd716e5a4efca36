//! Axis-aligned boxes in pixel coordinates.
//!
//! A box is (x0, y0, x1, y1) with x1 >= x0 and y1 >= y0; x runs along image
//! columns, y along rows. These are plain value helpers; the differentiable
//! overlap losses live in [`crate::loss`].

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        PixelBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        PixelBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn intersection_area(&self, other: &PixelBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    /// Intersection over union; 0 when both boxes are empty.
    pub fn iou(&self, other: &PixelBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clamps the box to an image of the given size.
    pub fn clamp_to(&self, w: usize, h: usize) -> PixelBox {
        PixelBox::new(
            self.x0.clamp(0.0, w as f64),
            self.y0.clamp(0.0, h as f64),
            self.x1.clamp(0.0, w as f64),
            self.y1.clamp(0.0, h as f64),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_identical_boxes_is_one() {
        let b = PixelBox::new(1.0, 2.0, 5.0, 8.0);
        assert_eq!(b.iou(&b), 1.0);
    }

    #[test]
    fn iou_of_disjoint_boxes_is_zero() {
        let a = PixelBox::new(0.0, 0.0, 2.0, 2.0);
        let b = PixelBox::new(3.0, 3.0, 5.0, 5.0);
        assert_eq!(a.iou(&b), 0.0);
    }

    #[test]
    fn half_overlap_has_iou_one_third() {
        // Two 2x2 boxes sharing a 1x2 strip: inter 2, union 8 - 2 = 6.
        let a = PixelBox::new(0.0, 0.0, 2.0, 2.0);
        let b = PixelBox::new(1.0, 0.0, 3.0, 2.0);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn center_roundtrip() {
        let b = PixelBox::from_center(4.0, 6.0, 2.0, 3.0);
        assert_eq!(b.center(), (4.0, 6.0));
        assert_eq!((b.width(), b.height()), (2.0, 3.0));
    }
}
