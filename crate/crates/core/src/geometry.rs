//! Axis-aligned boxes and the per-cell box parametrization shared by the
//! head decoder, the regression loss and the target encoder.

use serde::{Deserialize, Serialize};

/// Box as (x1, y1, x2, y2) in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Bbox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Bbox { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Bbox::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn longer_side(&self) -> f64 {
        self.width().max(self.height())
    }

    pub fn is_proper(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1 && self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }

    pub fn intersection(&self, other: &Bbox) -> f64 {
        let iw = self.x2.min(other.x2) - self.x1.max(other.x1);
        let ih = self.y2.min(other.y2) - self.y1.max(other.y1);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    pub fn iou(&self, other: &Bbox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> Bbox {
        Bbox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }
}

/// Decodes raw head outputs `(dx, dy, log_w, log_h)` at grid cell
/// `(col, row)`: the center is `(cell + 0.5 + offset) * stride` and the
/// extents are `exp(raw) * stride`.
pub fn decode_cell(raw: [f64; 4], col: usize, row: usize, stride: f64) -> Bbox {
    let cx = (col as f64 + 0.5 + raw[0]) * stride;
    let cy = (row as f64 + 0.5 + raw[1]) * stride;
    let w = raw[2].exp() * stride;
    let h = raw[3].exp() * stride;
    Bbox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Inverse of [`decode_cell`].
pub fn encode_cell(b: &Bbox, col: usize, row: usize, stride: f64) -> [f64; 4] {
    let (cx, cy) = b.center();
    [
        cx / stride - col as f64 - 0.5,
        cy / stride - row as f64 - 0.5,
        (b.width() / stride).ln(),
        (b.height() / stride).ln(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_offset_squares_is_one_seventh() {
        let a = Bbox::new(0.0, 0.0, 2.0, 2.0);
        let b = Bbox::new(1.0, 1.0, 3.0, 3.0);
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&Bbox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
    }

    #[test]
    fn encode_then_decode_recovers_box() {
        let b = Bbox::new(10.25, 3.5, 27.0, 41.75);
        for stride in [4.0, 8.0, 16.0] {
            let raw = encode_cell(&b, 3, 2, stride);
            let d = decode_cell(raw, 3, 2, stride);
            for (u, v) in d.to_array().iter().zip(b.to_array()) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_raw_decodes_to_cell_sized_box_at_cell_center() {
        let d = decode_cell([0.0; 4], 1, 0, 8.0);
        assert_eq!(d, Bbox::new(8.0, 0.0, 16.0, 8.0));
    }
}
