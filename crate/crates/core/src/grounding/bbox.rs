use serde::{Deserialize, Serialize};

/// Normalized box corners, origin top-left. `(0, 0, 0, 0)` marks "no box".
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const NULL: BBox = BBox { x1: 0.0, y1: 0.0, x2: 0.0, y2: 0.0 };

    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_slice(c: &[f64]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn is_null(&self) -> bool {
        *self == Self::NULL
    }

    /// Corners sorted per axis.
    pub fn normalized(&self) -> Self {
        Self::new(self.x1.min(self.x2), self.y1.min(self.y2), self.x1.max(self.x2), self.y1.max(self.y2))
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Plain IoU; 0 when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let (a, b) = (self.normalized(), other.normalized());
        let inter = a.intersection(&b);
        let union = a.area() + b.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// Generalized IoU in `(−1, 1]`. Both boxes are order-normalized first; when the
/// enclosing box has zero area the result falls back to plain IoU.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (a, b) = (a.normalized(), b.normalized());
    let inter = a.intersection(&b);
    let union = a.area() + b.area() - inter;
    let c = BBox::new(a.x1.min(b.x1), a.y1.min(b.y1), a.x2.max(b.x2), a.y2.max(b.y2)).area();
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if c > 0.0 {
        iou - (c - union) / c
    } else {
        iou
    }
}
