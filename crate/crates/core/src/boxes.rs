//! Axis-aligned boxes in corner form.

/// `(x1, y1)` top-left, `(x2, y2)` bottom-right, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCorners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxCorners {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxCorners { x1, y1, x2, y2 }
    }

    /// Box spanned by `(l, t, r, b)` distances from `(cx, cy)`, each scaled by `stride`.
    pub fn from_ltrb(cx: f64, cy: f64, ltrb: [f64; 4], stride: f64) -> Self {
        BoxCorners {
            x1: cx - ltrb[0] * stride,
            y1: cy - ltrb[1] * stride,
            x2: cx + ltrb[2] * stride,
            y2: cy + ltrb[3] * stride,
        }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_well_ordered(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1
    }

    /// Strict interior test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }

    pub fn intersection(&self, o: &BoxCorners) -> f64 {
        let w = (self.x2.min(o.x2) - self.x1.max(o.x1)).max(0.0);
        let h = (self.y2.min(o.y2) - self.y1.max(o.y1)).max(0.0);
        w * h
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, o: &BoxCorners) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// IoU minus the fraction of the enclosing hull not covered by the union.
    pub fn giou(&self, o: &BoxCorners) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        let hull = (self.x2.max(o.x2) - self.x1.min(o.x1)) * (self.y2.max(o.y2) - self.y1.min(o.y1));
        if hull <= 0.0 {
            return 0.0;
        }
        let iou = if union > 0.0 { inter / union } else { 0.0 };
        iou - (hull - union) / hull
    }
}
