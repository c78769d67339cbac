use serde::{Deserialize, Serialize};

use crate::imaging::Rect;

/// Axis-aligned box in continuous pixel coordinates, stored as center + size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxF {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxF {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection(&self, other: &BoxF) -> f64 {
        let iw = self.x1().min(other.x1()) - self.x0().max(other.x0());
        let ih = self.y1().min(other.y1()) - self.y0().max(other.y0());
        iw.max(0.0) * ih.max(0.0)
    }

    pub fn iou(&self, other: &BoxF) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0() && x <= self.x1() && y >= self.y0() && y <= self.y1()
    }

    /// Whether `other` lies inside `self` (with a small tolerance).
    pub fn contains_box(&self, other: &BoxF) -> bool {
        const EPS: f64 = 1e-9;
        other.x0() >= self.x0() - EPS
            && other.y0() >= self.y0() - EPS
            && other.x1() <= self.x1() + EPS
            && other.y1() <= self.y1() + EPS
    }

    pub fn center_distance(&self, x: f64, y: f64) -> f64 {
        (self.cx - x).hypot(self.cy - y)
    }

    /// Intersect with the frame `[0,width] x [0,height]`, then grow any side
    /// shorter than `min_side` back to `min_side` while staying inside.
    pub fn clipped(&self, width: f64, height: f64, min_side: f64) -> BoxF {
        let (x0, x1) = clip_interval(self.x0(), self.x1(), width, min_side);
        let (y0, y1) = clip_interval(self.y0(), self.y1(), height, min_side);
        BoxF::from_corners(x0, y0, x1, y1)
    }

    /// Pixels whose centers fall inside the box: pixel `x` is covered iff
    /// `x0 <= x + 0.5 < x1`. Clamped to the frame.
    pub fn pixel_rect(&self, width: usize, height: usize) -> Rect {
        let lo = |v: f64, n: usize| ((v - 0.5).ceil().max(0.0) as usize).min(n);
        Rect::new(
            lo(self.x0(), width),
            lo(self.y0(), height),
            lo(self.x1(), width),
            lo(self.y1(), height),
        )
    }
}

fn clip_interval(lo: f64, hi: f64, limit: f64, min_len: f64) -> (f64, f64) {
    let min_len = min_len.min(limit);
    let (mut lo, mut hi) = (lo.max(0.0), hi.min(limit));
    if hi - lo < min_len {
        let mid = (0.5 * (lo + hi)).clamp(0.5 * min_len, limit - 0.5 * min_len);
        lo = mid - 0.5 * min_len;
        hi = mid + 0.5 * min_len;
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_basics() {
        let a = BoxF::new(5.0, 5.0, 10.0, 10.0);
        assert_eq!(a.iou(&a), 1.0);
        let b = BoxF::new(10.0, 5.0, 10.0, 10.0);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
        let c = BoxF::new(50.0, 50.0, 2.0, 2.0);
        assert_eq!(a.iou(&c), 0.0);
    }

    #[test]
    fn clipping_keeps_min_side_inside_frame() {
        let b = BoxF::new(0.5, 10.0, 5.0, 4.0).clipped(64.0, 64.0, 4.0);
        assert!(b.x0() >= 0.0 && b.w >= 4.0 - 1e-12);
        let b = BoxF::new(63.9, 63.9, 100.0, 100.0).clipped(64.0, 64.0, 4.0);
        assert!(b.x1() <= 64.0 && b.y1() <= 64.0);
    }

    #[test]
    fn pixel_rect_uses_centers() {
        let b = BoxF::from_corners(0.5, 1.0, 3.4, 3.6);
        // centers 0.5, 1.5, 2.5 are inside [0.5, 3.4); 3.5 is not
        assert_eq!(b.pixel_rect(10, 10), Rect::new(0, 1, 3, 4));
    }
}
