//! Axis-aligned boxes in normalized centre/size form.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

/// Normalized `(cx, cy, w, h)`, all in image fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const FULL: BBox = BBox {
        cx: 0.5,
        cy: 0.5,
        w: 1.0,
        h: 1.0,
    };

    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_xyxy(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn xyxy(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let [a0, a1, a2, a3] = self.xyxy();
        let [b0, b1, b2, b3] = other.xyxy();
        let iw = (a2.min(b2) - a0.max(b0)).max(0.0);
        let ih = (a3.min(b3) - a1.max(b1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).min(1.0)
        }
    }

    /// Largest per-edge distance to `other`, in pixels of an `h x w` image.
    pub fn max_edge_error_px(&self, other: &BBox, h: usize, w: usize) -> f64 {
        let a = self.xyxy();
        let b = other.xyxy();
        let scale = [w as f64, h as f64, w as f64, h as f64];
        (0..4)
            .map(|i| ((a[i] - b[i]) * scale[i]).abs())
            .fold(0.0, f64::max)
    }
}

/// Tight box around the pixels of `mask` that satisfy `on`, or `None` when
/// no pixel does. Pixel `(i, j)` covers `[j, j+1) x [i, i+1)`.
pub fn tight_box<A: Copy>(mask: ArrayView2<A>, on: impl Fn(A) -> bool) -> Option<BBox> {
    let (h, w) = mask.dim();
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for ((i, j), &v) in mask.indexed_iter() {
        if on(v) {
            x0 = x0.min(j);
            y0 = y0.min(i);
            x1 = x1.max(j + 1);
            y1 = y1.max(i + 1);
        }
    }
    (x0 != usize::MAX).then(|| {
        BBox::from_xyxy(
            x0 as f64 / w as f64,
            y0 as f64 / h as f64,
            x1 as f64 / w as f64,
            y1 as f64 / h as f64,
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn iou_of_identical_and_disjoint_boxes() {
        let a = BBox::new(0.3, 0.3, 0.2, 0.2);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(0.8, 0.8, 0.2, 0.2)), 0.0);
        // half overlap along x: inter 0.02, union 0.06
        let b = BBox::new(0.4, 0.3, 0.2, 0.2);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn tight_box_of_block() {
        let mut m = Array2::<u8>::zeros((64, 64));
        m.slice_mut(ndarray::s![16..32, 32..64]).fill(1);
        let b = tight_box(m.view(), |v| v > 0).unwrap();
        assert_eq!(b.xyxy(), [0.5, 0.25, 1.0, 0.5]);
        assert!(tight_box(Array2::<u8>::zeros((4, 4)).view(), |v| v > 0).is_none());
    }
}
