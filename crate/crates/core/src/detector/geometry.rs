//! Axis-aligned boxes in pixel coordinates, overlap, suppression and the
//! center/size delta parameterization.

use crate::error::{Error, Result};

/// Largest log-scale change accepted when decoding, `ln(1000/16)`.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::usage(format!(
                "invalid box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
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

    pub fn intersection(&self, o: &BBox) -> f64 {
        let w = self.x2.min(o.x2) - self.x1.max(o.x1);
        let h = self.y2.min(o.y2) - self.y1.max(o.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clamps to `[0, width] × [0, height]`; `None` if less than `min_side`
    /// remains on either axis.
    pub fn clamp(&self, width: f64, height: f64, min_side: f64) -> Option<BBox> {
        let b = BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        };
        (b.width() >= min_side && b.height() >= min_side).then_some(b)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.x1 <= x && x < self.x2 && self.y1 <= y && y < self.y2
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Indices sorted by descending score; ties keep index order.
pub fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Greedy non-maximum suppression. Visits boxes by descending score and
/// drops every later box whose IoU with a kept one exceeds `thresh`.
/// Returns kept indices in visiting order.
pub fn nms(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let order = order_by_score(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// `(dx, dy, dw, dh)` taking `anchor` to `target`.
pub fn encode(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (tx, ty) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (tx - ax) / aw,
        (ty - ay) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

/// Inverse of [`encode`]; log-scales are capped at [`MAX_LOG_SCALE`].
pub fn decode(anchor: &BBox, d: &[f64; 4]) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = d[0] * aw + ax;
    let cy = d[1] * ah + ay;
    let w = aw * d[2].min(MAX_LOG_SCALE).exp();
    let h = ah * d[3].min(MAX_LOG_SCALE).exp();
    BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    }
}

/// Anchors centered on every feature cell, ordered cell-major
/// (`(y·W + x)·A + a`) with `a = scale_index·|ratios| + ratio_index`.
/// A ratio is height / width; the area stays `scale²`.
pub fn generate_anchors(
    feat_w: usize,
    feat_h: usize,
    stride: f64,
    scales: &[f64],
    ratios: &[f64],
) -> Vec<BBox> {
    let mut out = Vec::with_capacity(feat_w * feat_h * scales.len() * ratios.len());
    for y in 0..feat_h {
        for x in 0..feat_w {
            let cx = (x as f64 + 0.5) * stride;
            let cy = (y as f64 + 0.5) * stride;
            for &s in scales {
                for &r in ratios {
                    let w = s / r.sqrt();
                    let h = s * r.sqrt();
                    out.push(BBox {
                        x1: cx - 0.5 * w,
                        y1: cy - 0.5 * h,
                        x2: cx + 0.5 * w,
                        y2: cy + 0.5 * h,
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &b(5.0, 5.0, 15.0, 15.0)) - 25.0 / 175.0).abs() < 1e-15);
        // Touching edges do not overlap.
        assert_eq!(iou(&a, &b(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 5.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 5.0).is_err());
    }

    #[test]
    fn identical_boxes_collapse_under_nms() {
        let a = b(1.0, 1.0, 9.0, 9.0);
        assert_eq!(nms(&[a, a], &[0.4, 0.9], 0.5), vec![1]);
    }

    #[test]
    fn single_cell_anchor() {
        let a = generate_anchors(1, 1, 8.0, &[16.0], &[1.0]);
        assert_eq!(a, vec![b(-4.0, -4.0, 12.0, 12.0)]);
        assert_eq!(a[0].center(), (4.0, 4.0));
    }

    #[test]
    fn anchor_grid_spacing() {
        let a = generate_anchors(2, 2, 8.0, &[8.0], &[1.0]);
        let centers: Vec<_> = a.iter().map(BBox::center).collect();
        assert_eq!(
            centers,
            vec![(4.0, 4.0), (12.0, 4.0), (4.0, 12.0), (12.0, 12.0)]
        );
    }

    #[test]
    fn ratio_preserves_area() {
        let a = generate_anchors(1, 1, 8.0, &[16.0], &[1.0, 2.0, 0.5]);
        for anc in &a {
            assert!((anc.area() - 256.0).abs() < 1e-9);
        }
        assert!((a[1].height() / a[1].width() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_deltas_decode_to_anchor() {
        let a = b(-3.5, 2.0, 12.25, 30.0);
        assert_eq!(decode(&a, &[0.0; 4]), a);
    }

    #[test]
    fn clamp_respects_bounds() {
        let c = b(-5.0, 3.0, 70.0, 80.0).clamp(64.0, 64.0, 1.0).unwrap();
        assert_eq!(c, b(0.0, 3.0, 64.0, 64.0));
        assert!(b(70.0, 0.0, 80.0, 10.0).clamp(64.0, 64.0, 1.0).is_none());
    }
}
