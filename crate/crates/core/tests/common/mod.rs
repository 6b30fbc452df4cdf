//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use coae::detector::{iou, BBox};
use coae::eval::ImageResult;
use coae::Tensor;

/// IoU of integer boxes `(x1, y1, x2, y2)` by counting unit cells.
pub fn cell_iou(a: (i32, i32, i32, i32), b: (i32, i32, i32, i32)) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    let hi = a.2.max(a.3).max(b.2).max(b.3);
    for y in 0..hi {
        for x in 0..hi {
            let ina = a.0 <= x && x < a.2 && a.1 <= y && y < a.3;
            let inb = b.0 <= x && x < b.2 && b.1 <= y && y < b.3;
            inter += u32::from(ina && inb);
            union += u32::from(ina || inb);
        }
    }
    f64::from(inter) / f64::from(union)
}

/// Keep a box iff no earlier kept box overlaps it above the threshold.
pub fn nms_oracle(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= thresh) {
            kept.push(i);
        }
    }
    kept
}

/// AP as the mean over gt boxes of the interpolated precision at the rank
/// where each one is recovered.
pub fn ap_oracle(images: &[ImageResult], thresh: f64) -> f64 {
    let n_gt: usize = images.iter().map(|r| r.gt.len()).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut dets: Vec<(f64, usize, BBox)> = Vec::new();
    for (i, r) in images.iter().enumerate() {
        for d in &r.detections {
            dets.push((d.score, i, d.bbox));
        }
    }
    // Stable sort keeps the image-major insertion order on ties.
    dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut taken: Vec<Vec<bool>> = images.iter().map(|r| vec![false; r.gt.len()]).collect();
    let mut hits = Vec::new();
    for (_, img, b) in &dets {
        let gt = &images[*img].gt;
        let mut best: Option<usize> = None;
        for g in 0..gt.len() {
            if best.is_none_or(|k| iou(b, &gt[g]) > iou(b, &gt[k])) {
                best = Some(g);
            }
        }
        let hit = match best {
            Some(g) if iou(b, &gt[g]) > thresh && !taken[*img][g] => {
                taken[*img][g] = true;
                true
            }
            _ => false,
        };
        hits.push(hit);
    }
    let precision_at = |n: usize| hits[..n].iter().filter(|&&h| h).count() as f64 / n as f64;
    let mut total = 0.0;
    for (rank, &h) in hits.iter().enumerate() {
        if h {
            total += (rank + 1..=hits.len())
                .map(precision_at)
                .fold(0.0, f64::max);
        }
    }
    total / n_gt as f64
}

fn hinge(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Unary and pairwise parts of the margin ranking loss, term by term.
pub fn margin_parts(s: &[f64], y: &[u8], m_plus: f64, m_minus: f64) -> (f64, f64) {
    let mut unary = 0.0;
    let mut pairs = 0.0;
    for i in 0..s.len() {
        unary += if y[i] == 1 {
            hinge(m_plus - s[i])
        } else {
            hinge(s[i] - m_minus)
        };
        for j in i + 1..s.len() {
            let gap = (s[i] - s[j]).abs();
            pairs += if y[i] == y[j] {
                hinge(gap - m_minus)
            } else {
                hinge(m_plus - gap)
            };
        }
    }
    (unary, pairs)
}

/// Mean over the cells of an `N×H×W` map whose footprint overlaps `b`.
pub fn roi_gap_oracle(map: &Tensor, b: &BBox, stride: f64) -> Vec<f64> {
    let (n, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let covered: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| {
            let (x, y) = (x as f64 * stride, y as f64 * stride);
            x < b.x2 && x + stride > b.x1 && y < b.y2 && y + stride > b.y1
        })
        .collect();
    assert!(!covered.is_empty());
    (0..n)
        .map(|c| {
            covered
                .iter()
                .map(|&(x, y)| map.at(&[c, y, x]))
                .sum::<f64>()
                / covered.len() as f64
        })
        .collect()
}
