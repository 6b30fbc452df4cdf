use log::warn;

use crate::detector::{iou, order_by_score, BBox, Detection};

/// Detections and gt boxes of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub gt: Vec<BBox>,
}

/// AP of a single image; see [`average_precision_multi`].
pub fn average_precision(detections: &[Detection], gt: &[BBox], iou_thresh: f64) -> f64 {
    average_precision_multi(
        &[ImageResult {
            detections: detections.to_vec(),
            gt: gt.to_vec(),
        }],
        iou_thresh,
    )
}

/// VOC-style AP over a set of images. Detections from all images are
/// ranked together by score; each is matched to its highest-IoU gt box in
/// its own image and counts as a true positive if that IoU exceeds the
/// threshold and the box is still unmatched. AP is the area under the
/// precision envelope (all-points interpolation). Zero when there is no gt.
pub fn average_precision_multi(images: &[ImageResult], iou_thresh: f64) -> f64 {
    let n_gt: usize = images.iter().map(|r| r.gt.len()).sum();
    if n_gt == 0 {
        warn!("average_precision: no ground-truth boxes, AP defined as 0");
        return 0.0;
    }
    let mut flat: Vec<(usize, &Detection)> = Vec::new();
    for (i, r) in images.iter().enumerate() {
        flat.extend(r.detections.iter().map(|d| (i, d)));
    }
    let scores: Vec<f64> = flat.iter().map(|(_, d)| d.score).collect();
    let mut matched: Vec<Vec<bool>> = images.iter().map(|r| vec![false; r.gt.len()]).collect();
    let mut tp_flags = Vec::with_capacity(flat.len());
    for k in order_by_score(&scores) {
        let (img, d) = flat[k];
        let gt = &images[img].gt;
        let best = gt
            .iter()
            .enumerate()
            .map(|(g, b)| (g, iou(&d.bbox, b)))
            .fold(None, |acc: Option<(usize, f64)>, (g, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
        let tp = match best {
            Some((g, v)) if v > iou_thresh && !matched[img][g] => {
                matched[img][g] = true;
                true
            }
            _ => false,
        };
        tp_flags.push(tp);
    }
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &f) in tp_flags.iter().enumerate() {
        tp += usize::from(f);
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
            score,
        }
    }

    fn gt(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0).unwrap()
    }

    #[test]
    fn perfect_and_disjoint() {
        assert_eq!(average_precision(&[det(0.0, 0.9)], &[gt(0.0)], 0.5), 1.0);
        assert_eq!(average_precision(&[det(50.0, 0.9)], &[gt(0.0)], 0.5), 0.0);
        assert_eq!(average_precision(&[det(0.0, 0.9)], &[], 0.5), 0.0);
    }

    #[test]
    fn hand_traced_curve() {
        let d = [det(0.0, 0.9), det(100.0, 0.8), det(30.0, 0.7)];
        let ap = average_precision(&d, &[gt(0.0), gt(30.0)], 0.5);
        assert!((ap - (0.5 + 2.0 / 3.0 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn duplicates_are_false_positives() {
        let d = [det(0.0, 0.9), det(0.0, 0.8)];
        assert_eq!(average_precision(&d, &[gt(0.0), gt(30.0)], 0.5), 0.5);
    }
}
