use coae::detector::{decode, encode, iou, nms, roi_gap, BBox, Detection, MAX_LOG_SCALE};
use coae::eval::{average_precision_multi, proposal_heatmap, ImageResult};
use coae::{Tape, Tensor};
use proptest::prelude::*;

mod common;
use common::{ap_oracle, cell_iou, nms_oracle, roi_gap_oracle};

fn bbox_in(size: f64) -> impl Strategy<Value = BBox> {
    (0.0..size - 1.0, 0.0..size - 1.0, 0.5..size, 0.5..size).prop_map(move |(x, y, w, h)| {
        BBox::new(x, y, (x + w).min(size), (y + h).min(size)).unwrap()
    })
}

fn int_box() -> impl Strategy<Value = (i32, i32, i32, i32)> {
    (0..20i32, 0..20i32, 1..12i32, 1..12i32).prop_map(|(x, y, w, h)| (x, y, x + w, y + h))
}

fn to_box((x1, y1, x2, y2): (i32, i32, i32, i32)) -> BBox {
    BBox::new(x1.into(), y1.into(), x2.into(), y2.into()).unwrap()
}

fn images_strategy() -> impl Strategy<Value = Vec<ImageResult>> {
    let image = (
        prop::collection::vec(bbox_in(32.0), 0..5),
        prop::collection::vec((bbox_in(32.0), 0.0..1.0f64), 0..8),
        prop::collection::vec((0usize..5, -2.0..2.0f64), 0..4),
    )
        .prop_map(|(gt, noise, near)| {
            let mut detections: Vec<Detection> = noise
                .into_iter()
                .map(|(bbox, score)| Detection { bbox, score })
                .collect();
            // Perturbed copies of gt boxes so that matches actually occur.
            for (g, shift) in near {
                if let Some(b) = gt.get(g) {
                    let moved =
                        BBox::new(b.x1 + shift, b.y1 - shift, b.x2 + shift, b.y2 - shift).unwrap();
                    detections.push(Detection {
                        bbox: moved,
                        score: 0.5 + 0.1 * shift,
                    });
                }
            }
            ImageResult { detections, gt }
        });
    prop::collection::vec(image, 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(600))]

    #[test]
    fn iou_matches_cell_counting(a in int_box(), b in int_box()) {
        prop_assert_eq!(iou(&to_box(a), &to_box(b)), cell_iou(a, b));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox_in(64.0), b in bbox_in(64.0)) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn nms_matches_keep_if_clear_oracle(
        items in prop::collection::vec((bbox_in(48.0), 0.0..1.0f64), 1..30),
        thresh in 0.1..0.9f64,
    ) {
        let (boxes, scores): (Vec<BBox>, Vec<f64>) = items.into_iter().unzip();
        prop_assert_eq!(nms(&boxes, &scores, thresh), nms_oracle(&boxes, &scores, thresh));
    }

    #[test]
    fn delta_coding_round_trips(a in bbox_in(64.0), b in bbox_in(64.0)) {
        let d = encode(&a, &b);
        prop_assume!(d[2] <= MAX_LOG_SCALE && d[3] <= MAX_LOG_SCALE);
        let r = decode(&a, &d);
        for (x, y) in [(r.x1, b.x1), (r.y1, b.y1), (r.x2, b.x2), (r.y2, b.y2)] {
            prop_assert!((x - y).abs() < 1e-9, "{:?} vs {:?}", r, b);
        }
    }

    #[test]
    fn roi_gap_matches_cell_loop(
        seed in any::<u64>(),
        b in bbox_in(64.0),
        channels in 1usize..5,
    ) {
        let (side, stride) = (8usize, 8.0);
        let mut rng = coae::rng::XorShift64Star::new(seed);
        let map = Tensor::from_fn(&[channels, side, side], |_| rng.uniform(-1.0, 1.0));
        let mut tape = Tape::new();
        let v = tape.constant(map.clone()).unwrap();
        let r = roi_gap(&mut tape, v, &b, stride).unwrap();
        let got = tape.value(r).data().to_vec();
        let want = roi_gap_oracle(&map, &b, stride);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-12, "{} vs {}", g, w);
        }
    }

    #[test]
    fn ap_matches_brute_force_integrator(images in images_strategy(), thresh in 0.3..0.7f64) {
        let got = average_precision_multi(&images, thresh);
        let want = ap_oracle(&images, thresh);
        prop_assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn ap_depends_only_on_score_order(images in images_strategy(), k in 0.1..5.0f64) {
        let transformed: Vec<ImageResult> = images
            .iter()
            .map(|r| ImageResult {
                gt: r.gt.clone(),
                detections: r
                    .detections
                    .iter()
                    .map(|d| Detection { bbox: d.bbox, score: (k * d.score).exp() + d.score.powi(3) })
                    .collect(),
            })
            .collect();
        prop_assert_eq!(
            average_precision_multi(&images, 0.5),
            average_precision_multi(&transformed, 0.5)
        );
    }

    #[test]
    fn heatmap_matches_pixel_loop(
        boxes in prop::collection::vec(bbox_in(16.0), 1..12),
    ) {
        let s = 16;
        let map = proposal_heatmap(&boxes, s);
        let mut raw = vec![0.0; s * s];
        for y in 0..s {
            for x in 0..s {
                for b in &boxes {
                    let w = (b.x2.min(x as f64 + 1.0) - b.x1.max(x as f64)).max(0.0);
                    let h = (b.y2.min(y as f64 + 1.0) - b.y1.max(y as f64)).max(0.0);
                    raw[y * s + x] += w * h;
                }
            }
        }
        let total: f64 = raw.iter().sum();
        let sum: f64 = map.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        for (got, r) in map.data().iter().zip(&raw) {
            prop_assert!(*got >= 0.0);
            prop_assert!((got - r / total).abs() < 1e-9);
        }
    }
}

#[test]
fn gt_passthrough_scores_perfect_ap() {
    let gt = vec![
        BBox::new(1.0, 1.0, 9.0, 9.0).unwrap(),
        BBox::new(20.0, 4.0, 30.0, 12.0).unwrap(),
    ];
    let images = vec![ImageResult {
        detections: gt
            .iter()
            .map(|&bbox| Detection { bbox, score: 1.0 })
            .collect(),
        gt,
    }];
    assert_eq!(average_precision_multi(&images, 0.5), 1.0);
    assert_eq!(ap_oracle(&images, 0.5), 1.0);
}
