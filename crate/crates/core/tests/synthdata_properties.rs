use std::collections::BTreeMap;
use std::sync::Mutex;

use coae::detector::Detection;
use coae::eval::{evaluate_one_shot, ClassSet, GtOracle, OneShotDetector, QUERIES_PER_IMAGE};
use coae::synthdata::*;
use coae::Result;
use proptest::prelude::*;

fn small_data() -> DataConfig {
    DataConfig {
        train_scenes: 60,
        query_scenes: 60,
        test_scenes: 40,
        ..DataConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn unseen_classes_share_attributes_with_seen(seed in any::<u64>(), unseen in 1usize..8) {
        let r = make_registry(20, unseen, seed).unwrap();
        prop_assert_eq!(r.split.unseen.len(), unseen);
        prop_assert_eq!(r.split.seen.len() + unseen, 20);
        for &u in &r.split.unseen {
            let cu = r.class(u).unwrap();
            prop_assert!(
                r.split.seen.iter().any(|&s| r.class(s).unwrap().shared_attributes(cu) > 0),
                "unseen class {} shares nothing with the seen set", u
            );
        }
        let triples: std::collections::BTreeSet<String> =
            r.classes.iter().map(|c| c.describe()).collect();
        prop_assert_eq!(triples.len(), 20);
    }

    #[test]
    fn scenes_respect_their_contract(id in 0u64..1_000_000, seed in 0u64..50) {
        let reg = make_registry(20, 4, 3).unwrap();
        let cfg = SceneConfig { seed, ..SceneConfig::default() };
        let sc = render_scene(&reg, id, &cfg).unwrap();
        prop_assert_eq!(&sc, &render_scene(&reg, id, &cfg).unwrap());
        prop_assert!(!sc.annotations.is_empty());
        prop_assert!(sc.annotations.len() <= cfg.max_objects);
        let s = cfg.image_size as f64;
        let min_area = (cfg.min_size * cfg.min_size) as f64;
        for a in &sc.annotations {
            let b = a.bbox;
            prop_assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= s && b.y2 <= s);
            prop_assert!(b.area() >= min_area);
        }
        prop_assert!(sc.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

/// Pixels inside a gt box whose color is the class color up to the
/// rendering noise.
fn class_colored_pixels(scene: &Scene, a: &Annotation, rgb: [f64; 3], noise: f64) -> usize {
    let s = scene.image.shape()[1];
    let mut n = 0;
    for y in a.bbox.y1 as usize..a.bbox.y2 as usize {
        for x in a.bbox.x1 as usize..a.bbox.x2 as usize {
            let close =
                (0..3).all(|c| (scene.image.at(&[c, y, x]) - rgb[c]).abs() <= noise + 1e-12);
            n += usize::from(close && x < s && y < s);
        }
    }
    n
}

#[test]
fn gt_boxes_contain_their_class_color() {
    let reg = make_registry(20, 4, 0).unwrap();
    let cfg = SceneConfig::default();
    let bg = [cfg.background; 3];
    for id in 0..300 {
        let sc = render_scene(&reg, id, &cfg).unwrap();
        for a in &sc.annotations {
            let rgb = reg.class(a.class_id).unwrap().fill_rgb();
            // Every class color is separable from the background at this noise.
            assert!((0..3).any(|c| (rgb[c] - bg[c]).abs() > 2.0 * cfg.noise));
            let n = class_colored_pixels(&sc, a, rgb, cfg.noise);
            assert!(
                n >= 8,
                "scene {id}: class {} has {n} colored pixels",
                a.class_id
            );
        }
    }
}

#[test]
fn training_pairs_follow_scene_composition() {
    let data = Dataset::build(&small_data()).unwrap();
    let split = &data.registry.split;
    let mut checked = 0;
    for sc in data.train.iter().filter(|s| s.classes().len() >= 2).take(6) {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        let samples = 1000;
        for seed in 0..samples {
            let p = sample_training_pair(sc, split, &data.train_pool, seed).unwrap();
            assert!(split.is_seen(p.query_class));
            assert_ne!(p.query.image_id, sc.image_id);
            assert_eq!(p.query.class_id, p.query_class);
            assert!(!p.gt_boxes.is_empty());
            assert_eq!(p.gt_boxes, sc.boxes_of(p.query_class));
            *counts.entry(p.query_class).or_default() += 1;
        }
        let present = sc.classes();
        assert_eq!(
            counts.keys().copied().collect::<Vec<_>>(),
            present.iter().copied().collect::<Vec<_>>()
        );
        let expected = 1.0 / present.len() as f64;
        for (c, n) in counts {
            let f = n as f64 / samples as f64;
            assert!((f - expected).abs() < 0.05, "class {c}: {f} vs {expected}");
        }
        checked += 1;
    }
    assert!(checked >= 3);
}

#[test]
fn splits_are_kept_apart() {
    let data = Dataset::build(&small_data()).unwrap();
    let split = &data.registry.split;
    assert!(data
        .train
        .iter()
        .all(|s| s.classes().iter().all(|&c| split.is_seen(c))));
    assert!(data
        .train
        .iter()
        .all(|s| (TRAIN_ID_BASE..QUERY_ID_BASE).contains(&s.image_id)));
    assert!(data.test.iter().all(|s| s.image_id >= TEST_ID_BASE));
    for c in data.test_pool.classes() {
        for q in data.test_pool.for_class(c) {
            assert!((QUERY_ID_BASE..TEST_ID_BASE).contains(&q.image_id));
            assert_eq!(q.patch.shape(), &[3, 32, 32]);
        }
    }
    assert!(data
        .test
        .iter()
        .any(|s| s.classes().iter().any(|&c| split.is_unseen(c))));
}

#[test]
fn dataset_is_reproducible() {
    let a = Dataset::build(&small_data()).unwrap();
    let b = Dataset::build(&small_data()).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.test, b.test);
    assert_eq!(a.registry, b.registry);
}

#[test]
fn bad_data_configs_are_rejected() {
    let mut cfg = small_data();
    cfg.num_classes = MAX_CLASSES + 1;
    assert!(Dataset::build(&cfg).is_err());
    let mut cfg = small_data();
    cfg.scene.min_size = 40;
    assert!(Dataset::build(&cfg).is_err());
    let mut cfg = small_data();
    cfg.test_scenes = 0;
    assert!(Dataset::build(&cfg).is_err());
}

struct Recorder(Mutex<Vec<usize>>);

impl OneShotDetector for Recorder {
    fn detect(&self, scene: &Scene, query: &QueryPatch) -> Result<Vec<Detection>> {
        assert!(scene.contains_class(query.class_id));
        self.0.lock().unwrap().push(query.class_id);
        GtOracle.detect(scene, query)
    }
}

#[test]
fn evaluation_stays_inside_the_requested_split() {
    let data = Dataset::build(&small_data()).unwrap();
    let split = &data.registry.split;
    for set in [ClassSet::Seen, ClassSet::Unseen] {
        let rec = Recorder(Mutex::new(Vec::new()));
        let classes = set.classes(split);
        let r = evaluate_one_shot(
            &rec,
            &data.test,
            split,
            &data.test_pool,
            &classes,
            QUERIES_PER_IMAGE,
        )
        .unwrap();
        let touched = rec.0.into_inner().unwrap();
        assert!(!touched.is_empty());
        assert!(touched.iter().all(|c| classes.contains(c)));
        assert!(r.per_class.values().all(|&ap| ap == 1.0));
        match set {
            ClassSet::Seen => assert_eq!((r.map_seen, r.map_unseen), (Some(1.0), None)),
            ClassSet::Unseen => assert_eq!((r.map_seen, r.map_unseen), (None, Some(1.0))),
        }
    }
    let mixed = [
        *split.seen.iter().next().unwrap(),
        *split.unseen.iter().next().unwrap(),
    ];
    assert!(evaluate_one_shot(&GtOracle, &data.test, split, &data.test_pool, &mixed, 5).is_err());
}

#[test]
fn query_sampler_protocol() {
    let data = Dataset::build(&small_data()).unwrap();
    let c = data.test_pool.classes().next().unwrap();
    let pool = data.test_pool.for_class(c);
    let ids = |v: Vec<&QueryPatch>| {
        v.iter()
            .map(|q| (q.image_id, q.bbox.x1))
            .collect::<Vec<_>>()
    };
    let a = ids(test_query_sampler(pool, 77, 5));
    assert_eq!(a, ids(test_query_sampler(pool, 77, 5)));
    assert_eq!(a.len(), 5.min(pool.len()));
    // The sampler is a prefix of one seeded shuffle.
    let all = ids(test_query_sampler(pool, 77, pool.len()));
    assert_eq!(&all[..a.len()], &a[..]);
    assert_eq!(
        test_query_sampler(pool, 1, pool.len() + 3).len(),
        pool.len()
    );
}
