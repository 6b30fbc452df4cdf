//! Procedural one-shot detection benchmark: classes composed from shape,
//! color and texture, rendered into noisy cluttered scenes, with seen and
//! unseen class splits and the query/target pair samplers.

mod export;
mod render;

pub use export::{annotation_lines, write_annotations, write_ppm, write_ppm_gray};
pub use render::{crop_resize, render_scene, render_scenes};

use std::collections::{BTreeMap, BTreeSet};

use log::warn;

use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::rng::{mix, XorShift64Star};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Star,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 7] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Cross,
        Shape::Ring,
        Shape::Star,
        Shape::Bar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
            Shape::Star => "star",
            Shape::Bar => "bar",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
    Orange,
    White,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Magenta,
        Color::Cyan,
        Color::Orange,
        Color::White,
    ];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.15, 0.15],
            Color::Green => [0.15, 0.8, 0.2],
            Color::Blue => [0.2, 0.3, 0.95],
            Color::Yellow => [0.95, 0.9, 0.15],
            Color::Magenta => [0.9, 0.2, 0.85],
            Color::Cyan => [0.15, 0.85, 0.9],
            Color::Orange => [1.0, 0.55, 0.1],
            Color::White => [0.95, 0.95, 0.95],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Magenta => "magenta",
            Color::Cyan => "cyan",
            Color::Orange => "orange",
            Color::White => "white",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Texture {
    Solid,
    Stripes,
    Dots,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Solid, Texture::Stripes, Texture::Dots];

    pub fn as_str(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::Stripes => "stripes",
            Texture::Dots => "dots",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthClass {
    pub class_id: usize,
    pub shape: Shape,
    pub color: Color,
    pub texture: Texture,
}

impl SynthClass {
    pub fn fill_rgb(&self) -> [f64; 3] {
        self.color.rgb()
    }

    /// Number of attribute values (out of shape, color, texture) shared.
    pub fn shared_attributes(&self, o: &SynthClass) -> usize {
        usize::from(self.shape == o.shape)
            + usize::from(self.color == o.color)
            + usize::from(self.texture == o.texture)
    }

    pub fn describe(&self) -> String {
        format!(
            "{}-{}-{}",
            self.color.as_str(),
            self.texture.as_str(),
            self.shape.as_str()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub seen: BTreeSet<usize>,
    pub unseen: BTreeSet<usize>,
}

impl SplitSpec {
    pub fn is_seen(&self, class_id: usize) -> bool {
        self.seen.contains(&class_id)
    }

    pub fn is_unseen(&self, class_id: usize) -> bool {
        self.unseen.contains(&class_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    pub classes: Vec<SynthClass>,
    pub split: SplitSpec,
}

impl Registry {
    pub fn class(&self, id: usize) -> Option<&SynthClass> {
        self.classes.get(id)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

pub const MAX_CLASSES: usize = Shape::ALL.len() * Color::ALL.len() * Texture::ALL.len();

/// Draws `num_classes` distinct attribute triples and marks `num_unseen`
/// of them unseen. Unseen classes are picked, in a seeded order, among
/// classes sharing an attribute value with at least one class that stays
/// seen.
pub fn make_registry(num_classes: usize, num_unseen: usize, seed: u64) -> Result<Registry> {
    if num_classes == 0 || num_classes > MAX_CLASSES {
        return Err(Error::config(format!(
            "number of classes must be in 1..={MAX_CLASSES}, got {num_classes}"
        )));
    }
    if num_unseen >= num_classes {
        return Err(Error::config(format!(
            "{num_unseen} unseen classes leave no seen class out of {num_classes}"
        )));
    }
    let mut rng = XorShift64Star::new(seed);
    let mut combos: Vec<(Shape, Color, Texture)> = Vec::with_capacity(MAX_CLASSES);
    for &s in &Shape::ALL {
        for &c in &Color::ALL {
            for &t in &Texture::ALL {
                combos.push((s, c, t));
            }
        }
    }
    rng.shuffle(&mut combos);
    let classes: Vec<SynthClass> = combos[..num_classes]
        .iter()
        .enumerate()
        .map(|(class_id, &(shape, color, texture))| SynthClass {
            class_id,
            shape,
            color,
            texture,
        })
        .collect();

    let mut order: Vec<usize> = (0..num_classes).collect();
    rng.shuffle(&mut order);
    let mut unseen = BTreeSet::new();
    for &c in &order {
        if unseen.len() == num_unseen {
            break;
        }
        let shares = classes.iter().any(|o| {
            o.class_id != c && !unseen.contains(&o.class_id) && classes[c].shared_attributes(o) > 0
        });
        if shares {
            unseen.insert(c);
        }
    }
    if unseen.len() < num_unseen {
        return Err(Error::config(
            "could not pick unseen classes sharing attributes with seen ones",
        ));
    }
    let seen = (0..num_classes).filter(|c| !unseen.contains(c)).collect();
    Ok(Registry {
        classes,
        split: SplitSpec { seen, unseen },
    })
}

/// Scene rendering parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Smallest and largest object extent in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Maximum absolute rotation jitter in degrees.
    pub max_rotation: f64,
    pub background: f64,
    /// Amplitude of the uniform per-pixel noise.
    pub noise: f64,
    pub max_place_tries: usize,
    /// Draw only seen classes (training scenes).
    pub seen_only: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_objects: 2,
            max_objects: 5,
            min_size: 12,
            max_size: 28,
            max_rotation: 20.0,
            background: 0.35,
            noise: 0.08,
            max_place_tries: 50,
            seen_only: false,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config(format!(
                "object count range {}..={} is empty or starts at zero",
                self.min_objects, self.max_objects
            )));
        }
        if self.min_size < 4 || self.min_size > self.max_size || self.max_size > self.image_size {
            return Err(Error::config(format!(
                "object size range {}..={} does not fit a {} pixel image",
                self.min_size, self.max_size, self.image_size
            )));
        }
        if !(0.0..=0.5).contains(&self.noise) || !(0.0..=1.0).contains(&self.background) {
            return Err(Error::config(
                "noise must be in [0, 0.5] and background in [0, 1]",
            ));
        }
        Ok(())
    }

    pub fn for_training(&self) -> Self {
        Self {
            seen_only: true,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: u64,
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

impl Scene {
    pub fn boxes_of(&self, class_id: usize) -> Vec<BBox> {
        self.annotations
            .iter()
            .filter(|a| a.class_id == class_id)
            .map(|a| a.bbox)
            .collect()
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.annotations.iter().map(|a| a.class_id).collect()
    }

    pub fn contains_class(&self, class_id: usize) -> bool {
        self.annotations.iter().any(|a| a.class_id == class_id)
    }
}

/// A resized gt crop usable as a query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPatch {
    pub image_id: u64,
    pub class_id: usize,
    pub bbox: BBox,
    pub patch: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryTargetPair<'a> {
    pub scene: &'a Scene,
    pub query: &'a QueryPatch,
    pub query_class: usize,
    pub gt_boxes: Vec<BBox>,
}

/// Query crops grouped by class, in scene order.
#[derive(Debug, Clone, Default)]
pub struct QueryPool {
    by_class: BTreeMap<usize, Vec<QueryPatch>>,
}

impl QueryPool {
    /// Crops every annotation whose sides are at least `min_side` pixels,
    /// keeping at most `max_per_class` crops per class.
    pub fn build(
        scenes: &[Scene],
        query_size: usize,
        min_side: f64,
        max_per_class: usize,
    ) -> Result<Self> {
        let mut by_class: BTreeMap<usize, Vec<QueryPatch>> = BTreeMap::new();
        for s in scenes {
            for a in &s.annotations {
                if a.bbox.width() < min_side || a.bbox.height() < min_side {
                    continue;
                }
                let v = by_class.entry(a.class_id).or_default();
                if v.len() >= max_per_class {
                    continue;
                }
                v.push(QueryPatch {
                    image_id: s.image_id,
                    class_id: a.class_id,
                    bbox: a.bbox,
                    patch: crop_resize(&s.image, &a.bbox, query_size)?,
                });
            }
        }
        Ok(Self { by_class })
    }

    pub fn for_class(&self, class_id: usize) -> &[QueryPatch] {
        self.by_class.get(&class_id).map_or(&[], Vec::as_slice)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_class.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.by_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Training pair for `scene`: a seen class present in the scene, chosen
/// uniformly, and a query crop of that class from a different scene.
/// `None` when the scene holds no seen class with an available query.
pub fn sample_training_pair<'a>(
    scene: &'a Scene,
    split: &SplitSpec,
    pool: &'a QueryPool,
    seed: u64,
) -> Option<QueryTargetPair<'a>> {
    let candidates: Vec<usize> = scene
        .classes()
        .into_iter()
        .filter(|&c| {
            split.is_seen(c)
                && pool
                    .for_class(c)
                    .iter()
                    .any(|q| q.image_id != scene.image_id)
        })
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let mut rng = XorShift64Star::new(mix(seed, scene.image_id));
    let class = candidates[rng.below(candidates.len())];
    let queries: Vec<&QueryPatch> = pool
        .for_class(class)
        .iter()
        .filter(|q| q.image_id != scene.image_id)
        .collect();
    let query = queries[rng.below(queries.len())];
    Some(QueryTargetPair {
        scene,
        query,
        query_class: class,
        gt_boxes: scene.boxes_of(class),
    })
}

/// Test-time query protocol: shuffle the class pool with a generator
/// seeded by the target image id and keep the first `n`.
pub fn test_query_sampler(pool: &[QueryPatch], image_id: u64, n: usize) -> Vec<&QueryPatch> {
    if pool.len() < n {
        warn!(
            "query pool holds {} patches, fewer than the {n} requested",
            pool.len()
        );
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    XorShift64Star::new(image_id).shuffle(&mut order);
    order.into_iter().take(n).map(|i| &pool[i]).collect()
}

/// First image id of each scene range.
pub const TRAIN_ID_BASE: u64 = 0;
pub const QUERY_ID_BASE: u64 = 1_000_000;
pub const TEST_ID_BASE: u64 = 2_000_000;

/// Everything needed to regenerate the benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub num_classes: usize,
    pub num_unseen: usize,
    pub registry_seed: u64,
    pub scene: SceneConfig,
    pub train_scenes: usize,
    /// Scenes cropped for the test-time query pools.
    pub query_scenes: usize,
    pub test_scenes: usize,
    pub query_size: usize,
    pub min_query_side: f64,
    pub pool_per_class: usize,
    /// Training scenes draw only seen classes.
    pub train_seen_only: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            num_unseen: 4,
            registry_seed: 0,
            scene: SceneConfig::default(),
            train_scenes: 400,
            query_scenes: 200,
            test_scenes: 200,
            query_size: 32,
            min_query_side: 12.0,
            pool_per_class: 64,
            train_seen_only: true,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.num_classes > MAX_CLASSES || self.num_unseen >= self.num_classes {
            return Err(Error::config(format!(
                "need unseen < classes <= {MAX_CLASSES}, got {} of {}",
                self.num_unseen, self.num_classes
            )));
        }
        if self.train_scenes == 0 || self.test_scenes == 0 || self.query_scenes == 0 {
            return Err(Error::config("scene counts must be positive"));
        }
        if self.query_size == 0 || self.pool_per_class == 0 {
            return Err(Error::config("query size and pool size must be positive"));
        }
        Ok(())
    }
}

/// The rendered benchmark: training scenes with their query pool, and test
/// scenes with a pool cropped from a disjoint id range.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub registry: Registry,
    pub train: Vec<Scene>,
    pub train_pool: QueryPool,
    pub test: Vec<Scene>,
    pub test_pool: QueryPool,
}

impl Dataset {
    pub fn build(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let registry = make_registry(cfg.num_classes, cfg.num_unseen, cfg.registry_seed)?;
        let train_cfg = if cfg.train_seen_only {
            cfg.scene.for_training()
        } else {
            cfg.scene.clone()
        };
        let span = |base: u64, n: usize| base..base + n as u64;
        let train = render_scenes(&registry, span(TRAIN_ID_BASE, cfg.train_scenes), &train_cfg)?;
        let train_pool = QueryPool::build(
            &train,
            cfg.query_size,
            cfg.min_query_side,
            cfg.pool_per_class,
        )?;
        let query_src =
            render_scenes(&registry, span(QUERY_ID_BASE, cfg.query_scenes), &cfg.scene)?;
        let test_pool = QueryPool::build(
            &query_src,
            cfg.query_size,
            cfg.min_query_side,
            cfg.pool_per_class,
        )?;
        let test = render_scenes(&registry, span(TEST_ID_BASE, cfg.test_scenes), &cfg.scene)?;
        Ok(Self {
            registry,
            train,
            train_pool,
            test,
            test_pool,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_split_sizes() {
        let r = make_registry(20, 4, 7).unwrap();
        assert_eq!(r.split.seen.len(), 16);
        assert_eq!(r.split.unseen.len(), 4);
        assert!(r.split.seen.is_disjoint(&r.split.unseen));
        assert_eq!(r, make_registry(20, 4, 7).unwrap());
    }

    #[test]
    fn registry_errors() {
        assert!(matches!(
            make_registry(MAX_CLASSES + 1, 4, 0),
            Err(Error::Config(_))
        ));
        assert!(make_registry(MAX_CLASSES, 4, 0).is_ok());
        assert!(make_registry(4, 4, 0).is_err());
    }

    #[test]
    fn sampler_is_seeded_by_image() {
        let pool: Vec<QueryPatch> = (0..12)
            .map(|i| QueryPatch {
                image_id: i,
                class_id: 0,
                bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                patch: Tensor::zeros(&[1]),
            })
            .collect();
        let ids = |v: Vec<&QueryPatch>| v.iter().map(|q| q.image_id).collect::<Vec<_>>();
        assert_eq!(
            ids(test_query_sampler(&pool, 5, 5)),
            ids(test_query_sampler(&pool, 5, 5))
        );
        assert_ne!(
            ids(test_query_sampler(&pool, 5, 5)),
            ids(test_query_sampler(&pool, 6, 5))
        );
        let mut all = ids(test_query_sampler(&pool, 9, 12));
        all.sort();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        assert_eq!(test_query_sampler(&pool[..3], 1, 5).len(), 3);
    }
}
