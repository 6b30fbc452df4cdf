//! One-shot detection metrics under the five-query protocol, proposal
//! heatmaps, co-excitation statistics and the toggle ablation.

mod ap;

pub use ap::{average_precision, average_precision_multi, ImageResult};

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;

use crate::detector::{BBox, Detection, Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::synthdata::{
    test_query_sampler, Dataset, QueryPatch, QueryPool, Registry, Scene, SplitSpec,
};
use crate::tensor::{ParamStore, Tensor};
use crate::train::{train, TrainConfig};

/// Queries sampled per target image.
pub const QUERIES_PER_IMAGE: usize = 5;
pub const AP_IOU: f64 = 0.5;

/// Anything that can answer a one-shot query on a scene.
pub trait OneShotDetector: Sync {
    fn detect(&self, scene: &Scene, query: &QueryPatch) -> Result<Vec<Detection>>;
}

/// A detector with its parameters.
pub struct TrainedModel<'a> {
    pub detector: &'a Detector,
    pub params: &'a ParamStore,
}

impl OneShotDetector for TrainedModel<'_> {
    fn detect(&self, scene: &Scene, query: &QueryPatch) -> Result<Vec<Detection>> {
        self.detector
            .detect(self.params, &scene.image, &query.patch)
    }
}

/// Emits the query class's gt boxes with score 1.
pub struct GtOracle;

impl OneShotDetector for GtOracle {
    fn detect(&self, scene: &Scene, query: &QueryPatch) -> Result<Vec<Detection>> {
        Ok(scene
            .boxes_of(query.class_id)
            .into_iter()
            .map(|bbox| Detection { bbox, score: 1.0 })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassSet {
    Seen,
    Unseen,
}

impl ClassSet {
    pub fn classes(self, split: &SplitSpec) -> Vec<usize> {
        match self {
            ClassSet::Seen => split.seen.iter().copied().collect(),
            ClassSet::Unseen => split.unseen.iter().copied().collect(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "seen" => Some(ClassSet::Seen),
            "unseen" => Some(ClassSet::Unseen),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassSet::Seen => "seen",
            ClassSet::Unseen => "unseen",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// AP per class, averaged over the query indices.
    pub per_class: BTreeMap<usize, f64>,
    /// AP of every query index per class.
    pub per_query: BTreeMap<usize, Vec<f64>>,
    pub map_seen: Option<f64>,
    pub map_unseen: Option<f64>,
}

impl EvalResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,ap\n");
        for (c, ap) in &self.per_class {
            s.push_str(&format!("{c},{ap}\n"));
        }
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        s.push_str(&format!("mAP_seen,{}\n", opt(self.map_seen)));
        s.push_str(&format!("mAP_unseen,{}\n", opt(self.map_unseen)));
        s
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = v
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// For every class, every scene containing it and each of the first
/// `n_queries` queries drawn by the image-seeded sampler, detects and
/// scores AP per query index across scenes; class AP is the mean over
/// query indices. `classes` must lie entirely in the seen or the unseen set.
pub fn evaluate_one_shot(
    model: &dyn OneShotDetector,
    scenes: &[Scene],
    split: &SplitSpec,
    pool: &QueryPool,
    classes: &[usize],
    n_queries: usize,
) -> Result<EvalResult> {
    let all_seen = classes.iter().all(|&c| split.is_seen(c));
    let all_unseen = classes.iter().all(|&c| split.is_unseen(c));
    if !all_seen && !all_unseen {
        return Err(Error::usage(
            "evaluation classes must all be seen or all be unseen",
        ));
    }
    let mut jobs: Vec<(usize, usize, usize)> = Vec::new();
    for &c in classes {
        let queries = pool.for_class(c);
        if queries.is_empty() {
            warn!("class {c} has no queries; skipped");
            continue;
        }
        let present: Vec<usize> = (0..scenes.len())
            .filter(|&i| scenes[i].contains_class(c))
            .collect();
        if present.is_empty() {
            warn!("class {c} is absent from every scene; skipped");
            continue;
        }
        for &si in &present {
            let n = test_query_sampler(queries, scenes[si].image_id, n_queries).len();
            jobs.extend((0..n).map(|qi| (c, si, qi)));
        }
    }
    let results: Vec<Result<Vec<Detection>>> = jobs
        .par_iter()
        .map(|&(c, si, qi)| {
            let q = test_query_sampler(pool.for_class(c), scenes[si].image_id, n_queries)[qi];
            model.detect(&scenes[si], q)
        })
        .collect();
    let mut grouped: BTreeMap<usize, BTreeMap<usize, Vec<ImageResult>>> = BTreeMap::new();
    for (&(c, si, qi), r) in jobs.iter().zip(results) {
        grouped
            .entry(c)
            .or_default()
            .entry(qi)
            .or_default()
            .push(ImageResult {
                detections: r?,
                gt: scenes[si].boxes_of(c),
            });
    }
    let mut per_class = BTreeMap::new();
    let mut per_query = BTreeMap::new();
    for (c, by_q) in grouped {
        let aps: Vec<f64> = by_q
            .values()
            .map(|imgs| average_precision_multi(imgs, AP_IOU))
            .collect();
        per_class.insert(c, mean(aps.iter().copied()).unwrap_or(0.0));
        per_query.insert(c, aps);
    }
    let map_seen = mean(
        per_class
            .iter()
            .filter(|(c, _)| split.is_seen(**c))
            .map(|(_, &v)| v),
    );
    let map_unseen = mean(
        per_class
            .iter()
            .filter(|(c, _)| split.is_unseen(**c))
            .map(|(_, &v)| v),
    );
    Ok(EvalResult {
        per_class,
        per_query,
        map_seen,
        map_unseen,
    })
}

/// Convenience wrapper evaluating a trained model on the dataset's test side.
pub fn evaluate_split(
    det: &Detector,
    params: &ParamStore,
    data: &Dataset,
    set: ClassSet,
) -> Result<EvalResult> {
    let model = TrainedModel {
        detector: det,
        params,
    };
    let split = &data.registry.split;
    evaluate_one_shot(
        &model,
        &data.test,
        split,
        &data.test_pool,
        &set.classes(split),
        QUERIES_PER_IMAGE,
    )
}

/// Fraction of proposal area falling on each pixel: every box spreads its
/// (clipped) area over the pixels it overlaps, and the map is normalized
/// to sum to one. An empty input gives the uniform map.
pub fn proposal_heatmap(proposals: &[BBox], image_size: usize) -> Tensor {
    let s = image_size;
    let mut map = vec![0.0; s * s];
    for b in proposals {
        let x0 = b.x1.max(0.0).floor() as usize;
        let y0 = b.y1.max(0.0).floor() as usize;
        let x1 = (b.x2.min(s as f64).ceil().max(0.0) as usize).min(s);
        let y1 = (b.y2.min(s as f64).ceil().max(0.0) as usize).min(s);
        for y in y0..y1 {
            let hy = (b.y2.min((y + 1) as f64) - b.y1.max(y as f64)).max(0.0);
            if hy == 0.0 {
                continue;
            }
            for x in x0..x1 {
                let wx = (b.x2.min((x + 1) as f64) - b.x1.max(x as f64)).max(0.0);
                map[y * s + x] += wx * hy;
            }
        }
    }
    let total: f64 = map.iter().sum();
    if total > 0.0 {
        map.iter_mut().for_each(|v| *v /= total);
    } else {
        map.fill(1.0 / (s * s) as f64);
    }
    Tensor::from_parts(vec![s, s], map)
}

/// Probability mass on pixels whose centers fall inside any of `boxes`.
pub fn mass_inside(map: &Tensor, boxes: &[BBox]) -> f64 {
    let s = map.shape()[1];
    map.data()
        .iter()
        .enumerate()
        .filter(|(i, _)| {
            let (x, y) = ((i % s) as f64 + 0.5, (i / s) as f64 + 0.5);
            boxes.iter().any(|b| b.contains_point(x, y))
        })
        .map(|(_, v)| v)
        .sum()
}

/// One test pair used by the heatmap study.
#[derive(Debug, Clone)]
pub struct HeatmapSample {
    pub image_id: u64,
    pub class_id: usize,
    pub map: Tensor,
    pub mass_inside_gt: f64,
}

/// Heatmaps for up to `max_pairs` test pairs: each scene in order, each
/// class it contains from `classes`, with the first sampled query.
pub fn heatmap_study(
    det: &Detector,
    params: &ParamStore,
    scenes: &[Scene],
    pool: &QueryPool,
    classes: &[usize],
    max_pairs: usize,
) -> Result<Vec<HeatmapSample>> {
    let mut jobs = Vec::new();
    'outer: for s in scenes {
        for c in s.classes() {
            if !classes.contains(&c) || pool.for_class(c).is_empty() {
                continue;
            }
            if jobs.len() == max_pairs {
                break 'outer;
            }
            jobs.push((s, c));
        }
    }
    let size = det.config().image_size;
    jobs.par_iter()
        .map(|&(s, c)| {
            let q = test_query_sampler(pool.for_class(c), s.image_id, 1)[0];
            let inf = det.infer(params, &s.image, &q.patch)?;
            let boxes: Vec<BBox> = inf.proposals.iter().map(|p| p.bbox).collect();
            let map = proposal_heatmap(&boxes, size);
            Ok(HeatmapSample {
                image_id: s.image_id,
                class_id: c,
                mass_inside_gt: mass_inside(&map, &s.boxes_of(c)),
                map,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoExStats {
    /// Individual co-excitation vectors per class.
    pub samples: BTreeMap<usize, Vec<Vec<f64>>>,
    pub mean_w: BTreeMap<usize, Vec<f64>>,
    /// Classes in matrix order.
    pub classes: Vec<usize>,
    pub distance: Vec<Vec<f64>>,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

impl CoExStats {
    pub fn from_samples(samples: BTreeMap<usize, Vec<Vec<f64>>>) -> Self {
        let samples: BTreeMap<usize, Vec<Vec<f64>>> =
            samples.into_iter().filter(|(_, v)| !v.is_empty()).collect();
        let mean_w: BTreeMap<usize, Vec<f64>> = samples
            .iter()
            .map(|(&c, v)| {
                let n = v[0].len();
                let mut m = vec![0.0; n];
                for w in v {
                    for (a, x) in m.iter_mut().zip(w) {
                        *a += x;
                    }
                }
                m.iter_mut().for_each(|a| *a /= v.len() as f64);
                (c, m)
            })
            .collect();
        let classes: Vec<usize> = mean_w.keys().copied().collect();
        let distance = classes
            .iter()
            .map(|a| {
                classes
                    .iter()
                    .map(|b| euclidean(&mean_w[a], &mean_w[b]))
                    .collect()
            })
            .collect();
        Self {
            samples,
            mean_w,
            classes,
            distance,
        }
    }

    pub fn distance_csv(&self) -> String {
        let mut s = String::from("class");
        for c in &self.classes {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
        for (c, row) in self.classes.iter().zip(&self.distance) {
            s.push_str(&c.to_string());
            for d in row {
                s.push_str(&format!(",{d}"));
            }
            s.push('\n');
        }
        s
    }

    /// Distances between individual vectors: for each class pair, up to
    /// `per_class` samples of each side.
    pub fn probe_csv(&self, per_class: usize) -> String {
        let mut s = String::from("class_a,sample_a,class_b,sample_b,distance\n");
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i..] {
                for (ia, wa) in self.samples[a].iter().take(per_class).enumerate() {
                    for (ib, wb) in self.samples[b].iter().take(per_class).enumerate() {
                        if a == b && ib <= ia {
                            continue;
                        }
                        s.push_str(&format!("{a},{ia},{b},{ib},{}\n", euclidean(wa, wb)));
                    }
                }
            }
        }
        s
    }

    /// Mean class-pair distance grouped by the number of shared attribute
    /// values (index 0..=3); `None` for groups without pairs.
    pub fn distance_by_shared_attributes(&self, registry: &Registry) -> [Option<f64>; 4] {
        let mut sums = [(0.0, 0usize); 4];
        for (i, a) in self.classes.iter().enumerate() {
            for (j, b) in self.classes.iter().enumerate().skip(i + 1) {
                if let (Some(ca), Some(cb)) = (registry.class(*a), registry.class(*b)) {
                    let k = ca.shared_attributes(cb);
                    sums[k].0 += self.distance[i][j];
                    sums[k].1 += 1;
                }
            }
        }
        sums.map(|(s, n)| (n > 0).then(|| s / n as f64))
    }
}

/// Collects `w` for the first `n_queries` sampled queries of every class
/// in every scene that contains it.
pub fn coexcitation_analysis(
    det: &Detector,
    params: &ParamStore,
    scenes: &[Scene],
    pool: &QueryPool,
    classes: &[usize],
    n_queries: usize,
) -> Result<CoExStats> {
    if !det.config().use_co_excitation {
        return Err(Error::usage(
            "co-excitation analysis needs a model with co-excitation enabled",
        ));
    }
    let mut jobs = Vec::new();
    for s in scenes {
        for c in s.classes() {
            if !classes.contains(&c) {
                continue;
            }
            for q in test_query_sampler(pool.for_class(c), s.image_id, n_queries) {
                jobs.push((s, c, q));
            }
        }
    }
    let ws: Vec<Result<Option<Vec<f64>>>> = jobs
        .par_iter()
        .map(|&(s, _, q)| det.coexcitation(params, &s.image, &q.patch))
        .collect();
    let mut samples: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (&(_, c, _), w) in jobs.iter().zip(ws) {
        if let Some(w) = w? {
            samples.entry(c).or_default().push(w);
        }
    }
    for &c in classes {
        if !samples.contains_key(&c) {
            warn!("class {c} has no co-excitation samples; excluded");
        }
    }
    Ok(CoExStats::from_samples(samples))
}

/// Toggle tuple of one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationRow {
    pub co_attention: bool,
    pub co_excitation: bool,
    pub margin_loss: bool,
}

const fn row(co_attention: bool, co_excitation: bool, margin_loss: bool) -> AblationRow {
    AblationRow {
        co_attention,
        co_excitation,
        margin_loss,
    }
}

/// All on; no co-attention; no co-excitation; no margin loss; margin only.
pub const ABLATION_ROWS: [AblationRow; 5] = [
    row(true, true, true),
    row(false, true, true),
    row(true, false, true),
    row(true, true, false),
    row(false, false, true),
];

impl AblationRow {
    pub fn apply(&self, det: &DetectorConfig, tr: &TrainConfig) -> (DetectorConfig, TrainConfig) {
        let mut d = det.clone();
        d.use_co_attention = self.co_attention;
        d.use_co_excitation = self.co_excitation;
        let mut t = tr.clone();
        t.use_margin_loss = self.margin_loss;
        (d, t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub row: AblationRow,
    pub map_seen: f64,
    pub map_unseen: f64,
}

pub fn ablation_csv(rows: &[AblationResult]) -> String {
    let mut s = String::from("co_attention,co_excitation,margin_loss,mAP_seen,mAP_unseen\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            u8::from(r.row.co_attention),
            u8::from(r.row.co_excitation),
            u8::from(r.row.margin_loss),
            r.map_seen,
            r.map_unseen
        ));
    }
    s
}

/// Trains every row from the same init seed and evaluates both splits.
pub fn run_ablation(
    rows: &[AblationRow],
    det_cfg: &DetectorConfig,
    train_cfg: &TrainConfig,
    data: &Dataset,
) -> Result<Vec<AblationResult>> {
    rows.iter()
        .map(|r| {
            let (d, t) = r.apply(det_cfg, train_cfg);
            let out = train(&d, &t, data, None)?;
            let det = Detector::new(d)?;
            let seen = evaluate_split(&det, &out.params, data, ClassSet::Seen)?;
            let unseen = evaluate_split(&det, &out.params, data, ClassSet::Unseen)?;
            Ok(AblationResult {
                row: *r,
                map_seen: seen.map_seen.unwrap_or(0.0),
                map_unseen: unseen.map_unseen.unwrap_or(0.0),
            })
        })
        .collect()
}
