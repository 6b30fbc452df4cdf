//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, keys are `section.field`.
//! Unknown keys, duplicate keys and malformed values are errors carrying
//! the 1-based line number. [`RunConfig::to_text`] writes every key, so a
//! snapshot parses back to the same configuration.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::blocks::SceInput;
use crate::detector::{DetectorConfig, RpnTargets};
use crate::error::{Error, Result};
use crate::eval::QUERIES_PER_IMAGE;
use crate::synthdata::DataConfig;
use crate::train::TrainConfig;

/// Settings of the evaluation and analysis commands.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub queries_per_image: usize,
    pub heatmap_pairs: usize,
    /// Queries per (scene, class) fed to the co-excitation analysis.
    pub coex_queries: usize,
    /// Individual vectors per class written to the probe CSV.
    pub coex_probes: usize,
    /// Record unseen-class mAP after every training epoch.
    pub per_epoch: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            queries_per_image: QUERIES_PER_IMAGE,
            heatmap_pairs: 50,
            coex_queries: 1,
            coex_probes: 4,
            per_epoch: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub detector: DetectorConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn parse_num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>()
        .map_err(|e| format!("invalid value '{v}': {e}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got '{v}'")),
    }
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_num(x.trim())).collect()
}

fn list<T: Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Every key with its current value, in snapshot order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.detector;
        let a = &self.data;
        let s = &a.scene;
        let t = &self.train;
        let e = &self.eval;
        vec![
            ("detector.channels", d.channels.to_string()),
            ("detector.top_k", d.top_k.to_string()),
            ("detector.anchor_scales", list(&d.anchor_scales)),
            ("detector.anchor_ratios", list(&d.anchor_ratios)),
            ("detector.rpn_nms_iou", d.rpn_nms_iou.to_string()),
            ("detector.rpn_pos_iou", d.rpn_pos_iou.to_string()),
            ("detector.rpn_neg_iou", d.rpn_neg_iou.to_string()),
            ("detector.rpn_targets", d.rpn_targets.as_str().to_string()),
            ("detector.fg_iou", d.fg_iou.to_string()),
            ("detector.final_nms_iou", d.final_nms_iou.to_string()),
            ("detector.score_thresh", d.score_thresh.to_string()),
            ("detector.image_size", d.image_size.to_string()),
            ("detector.query_size", d.query_size.to_string()),
            ("detector.backbone_widths", list(&d.backbone_widths)),
            ("detector.backbone_strides", list(&d.backbone_strides)),
            ("detector.sce_reduction", d.sce_reduction.to_string()),
            ("detector.sce_input", d.sce_input.as_str().to_string()),
            ("detector.use_co_attention", d.use_co_attention.to_string()),
            (
                "detector.use_co_excitation",
                d.use_co_excitation.to_string(),
            ),
            ("data.num_classes", a.num_classes.to_string()),
            ("data.num_unseen", a.num_unseen.to_string()),
            ("data.registry_seed", a.registry_seed.to_string()),
            ("data.train_scenes", a.train_scenes.to_string()),
            ("data.query_scenes", a.query_scenes.to_string()),
            ("data.test_scenes", a.test_scenes.to_string()),
            ("data.query_size", a.query_size.to_string()),
            ("data.min_query_side", a.min_query_side.to_string()),
            ("data.pool_per_class", a.pool_per_class.to_string()),
            ("data.train_seen_only", a.train_seen_only.to_string()),
            ("scene.image_size", s.image_size.to_string()),
            ("scene.min_objects", s.min_objects.to_string()),
            ("scene.max_objects", s.max_objects.to_string()),
            ("scene.min_size", s.min_size.to_string()),
            ("scene.max_size", s.max_size.to_string()),
            ("scene.max_rotation", s.max_rotation.to_string()),
            ("scene.background", s.background.to_string()),
            ("scene.noise", s.noise.to_string()),
            ("scene.max_place_tries", s.max_place_tries.to_string()),
            ("scene.seed", s.seed.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.base_lr", t.base_lr.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.decay_factor", t.decay_factor.to_string()),
            ("train.decay_every_epochs", t.decay_every_epochs.to_string()),
            ("train.lambda_mr", t.lambda_mr.to_string()),
            ("train.use_margin_loss", t.use_margin_loss.to_string()),
            ("train.m_plus", t.margin.m_plus.to_string()),
            ("train.m_minus", t.margin.m_minus.to_string()),
            ("train.margin_normalize", t.margin.normalize.to_string()),
            ("train.gt_proposals", t.gt_proposals.to_string()),
            ("train.gt_jitter", t.gt_jitter.to_string()),
            ("train.distractor_jitter", t.distractor_jitter.to_string()),
            ("train.train_proposals", t.train_proposals.to_string()),
            ("train.roi_fg_fraction", t.roi_fg_fraction.to_string()),
            ("train.init_seed", t.init_seed.to_string()),
            ("train.data_seed", t.data_seed.to_string()),
            ("eval.queries_per_image", e.queries_per_image.to_string()),
            ("eval.heatmap_pairs", e.heatmap_pairs.to_string()),
            ("eval.coex_queries", e.coex_queries.to_string()),
            ("eval.coex_probes", e.coex_probes.to_string()),
            ("eval.per_epoch", e.per_epoch.to_string()),
        ]
    }

    /// Assigns one key; the error message lacks position information.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let d = &mut self.detector;
        let a = &mut self.data;
        let t = &mut self.train;
        let e = &mut self.eval;
        match key {
            "detector.channels" => d.channels = parse_num(v)?,
            "detector.top_k" => d.top_k = parse_num(v)?,
            "detector.anchor_scales" => d.anchor_scales = parse_list(v)?,
            "detector.anchor_ratios" => d.anchor_ratios = parse_list(v)?,
            "detector.rpn_nms_iou" => d.rpn_nms_iou = parse_num(v)?,
            "detector.rpn_pos_iou" => d.rpn_pos_iou = parse_num(v)?,
            "detector.rpn_neg_iou" => d.rpn_neg_iou = parse_num(v)?,
            "detector.rpn_targets" => {
                d.rpn_targets = RpnTargets::parse(v)
                    .ok_or_else(|| format!("expected query_class or all_seen, got '{v}'"))?
            }
            "detector.fg_iou" => d.fg_iou = parse_num(v)?,
            "detector.final_nms_iou" => d.final_nms_iou = parse_num(v)?,
            "detector.score_thresh" => d.score_thresh = parse_num(v)?,
            "detector.image_size" => d.image_size = parse_num(v)?,
            "detector.query_size" => d.query_size = parse_num(v)?,
            "detector.backbone_widths" => d.backbone_widths = parse_list(v)?,
            "detector.backbone_strides" => d.backbone_strides = parse_list(v)?,
            "detector.sce_reduction" => d.sce_reduction = parse_num(v)?,
            "detector.sce_input" => {
                d.sce_input = SceInput::parse(v)
                    .ok_or_else(|| format!("unknown co-excitation input '{v}'"))?
            }
            "detector.use_co_attention" => d.use_co_attention = parse_bool(v)?,
            "detector.use_co_excitation" => d.use_co_excitation = parse_bool(v)?,
            "data.num_classes" => a.num_classes = parse_num(v)?,
            "data.num_unseen" => a.num_unseen = parse_num(v)?,
            "data.registry_seed" => a.registry_seed = parse_num(v)?,
            "data.train_scenes" => a.train_scenes = parse_num(v)?,
            "data.query_scenes" => a.query_scenes = parse_num(v)?,
            "data.test_scenes" => a.test_scenes = parse_num(v)?,
            "data.query_size" => a.query_size = parse_num(v)?,
            "data.min_query_side" => a.min_query_side = parse_num(v)?,
            "data.pool_per_class" => a.pool_per_class = parse_num(v)?,
            "data.train_seen_only" => a.train_seen_only = parse_bool(v)?,
            "scene.image_size" => a.scene.image_size = parse_num(v)?,
            "scene.min_objects" => a.scene.min_objects = parse_num(v)?,
            "scene.max_objects" => a.scene.max_objects = parse_num(v)?,
            "scene.min_size" => a.scene.min_size = parse_num(v)?,
            "scene.max_size" => a.scene.max_size = parse_num(v)?,
            "scene.max_rotation" => a.scene.max_rotation = parse_num(v)?,
            "scene.background" => a.scene.background = parse_num(v)?,
            "scene.noise" => a.scene.noise = parse_num(v)?,
            "scene.max_place_tries" => a.scene.max_place_tries = parse_num(v)?,
            "scene.seed" => a.scene.seed = parse_num(v)?,
            "train.epochs" => t.epochs = parse_num(v)?,
            "train.batch_size" => t.batch_size = parse_num(v)?,
            "train.base_lr" => t.base_lr = parse_num(v)?,
            "train.momentum" => t.momentum = parse_num(v)?,
            "train.decay_factor" => t.decay_factor = parse_num(v)?,
            "train.decay_every_epochs" => t.decay_every_epochs = parse_num(v)?,
            "train.lambda_mr" => t.lambda_mr = parse_num(v)?,
            "train.use_margin_loss" => t.use_margin_loss = parse_bool(v)?,
            "train.m_plus" => t.margin.m_plus = parse_num(v)?,
            "train.m_minus" => t.margin.m_minus = parse_num(v)?,
            "train.margin_normalize" => t.margin.normalize = parse_bool(v)?,
            "train.gt_proposals" => t.gt_proposals = parse_bool(v)?,
            "train.gt_jitter" => t.gt_jitter = parse_num(v)?,
            "train.distractor_jitter" => t.distractor_jitter = parse_num(v)?,
            "train.train_proposals" => t.train_proposals = parse_num(v)?,
            "train.roi_fg_fraction" => t.roi_fg_fraction = parse_num(v)?,
            "train.init_seed" => t.init_seed = parse_num(v)?,
            "train.data_seed" => t.data_seed = parse_num(v)?,
            "eval.queries_per_image" => e.queries_per_image = parse_num(v)?,
            "eval.heatmap_pairs" => e.heatmap_pairs = parse_num(v)?,
            "eval.coex_queries" => e.coex_queries = parse_num(v)?,
            "eval.coex_probes" => e.coex_probes = parse_num(v)?,
            "eval.per_epoch" => e.per_epoch = parse_bool(v)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Applies `text` on top of `self`. `origin` names the source in errors.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(err(format!("duplicate key '{k}'")));
            }
            self.set(k, v).map_err(err)?;
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text, origin)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override; `origin` names it in errors.
    pub fn apply_override(&mut self, kv: &str, origin: &str) -> Result<()> {
        let err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: 1,
            msg,
        };
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| err(format!("expected KEY=VALUE, got '{kv}'")))?;
        self.set(k.trim(), v).map_err(err)
    }

    /// Keeps the detector and data geometry consistent, then validates.
    pub fn validate(&self) -> Result<()> {
        if self.detector.image_size != self.data.scene.image_size {
            return Err(Error::config(format!(
                "detector.image_size {} differs from scene.image_size {}",
                self.detector.image_size, self.data.scene.image_size
            )));
        }
        if self.detector.query_size != self.data.query_size {
            return Err(Error::config(format!(
                "detector.query_size {} differs from data.query_size {}",
                self.detector.query_size, self.data.query_size
            )));
        }
        if self.eval.queries_per_image == 0 {
            return Err(Error::config("eval.queries_per_image must be at least 1"));
        }
        self.detector.validate()?;
        self.data.validate()?;
        self.train.validate()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }
}
