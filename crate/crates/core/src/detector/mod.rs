//! The two-stage one-shot detector: shared conv backbone, co-attention,
//! RPN over the extended target features, top-K proposal selection,
//! co-excitation, cropped-GAP proposal features and the ranking head.

mod geometry;

pub use geometry::{
    decode, encode, generate_anchors, iou, nms, order_by_score, BBox, MAX_LOG_SCALE,
};

use crate::blocks::{
    co_attention_extend, query_embedding, squeeze_co_excitation, NonLocalParams, SceInput,
    SceParams,
};
use crate::error::{Error, Result};
use crate::nn::{dense, init_bias, init_weight, BoundParams, Init};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Hidden width of the ranking MLP (`2N → 8 → 2`).
/// Pixel normalization applied before the backbone.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

pub const RANKING_HIDDEN: usize = 8;

/// Which ground-truth boxes the RPN objectness is trained against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RpnTargets {
    /// Boxes of the query's class only.
    #[default]
    QueryClass,
    /// Every seen-class box in the target image.
    AllSeen,
}

impl RpnTargets {
    pub fn as_str(self) -> &'static str {
        match self {
            RpnTargets::QueryClass => "query_class",
            RpnTargets::AllSeen => "all_seen",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "query_class" => Some(RpnTargets::QueryClass),
            "all_seen" => Some(RpnTargets::AllSeen),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Channel count `N` of every feature map after the backbone.
    pub channels: usize,
    /// Proposals kept per pair (`K`).
    pub top_k: usize,
    pub anchor_scales: Vec<f64>,
    /// Height / width.
    pub anchor_ratios: Vec<f64>,
    pub rpn_nms_iou: f64,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_targets: RpnTargets,
    /// A proposal is foreground iff its IoU with a gt box exceeds this.
    pub fg_iou: f64,
    pub final_nms_iou: f64,
    pub score_thresh: f64,
    pub image_size: usize,
    pub query_size: usize,
    /// Output widths of all backbone stages but the last (which is `N`).
    pub backbone_widths: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub sce_reduction: usize,
    pub sce_input: SceInput,
    pub use_co_attention: bool,
    pub use_co_excitation: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            top_k: 128,
            anchor_scales: vec![12.0, 20.0, 28.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            rpn_nms_iou: 0.7,
            rpn_pos_iou: 0.5,
            rpn_neg_iou: 0.3,
            rpn_targets: RpnTargets::QueryClass,
            fg_iou: 0.5,
            final_nms_iou: 0.5,
            score_thresh: 0.05,
            image_size: 64,
            query_size: 32,
            backbone_widths: vec![16, 32, 32],
            backbone_strides: vec![2, 2, 2, 1],
            sce_reduction: 4,
            sce_input: SceInput::Query,
            use_co_attention: true,
            use_co_excitation: true,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if !(self.fg_iou > 0.0 && self.fg_iou < 1.0) {
            return bad(format!("fg_iou must be in (0,1), got {}", self.fg_iou));
        }
        if self.channels < 2 || !self.channels.is_multiple_of(2) {
            return bad(format!(
                "channels must be even and >= 2, got {}",
                self.channels
            ));
        }
        if self.sce_reduction == 0 || !self.channels.is_multiple_of(self.sce_reduction) {
            return bad(format!(
                "reduction ratio {} does not divide {} channels",
                self.sce_reduction, self.channels
            ));
        }
        if self.backbone_strides.len() != self.backbone_widths.len() + 1 {
            return bad("backbone needs one more stride than intermediate widths".into());
        }
        if self.backbone_strides.contains(&0) || self.backbone_widths.contains(&0) {
            return bad("backbone strides and widths must be positive".into());
        }
        let stride = self.feature_stride();
        if !self.image_size.is_multiple_of(stride) || !self.query_size.is_multiple_of(stride) {
            return bad(format!(
                "image ({}) and query ({}) sizes must be multiples of the feature stride {stride}",
                self.image_size, self.query_size
            ));
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return bad("at least one anchor scale and ratio required".into());
        }
        if self
            .anchor_scales
            .iter()
            .chain(&self.anchor_ratios)
            .any(|&v| !(v > 0.0))
        {
            return bad("anchor scales and ratios must be positive".into());
        }
        for (k, v) in [
            ("rpn_nms_iou", self.rpn_nms_iou),
            ("final_nms_iou", self.final_nms_iou),
            ("rpn_pos_iou", self.rpn_pos_iou),
            ("rpn_neg_iou", self.rpn_neg_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{k} must be in [0,1], got {v}"));
            }
        }
        Ok(())
    }

    pub fn feature_stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    pub label: Option<u8>,
    pub feature: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

/// Decodes every anchor, clamps to the image, runs greedy NMS in
/// objectness order and keeps the best `k`; pads by repeating the last
/// survivor so exactly `k` proposals come back.
pub fn decode_and_select(
    anchors: &[BBox],
    objectness: &[f64],
    deltas: &[[f64; 4]],
    k: usize,
    nms_iou: f64,
    image_size: f64,
) -> Result<Vec<Proposal>> {
    if anchors.is_empty() {
        return Err(Error::usage("decode_and_select: no anchors"));
    }
    if objectness.len() != anchors.len() || deltas.len() != anchors.len() {
        return Err(Error::dim(format!(
            "decode_and_select: {} anchors, {} scores, {} deltas",
            anchors.len(),
            objectness.len(),
            deltas.len()
        )));
    }
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut scores = Vec::with_capacity(anchors.len());
    for ((a, d), &s) in anchors.iter().zip(deltas).zip(objectness) {
        if let Some(b) = decode(a, d).clamp(image_size, image_size, 1e-3) {
            boxes.push(b);
            scores.push(s);
        }
    }
    if boxes.is_empty() {
        return Err(Error::usage(
            "decode_and_select: every decoded box fell outside the image",
        ));
    }
    let order = order_by_score(&scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut kept: Vec<usize> = Vec::with_capacity(k);
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        if kept.len() == k {
            break;
        }
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > nms_iou {
                suppressed[j] = true;
            }
        }
    }
    let mut out: Vec<Proposal> = kept
        .iter()
        .map(|&i| Proposal {
            bbox: boxes[i],
            objectness: scores[i],
            label: None,
            feature: None,
        })
        .collect();
    while out.len() < k {
        let last = out.last().expect("at least one survivor").clone();
        out.push(last);
    }
    Ok(out)
}

/// `y = 1` iff the best IoU with any gt box is strictly above `thresh`.
pub fn label_proposals(proposals: &mut [Proposal], gt: &[BBox], thresh: f64) -> Vec<u8> {
    if gt.is_empty() {
        log::warn!("label_proposals: no ground-truth boxes; every proposal is background");
    }
    proposals
        .iter_mut()
        .map(|p| {
            let best = gt.iter().map(|g| iou(&p.bbox, g)).fold(0.0, f64::max);
            let y = u8::from(best > thresh);
            p.label = Some(y);
            y
        })
        .collect()
}

/// Index of the gt box with the highest IoU, if any overlaps at all.
pub fn best_match(b: &BBox, gt: &[BBox]) -> Option<(usize, f64)> {
    gt.iter()
        .enumerate()
        .map(|(i, g)| (i, iou(b, g)))
        .filter(|&(_, v)| v > 0.0)
        .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
            Some((_, bv)) if bv >= v => acc,
            _ => Some((i, v)),
        })
}

/// RPN training assignment for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Positive { gt: usize },
    Negative,
    Ignore,
}

/// Positive at IoU ≥ `pos` (plus the best anchor of every gt box),
/// negative below `neg`, ignored in between.
pub fn assign_anchors(anchors: &[BBox], gt: &[BBox], pos: f64, neg: f64) -> Vec<AnchorLabel> {
    let mut labels: Vec<AnchorLabel> = anchors
        .iter()
        .map(|a| match best_match(a, gt) {
            Some((g, v)) if v >= pos => AnchorLabel::Positive { gt: g },
            Some((_, v)) if v >= neg => AnchorLabel::Ignore,
            _ => AnchorLabel::Negative,
        })
        .collect();
    for (g, gb) in gt.iter().enumerate() {
        let best = anchors
            .iter()
            .enumerate()
            .map(|(i, a)| (i, iou(a, gb)))
            .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best.1 > 0.0 {
            labels[best.0] = AnchorLabel::Positive { gt: g };
        }
    }
    labels
}

/// Feature cells `[x0, x1) × [y0, y1)` covered by `b`: divide by the
/// stride, round outward, clamp, and keep at least one cell.
pub fn roi_cells(
    b: &BBox,
    stride: f64,
    feat_w: usize,
    feat_h: usize,
) -> (usize, usize, usize, usize) {
    let span = |lo: f64, hi: f64, n: usize| {
        let start = ((lo / stride).floor().max(0.0) as usize).min(n - 1);
        let end = ((hi / stride).ceil().max(0.0) as usize).clamp(start + 1, n);
        (start, end)
    };
    let (x0, x1) = span(b.x1, b.x2, feat_w);
    let (y0, y1) = span(b.y1, b.y2, feat_h);
    (x0, y0, x1, y1)
}

/// Proposal feature `r`: spatial mean of the cells of an `N×H×W` map
/// covered by `b`.
pub fn roi_gap(tape: &mut Tape, map: Var, b: &BBox, stride: f64) -> Result<Var> {
    let s = tape.value(map).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::dim(format!(
            "roi_gap: feature map must be N×H×W, got {s:?}"
        )));
    }
    let (x0, y0, x1, y1) = roi_cells(b, stride, s[2], s[1]);
    let crop = tape.crop(map, &[0, y0, x0], &[s[0], y1 - y0, x1 - x0])?;
    tape.global_avg_pool(crop)
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
    pub reg_w: Var,
    pub reg_b: Var,
}

impl HeadParams {
    pub fn from_bound(p: &BoundParams) -> Result<Self> {
        Ok(Self {
            fc1_w: p.get("head.fc1.weight")?,
            fc1_b: p.get("head.fc1.bias")?,
            fc2_w: p.get("head.fc2.weight")?,
            fc2_b: p.get("head.fc2.bias")?,
            reg_w: p.get("head.reg.weight")?,
            reg_b: p.get("head.reg.bias")?,
        })
    }
}

/// Ranking head outputs for `K` proposals.
pub struct HeadOutput {
    /// `K×2` logits, column 1 is foreground.
    pub logits: Var,
    /// Foreground probabilities, length `K`.
    pub scores: Var,
    /// `K×4` box refinements.
    pub deltas: Var,
}

/// Scores `K` proposal features (columns of the `N×K` matrix `r`) against
/// the query embedding `q` through `x = [r; q]`, the `2N → 8 → 2` MLP
/// with a two-way softmax, and a `2N → 4` box regressor.
pub fn head_forward(tape: &mut Tape, r: Var, q: Var, p: &HeadParams) -> Result<HeadOutput> {
    let rs = tape.value(r).shape().to_vec();
    let n = tape.value(q).numel();
    if rs.len() != 2 || rs[0] != n {
        return Err(Error::dim(format!(
            "head: proposal features {rs:?} do not match query length {n}"
        )));
    }
    let k = rs[1];
    let qcol = tape.reshape(q, &[n, 1])?;
    let ones = tape.constant(Tensor::ones(&[1, k]))?;
    let qrep = tape.matmul(qcol, ones)?;
    let x = tape.concat(&[r, qrep], 0)?;
    let h = dense(tape, p.fc1_w, p.fc1_b, x)?;
    let h = tape.relu(h)?;
    let z = dense(tape, p.fc2_w, p.fc2_b, h)?;
    let probs = tape.softmax(z, 0)?;
    let fg = tape.crop(probs, &[1, 0], &[1, k])?;
    let scores = tape.reshape(fg, &[k])?;
    let logits = tape.transpose(z)?;
    let d = dense(tape, p.reg_w, p.reg_b, x)?;
    let deltas = tape.transpose(d)?;
    Ok(HeadOutput {
        logits,
        scores,
        deltas,
    })
}

/// Backbone and (optionally) co-attended features of one pair.
pub struct Features {
    pub phi_i: Var,
    pub phi_p: Var,
    pub fi: Var,
    pub fp: Var,
}

pub struct RpnOutput {
    /// Objectness logits, one per anchor.
    pub logits: Var,
    /// `(L·A)×4` deltas.
    pub deltas: Var,
}

pub struct SecondStage {
    pub w: Option<Var>,
    pub q: Var,
    pub head: HeadOutput,
}

/// Everything a forward pass produces at inference time.
#[derive(Debug, Clone)]
pub struct Inference {
    pub detections: Vec<Detection>,
    pub proposals: Vec<Proposal>,
    pub coexcitation: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Detector {
    cfg: DetectorConfig,
    anchors: Vec<BBox>,
    feat: usize,
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let stride = cfg.feature_stride();
        let feat = cfg.image_size / stride;
        let anchors = generate_anchors(
            feat,
            feat,
            stride as f64,
            &cfg.anchor_scales,
            &cfg.anchor_ratios,
        );
        Ok(Self { cfg, anchors, feat })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    pub fn stride(&self) -> f64 {
        self.cfg.feature_stride() as f64
    }

    /// Side length of the target feature map.
    pub fn feature_size(&self) -> usize {
        self.feat
    }

    /// Fresh parameters; every tensor is seeded from `(seed, name)` so the
    /// toggles only add or remove their own blocks.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let c = &self.cfg;
        let n = c.channels;
        let mut store = ParamStore::new();
        let mut in_ch = 3;
        let widths: Vec<usize> = c.backbone_widths.iter().copied().chain([n]).collect();
        for (i, &w) in widths.iter().enumerate() {
            let name = format!("backbone.conv{}", i + 1);
            init_weight(
                &mut store,
                &format!("{name}.weight"),
                &[w, in_ch, 3, 3],
                in_ch * 9,
                Init::HeUniform,
                seed,
            );
            init_bias(&mut store, &format!("{name}.bias"), w);
            in_ch = w;
        }
        if c.use_co_attention {
            NonLocalParams::init(&mut store, "nonlocal_ip", n, seed)?;
            NonLocalParams::init(&mut store, "nonlocal_pi", n, seed)?;
        }
        if c.use_co_excitation {
            SceParams::init(&mut store, "sce", n, c.sce_reduction, c.sce_input, seed)?;
        }
        let a = c.anchors_per_cell();
        init_weight(
            &mut store,
            "rpn.conv.weight",
            &[n, n, 3, 3],
            n * 9,
            Init::HeUniform,
            seed,
        );
        init_bias(&mut store, "rpn.conv.bias", n);
        init_weight(
            &mut store,
            "rpn.cls.weight",
            &[a, n, 1, 1],
            n,
            Init::LecunUniform,
            seed,
        );
        init_bias(&mut store, "rpn.cls.bias", a);
        init_weight(
            &mut store,
            "rpn.reg.weight",
            &[4 * a, n, 1, 1],
            n,
            Init::LecunUniform,
            seed,
        );
        init_bias(&mut store, "rpn.reg.bias", 4 * a);
        init_weight(
            &mut store,
            "head.fc1.weight",
            &[RANKING_HIDDEN, 2 * n],
            2 * n,
            Init::HeUniform,
            seed,
        );
        init_bias(&mut store, "head.fc1.bias", RANKING_HIDDEN);
        init_weight(
            &mut store,
            "head.fc2.weight",
            &[2, RANKING_HIDDEN],
            RANKING_HIDDEN,
            Init::LecunUniform,
            seed,
        );
        init_bias(&mut store, "head.fc2.bias", 2);
        init_weight(
            &mut store,
            "head.reg.weight",
            &[4, 2 * n],
            2 * n,
            Init::Zeros,
            seed,
        );
        init_bias(&mut store, "head.reg.bias", 4);
        Ok(store)
    }

    /// Conv stack: 3×3 convolutions with padding 1, relu after each.
    pub fn backbone(&self, tape: &mut Tape, p: &BoundParams, image: Var) -> Result<Var> {
        let s = tape.value(image).shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::dim(format!(
                "backbone expects a 3×H×W image, got {s:?}"
            )));
        }
        let mut x = tape.affine(image, 1.0 / INPUT_STD, -INPUT_MEAN / INPUT_STD)?;
        for (i, &stride) in self.cfg.backbone_strides.iter().enumerate() {
            let name = format!("backbone.conv{}", i + 1);
            let w = p.get(&format!("{name}.weight"))?;
            let b = p.get(&format!("{name}.bias"))?;
            x = tape.conv2d(x, w, Some(b), stride, 1)?;
            x = tape.relu(x)?;
        }
        Ok(x)
    }

    pub fn features(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        image: Var,
        query: Var,
    ) -> Result<Features> {
        let phi_i = self.backbone(tape, p, image)?;
        let phi_p = self.backbone(tape, p, query)?;
        let (fi, fp) = if self.cfg.use_co_attention {
            let ip = NonLocalParams::from_bound(p, "nonlocal_ip")?;
            let pi = NonLocalParams::from_bound(p, "nonlocal_pi")?;
            co_attention_extend(tape, phi_i, phi_p, &ip, &pi)?
        } else {
            (phi_i, phi_p)
        };
        Ok(Features {
            phi_i,
            phi_p,
            fi,
            fp,
        })
    }

    /// 3×3 conv + relu, then 1×1 objectness and box heads, reordered so
    /// that row `(y·W + x)·A + a` belongs to anchor `a` of cell `(x, y)`.
    pub fn rpn(&self, tape: &mut Tape, p: &BoundParams, fi: Var) -> Result<RpnOutput> {
        let s = tape.value(fi).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!("rpn: expected an N×H×W map, got {s:?}")));
        }
        let cells = s[1] * s[2];
        let a = self.cfg.anchors_per_cell();
        if cells * a != self.anchors.len() {
            return Err(Error::dim(format!(
                "rpn: {} anchors but the map has {cells} cells × {a}",
                self.anchors.len()
            )));
        }
        let h = tape.conv2d(
            fi,
            p.get("rpn.conv.weight")?,
            Some(p.get("rpn.conv.bias")?),
            1,
            1,
        )?;
        let h = tape.relu(h)?;
        let cls = tape.conv2d(
            h,
            p.get("rpn.cls.weight")?,
            Some(p.get("rpn.cls.bias")?),
            1,
            0,
        )?;
        let reg = tape.conv2d(
            h,
            p.get("rpn.reg.weight")?,
            Some(p.get("rpn.reg.bias")?),
            1,
            0,
        )?;
        let cls = tape.reshape(cls, &[a, cells])?;
        let cls = tape.transpose(cls)?;
        let logits = tape.reshape(cls, &[cells * a])?;
        let reg = tape.reshape(reg, &[4 * a, cells])?;
        let reg = tape.transpose(reg)?;
        let deltas = tape.reshape(reg, &[cells * a, 4])?;
        Ok(RpnOutput { logits, deltas })
    }

    /// Top-K proposals from the current RPN values (not differentiated).
    pub fn proposals(&self, tape: &Tape, rpn: &RpnOutput) -> Result<Vec<Proposal>> {
        self.proposals_top(tape, rpn, self.cfg.top_k)
    }

    pub fn proposals_top(&self, tape: &Tape, rpn: &RpnOutput, k: usize) -> Result<Vec<Proposal>> {
        let logits = tape.value(rpn.logits).data();
        let obj: Vec<f64> = logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        let deltas: Vec<[f64; 4]> = tape
            .value(rpn.deltas)
            .data()
            .chunks(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        decode_and_select(
            &self.anchors,
            &obj,
            &deltas,
            k,
            self.cfg.rpn_nms_iou,
            self.cfg.image_size as f64,
        )
    }

    /// Co-excitation (if enabled), query embedding, proposal features and
    /// the ranking head.
    pub fn second_stage(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        f: &Features,
        boxes: &[BBox],
    ) -> Result<SecondStage> {
        let (w, fp_t, fi_t) = if self.cfg.use_co_excitation {
            let sp = SceParams::from_bound(p, "sce", self.cfg.sce_input)?;
            let ce = squeeze_co_excitation(tape, f.fp, f.fi, &sp)?;
            (Some(ce.w), ce.fp_tilde, ce.fi_tilde)
        } else {
            (None, f.fp, f.fi)
        };
        let q = query_embedding(tape, fp_t)?;
        let n = self.cfg.channels;
        let mut cols = Vec::with_capacity(boxes.len());
        for b in boxes {
            let r = roi_gap(tape, fi_t, b, self.stride())?;
            cols.push(tape.reshape(r, &[n, 1])?);
        }
        let r = tape.concat(&cols, 1)?;
        let head = head_forward(tape, r, q, &HeadParams::from_bound(p)?)?;
        Ok(SecondStage { w, q, head })
    }

    fn check_inputs(&self, image: &Tensor, query: &Tensor) -> Result<()> {
        let s = self.cfg.image_size;
        let q = self.cfg.query_size;
        if image.shape() != [3, s, s] {
            return Err(Error::dim(format!(
                "image must be 3×{s}×{s}, got {:?}",
                image.shape()
            )));
        }
        if query.shape() != [3, q, q] {
            return Err(Error::dim(format!(
                "query must be 3×{q}×{q}, got {:?}",
                query.shape()
            )));
        }
        Ok(())
    }

    /// Full inference pass.
    pub fn infer(&self, params: &ParamStore, image: &Tensor, query: &Tensor) -> Result<Inference> {
        self.check_inputs(image, query)?;
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, params, false)?;
        let iv = tape.constant(image.clone())?;
        let qv = tape.constant(query.clone())?;
        let f = self.features(&mut tape, &p, iv, qv)?;
        let rpn = self.rpn(&mut tape, &p, f.fi)?;
        let proposals = self.proposals(&tape, &rpn)?;
        let boxes: Vec<BBox> = proposals.iter().map(|pr| pr.bbox).collect();
        let st = self.second_stage(&mut tape, &p, &f, &boxes)?;
        let scores = tape.value(st.head.scores).data().to_vec();
        let deltas = tape.value(st.head.deltas).data().to_vec();
        let size = self.cfg.image_size as f64;
        let mut cand_boxes = Vec::new();
        let mut cand_scores = Vec::new();
        for (i, pr) in proposals.iter().enumerate() {
            if scores[i] < self.cfg.score_thresh {
                continue;
            }
            let d = [
                deltas[4 * i],
                deltas[4 * i + 1],
                deltas[4 * i + 2],
                deltas[4 * i + 3],
            ];
            let b = decode(&pr.bbox, &d)
                .clamp(size, size, 1e-3)
                .unwrap_or(pr.bbox);
            cand_boxes.push(b);
            cand_scores.push(scores[i]);
        }
        let detections = nms(&cand_boxes, &cand_scores, self.cfg.final_nms_iou)
            .into_iter()
            .map(|i| Detection {
                bbox: cand_boxes[i],
                score: cand_scores[i],
            })
            .collect();
        let coexcitation = st.w.map(|w| tape.value(w).data().to_vec());
        Ok(Inference {
            detections,
            proposals,
            coexcitation,
        })
    }

    /// Co-excitation vector `w` of a pair; `None` when the block is off.
    pub fn coexcitation(
        &self,
        params: &ParamStore,
        image: &Tensor,
        query: &Tensor,
    ) -> Result<Option<Vec<f64>>> {
        self.check_inputs(image, query)?;
        if !self.cfg.use_co_excitation {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, params, false)?;
        let iv = tape.constant(image.clone())?;
        let qv = tape.constant(query.clone())?;
        let f = self.features(&mut tape, &p, iv, qv)?;
        let sp = SceParams::from_bound(&p, "sce", self.cfg.sce_input)?;
        let ce = squeeze_co_excitation(&mut tape, f.fp, f.fi, &sp)?;
        Ok(Some(tape.value(ce.w).data().to_vec()))
    }

    /// Ranked detections for the query's class, best first.
    pub fn detect(
        &self,
        params: &ParamStore,
        image: &Tensor,
        query: &Tensor,
    ) -> Result<Vec<Detection>> {
        Ok(self.infer(params, image, query)?.detections)
    }
}
