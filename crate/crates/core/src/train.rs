//! SGD training of the detector on sampled query/target pairs.

use std::collections::BTreeMap;
use std::path::PathBuf;

use log::{debug, info};
use rayon::prelude::*;

use crate::detector::{
    assign_anchors, iou, label_proposals, BBox, Detector, DetectorConfig, Proposal, RpnTargets,
};
use crate::error::{Error, Result};
use crate::losses::{
    box_regression_loss, detection_ce_loss, margin_ranking_loss_var, regression_targets,
    rpn_box_loss, rpn_objectness_loss, LossComponents, MarginConfig,
};
use crate::nn::BoundParams;
use crate::rng::{mix, XorShift64Star};
use crate::synthdata::{sample_training_pair, Dataset, QueryTargetPair, SplitSpec};
use crate::tensor::{save_checkpoint, sgd_step, OptimizerState, ParamStore, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub lambda_mr: f64,
    pub use_margin_loss: bool,
    pub margin: MarginConfig,
    /// Add the gt boxes to the proposal pool during training.
    pub gt_proposals: bool,
    /// Jittered copies of every gt box added to the pool (IoU above the
    /// foreground threshold with their source box).
    pub gt_jitter: usize,
    /// Jittered copies of every other-class object, sampled as background
    /// ahead of the rest of the pool.
    pub distractor_jitter: usize,
    /// Proposals kept from the RPN before RoI sampling.
    pub train_proposals: usize,
    /// Upper bound on the foreground share of the `K` sampled RoIs.
    pub roi_fg_fraction: f64,
    pub init_seed: u64,
    pub data_seed: u64,
    /// Directory receiving `epoch_{n}.ckpt` after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            base_lr: 0.01,
            momentum: 0.9,
            decay_factor: 0.1,
            decay_every_epochs: 4,
            lambda_mr: 3.0,
            use_margin_loss: true,
            margin: MarginConfig {
                normalize: true,
                ..MarginConfig::default()
            },
            gt_proposals: true,
            gt_jitter: 16,
            distractor_jitter: 4,
            train_proposals: 512,
            roi_fg_fraction: 0.25,
            init_seed: 0,
            data_seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every_epochs == 0 {
            return Err(Error::config(
                "epochs, batch size and decay interval must be positive",
            ));
        }
        if !(self.base_lr > 0.0 && self.decay_factor > 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::config(format!(
                "rates must be positive and momentum in [0,1): lr={} decay={} momentum={}",
                self.base_lr, self.decay_factor, self.momentum
            )));
        }
        if self.train_proposals == 0 || !(0.0..=1.0).contains(&self.roi_fg_fraction) {
            return Err(Error::config(format!(
                "train_proposals must be positive and the foreground fraction in [0,1], got {} and {}",
                self.train_proposals, self.roi_fg_fraction
            )));
        }
        if !(self.lambda_mr >= 0.0) {
            return Err(Error::config(format!(
                "lambda must be nonnegative, got {}",
                self.lambda_mr
            )));
        }
        self.margin.validate()
    }

    /// Margin weight actually applied.
    pub fn effective_lambda(&self) -> f64 {
        if self.use_margin_loss {
            self.lambda_mr
        } else {
            0.0
        }
    }

    pub fn optimizer(&self) -> Result<OptimizerState> {
        OptimizerState::new(
            self.base_lr,
            self.momentum,
            self.decay_factor,
            self.decay_every_epochs,
        )
    }
}

/// Losses and parameter gradients of one pair.
#[derive(Debug, Clone)]
pub struct PairGradients {
    pub losses: LossComponents,
    pub grads: BTreeMap<String, Tensor>,
}

fn rpn_gt(pair: &QueryTargetPair, split: &SplitSpec, targets: RpnTargets) -> Vec<BBox> {
    match targets {
        RpnTargets::QueryClass => pair.gt_boxes.clone(),
        RpnTargets::AllSeen => pair
            .scene
            .annotations
            .iter()
            .filter(|a| split.is_seen(a.class_id))
            .map(|a| a.bbox)
            .collect(),
    }
}

/// Random shift and rescale of `g` with IoU above `min_iou`, clamped to
/// the image; `None` after a bounded number of rejected draws.
pub fn jitter_box(
    g: &BBox,
    min_iou: f64,
    image_size: f64,
    rng: &mut XorShift64Star,
) -> Option<BBox> {
    for _ in 0..16 {
        let (cx, cy) = g.center();
        let w = g.width() * rng.uniform(-0.2, 0.2).exp();
        let h = g.height() * rng.uniform(-0.2, 0.2).exp();
        let cx = cx + rng.uniform(-0.15, 0.15) * g.width();
        let cy = cy + rng.uniform(-0.15, 0.15) * g.height();
        let b = BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
            .ok()
            .and_then(|b| b.clamp(image_size, image_size, 1.0));
        if let Some(b) = b {
            if iou(&b, g) > min_iou {
                return Some(b);
            }
        }
    }
    None
}

/// Draws up to `k` RoIs from the pool: at most `fg_fraction·k` foreground
/// (IoU above `fg_iou`), the rest background with the `priority`
/// background boxes first, each group sampled in a seeded order.
pub fn sample_rois(
    pool: Vec<Proposal>,
    priority: Vec<Proposal>,
    gt: &[BBox],
    k: usize,
    fg_fraction: f64,
    fg_iou: f64,
    seed: u64,
) -> Vec<Proposal> {
    let (mut fg, mut bg): (Vec<Proposal>, Vec<Proposal>) = pool
        .into_iter()
        .partition(|p| gt.iter().any(|g| iou(&p.bbox, g) > fg_iou));
    let mut rng = XorShift64Star::new(seed);
    rng.shuffle(&mut fg);
    rng.shuffle(&mut bg);
    let n_fg = fg.len().min((fg_fraction * k as f64).floor() as usize);
    fg.truncate(n_fg);
    let mut out = fg;
    out.extend(priority.into_iter().chain(bg).take(k - n_fg));
    out
}

/// Forward and backward pass for one pair without touching `params`.
pub fn pair_gradients(
    det: &Detector,
    params: &ParamStore,
    pair: &QueryTargetPair,
    split: &SplitSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<PairGradients> {
    if pair.gt_boxes.is_empty() {
        return Err(Error::usage(format!(
            "pair from scene {} has no gt boxes",
            pair.scene.image_id
        )));
    }
    let dc = det.config();
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, params, true)?;
    let image = tape.constant(pair.scene.image.clone())?;
    let query = tape.constant(pair.query.patch.clone())?;
    let f = det.features(&mut tape, &p, image, query)?;
    let rpn = det.rpn(&mut tape, &p, f.fi)?;

    let gt_rpn = rpn_gt(pair, split, dc.rpn_targets);
    let anchor_labels = assign_anchors(det.anchors(), &gt_rpn, dc.rpn_pos_iou, dc.rpn_neg_iou);
    let l_rpn_cls = rpn_objectness_loss(&mut tape, rpn.logits, &anchor_labels)?;
    let l_rpn_reg = rpn_box_loss(
        &mut tape,
        rpn.deltas,
        det.anchors(),
        &anchor_labels,
        &gt_rpn,
    )?;

    let mut pool: Vec<Proposal> = det.proposals_top(&tape, &rpn, cfg.train_proposals)?;
    pool.dedup_by(|a, b| a.bbox == b.bbox);
    if cfg.gt_proposals {
        pool.extend(pair.gt_boxes.iter().map(|&bbox| Proposal {
            bbox,
            objectness: 1.0,
            label: None,
            feature: None,
        }));
    }
    let mut rng = XorShift64Star::new(mix(seed, 1));
    let jittered = |boxes: &[BBox], n: usize, rng: &mut XorShift64Star| {
        let mut out = Vec::new();
        for g in boxes {
            for _ in 0..n {
                if let Some(bbox) = jitter_box(g, dc.fg_iou, dc.image_size as f64, rng) {
                    out.push(Proposal {
                        bbox,
                        objectness: 1.0,
                        label: None,
                        feature: None,
                    });
                }
            }
        }
        out
    };
    pool.extend(jittered(&pair.gt_boxes, cfg.gt_jitter, &mut rng));
    let others: Vec<BBox> = pair
        .scene
        .annotations
        .iter()
        .filter(|a| a.class_id != pair.query_class)
        .map(|a| a.bbox)
        .collect();
    let priority: Vec<Proposal> = jittered(&others, cfg.distractor_jitter, &mut rng)
        .into_iter()
        .filter(|p| pair.gt_boxes.iter().all(|g| iou(&p.bbox, g) <= dc.fg_iou))
        .collect();
    let mut proposals = sample_rois(
        pool,
        priority,
        &pair.gt_boxes,
        dc.top_k,
        cfg.roi_fg_fraction,
        dc.fg_iou,
        seed,
    );
    let labels = label_proposals(&mut proposals, &pair.gt_boxes, dc.fg_iou);
    let boxes: Vec<BBox> = proposals.iter().map(|pr| pr.bbox).collect();
    let st = det.second_stage(&mut tape, &p, &f, &boxes)?;

    let l_ce = detection_ce_loss(&mut tape, st.head.logits, &labels)?;
    let targets = regression_targets(&boxes, &pair.gt_boxes, &labels);
    let l_reg = box_regression_loss(&mut tape, st.head.deltas, &targets, &labels)?;
    let lambda = cfg.effective_lambda();

    let mut total = tape.add(l_rpn_cls, l_rpn_reg)?;
    total = tape.add(total, l_ce)?;
    total = tape.add(total, l_reg)?;
    let mut mr = 0.0;
    if lambda > 0.0 {
        let l_mr = margin_ranking_loss_var(&mut tape, st.head.scores, &labels, &cfg.margin)?;
        mr = tape.value(l_mr).item();
        let weighted = tape.scale(l_mr, lambda)?;
        total = tape.add(total, weighted)?;
    }
    let losses = LossComponents {
        ce: tape.value(l_ce).item(),
        reg: tape.value(l_reg).item(),
        mr,
        rpn_cls: tape.value(l_rpn_cls).item(),
        rpn_reg: tape.value(l_rpn_reg).item(),
        total: tape.value(total).item(),
    };
    tape.backward(total)?;
    Ok(PairGradients {
        losses,
        grads: p.grads(&tape),
    })
}

/// One SGD step on a batch of pairs: gradients and losses are averaged over
/// the batch. Pairs are processed in parallel and reduced in batch order,
/// so the result does not depend on the thread count.
pub fn train_step(
    det: &Detector,
    params: &mut ParamStore,
    opt: &mut OptimizerState,
    batch: &[QueryTargetPair],
    split: &SplitSpec,
    cfg: &TrainConfig,
    epoch: usize,
    seed: u64,
) -> Result<LossComponents> {
    if batch.is_empty() {
        return Err(Error::usage("train_step: empty batch"));
    }
    let results: Vec<Result<PairGradients>> = batch
        .par_iter()
        .map(|pair| {
            pair_gradients(
                det,
                params,
                pair,
                split,
                cfg,
                mix(seed, pair.scene.image_id),
            )
        })
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut losses = LossComponents::default();
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for (pair, r) in batch.iter().zip(results) {
        let pg = r.map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!(
                "non-finite value while training on scene {}: {m}",
                pair.scene.image_id
            )),
            e => e,
        })?;
        if !pg.losses.all_finite() {
            return Err(Error::NonFinite(format!(
                "non-finite loss on scene {}: {:?}",
                pair.scene.image_id, pg.losses
            )));
        }
        losses.accumulate(&pg.losses, scale);
        for (name, g) in pg.grads {
            match grads.get_mut(&name) {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * v;
                    }
                }
                None => {
                    let d = g.data().iter().map(|v| scale * v).collect();
                    grads.insert(name, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
        }
    }
    sgd_step(params, &grads, opt, epoch)?;
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean: LossComponents,
    /// Optional evaluation metric recorded by the epoch hook.
    pub eval: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<LossComponents>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from(LossComponents::CSV_HEADER);
        s.push('\n');
        for (i, l) in self.steps.iter().enumerate() {
            s.push_str(&l.csv_line(i));
            s.push('\n');
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,lr,steps,lCE,lReg,lMR,lRPNcls,lRPNreg,total,eval\n");
        for e in &self.epochs {
            let m = &e.mean;
            let eval = e.eval.map_or(String::new(), |v| v.to_string());
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{eval}\n",
                e.epoch, e.lr, e.steps, m.ce, m.reg, m.mr, m.rpn_cls, m.rpn_reg, m.total
            ));
        }
        s
    }
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: TrainLog,
}

/// Hook run after every epoch with the current parameters; its return
/// value is stored as the epoch's evaluation metric.
pub type EpochHook<'a> = dyn FnMut(usize, &ParamStore) -> Result<Option<f64>> + 'a;

/// Trains from a fresh initialization. Each epoch visits the training
/// scenes in a seeded order and samples one pair per scene.
pub fn train(
    det_cfg: &DetectorConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    hook: Option<&mut EpochHook>,
) -> Result<TrainOutcome> {
    let det = Detector::new(det_cfg.clone())?;
    let params = det.init_params(cfg.init_seed)?;
    train_from(&det, params, cfg, data, hook)
}

pub fn train_from(
    det: &Detector,
    mut params: ParamStore,
    cfg: &TrainConfig,
    data: &Dataset,
    mut hook: Option<&mut EpochHook>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut opt = cfg.optimizer()?;
    let mut log = TrainLog::default();
    let split = &data.registry.split;
    for epoch in 0..cfg.epochs {
        let epoch_seed = mix(cfg.data_seed, epoch as u64);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        XorShift64Star::new(epoch_seed).shuffle(&mut order);
        let pairs: Vec<QueryTargetPair> = order
            .iter()
            .filter_map(|&i| {
                sample_training_pair(&data.train[i], split, &data.train_pool, epoch_seed)
            })
            .collect();
        if pairs.is_empty() {
            return Err(Error::usage("no training pairs could be sampled"));
        }
        let mut mean = LossComponents::default();
        let steps = pairs.len().div_ceil(cfg.batch_size);
        for batch in pairs.chunks(cfg.batch_size) {
            let step_seed = mix(epoch_seed, log.steps.len() as u64);
            let l = train_step(
                det,
                &mut params,
                &mut opt,
                batch,
                split,
                cfg,
                epoch,
                step_seed,
            )?;
            debug!("step {} total {:.4}", log.steps.len(), l.total);
            mean.accumulate(&l, 1.0 / steps as f64);
            log.steps.push(l);
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            save_checkpoint(dir.join(format!("epoch_{epoch}.ckpt")), &params)?;
        }
        let eval = match hook.as_deref_mut() {
            Some(h) => h(epoch, &params)?,
            None => None,
        };
        info!(
            "epoch {epoch}: lr {} loss {:.4} (ce {:.4} reg {:.4} mr {:.4} rpn {:.4}/{:.4})",
            opt.lr(epoch),
            mean.total,
            mean.ce,
            mean.reg,
            mean.mr,
            mean.rpn_cls,
            mean.rpn_reg
        );
        log.epochs.push(EpochSummary {
            epoch,
            lr: opt.lr(epoch),
            steps,
            mean,
            eval,
        });
    }
    Ok(TrainOutcome { params, log })
}
