//! Training objective: `L = L_CE + L_Reg + λ·L_MR`, with the RPN's own
//! objectness and box losses folded into the CE and regression terms.

use crate::detector::{encode, AnchorLabel, BBox};
use crate::error::{Error, Result};
use crate::tensor::{Primitive, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginConfig {
    /// Expected lower bound of foreground probabilities.
    pub m_plus: f64,
    /// Expected upper bound of background probabilities.
    pub m_minus: f64,
    /// Average the per-proposal terms over `K` and the pairwise terms over
    /// the `K(K-1)/2` pairs instead of summing them.
    pub normalize: bool,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            m_plus: 0.7,
            m_minus: 0.3,
            normalize: false,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0) {
            return Err(Error::config(format!(
                "margins must satisfy 0 < m- < m+ < 1, got m+={} m-={}",
                self.m_plus, self.m_minus
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_mr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_mr: 3.0 }
    }
}

/// Foreground probabilities and labels of the `K` ranked proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedBatch {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl RankedBatch {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::dim(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::usage("labels must be 0 or 1"));
        }
        Ok(Self { scores, labels })
    }
}

/// Value of the margin ranking loss:
///
/// ```text
/// Σᵢ yᵢ·max(m⁺−sᵢ, 0) + (1−yᵢ)·max(sᵢ−m⁻, 0) + Δᵢ
/// Δᵢ = Σ_{j>i} [yᵢ=yⱼ]·max(|sᵢ−sⱼ|−m⁻, 0) + [yᵢ≠yⱼ]·max(m⁺−|sᵢ−sⱼ|, 0)
/// ```
pub fn margin_ranking_loss(batch: &RankedBatch, cfg: &MarginConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::vector(batch.scores.clone()))?;
    let l = margin_ranking_loss_var(&mut tape, s, &batch.labels, cfg)?;
    Ok(tape.value(l).item())
}

pub fn margin_ranking_loss_var(
    tape: &mut Tape,
    scores: Var,
    labels: &[u8],
    cfg: &MarginConfig,
) -> Result<Var> {
    if let Some(&bad) = tape
        .value(scores)
        .data()
        .iter()
        .find(|v| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::usage(format!(
            "margin ranking scores must lie in [0,1], got {bad}"
        )));
    }
    let k = labels.len() as f64;
    let (unary_scale, pair_scale) = if cfg.normalize {
        let pairs = k * (k - 1.0) / 2.0;
        (
            1.0 / k.max(1.0),
            if pairs > 0.0 { 1.0 / pairs } else { 0.0 },
        )
    } else {
        (1.0, 1.0)
    };
    tape.apply(
        Primitive::MarginRanking {
            labels: labels.to_vec(),
            m_plus: cfg.m_plus,
            m_minus: cfg.m_minus,
            unary_scale,
            pair_scale,
        },
        &[scores],
    )
}

/// Mean two-way softmax cross-entropy over `K×2` logits.
pub fn detection_ce_loss(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    tape.apply(
        Primitive::SoftmaxCrossEntropy {
            labels: labels.iter().map(|&y| y as usize).collect(),
        },
        &[logits],
    )
}

/// Smooth-L1 (β = 1) summed over the four coordinates and averaged over
/// foreground proposals; a constant zero when there are none.
pub fn box_regression_loss(
    tape: &mut Tape,
    pred: Var,
    targets: &[[f64; 4]],
    labels: &[u8],
) -> Result<Var> {
    let k = labels.len();
    if tape.value(pred).shape() != [k, 4] || targets.len() != k {
        return Err(Error::dim(format!(
            "box regression: predictions {:?}, {} targets, {k} labels",
            tape.value(pred).shape(),
            targets.len()
        )));
    }
    let npos = labels.iter().filter(|&&y| y == 1).count();
    if npos == 0 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let w = 1.0 / npos as f64;
    let weights = labels
        .iter()
        .flat_map(|&y| [if y == 1 { w } else { 0.0 }; 4])
        .collect();
    tape.apply(
        Primitive::SmoothL1 {
            targets: targets.iter().flatten().copied().collect(),
            weights,
            beta: 1.0,
        },
        &[pred],
    )
}

/// Regression targets of each proposal towards its best-overlapping gt
/// box; zero rows for background.
pub fn regression_targets(boxes: &[BBox], gt: &[BBox], labels: &[u8]) -> Vec<[f64; 4]> {
    boxes
        .iter()
        .zip(labels)
        .map(|(b, &y)| match (y, crate::detector::best_match(b, gt)) {
            (1, Some((g, _))) => encode(b, &gt[g]),
            _ => [0.0; 4],
        })
        .collect()
}

/// Class-balanced binary cross-entropy on anchor objectness: positives and
/// negatives each carry half the weight; ignored anchors none.
pub fn rpn_objectness_loss(tape: &mut Tape, logits: Var, labels: &[AnchorLabel]) -> Result<Var> {
    if tape.value(logits).numel() != labels.len() {
        return Err(Error::dim(format!(
            "rpn objectness: {} logits for {} anchors",
            tape.value(logits).numel(),
            labels.len()
        )));
    }
    let npos = labels
        .iter()
        .filter(|l| matches!(l, AnchorLabel::Positive { .. }))
        .count();
    let nneg = labels
        .iter()
        .filter(|l| matches!(l, AnchorLabel::Negative))
        .count();
    let (wp, wn) = match (npos, nneg) {
        (0, 0) => return tape.constant(Tensor::scalar(0.0)),
        (0, n) => (0.0, 1.0 / n as f64),
        (p, 0) => (1.0 / p as f64, 0.0),
        (p, n) => (0.5 / p as f64, 0.5 / n as f64),
    };
    let mut targets = Vec::with_capacity(labels.len());
    let mut weights = Vec::with_capacity(labels.len());
    for l in labels {
        let (t, w) = match l {
            AnchorLabel::Positive { .. } => (1.0, wp),
            AnchorLabel::Negative => (0.0, wn),
            AnchorLabel::Ignore => (0.0, 0.0),
        };
        targets.push(t);
        weights.push(w);
    }
    tape.apply(Primitive::BceWithLogits { targets, weights }, &[logits])
}

/// Smooth-L1 on positive anchors against their assigned gt boxes.
pub fn rpn_box_loss(
    tape: &mut Tape,
    deltas: Var,
    anchors: &[BBox],
    labels: &[AnchorLabel],
    gt: &[BBox],
) -> Result<Var> {
    let k = anchors.len();
    let mut targets = Vec::with_capacity(k);
    let mut y = Vec::with_capacity(k);
    for (a, l) in anchors.iter().zip(labels) {
        match l {
            AnchorLabel::Positive { gt: g } => {
                targets.push(encode(a, &gt[*g]));
                y.push(1);
            }
            _ => {
                targets.push([0.0; 4]);
                y.push(0);
            }
        }
    }
    box_regression_loss(tape, deltas, &targets, &y)
}

/// `ce + reg + λ·mr`.
pub fn total_loss(ce: f64, reg: f64, mr: f64, weights: &LossWeights) -> f64 {
    ce + reg + weights.lambda_mr * mr
}

/// Per-step loss components, as logged.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub ce: f64,
    pub reg: f64,
    pub mr: f64,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub total: f64,
}

impl LossComponents {
    pub const CSV_HEADER: &'static str = "step,lCE,lReg,lMR,lRPNcls,lRPNreg,total";

    pub fn csv_line(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.ce, self.reg, self.mr, self.rpn_cls, self.rpn_reg, self.total
        )
    }

    pub fn all_finite(&self) -> bool {
        [
            self.ce,
            self.reg,
            self.mr,
            self.rpn_cls,
            self.rpn_reg,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn accumulate(&mut self, o: &LossComponents, scale: f64) {
        self.ce += scale * o.ce;
        self.reg += scale * o.reg;
        self.mr += scale * o.mr;
        self.rpn_cls += scale * o.rpn_cls;
        self.rpn_reg += scale * o.rpn_reg;
        self.total += scale * o.total;
    }
}
