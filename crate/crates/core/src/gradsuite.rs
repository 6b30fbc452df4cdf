//! Finite-difference checks over every differentiable block of the model,
//! on small random instances.

use std::fmt;

use crate::blocks::{non_local_cross, squeeze_co_excitation, NonLocalParams, SceInput, SceParams};
use crate::detector::{
    assign_anchors, generate_anchors, head_forward, roi_gap, AnchorLabel, BBox, Detector,
    DetectorConfig, HeadParams,
};
use crate::error::Result;
use crate::losses::{
    box_regression_loss, detection_ce_loss, margin_ranking_loss_var, rpn_box_loss,
    rpn_objectness_loss, MarginConfig,
};
use crate::nn::BoundParams;
use crate::rng::{mix, XorShift64Star};
use crate::tensor::{gradient_check, GradCheckReport, ParamStore, Tape, Tensor, Var};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Block {
    Backbone,
    NonLocalCross,
    CoExcitation,
    RpnHead,
    RoiGap,
    RankingHead,
    DetectionCe,
    BoxRegression,
    RpnObjectness,
    RpnBox,
    MarginRanking,
}

pub const BLOCKS: [Block; 11] = [
    Block::Backbone,
    Block::NonLocalCross,
    Block::CoExcitation,
    Block::RpnHead,
    Block::RoiGap,
    Block::RankingHead,
    Block::DetectionCe,
    Block::BoxRegression,
    Block::RpnObjectness,
    Block::RpnBox,
    Block::MarginRanking,
];

impl Block {
    pub fn as_str(self) -> &'static str {
        match self {
            Block::Backbone => "backbone",
            Block::NonLocalCross => "non_local_cross",
            Block::CoExcitation => "co_excitation",
            Block::RpnHead => "rpn_head",
            Block::RoiGap => "roi_gap",
            Block::RankingHead => "ranking_head",
            Block::DetectionCe => "detection_ce",
            Block::BoxRegression => "box_regression",
            Block::RpnObjectness => "rpn_objectness",
            Block::RpnBox => "rpn_box",
            Block::MarginRanking => "margin_ranking",
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const CH: usize = 4;

fn tiny_detector() -> Result<Detector> {
    Detector::new(DetectorConfig {
        channels: CH,
        image_size: 16,
        query_size: 16,
        backbone_widths: vec![3, 4, 4],
        sce_reduction: 2,
        ..DetectorConfig::default()
    })
}

fn rand_tensor(shape: &[usize], r: &mut XorShift64Star, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.uniform(lo, hi))
}

fn randomize(store: &mut ParamStore, r: &mut XorShift64Star) {
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        if let Some(t) = store.get_mut(&n) {
            for v in t.data_mut() {
                *v = r.uniform(-0.5, 0.5);
            }
        }
    }
}

/// Random linear functional `Σ c ⊙ x`, so every output element matters.
fn project(tape: &mut Tape, x: Var, r: &mut XorShift64Star) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let c = tape.constant(rand_tensor(&shape, r, -1.0, 1.0))?;
    let y = tape.mul(x, c)?;
    tape.sum(y)
}

fn add_all(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = tape.add(acc, x)?;
    }
    Ok(acc)
}

/// Checks `f` with respect to every named tensor.
fn check_named<F>(named: Vec<(String, Tensor)>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    let (names, inputs): (Vec<String>, Vec<Tensor>) = named.into_iter().unzip();
    gradient_check(
        |tape, vars| {
            let bp = BoundParams::from_vars(names.iter().cloned().zip(vars.iter().copied()));
            f(tape, &bp)
        },
        &inputs,
        STEP,
        TOLERANCE,
    )
}

fn store_entries(store: &ParamStore, prefix: &str) -> Vec<(String, Tensor)> {
    store
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect()
}

fn random_box(r: &mut XorShift64Star, size: f64) -> BBox {
    let w = r.uniform(2.0, size / 2.0);
    let h = r.uniform(2.0, size / 2.0);
    let x = r.uniform(0.0, size - w);
    let y = r.uniform(0.0, size - h);
    BBox {
        x1: x,
        y1: y,
        x2: x + w,
        y2: y + h,
    }
}

fn random_labels(r: &mut XorShift64Star, k: usize) -> Vec<u8> {
    let mut y: Vec<u8> = (0..k).map(|_| u8::from(r.next_f64() < 0.4)).collect();
    y[0] = 1;
    y
}

/// One finite-difference check of `block` on the instance drawn from `seed`.
pub fn check_block(block: Block, seed: u64) -> Result<GradCheckReport> {
    let mut r = XorShift64Star::new(mix(seed, block as u64));
    let det = tiny_detector()?;
    let mut store = det.init_params(seed)?;
    randomize(&mut store, &mut r);
    let proj_seed = r.next_u64();
    let rr = move || XorShift64Star::new(proj_seed);
    match block {
        Block::Backbone => {
            let mut named = store_entries(&store, "backbone.");
            named.push(("image".into(), rand_tensor(&[3, 8, 8], &mut r, 0.0, 1.0)));
            check_named(named, |tape, p| {
                let x = det.backbone(tape, p, p.get("image")?)?;
                project(tape, x, &mut rr())
            })
        }
        Block::NonLocalCross => {
            let mut named = store_entries(&store, "nonlocal_ip.");
            named.push(("x".into(), rand_tensor(&[CH, 3, 3], &mut r, -1.0, 1.0)));
            named.push(("ref".into(), rand_tensor(&[CH, 2, 2], &mut r, -1.0, 1.0)));
            check_named(named, |tape, p| {
                let nl = NonLocalParams::from_bound(p, "nonlocal_ip")?;
                let out = non_local_cross(tape, p.get("x")?, p.get("ref")?, &nl)?;
                project(tape, out.psi, &mut rr())
            })
        }
        Block::CoExcitation => {
            let input = if seed.is_multiple_of(2) {
                SceInput::Query
            } else {
                SceInput::QueryAndTarget
            };
            let mut sce = ParamStore::new();
            SceParams::init(&mut sce, "sce", CH, 2, input, seed)?;
            randomize(&mut sce, &mut r);
            let mut named = store_entries(&sce, "sce.");
            named.push(("fp".into(), rand_tensor(&[CH, 2, 2], &mut r, -1.0, 1.0)));
            named.push(("fi".into(), rand_tensor(&[CH, 3, 3], &mut r, -1.0, 1.0)));
            check_named(named, |tape, p| {
                let sp = SceParams::from_bound(p, "sce", input)?;
                let ce = squeeze_co_excitation(tape, p.get("fp")?, p.get("fi")?, &sp)?;
                let mut g = rr();
                let a = project(tape, ce.w, &mut g)?;
                let b = project(tape, ce.fp_tilde, &mut g)?;
                let c = project(tape, ce.fi_tilde, &mut g)?;
                add_all(tape, &[a, b, c])
            })
        }
        Block::RpnHead => {
            let side = det.feature_size();
            let mut named = store_entries(&store, "rpn.");
            named.push((
                "fi".into(),
                rand_tensor(&[CH, side, side], &mut r, -1.0, 1.0),
            ));
            check_named(named, |tape, p| {
                let out = det.rpn(tape, p, p.get("fi")?)?;
                let mut g = rr();
                let a = project(tape, out.logits, &mut g)?;
                let b = project(tape, out.deltas, &mut g)?;
                tape.add(a, b)
            })
        }
        Block::RoiGap => {
            let b = random_box(&mut r, 32.0);
            let named = vec![("map".into(), rand_tensor(&[CH, 4, 4], &mut r, -1.0, 1.0))];
            check_named(named, |tape, p| {
                let v = roi_gap(tape, p.get("map")?, &b, 8.0)?;
                project(tape, v, &mut rr())
            })
        }
        Block::RankingHead => {
            let k = 5;
            let mut named = store_entries(&store, "head.");
            named.push(("r".into(), rand_tensor(&[CH, k], &mut r, -1.0, 1.0)));
            named.push(("q".into(), rand_tensor(&[CH], &mut r, -1.0, 1.0)));
            check_named(named, |tape, p| {
                let hp = HeadParams::from_bound(p)?;
                let h = head_forward(tape, p.get("r")?, p.get("q")?, &hp)?;
                let mut g = rr();
                let a = project(tape, h.logits, &mut g)?;
                let b = project(tape, h.scores, &mut g)?;
                let c = project(tape, h.deltas, &mut g)?;
                add_all(tape, &[a, b, c])
            })
        }
        Block::DetectionCe => {
            let k = 6;
            let labels = random_labels(&mut r, k);
            let named = vec![("z".into(), rand_tensor(&[k, 2], &mut r, -2.0, 2.0))];
            check_named(named, |tape, p| {
                detection_ce_loss(tape, p.get("z")?, &labels)
            })
        }
        Block::BoxRegression => {
            let k = 6;
            let labels = random_labels(&mut r, k);
            let targets: Vec<[f64; 4]> = (0..k)
                .map(|_| {
                    [
                        r.uniform(-2.0, 2.0),
                        r.uniform(-2.0, 2.0),
                        r.uniform(-2.0, 2.0),
                        r.uniform(-2.0, 2.0),
                    ]
                })
                .collect();
            let named = vec![("d".into(), rand_tensor(&[k, 4], &mut r, -2.0, 2.0))];
            check_named(named, |tape, p| {
                box_regression_loss(tape, p.get("d")?, &targets, &labels)
            })
        }
        Block::RpnObjectness => {
            let n = 10;
            let mut labels: Vec<AnchorLabel> = (0..n)
                .map(|_| match r.below(3) {
                    0 => AnchorLabel::Positive { gt: 0 },
                    1 => AnchorLabel::Negative,
                    _ => AnchorLabel::Ignore,
                })
                .collect();
            labels[0] = AnchorLabel::Positive { gt: 0 };
            labels[1] = AnchorLabel::Negative;
            let named = vec![("z".into(), rand_tensor(&[n], &mut r, -3.0, 3.0))];
            check_named(named, |tape, p| {
                rpn_objectness_loss(tape, p.get("z")?, &labels)
            })
        }
        Block::RpnBox => {
            let anchors = generate_anchors(2, 2, 8.0, &[6.0, 10.0], &[0.5, 1.0, 2.0]);
            let gt = vec![random_box(&mut r, 16.0), random_box(&mut r, 16.0)];
            let labels = assign_anchors(&anchors, &gt, 0.5, 0.3);
            let named = vec![(
                "d".into(),
                rand_tensor(&[anchors.len(), 4], &mut r, -2.0, 2.0),
            )];
            check_named(named, |tape, p| {
                rpn_box_loss(tape, p.get("d")?, &anchors, &labels, &gt)
            })
        }
        Block::MarginRanking => {
            let k = 2 + r.below(15);
            let labels = random_labels(&mut r, k);
            let cfg = MarginConfig {
                normalize: seed % 2 == 1,
                ..MarginConfig::default()
            };
            let named = vec![("z".into(), rand_tensor(&[k], &mut r, -3.0, 3.0))];
            check_named(named, |tape, p| {
                let s = tape.sigmoid(p.get("z")?)?;
                margin_ranking_loss_var(tape, s, &labels, &cfg)
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockResult {
    pub block: Block,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub kinks: usize,
    pub roundoff: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub blocks: Vec<BlockResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.failures == 0)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_err)
            .fold(0.0, f64::max)
    }

    /// One line per block plus a verdict.
    pub fn to_text(&self) -> String {
        let mut s = String::from("block,seeds,max_rel_err,kinks,roundoff,failures\n");
        for b in &self.blocks {
            s.push_str(&format!(
                "{},{},{:.3e},{},{},{}\n",
                b.block, b.seeds, b.max_rel_err, b.kinks, b.roundoff, b.failures
            ));
        }
        s.push_str(&format!(
            "# {} max_rel_err={:.3e} tol={TOLERANCE:e}\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err()
        ));
        s
    }
}

/// Runs every block over `seeds` consecutive seeds starting at `first_seed`.
pub fn run_suite(first_seed: u64, seeds: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    for block in BLOCKS {
        let mut res = BlockResult {
            block,
            seeds,
            max_rel_err: 0.0,
            kinks: 0,
            roundoff: 0,
            failures: 0,
        };
        for s in 0..seeds as u64 {
            let r = check_block(block, first_seed + s)?;
            res.max_rel_err = res.max_rel_err.max(r.max_rel_err());
            res.kinks += r.kinks;
            res.roundoff += r.roundoff;
            res.failures += r.failures.len();
        }
        report.blocks.push(res);
    }
    Ok(report)
}
