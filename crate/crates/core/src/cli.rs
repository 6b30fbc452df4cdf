//! Command-line front end.
//!
//! Every command writes its resolved configuration to `<out>/config.txt`
//! before doing any work. Exit status: 0 on success, 1 when a command
//! fails or a runtime check does not hold, 2 for bad arguments or
//! configuration.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use crate::config::RunConfig;
use crate::detector::{BBox, Detector};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_csv, coexcitation_analysis, evaluate_one_shot, heatmap_study, run_ablation, ClassSet,
    EvalResult, TrainedModel, ABLATION_ROWS,
};
use crate::gradsuite::run_suite;
use crate::synthdata::{annotation_lines, write_ppm, write_ppm_gray};
use crate::synthdata::{Dataset, Scene};
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore};
use crate::train::train;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "coae",
    version,
    about = "One-shot detection with co-attention and co-excitation"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Override one key (repeatable), applied after the file and --seed.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Sets both training seeds (initialization and data order).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads. Results do not depend on the count.
    #[arg(long, global = true, env = "COAE_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Seen,
    Unseen,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoints and loss logs.
    Train,
    /// Evaluate a checkpoint under the five-query protocol.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        split: SplitArg,
    },
    /// Train and evaluate the five toggle rows of the ablation table.
    Ablate,
    /// Proposal heatmaps with and without co-attention.
    Heatmap {
        /// Model with co-attention.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Model trained without co-attention; when absent the first
        /// model is run with its co-attention switched off.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Heatmap images written (the statistics use every sampled pair).
        #[arg(long, default_value_t = 8)]
        images: usize,
    },
    /// Co-excitation distance matrix and per-vector probes.
    Coex {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        split: SplitArg,
    },
    /// Finite-difference check of every differentiable block.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        seeds: usize,
    },
    /// Render the benchmark to PPM images with annotation files.
    GenData {
        /// Scenes exported per split (all when absent).
        #[arg(long)]
        limit: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate => "ablate",
            Command::Heatmap { .. } => "heatmap",
            Command::Coex { .. } => "coex",
            Command::Gradcheck { .. } => "gradcheck",
            Command::GenData { .. } => "gen-data",
        }
    }
}

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_FAILURE
        }
    }
}

/// Configuration after the file, `--seed` and `--set` are applied.
pub fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.train.init_seed = s;
        cfg.train.data_seed = s;
    }
    for (i, kv) in g.overrides.iter().enumerate() {
        cfg.apply_override(kv, &format!("--set #{}", i + 1))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(n: Option<usize>) -> CmdResult {
    if let Some(n) = n {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        // A second call in the same process keeps the first pool.
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            warn!("thread pool already initialized; --threads ignored");
        }
    }
    Ok(())
}

pub fn run(cli: &Cli) -> CmdResult {
    let cfg = resolve_config(&cli.global)?;
    init_threads(cli.global.threads)?;
    let out = &cli.global.out;
    fs::create_dir_all(out).map_err(Error::from)?;
    let snapshot = format!(
        "# resolved configuration of `coae {}`\n{}",
        cli.command.name(),
        cfg.to_text()
    );
    fs::write(out.join("config.txt"), snapshot).map_err(Error::from)?;
    match &cli.command {
        Command::Train => cmd_train(&cfg, out),
        Command::Eval { checkpoint, split } => cmd_eval(&cfg, out, checkpoint, *split),
        Command::Ablate => cmd_ablate(&cfg, out),
        Command::Heatmap {
            checkpoint,
            baseline,
            images,
        } => cmd_heatmap(&cfg, out, checkpoint, baseline.as_deref(), *images),
        Command::Coex { checkpoint, split } => cmd_coex(&cfg, out, checkpoint, *split),
        Command::Gradcheck { seeds } => cmd_gradcheck(out, *seeds),
        Command::GenData { limit } => cmd_gen_data(&cfg, out, *limit),
    }
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn invariant(ok: bool, msg: impl FnOnce() -> String) -> CmdResult {
    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("invariant violated: {}", msg())))
    }
}

fn evaluate(
    det: &Detector,
    params: &ParamStore,
    data: &Dataset,
    set: ClassSet,
    cfg: &RunConfig,
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
        cfg.eval.queries_per_image,
    )
}

fn check_eval(r: &EvalResult, set: ClassSet, data: &Dataset) -> CmdResult {
    let split = &data.registry.split;
    for (&c, &ap) in &r.per_class {
        invariant((0.0..=1.0).contains(&ap), || format!("class {c} AP {ap}"))?;
        let member = match set {
            ClassSet::Seen => split.is_seen(c),
            ClassSet::Unseen => split.is_unseen(c),
        };
        invariant(member, || {
            format!("{} evaluation touched class {c}", set.as_str())
        })?;
    }
    Ok(())
}

fn sets(split: SplitArg) -> Vec<ClassSet> {
    match split {
        SplitArg::Seen => vec![ClassSet::Seen],
        SplitArg::Unseen => vec![ClassSet::Unseen],
        SplitArg::Both => vec![ClassSet::Seen, ClassSet::Unseen],
    }
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> CmdResult {
    let data = Dataset::build(&cfg.data)?;
    let det = Detector::new(cfg.detector.clone())?;
    let mut tc = cfg.train.clone();
    tc.checkpoint_dir = Some(out.join("checkpoints"));
    let mut hook = |epoch: usize, p: &ParamStore| -> Result<Option<f64>> {
        let r = evaluate(&det, p, &data, ClassSet::Unseen, cfg)?;
        info!("epoch {epoch}: unseen mAP {:?}", r.map_unseen);
        Ok(r.map_unseen)
    };
    let hook_ref: Option<&mut crate::train::EpochHook> = if cfg.eval.per_epoch {
        Some(&mut hook)
    } else {
        None
    };
    let outcome = train(&cfg.detector, &tc, &data, hook_ref)?;
    save_checkpoint(out.join("model.ckpt"), &outcome.params)?;
    write(out.join("train_steps.csv"), &outcome.log.steps_csv())?;
    write(out.join("train_epochs.csv"), &outcome.log.epochs_csv())?;
    invariant(outcome.log.steps.iter().all(|l| l.all_finite()), || {
        "non-finite loss in the log".into()
    })?;
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Path, ckpt: &Path, split: SplitArg) -> CmdResult {
    let params = load_checkpoint(ckpt)?;
    let det = Detector::new(cfg.detector.clone())?;
    let data = Dataset::build(&cfg.data)?;
    for set in sets(split) {
        let r = evaluate(&det, &params, &data, set, cfg)?;
        check_eval(&r, set, &data)?;
        write(out.join(format!("eval_{}.csv", set.as_str())), &r.to_csv())?;
    }
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, out: &Path) -> CmdResult {
    let data = Dataset::build(&cfg.data)?;
    let rows = run_ablation(&ABLATION_ROWS, &cfg.detector, &cfg.train, &data)?;
    invariant(rows.len() == ABLATION_ROWS.len(), || {
        format!("{} ablation rows", rows.len())
    })?;
    write(out.join("ablation.csv"), &ablation_csv(&rows))?;
    Ok(())
}

fn cmd_heatmap(
    cfg: &RunConfig,
    out: &Path,
    ckpt: &Path,
    baseline: Option<&Path>,
    images: usize,
) -> CmdResult {
    let data = Dataset::build(&cfg.data)?;
    let mut with_cfg = cfg.detector.clone();
    with_cfg.use_co_attention = true;
    let with = Detector::new(with_cfg)?;
    let with_params = load_checkpoint(ckpt)?;
    let mut without_cfg = cfg.detector.clone();
    without_cfg.use_co_attention = false;
    let without_params = match baseline {
        Some(p) => {
            // A separately trained baseline is the bottom ablation row.
            without_cfg.use_co_excitation = false;
            load_checkpoint(p)?
        }
        None => with_params.clone(),
    };
    let without = Detector::new(without_cfg)?;
    let classes: Vec<usize> = data.registry.classes.iter().map(|c| c.class_id).collect();
    let n = cfg.eval.heatmap_pairs;
    let a = heatmap_study(
        &with,
        &with_params,
        &data.test,
        &data.test_pool,
        &classes,
        n,
    )?;
    let b = heatmap_study(
        &without,
        &without_params,
        &data.test,
        &data.test_pool,
        &classes,
        n,
    )?;
    invariant(a.len() == b.len(), || "heatmap pair counts differ".into())?;
    let dir = out.join("heatmaps");
    fs::create_dir_all(&dir).map_err(Error::from)?;
    let mut csv = String::from("image_id,class_id,mass_with,mass_without\n");
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        for map in [&x.map, &y.map] {
            let sum: f64 = map.data().iter().sum();
            invariant(
                (sum - 1.0).abs() < 1e-9 && map.data().iter().all(|&v| v >= 0.0),
                || format!("heatmap of image {} is not a probability map", x.image_id),
            )?;
        }
        csv.push_str(&format!(
            "{},{},{},{}\n",
            x.image_id, x.class_id, x.mass_inside_gt, y.mass_inside_gt
        ));
        if i < images {
            let stem = format!("{}_{}", x.image_id, x.class_id);
            if let Some(scene) = data.test.iter().find(|s| s.image_id == x.image_id) {
                write_ppm(&dir.join(format!("{stem}_scene.ppm")), &scene.image)?;
            }
            write_ppm_gray(&dir.join(format!("{stem}_with.ppm")), &x.map)?;
            write_ppm_gray(&dir.join(format!("{stem}_without.ppm")), &y.map)?;
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let ma = mean(&a.iter().map(|s| s.mass_inside_gt).collect::<Vec<_>>());
    let mb = mean(&b.iter().map(|s| s.mass_inside_gt).collect::<Vec<_>>());
    csv.push_str(&format!("mean,,{ma},{mb}\n"));
    write(out.join("heatmap.csv"), &csv)?;
    Ok(())
}

fn cmd_coex(cfg: &RunConfig, out: &Path, ckpt: &Path, split: SplitArg) -> CmdResult {
    let params = load_checkpoint(ckpt)?;
    let det = Detector::new(cfg.detector.clone())?;
    let data = Dataset::build(&cfg.data)?;
    let reg_split = &data.registry.split;
    let classes: Vec<usize> = sets(split)
        .into_iter()
        .flat_map(|s| s.classes(reg_split))
        .collect();
    let stats = coexcitation_analysis(
        &det,
        &params,
        &data.test,
        &data.test_pool,
        &classes,
        cfg.eval.coex_queries,
    )?;
    let n = stats.classes.len();
    for i in 0..n {
        invariant(stats.distance[i][i] == 0.0, || {
            format!("diagonal entry {i} is nonzero")
        })?;
        for j in 0..n {
            invariant(stats.distance[i][j] == stats.distance[j][i], || {
                format!("distance matrix asymmetric at ({i},{j})")
            })?;
        }
    }
    write(out.join("coex_distance.csv"), &stats.distance_csv())?;
    write(
        out.join("coex_probes.csv"),
        &stats.probe_csv(cfg.eval.coex_probes),
    )?;
    let mut by_shared = String::from("shared_attributes,mean_distance\n");
    for (k, d) in stats
        .distance_by_shared_attributes(&data.registry)
        .iter()
        .enumerate()
    {
        let d = d.map_or(String::new(), |v| v.to_string());
        by_shared.push_str(&format!("{k},{d}\n"));
    }
    write(out.join("coex_by_shared.csv"), &by_shared)?;
    Ok(())
}

fn cmd_gradcheck(out: &Path, seeds: usize) -> CmdResult {
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let report = run_suite(0, seeds)?;
    let text = report.to_text();
    print!("{text}");
    write(out.join("gradcheck.csv"), &text)?;
    invariant(report.passed(), || {
        format!(
            "gradient check failed (max rel err {:.3e})",
            report.max_rel_err()
        )
    })
}

fn export_scenes(dir: &Path, scenes: &[Scene], limit: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut ann = String::new();
    for s in scenes.iter().take(limit) {
        write_ppm(&dir.join(format!("{}.ppm", s.image_id)), &s.image)?;
        for l in annotation_lines(s) {
            ann.push_str(&l);
            ann.push('\n');
        }
    }
    write(dir.join("annotations.txt"), &ann)
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path, limit: Option<usize>) -> CmdResult {
    let data = Dataset::build(&cfg.data)?;
    let limit = limit.unwrap_or(usize::MAX);
    export_scenes(&out.join("train"), &data.train, limit)?;
    export_scenes(&out.join("test"), &data.test, limit)?;
    let qdir = out.join("queries");
    fs::create_dir_all(&qdir).map_err(Error::from)?;
    let mut qann = String::new();
    for c in data.test_pool.classes() {
        for (i, q) in data.test_pool.for_class(c).iter().take(limit).enumerate() {
            write_ppm(&qdir.join(format!("{c}_{i}.ppm")), &q.patch)?;
            let b: &BBox = &q.bbox;
            qann.push_str(&format!(
                "{c}_{i} {} {c} {} {} {} {}\n",
                q.image_id, b.x1, b.y1, b.x2, b.y2
            ));
        }
    }
    write(qdir.join("sources.txt"), &qann)?;
    let mut reg = String::from("class_id,shape,color,texture,split\n");
    for c in &data.registry.classes {
        let split = if data.registry.split.is_unseen(c.class_id) {
            "unseen"
        } else {
            "seen"
        };
        reg.push_str(&format!(
            "{},{},{},{},{split}\n",
            c.class_id,
            c.shape.as_str(),
            c.color.as_str(),
            c.texture.as_str()
        ));
    }
    write(out.join("registry.csv"), &reg)?;
    Ok(())
}
