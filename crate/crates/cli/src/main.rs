use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use llrseg::anomalymix::{load_dataset, make_dataset, DatasetConfig, Split};
use llrseg::benchmark::evaluate_bundle;
use llrseg::datamodel::{
    load_feature_map, load_label_map, load_outlier_map, load_score_map, save_score_map, ModelBundle,
};
use llrseg::inference::{preview_pgm, score_image, tile_plan, Pipeline, Scorer};
use llrseg::inlier::{train_inlier, InlierTrainConfig};
use llrseg::metrics::{ranking_report, ConfusionMatrix, ScoredPixels};
use llrseg::selfcheck;
use llrseg::uem::{load_stage1, train_uem, LlrConfig};

/// Likelihood-ratio outlier segmentation: synthesize data, train both
/// stages, score, evaluate.
#[derive(Parser)]
#[command(name = "llrseg", version)]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "llrseg-out")]
    out: PathBuf,
    /// Worker threads for tiled scoring.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with pasted outliers.
    Synth,
    /// Train the inlier segmentor on the dataset's stage-1 scenes.
    TrainInlier {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the unknown estimation module with the inlier model frozen.
    TrainUem {
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write score maps for feature files or a dataset's eval scenes.
    Score(ScoreArgs),
    /// Ranking metrics (and optionally mIoU) as a JSON report.
    Eval(EvalArgs),
    /// Gradient checks, oracle equivalences and the LLR identity.
    Selfcheck,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Feature map files to score.
    #[arg(long, num_args = 1..)]
    features: Vec<PathBuf>,
    /// Score every eval scene of this dataset instead.
    #[arg(long, conflicts_with = "features")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "llr")]
    scorer: Scorer,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Also write an 8-bit PGM preview per map.
    #[arg(long)]
    preview: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Score map files, paired in order with `--outliers`.
    #[arg(long, num_args = 1..)]
    scores: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    outliers: Vec<PathBuf>,
    /// Predicted label maps, paired in order with `--gt`.
    #[arg(long, num_args = 1..)]
    pred: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    gt: Vec<PathBuf>,
    /// Number of known classes for mIoU.
    #[arg(long)]
    classes: Option<usize>,
    /// Evaluate all three scorers of this stage-2 bundle on `--data`.
    #[arg(long, requires = "data", conflicts_with_all = ["scores", "pred"])]
    bundle: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct InferenceConfig {
    window: usize,
    /// Defaults to half the window.
    stride: Option<usize>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            window: 32,
            stride: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    /// Root seed; every module derives its streams from it.
    seed: u64,
    data: DatasetConfig,
    inlier: InlierTrainConfig,
    uem: LlrConfig,
    inference: InferenceConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.data.seed = cfg.seed;
        cfg.inlier.seed = cfg.seed;
        cfg.uem.seed = cfg.seed;
        if cfg.inference.stride.is_none() {
            cfg.inference.stride = Some((cfg.inference.window / 2).max(1));
        }
        Ok(cfg)
    }

    fn echo(&self, out: &Path) -> Result<()> {
        let path = out.join("config.resolved.toml");
        fs::write(&path, toml::to_string(self)?).with_context(|| format!("writing {}", path.display()))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = make_dataset(&cfg.data, out)?;
    let sep = data.manifest.separation;
    println!(
        "synth: {} scenes in {}, separation {}",
        data.scenes.len(),
        out.display(),
        if sep.holds() { "holds" } else { "VIOLATED" }
    );
    Ok(())
}

fn cmd_train_inlier(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(data)?;
    let pairs: Vec<_> = ds
        .split(Split::TrainInlier)
        .map(|s| (s.features.clone(), s.labels.clone()))
        .collect();
    let trained = train_inlier::<f64>(&pairs, ds.num_classes(), &cfg.inlier)?;
    trained.bundle.save(out)?;
    write_json(&out.join("inlier_report.json"), &trained.report)?;
    println!(
        "train-inlier: held-out mIoU {:.4}, {} parameters",
        trained.report.heldout_miou.miou, trained.report.parameter_count
    );
    Ok(())
}

fn cmd_train_uem(cfg: &RunConfig, stage1: &Path, data: &Path, out: &Path) -> Result<()> {
    let s1 = load_stage1(stage1)?;
    let ds = load_dataset(data)?;
    let pairs: Vec<_> = ds
        .split(Split::TrainUem)
        .map(|s| (s.features.clone(), s.outliers.clone()))
        .collect();
    let trained = train_uem::<f64>(&s1, &pairs, &cfg.uem)?;
    trained.bundle.save(out)?;
    write_json(&out.join("uem_report.json"), &trained.report)?;
    println!(
        "train-uem: freeze verified for {} stage-1 tensors, {} module parameters",
        trained.bundle.manifest.frozen_digests.len(),
        trained.report.parameter_count
    );
    Ok(())
}

fn scene_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(|p| p.file_name()) {
        Some(parent) if stem == "features" => parent.to_string_lossy().into_owned(),
        _ => stem,
    }
}

fn cmd_score(cfg: &RunConfig, args: &ScoreArgs, out: &Path) -> Result<()> {
    let bundle = ModelBundle::load(&args.bundle)?;
    let pipe = Pipeline::<f64>::from_bundle(&bundle)?;
    let inputs: Vec<PathBuf> = match &args.data {
        Some(d) => {
            let ds = load_dataset(d)?;
            ds.manifest
                .scenes
                .iter()
                .filter(|r| r.split == Split::Eval)
                .map(|r| d.join(&r.dir).join("features.fmap"))
                .collect()
        }
        None => args.features.clone(),
    };
    ensure!(!inputs.is_empty(), "nothing to score: pass --features or --data");
    let window = args.window.unwrap_or(cfg.inference.window);
    let stride = args.stride.or(cfg.inference.stride).unwrap_or(window / 2);
    for path in &inputs {
        let f = load_feature_map::<f64>(path)?;
        let plan = tile_plan(f.height(), f.width(), (window, window), (stride, stride))?;
        let scores = score_image(&pipe, &f, &plan, args.scorer)?;
        let name = format!("{}.{}", scene_name(path), args.scorer.name());
        save_score_map(&scores, out.join(format!("{name}.smap")))?;
        if args.preview {
            let p = out.join(format!("{name}.pgm"));
            fs::write(&p, preview_pgm(&scores)).with_context(|| format!("writing {}", p.display()))?;
        }
    }
    println!("score: {} maps ({}) in {}", inputs.len(), args.scorer.name(), out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs, out: &Path) -> Result<()> {
    if let (Some(b), Some(d)) = (&args.bundle, &args.data) {
        let report = evaluate_bundle(&ModelBundle::load(b)?, &load_dataset(d)?)?;
        let json = serde_json::json!({
            "ap_llr": report.llr.ap,
            "ap_id": report.id.ap,
            "ap_ood": report.ood.ap,
            "fpr95_llr": report.llr.fpr95,
            "ordering_holds": report.ordering_holds(),
            "report": report,
        });
        write_json(&out.join("eval.json"), &json)?;
        println!(
            "eval: AP llr {:.4} | id {:.4} | ood {:.4}, FPR95 llr {:.4}, eval mIoU {:.4}",
            report.llr.ap, report.id.ap, report.ood.ap, report.llr.fpr95, report.eval_miou
        );
        return Ok(());
    }
    ensure!(
        args.scores.len() == args.outliers.len(),
        "{} score maps but {} outlier maps",
        args.scores.len(),
        args.outliers.len()
    );
    ensure!(args.pred.len() == args.gt.len(), "{} predictions but {} ground truths", args.pred.len(), args.gt.len());
    if args.scores.is_empty() && args.pred.is_empty() {
        bail!("nothing to evaluate: pass --scores/--outliers, --pred/--gt, or --bundle/--data");
    }
    let mut json = serde_json::Map::new();
    if !args.scores.is_empty() {
        let mut pooled = ScoredPixels::<f64>::new(Vec::new(), Vec::new())?;
        for (s, o) in args.scores.iter().zip(&args.outliers) {
            pooled.extend(&load_score_map(s)?, &load_outlier_map(o)?)?;
        }
        let r = ranking_report(&pooled)?;
        println!("eval: AP {:.4}, AUROC {:.4}, FPR95 {:.4}", r.ap, r.auroc, r.fpr95);
        json.insert("ranking".into(), serde_json::to_value(r)?);
    }
    if !args.pred.is_empty() {
        let k = args.classes.context("--classes is required with --pred")?;
        let mut cm = ConfusionMatrix::new(k);
        for (p, g) in args.pred.iter().zip(&args.gt) {
            cm.add(&load_label_map(p)?, &load_label_map(g)?)?;
        }
        let r = cm.report()?;
        println!("eval: mIoU {:.4}", r.miou);
        json.insert("miou".into(), serde_json::to_value(r)?);
    }
    write_json(&out.join("eval.json"), &json)
}

fn cmd_selfcheck(seed: u64, out: &Path) -> Result<bool> {
    let checks = selfcheck::quick_checks(seed)?;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    write_json(&out.join("selfcheck.json"), &checks)?;
    Ok(checks.iter().all(|c| c.passed))
}

fn run(cli: Cli) -> Result<bool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .context("configuring the thread pool")?;
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    let out = cli.out.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.echo(out)?;
    match &cli.cmd {
        Cmd::Synth => cmd_synth(&cfg, out)?,
        Cmd::TrainInlier { data } => cmd_train_inlier(&cfg, data, out)?,
        Cmd::TrainUem { stage1, data } => cmd_train_uem(&cfg, stage1, data, out)?,
        Cmd::Score(a) => cmd_score(&cfg, a, out)?,
        Cmd::Eval(a) => cmd_eval(a, out)?,
        Cmd::Selfcheck => return cmd_selfcheck(cfg.seed, out),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("selfcheck failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
