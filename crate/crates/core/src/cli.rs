//! Command-line surface: data generation, training, search, inference,
//! evaluation, and analysis. Every subcommand writes a JSON run report.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::inference::{localize, read_tsv, write_tsv, Proposal};
use crate::metrics::{contrast_iou_analysis, default_thresholds, evaluate, GroundTruthInstance, IntervalSampling};
use crate::mining::{mine_pseudo_background, MiningMode};
use crate::model::{forward, HeadParams};
use crate::report::{scatter_svg, RunReport};
use crate::sequence::{exhaustive_search, greedy_search, sequence_accuracy, ScoringVariant, SearchMode, SearchParams, DEFAULT_EXHAUSTIVE_CAP};
use crate::synthio::{generate_dataset, load_videos, read_features, write_dataset, PointDistribution, VideoRecord};
use crate::trainer::{run_training, search_background, SearchFrequency};

#[derive(Debug, Parser)]
#[command(name = "pointloc", version, about = "Point-supervised temporal action localization")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train the scoring head.
    Train(TrainArgs),
    /// One-shot sequence search on stored scores.
    Search(SearchArgs),
    /// Produce proposals for a manifest.
    Infer(InferArgs),
    /// Evaluate proposals against a manifest's ground truth.
    Eval(EvalArgs),
    /// Contrast/IoU correlation and budget sweep.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_videos: Option<usize>,
    #[arg(long)]
    pub n_test_videos: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, value_enum)]
    pub points: Option<PointDistribution>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Training manifest (default: `<data_dir>/train.json`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Report path (default: next to the checkpoint).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub alpha: Option<usize>,
    /// Four comma-separated loss weights.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub variant: Option<ScoringVariant>,
    #[arg(long, value_enum)]
    pub search_frequency: Option<SearchFrequency>,
    #[arg(long, value_enum)]
    pub search_mode: Option<SearchMode>,
    #[arg(long, value_enum)]
    pub mining: Option<MiningMode>,
}

#[derive(Debug, Args, Serialize)]
pub struct SearchArgs {
    /// PTAL file holding a `C x T` score matrix.
    #[arg(long, conflicts_with = "row")]
    pub scores: Option<PathBuf>,
    /// Inline comma-separated score row.
    #[arg(long, value_delimiter = ',')]
    pub row: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    pub class: usize,
    /// 1-based action point times.
    #[arg(long, value_delimiter = ',', required = true)]
    pub action_points: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub background_points: Vec<usize>,
    #[arg(long)]
    pub alpha: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_enum)]
    pub variant: Option<ScoringVariant>,
    #[arg(long, value_enum)]
    pub mode: Option<SearchMode>,
    /// Also run exhaustive enumeration (short rows only).
    #[arg(long)]
    pub exhaustive: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Test manifest (default: `<data_dir>/test.json`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Proposal TSV output.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub theta_vid: Option<f64>,
    #[arg(long)]
    pub nms_threshold: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub proposals: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    #[arg(long, value_enum, default_value_t = IntervalSampling::Overlapping)]
    pub sampling: IntervalSampling,
    /// Run the budget sweep instead of the correlation analysis.
    #[arg(long)]
    pub budget_sweep: bool,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,25,50,100")]
    pub alphas: Vec<usize>,
}

/// Parses `argv` and runs the subcommand.
pub fn run_from<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::Config(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    let work = || match &cli.command {
        Command::GenData(a) => gen_data(cfg.clone(), a),
        Command::Train(a) => train(cfg.clone(), a),
        Command::Search(a) => search(cfg.clone(), a),
        Command::Infer(a) => infer(cfg.clone(), a),
        Command::Eval(a) => eval(cfg.clone(), a),
        Command::Analyze(a) => analyze(cfg.clone(), a),
    };
    match cli.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work),
        None => work(),
    }
}

#[derive(Serialize)]
struct Echo<'a, A: Serialize> {
    run: &'a RunConfig,
    args: &'a A,
}

fn data_path(cfg: &RunConfig, explicit: &Option<PathBuf>, file: &str) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.clone());
    }
    cfg.paths
        .data_dir
        .as_ref()
        .map(|d| d.join(file))
        .ok_or_else(|| Error::Config(format!("no manifest given and paths.data_dir unset (looking for {file})")))
}

fn checkpoint_path(cfg: &RunConfig, explicit: &Option<PathBuf>) -> Result<PathBuf> {
    explicit
        .clone()
        .or_else(|| cfg.paths.checkpoint.clone())
        .ok_or_else(|| Error::Config("no checkpoint given (--checkpoint or paths.checkpoint)".into()))
}

fn with_name(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct GenMetrics {
    train_videos: usize,
    test_videos: usize,
    train_instances: usize,
    test_instances: usize,
}

fn gen_data(mut cfg: RunConfig, a: &GenDataArgs) -> Result<()> {
    if let Some(n) = a.n_videos {
        cfg.synthetic.n_videos = n;
    }
    if let Some(n) = a.n_test_videos {
        cfg.synthetic.n_test_videos = n;
    }
    if let Some(x) = a.noise {
        cfg.synthetic.noise = x;
    }
    if let Some(p) = a.points {
        cfg.synthetic.points = p;
    }
    if let Some(o) = &a.out {
        cfg.paths.data_dir = Some(o.clone());
    }
    let cfg = cfg.finalize()?;
    let dir = cfg.paths.data_dir.clone().ok_or_else(|| Error::Config("--out or paths.data_dir required".into()))?;
    let t0 = Instant::now();
    let ds = generate_dataset(&cfg.synthetic)?;
    let (train, test) = write_dataset(&dir, &ds, &cfg.synthetic)?;
    let metrics = GenMetrics {
        train_videos: ds.train.len(),
        test_videos: ds.test.len(),
        train_instances: ds.train.iter().map(|v| v.gt.len()).sum(),
        test_instances: ds.test.iter().map(|v| v.gt.len()).sum(),
    };
    let mut rep = RunReport::new("gen-data", cfg.synthetic.seed, Echo { run: &cfg, args: a }, metrics);
    rep.timings.push(("generate".into(), t0.elapsed().as_secs_f64()));
    rep.artifacts = vec![train.display().to_string(), test.display().to_string()];
    rep.write(&dir.join("gen_report.json"))?;
    log::info!("wrote dataset to {}", dir.display());
    Ok(())
}

fn train(mut cfg: RunConfig, a: &TrainArgs) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.alpha {
        t.alpha = v;
    }
    if let Some(l) = &a.lambdas {
        t.loss.lambdas = [l[0], l[1], l[2], l[3]];
    }
    if let Some(v) = a.variant {
        t.variant = v;
    }
    if let Some(v) = a.search_frequency {
        t.search_frequency = v;
    }
    if let Some(v) = a.search_mode {
        t.search_mode = v;
    }
    if let Some(v) = a.mining {
        t.mining = v;
    }
    let cfg = cfg.finalize()?;
    let manifest = data_path(&cfg, &a.manifest, "train.json")?;
    let ckpt = checkpoint_path(&cfg, &a.checkpoint)?;
    let t0 = Instant::now();
    let (m, videos) = load_videos(&manifest)?;
    let load_s = t0.elapsed().as_secs_f64();
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let t1 = Instant::now();
    let (_, report) = run_training(&videos, m.n_classes, &cfg.train, Some(&ckpt))?;
    let mut rep = RunReport::new("train", cfg.train.seed, Echo { run: &cfg, args: a }, report);
    rep.timings = vec![("load".into(), load_s), ("train".into(), t1.elapsed().as_secs_f64())];
    rep.artifacts = vec![ckpt.display().to_string()];
    rep.write(&a.report.clone().unwrap_or_else(|| with_name(&ckpt, "train_report.json")))
}

#[derive(Serialize)]
struct SearchMetrics {
    greedy: crate::sequence::ScoredSequence,
    exhaustive: Option<crate::sequence::ScoredSequence>,
}

fn search(cfg: RunConfig, a: &SearchArgs) -> Result<()> {
    let cfg = cfg.finalize()?;
    let row: Vec<f64> = match (&a.scores, &a.row) {
        (Some(p), _) => {
            let m = read_features(p)?;
            if a.class >= m.rows() {
                return Err(Error::invalid("class", format!("{} out of range for {} score rows", a.class, m.rows())));
            }
            m.row(a.class).to_vec()
        }
        (None, Some(r)) => r.clone(),
        (None, None) => return Err(Error::Config("one of --scores or --row is required".into())),
    };
    let params = SearchParams {
        alpha: a.alpha.unwrap_or(cfg.train.alpha),
        delta: a.delta.unwrap_or(cfg.train.loss.delta),
        variant: a.variant.unwrap_or(cfg.train.variant),
        mode: a.mode.unwrap_or(cfg.train.search_mode),
    };
    let t0 = Instant::now();
    let greedy = greedy_search(&row, a.class, &a.action_points, &a.background_points, &params)?;
    let greedy_s = t0.elapsed().as_secs_f64();
    let exhaustive = if a.exhaustive {
        Some(exhaustive_search(&row, a.class, &a.action_points, &a.background_points, &params, DEFAULT_EXHAUSTIVE_CAP)?)
    } else {
        None
    };
    let seed = cfg.train.seed;
    let mut rep = RunReport::new("search", seed, Echo { run: &cfg, args: a }, SearchMetrics { greedy, exhaustive });
    rep.timings.push(("greedy".into(), greedy_s));
    rep.write(&a.out)
}

fn load_params(path: &Path, n_classes: usize, d: usize) -> Result<HeadParams> {
    let p = HeadParams::load(path)?;
    if p.num_classes() != n_classes || p.feature_dim() != d {
        return Err(Error::dims(
            "checkpoint",
            format!("D = {d}, C = {n_classes}"),
            format!("D = {}, C = {}", p.feature_dim(), p.num_classes()),
        ));
    }
    Ok(p)
}

#[derive(Serialize)]
struct InferMetrics {
    videos: usize,
    proposals: usize,
    records: Vec<Proposal>,
}

fn infer(mut cfg: RunConfig, a: &InferArgs) -> Result<()> {
    if let Some(v) = a.theta_vid {
        cfg.inference.theta_vid = v;
    }
    if let Some(v) = a.nms_threshold {
        cfg.inference.nms_threshold = v;
    }
    let cfg = cfg.finalize()?;
    let manifest = data_path(&cfg, &a.manifest, "test.json")?;
    let (m, videos) = load_videos(&manifest)?;
    let params = load_params(&checkpoint_path(&cfg, &a.checkpoint)?, m.n_classes, m.feature_dim)?;
    let t0 = Instant::now();
    let per_video = videos
        .par_iter()
        .map(|v| {
            let out = forward(&v.features, &params)?;
            localize(&v.video_id, &out.phat, &cfg.inference)
        })
        .collect::<Result<Vec<_>>>()?;
    let proposals: Vec<Proposal> = per_video.into_iter().flatten().collect();
    let mut buf = Vec::new();
    write_tsv(&mut buf, &proposals).map_err(|e| Error::io(&a.out, e))?;
    std::fs::write(&a.out, buf).map_err(|e| Error::io(&a.out, e))?;
    let metrics = InferMetrics {
        videos: videos.len(),
        proposals: proposals.len(),
        records: proposals,
    };
    let mut rep = RunReport::new("infer", cfg.train.seed, Echo { run: &cfg, args: a }, metrics);
    rep.timings.push(("infer".into(), t0.elapsed().as_secs_f64()));
    rep.artifacts = vec![a.out.display().to_string()];
    rep.write(&a.report.clone().unwrap_or_else(|| with_name(&a.out, "infer_report.json")))
}

fn ground_truth(videos: &[VideoRecord]) -> (Vec<GroundTruthInstance>, Vec<String>) {
    (
        videos.iter().flat_map(|v| v.gt.iter().cloned()).collect(),
        videos.iter().map(|v| v.video_id.clone()).collect(),
    )
}

fn eval(cfg: RunConfig, a: &EvalArgs) -> Result<()> {
    let cfg = cfg.finalize()?;
    let manifest = data_path(&cfg, &a.manifest, "test.json")?;
    let (m, videos) = load_videos(&manifest)?;
    let file = std::fs::File::open(&a.proposals).map_err(|e| Error::io(&a.proposals, e))?;
    let proposals = read_tsv(std::io::BufReader::new(file))?;
    let (gt, ids) = ground_truth(&videos);
    let t0 = Instant::now();
    let report = evaluate(&proposals, &gt, &ids, m.n_classes, &default_thresholds())?;
    let mut artifacts = vec![a.out.display().to_string()];
    if let Some(csv_path) = &a.csv {
        write_text(csv_path, &report.to_csv()?)?;
        artifacts.push(csv_path.display().to_string());
    }
    let mut rep = RunReport::new("eval", cfg.train.seed, Echo { run: &cfg, args: a }, report);
    rep.timings.push(("evaluate".into(), t0.elapsed().as_secs_f64()));
    rep.artifacts = artifacts;
    rep.write(&a.out)
}

/// One row of the budget sweep.
#[derive(Clone, Debug, Serialize)]
pub struct BudgetRow {
    pub alpha: usize,
    pub mean_score: f64,
    pub mean_accuracy: f64,
    pub searches: usize,
    pub seconds: f64,
}

/// Greedy search over every (video, present class) at each budget.
pub fn budget_sweep(videos: &[VideoRecord], params: &HeadParams, cfg: &RunConfig, alphas: &[usize]) -> Result<Vec<BudgetRow>> {
    let mut prepared = Vec::with_capacity(videos.len());
    for v in videos {
        let out = forward(&v.features, params)?;
        let mined = mine_pseudo_background(
            out.q.as_slice(),
            &v.points.action_times(),
            cfg.train.loss.gamma,
            cfg.train.mining,
            cfg.train.eta,
        )?;
        prepared.push((v, out.phat, mined));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let sp = SearchParams {
            alpha,
            ..cfg.train.search_params()
        };
        let t0 = Instant::now();
        let (mut score, mut acc, mut n) = (0.0, 0.0, 0usize);
        for (v, phat, mined) in &prepared {
            for c in v.points.classes() {
                let bkg = search_background(v, mined, c);
                let s = greedy_search(phat.row(c), c, &v.points.class_times(c), &bkg, &sp)?;
                score += s.score;
                acc += sequence_accuracy(&s.sequence, &v.truth_labels(c))?;
                n += 1;
            }
        }
        let seconds = t0.elapsed().as_secs_f64();
        let n_f = n.max(1) as f64;
        rows.push(BudgetRow {
            alpha,
            mean_score: score / n_f,
            mean_accuracy: acc / n_f,
            searches: n,
            seconds,
        });
    }
    Ok(rows)
}

#[derive(Serialize)]
struct CorrelationMetrics {
    samples: usize,
    r_inner: Option<f64>,
    r_contrast: Option<f64>,
    degenerate: bool,
}

fn analyze(cfg: RunConfig, a: &AnalyzeArgs) -> Result<()> {
    let cfg = cfg.finalize()?;
    let manifest = data_path(&cfg, &a.manifest, "train.json")?;
    let (m, videos) = load_videos(&manifest)?;
    let params = load_params(&checkpoint_path(&cfg, &a.checkpoint)?, m.n_classes, m.feature_dim)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let t0 = Instant::now();
    if a.budget_sweep {
        let rows = budget_sweep(&videos, &params, &cfg, &a.alphas)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &rows {
            w.serialize(r)?;
        }
        let csv_path = a.out.join("budget_sweep.csv");
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(&csv_path, bytes).map_err(|e| Error::io(&csv_path, e))?;
        let mut rep = RunReport::new("analyze", cfg.train.seed, Echo { run: &cfg, args: a }, rows);
        rep.timings.push(("sweep".into(), t0.elapsed().as_secs_f64()));
        rep.artifacts = vec![csv_path.display().to_string()];
        return rep.write(&a.out.join("budget_report.json"));
    }
    let seed = cfg.train.seed;
    let res = contrast_iou_analysis(&params, &videos, a.samples, seed, cfg.train.loss.delta, a.sampling)?;
    let csv_path = a.out.join("contrast_iou.csv");
    write_text(&csv_path, &res.to_csv()?)?;
    let inner_svg = a.out.join("inner_vs_iou.svg");
    let contrast_svg = a.out.join("contrast_vs_iou.svg");
    let inner_pts: Vec<(f64, f64)> = res.rows.iter().map(|r| (r.inner, r.iou)).collect();
    let contrast_pts: Vec<(f64, f64)> = res.rows.iter().map(|r| (r.contrast, r.iou)).collect();
    let fmt = |r: Option<f64>| r.map_or_else(|| "undefined".to_string(), |v| format!("{v:.3}"));
    write_text(&inner_svg, &scatter_svg(&inner_pts, &format!("inner score, r = {}", fmt(res.r_inner)), "inner score", "IoU"))?;
    write_text(&contrast_svg, &scatter_svg(&contrast_pts, &format!("score contrast, r = {}", fmt(res.r_contrast)), "score contrast", "IoU"))?;
    let metrics = CorrelationMetrics {
        samples: res.rows.len(),
        r_inner: res.r_inner,
        r_contrast: res.r_contrast,
        degenerate: res.r_inner.is_none() || res.r_contrast.is_none(),
    };
    let mut rep = RunReport::new("analyze", seed, Echo { run: &cfg, args: a }, metrics);
    rep.timings.push(("analysis".into(), t0.elapsed().as_secs_f64()));
    rep.artifacts = [csv_path, inner_svg, contrast_svg].iter().map(|p| p.display().to_string()).collect();
    rep.write(&a.out.join("analysis_report.json"))
}
