mod render;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vecprior::autodiff::checkpoint::save_bundle;
use vecprior::autodiff::{Array, AutodiffError};
use vecprior::derive_seed;
use vecprior::eval::{
    evaluate_ap, iou_dataset, mean_point_error, rasterize, DEFAULT_RESOLUTION, DEFAULT_THRESHOLDS,
};
use vecprior::fusion::{
    merge, retrieve_priors, FusionConfig, FusionParams, MergeMode, PriorStore, QueryGrid,
    DEFAULT_PRIOR_NUM, DEFAULT_SEARCH_RANGE,
};
use vecprior::map_io::{parse_map_file, prepare_ego_map, resample_map, write_map_file};
use vecprior::pipeline::{
    degrade_maps, run_pipeline, sidecar_paths, PipelineConfig, Progress, RunManifest, StageError,
    Timing, PIPELINE_OUTPUTS, PIPELINE_STAGES,
};
use vecprior::pretrain::{
    denoise_map, pretrain_loop_with_progress, synth_corpus, CorruptionConfig, CorruptionMode,
    PretrainError, TrainConfig,
};
use vecprior::uve::{UveConfig, UveModel};
use vecprior::vector::{ElementType, PerceptionWindow, Pose, VectorMap};

#[derive(Parser, Serialize)]
#[command(name = "vecprior", version, about = "Vector map prior encoding, fusion and evaluation")]
struct Cli {
    /// Perception window as x0,x1,y0,y1 in meters (ego frame).
    #[arg(long, global = true, value_parser = parse_window)]
    window: Option<[f64; 4]>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
enum Command {
    /// Generate a synthetic corpus of ego-frame maps.
    Synth(SynthArgs),
    /// Pre-train the encoder on a corpus with noise or mask corruption.
    Pretrain(PretrainArgs),
    /// Encode maps with a trained checkpoint.
    Encode(EncodeArgs),
    /// Add maps to a prior store or query it.
    Store(StoreArgs),
    /// Retrieve priors for a pose, encode them and merge into a query grid.
    Fuse(FuseArgs),
    /// Drop classes and rigidly offset instances to simulate an outdated map.
    Degrade(DegradeArgs),
    /// Score predicted maps against ground truth.
    Eval(EvalArgs),
    /// Draw maps as SVG.
    Render(RenderArgs),
    /// Synthesize, pre-train, build a store, fuse and evaluate in one run.
    Pipeline(PipelineArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Points per instance after resampling.
    #[arg(long, default_value_t = 20)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Clone)]
struct EncoderArgs {
    /// Intra-instance attention blocks.
    #[arg(long, default_value_t = 2)]
    intra: usize,
    /// Inter-instance attention blocks.
    #[arg(long, default_value_t = 2)]
    inter: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    ffn: usize,
    #[arg(long, default_value_t = 8)]
    bands: usize,
    #[arg(long, default_value_t = 32)]
    max_instances: usize,
}

#[derive(Args, Serialize, Clone)]
struct CorruptionArgs {
    #[arg(long, value_enum, default_value_t = Mode::Noise)]
    mode: Mode,
    /// Fraction of instances with a corrupted segment.
    #[arg(long, default_value_t = 0.10)]
    seg: f64,
    /// Per-point corruption probability outside segments.
    #[arg(long, default_value_t = 0.05)]
    pt: f64,
    /// Noise standard deviation in meters.
    #[arg(long, default_value_t = 1.0)]
    std: f64,
}

#[derive(Args, Serialize)]
struct PretrainArgs {
    /// Corpus file (one ego map per line).
    #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
    corpus: Option<PathBuf>,
    /// Train on N synthetic maps instead of a corpus file.
    #[arg(long)]
    synth: Option<usize>,
    #[command(flatten)]
    corruption: CorruptionArgs,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[arg(long, default_value_t = 24)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    points: usize,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training report path (default: <out>.report.json).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EncodeArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Feature file: `map<k>.f_ins` [m, d] and `map<k>.f_pt` [m, n, d] per map.
    #[arg(long)]
    out: PathBuf,
    /// Also write the encoder's reconstruction of each map here.
    #[arg(long)]
    denoised: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct StoreArgs {
    /// Store file (global-frame maps with poses, one per line).
    #[arg(long)]
    store: PathBuf,
    /// Append the maps in this file.
    #[arg(long, conflicts_with = "query", required_unless_present = "query")]
    add: Option<PathBuf>,
    /// Query pose x,y,yaw.
    #[arg(long, value_parser = parse_pose)]
    query: Option<[f64; 3]>,
    #[arg(long, default_value_t = DEFAULT_SEARCH_RANGE)]
    range: f64,
    #[arg(long, default_value_t = DEFAULT_PRIOR_NUM)]
    num: usize,
    /// Where to write retrieved priors (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct FuseArgs {
    #[arg(long)]
    store: PathBuf,
    /// Query pose x,y,yaw.
    #[arg(long, value_parser = parse_pose)]
    pose: [f64; 3],
    #[arg(long, default_value_t = DEFAULT_SEARCH_RANGE)]
    range: f64,
    #[arg(long, default_value_t = DEFAULT_PRIOR_NUM)]
    num: usize,
    #[arg(long, value_enum, default_value_t = Merge::Concat)]
    mode: Merge,
    #[arg(long)]
    ckpt: PathBuf,
    /// Seed for the query grid and fusion parameters.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    grid_instances: usize,
    #[arg(long, default_value_t = 20)]
    grid_points: usize,
    #[arg(long, default_value_t = 64)]
    query_dim: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct DegradeArgs {
    #[arg(long)]
    map: PathBuf,
    /// Classes to remove, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_class)]
    drop: Vec<ElementType>,
    /// Per-instance offset standard deviation in meters.
    #[arg(long, default_value_t = 0.0)]
    offset_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value_t = Metric::Ap)]
    metric: Metric,
    /// Chamfer thresholds in meters.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS)]
    tau: Vec<f64>,
    /// Raster cell size in meters.
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    resolution: f64,
    /// Rasterized line width in meters.
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    line_width: f64,
    /// Report path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct RenderArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct PipelineArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synthetic corpus size for pre-training.
    #[arg(long, default_value_t = 2000)]
    synth: usize,
    #[arg(long, default_value_t = 24)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    points: usize,
    #[command(flatten)]
    corruption: CorruptionArgs,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[arg(long, value_enum, default_value_t = Merge::Concat)]
    merge: Merge,
    #[arg(long, default_value_t = DEFAULT_SEARCH_RANGE)]
    range: f64,
    #[arg(long, default_value_t = DEFAULT_PRIOR_NUM)]
    num: usize,
    /// Evaluation frames along the synthetic road.
    #[arg(long, default_value_t = 20)]
    frames: usize,
    /// Traversals recorded into the prior store.
    #[arg(long, default_value_t = 2)]
    history: usize,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Noise,
    Mask,
    None,
}

impl From<Mode> for CorruptionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Noise => CorruptionMode::Noise,
            Mode::Mask => CorruptionMode::Mask,
            Mode::None => CorruptionMode::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Merge {
    Add,
    Replace,
    Concat,
}

impl From<Merge> for MergeMode {
    fn from(m: Merge) -> Self {
        match m {
            Merge::Add => MergeMode::Add,
            Merge::Replace => MergeMode::Replace,
            Merge::Concat => MergeMode::Concat,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Metric {
    Ap,
    Iou,
    Dist,
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let values: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    let arr: [f64; N] = values
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", v.len()))?;
    if arr.iter().any(|v| !v.is_finite()) {
        return Err("values must be finite".into());
    }
    Ok(arr)
}

fn parse_window(s: &str) -> Result<[f64; 4], String> {
    let w = parse_floats::<4>(s)?;
    PerceptionWindow::new(w[0], w[1], w[2], w[3]).map_err(|e| e.to_string())?;
    Ok(w)
}

fn parse_pose(s: &str) -> Result<[f64; 3], String> {
    parse_floats::<3>(s)
}

fn parse_class(s: &str) -> Result<ElementType, String> {
    ElementType::from_str(s).map_err(|e| e.to_string())
}

/// Bad values that got past the argument parser.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<StageError>() {
            return if e.numeric { 3 } else { 2 };
        }
        if let Some(PretrainError::Divergence { .. }) = cause.downcast_ref::<PretrainError>() {
            return 3;
        }
        if let Some(AutodiffError::NonFinite { .. } | AutodiffError::NonFiniteGrad { .. }) =
            cause.downcast_ref::<AutodiffError>()
        {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Collects the manifest for one invocation.
struct Recorder {
    name: &'static str,
    manifest: RunManifest,
    start: Instant,
}

impl Recorder {
    fn new(cli: &Cli, name: &'static str) -> Result<Self> {
        let argv: Vec<String> = std::env::args().skip(1).collect();
        let flags = serde_json::to_value(cli)?;
        Ok(Self {
            name,
            manifest: RunManifest::new(name, argv, flags),
            start: Instant::now(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.input(path).with_context(|| format!("hashing {}", path.display()))
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        self.manifest.output(path).with_context(|| format!("hashing {}", path.display()))
    }

    /// Writes the manifest and timing sidecars next to `primary`.
    fn finish(self, primary: &Path) -> Result<()> {
        let (manifest, timing) = sidecar_paths(primary);
        self.finish_at(&manifest, &timing)
    }

    fn finish_at(self, manifest: &Path, timing: &Path) -> Result<()> {
        self.manifest.write(manifest)?;
        Timing {
            subcommand: self.name.to_string(),
            wall_clock_s: self.start.elapsed().as_secs_f64(),
        }
        .write(timing)?;
        Ok(())
    }
}

fn window(cli: &Cli) -> PerceptionWindow {
    match cli.window {
        Some([a, b, c, d]) => PerceptionWindow::new(a, b, c, d).expect("validated by the parser"),
        None => PerceptionWindow::default(),
    }
}

fn read_maps(path: &Path) -> Result<Vec<VectorMap>> {
    parse_map_file(path).with_context(|| format!("reading {}", path.display()))
}

fn write_maps(path: &Path, maps: &[VectorMap]) -> Result<()> {
    write_map_file(path, maps).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn uve_config(e: &EncoderArgs, window: &PerceptionWindow, points: usize) -> Result<UveConfig> {
    let cfg = UveConfig {
        m_intra: e.intra,
        n_inter: e.inter,
        dim: e.dim,
        heads: e.heads,
        ffn_dim: e.ffn,
        fourier_bands: e.bands,
        max_instances: e.max_instances,
        max_points: points,
        window: [window.x_min, window.x_max, window.y_min, window.y_max],
        ..UveConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn corruption_config(c: &CorruptionArgs) -> Result<CorruptionConfig> {
    let cfg = CorruptionConfig {
        mode: c.mode.into(),
        seg_fraction: c.seg,
        pt_fraction: c.pt,
        noise_std: c.std,
        ..CorruptionConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Pretrain(a) => cmd_pretrain(cli, a),
        Command::Encode(a) => cmd_encode(cli, a),
        Command::Store(a) => cmd_store(cli, a),
        Command::Fuse(a) => cmd_fuse(cli, a),
        Command::Degrade(a) => cmd_degrade(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Render(a) => cmd_render(cli, a),
        Command::Pipeline(a) => cmd_pipeline(cli, a),
    }
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut rec = Recorder::new(cli, "synth")?;
    if a.n == 0 || a.points < 2 {
        return Err(usage("--n must be positive and --points at least 2"));
    }
    let seed = derive_seed(a.seed, "synth");
    rec.manifest.seed("synth", seed);
    let maps = synth_corpus(a.n, seed, &window(cli), a.points)?;
    write_maps(&a.out, &maps)?;
    rec.output(&a.out)?;
    eprintln!("wrote {} maps ({} points) to {}", maps.len(), maps.iter().map(VectorMap::num_points).sum::<usize>(), a.out.display());
    rec.finish(&a.out)
}

fn cmd_pretrain(cli: &Cli, a: &PretrainArgs) -> Result<()> {
    let mut rec = Recorder::new(cli, "pretrain")?;
    let win = window(cli);
    let uve = uve_config(&a.encoder, &win, a.points)?;
    let corruption = corruption_config(&a.corruption)?;
    if a.batch == 0 || !(a.lr > 0.0) {
        return Err(usage("--batch and --lr must be positive"));
    }
    let corpus = match (&a.corpus, a.synth) {
        (Some(path), _) => {
            rec.input(path)?;
            let maps = read_maps(path)?;
            let mut prepared = Vec::with_capacity(maps.len());
            for (k, m) in maps.iter().enumerate() {
                if !m.frame.is_ego() {
                    bail!("corpus map {k} is not in the ego frame");
                }
                prepared.push(prepare_ego_map(m, &win, a.points).with_context(|| format!("corpus map {k}"))?);
            }
            prepared
        }
        (None, Some(n)) => {
            let seed = derive_seed(a.seed, "synth");
            rec.manifest.seed("synth", seed);
            synth_corpus(n, seed, &win, a.points)?
        }
        (None, None) => unreachable!("clap requires one corpus source"),
    };
    let train = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch,
        seed: derive_seed(a.seed, "pretrain"),
        ..TrainConfig::default()
    };
    rec.manifest.seed("pretrain", train.seed);
    let (params, report) = pretrain_loop_with_progress(&corpus, &uve, &corruption, &train, |e| {
        match e.heldout_error {
            Some(h) => eprintln!("epoch {:>3}  loss {:.4}  held-out corrupted error {:.4} m", e.epoch, e.loss, h),
            None => eprintln!("epoch {:>3}  loss {:.4}", e.epoch, e.loss),
        }
    })?;
    let model = UveModel::new(uve)?;
    model.save(&a.out, &params)?;
    let report_path = a.report.clone().unwrap_or_else(|| sidecar_with(&a.out, "report.json"));
    write_json(&report_path, &report)?;
    rec.output(&a.out)?;
    rec.output(&report_path)?;
    rec.finish(&a.out)
}

/// `<path>.<suffix>` beside `path`.
fn sidecar_with(path: &Path, suffix: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{name}.{suffix}"))
}

fn cmd_encode(cli: &Cli, a: &EncodeArgs) -> Result<()> {
    let mut rec = Recorder::new(cli, "encode")?;
    rec.input(&a.map)?;
    rec.input(&a.ckpt)?;
    let (model, params) = UveModel::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let win = match cli.window {
        Some(_) => window(cli),
        None => model.config.perception_window()?,
    };
    let maps = read_maps(&a.map)?;
    let mut arrays: Vec<(String, Array)> = Vec::new();
    let mut denoised = Vec::new();
    for (k, m) in maps.iter().enumerate() {
        if !m.frame.is_ego() {
            bail!("map {k} is not in the ego frame");
        }
        let m = prepare_ego_map(m, &win, model.config.max_points).with_context(|| format!("map {k}"))?;
        let bundle = model.encode(&m, &params).with_context(|| format!("encoding map {k}"))?;
        arrays.push((format!("map{k:04}.f_ins"), bundle.f_ins));
        arrays.push((format!("map{k:04}.f_pt"), bundle.f_pt));
        if a.denoised.is_some() {
            denoised.push(denoise_map(&model, &params, &m)?);
        }
    }
    let named: Vec<(&str, &Array)> = arrays.iter().map(|(n, x)| (n.as_str(), x)).collect();
    save_bundle(&a.out, params.seed(), &serde_json::to_value(&model.config)?, &named)?;
    rec.output(&a.out)?;
    if let Some(path) = &a.denoised {
        write_maps(path, &denoised)?;
        rec.output(path)?;
    }
    rec.finish(&a.out)
}

fn load_store(path: &Path) -> Result<(Vec<VectorMap>, PriorStore)> {
    let maps = if path.exists() { read_maps(path)? } else { Vec::new() };
    let store = PriorStore::from_maps(&maps).with_context(|| format!("store {}", path.display()))?;
    Ok((maps, store))
}

fn cmd_store(cli: &Cli, a: &StoreArgs) -> Result<()> {
    let mut rec = Recorder::new(cli, "store")?;
    if a.store.exists() {
        rec.input(&a.store)?;
    }
    let (mut maps, store) = load_store(&a.store)?;
    if let Some(add) = &a.add {
        rec.input(add)?;
        let new = read_maps(add)?;
        maps.extend(new.iter().cloned());
        // validates frame and pose of every added map
        PriorStore::from_maps(&maps).with_context(|| format!("adding {}", add.display()))?;
        write_maps(&a.store, &maps)?;
        rec.output(&a.store)?;
        eprintln!("store {} now holds {} entries", a.store.display(), maps.len());
        return rec.finish(&a.store);
    }
    let [x, y, yaw] = a.query.expect("clap requires --add or --query");
    if !(a.range > 0.0) || a.num == 0 {
        return Err(usage("--range and --num must be positive"));
    }
    let priors = retrieve_priors(&store, Pose::new(x, y, yaw), a.range, a.num, &window(cli))?;
    eprintln!("{} of {} entries retrieved", priors.len(), store.len());
    match &a.out {
        Some(path) => {
            write_maps(path, &priors)?;
            rec.output(path)?;
            rec.finish(path)
        }
        None => {
            let mut buf = Vec::new();
            vecprior::map_io::write_maps(&mut buf, &priors)?;
            to_stdout(&buf)
        }
    }
}

fn cmd_fuse(cli: &Cli, a: &FuseArgs) -> Result<()> {
    let mut rec = Recorder::new(cli, "fuse")?;
    if !(a.range > 0.0) || a.num == 0 || a.grid_instances == 0 || a.grid_points == 0 || a.query_dim == 0 {
        return Err(usage("--range, --num and grid sizes must be positive"));
    }
    rec.input(&a.store)?;
    rec.input(&a.ckpt)?;
    let (model, params) = UveModel::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let win = match cli.window {
        Some(_) => window(cli),
        None => model.config.perception_window()?,
    };
    let (_, store) = load_store(&a.store)?;
    let [x, y, yaw] = a.pose;
    let priors = retrieve_priors(&store, Pose::new(x, y, yaw), a.range, a.num, &win)?;
    let mut bundles = Vec::with_capacity(priors.len());
    for p in &priors {
        let p = resample_map(p, model.config.max_points)?;
        bundles.push(model.encode(&p, &params)?);
    }
    let cfg = FusionConfig {
        grid_instances: a.grid_instances,
        grid_points: a.grid_points,
        query_dim: a.query_dim,
        mode: a.mode.into(),
        search_range: a.range,
        prior_num: a.num,
    };
    let (qs, fs) = (derive_seed(a.seed, "queries"), derive_seed(a.seed, "fusion"));
    rec.manifest.seed("queries", qs);
    rec.manifest.seed("fusion", fs);
    let grid = QueryGrid::random(cfg.grid_instances, cfg.grid_points, cfg.query_dim, qs);
    let fusion = FusionParams::random(model.config.dim, cfg.query_dim, fs);
    let merged = merge(&grid, &bundles, &fusion, cfg.mode)?;
    let flags = Array::from_vec(
        &[cfg.grid_instances, cfg.grid_points],
        merged.prior_backed.iter().map(|&b| f64::from(u8::from(b))).collect(),
    )?;
    save_bundle(
        &a.out,
        a.seed,
        &serde_json::to_value(cfg)?,
        &[("features", &merged.features), ("prior_backed", &flags)],
    )?;
    eprintln!(
        "{} priors, {} prior-backed slots, {} instances and {} points dropped",
        priors.len(),
        merged.backed_count(),
        merged.dropped_instances,
        merged.dropped_points
    );
    rec.output(&a.out)?;
    rec.finish(&a.out)
}

fn cmd_degrade(cli: &Cli, a: &DegradeArgs) -> Result<()> {
    let mut rec = Recorder::new(cli, "degrade")?;
    if !(a.offset_std >= 0.0 && a.offset_std.is_finite()) {
        return Err(usage("--offset-std must be a finite non-negative number"));
    }
    rec.input(&a.map)?;
    let seed = derive_seed(a.seed, "degrade");
    rec.manifest.seed("degrade", seed);
    let maps = degrade_maps(&read_maps(&a.map)?, &a.drop, a.offset_std, seed)?;
    write_maps(&a.out, &maps)?;
    rec.output(&a.out)?;
    rec.finish(&a.out)
}

#[derive(Serialize)]
struct DistReport {
    maps: usize,
    points: usize,
    mean_error: f64,
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let mut rec = Recorder::new(cli, "eval")?;
    if a.tau.is_empty() || a.tau.iter().any(|t| !(*t > 0.0)) {
        return Err(usage("--tau needs positive thresholds"));
    }
    if !(a.resolution > 0.0) || !(a.line_width > 0.0) {
        return Err(usage("--resolution and --line-width must be positive"));
    }
    rec.input(&a.pred)?;
    rec.input(&a.gt)?;
    let (pred, gt) = (read_maps(&a.pred)?, read_maps(&a.gt)?);
    if pred.len() != gt.len() {
        bail!("{} predicted maps but {} ground-truth maps", pred.len(), gt.len());
    }
    let pairs: Vec<(VectorMap, VectorMap)> = pred.into_iter().zip(gt).collect();
    let report = match a.metric {
        Metric::Ap => serde_json::to_value(evaluate_ap(&pairs, &a.tau)?)?,
        Metric::Iou => {
            let win = window(cli);
            let grids = pairs
                .iter()
                .enumerate()
                .map(|(k, (p, g))| {
                    Ok((
                        rasterize(p, &win, a.resolution, a.line_width).with_context(|| format!("pred {k}"))?,
                        rasterize(g, &win, a.resolution, a.line_width).with_context(|| format!("gt {k}"))?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            serde_json::to_value(iou_dataset(&grids)?)?
        }
        Metric::Dist => {
            let (mut total, mut points) = (0.0, 0);
            for (k, (p, g)) in pairs.iter().enumerate() {
                if g.num_points() == 0 {
                    continue;
                }
                total += mean_point_error(p, g).with_context(|| format!("map pair {k}"))? * g.num_points() as f64;
                points += g.num_points();
            }
            if points == 0 {
                return Err(anyhow!("no points to compare"));
            }
            serde_json::to_value(DistReport {
                maps: pairs.len(),
                points,
                mean_error: total / points as f64,
            })?
        }
    };
    match &a.out {
        Some(path) => {
            write_json(path, &report)?;
            rec.output(path)?;
            rec.finish(path)
        }
        None => {
            let mut text = serde_json::to_string_pretty(&report)?;
            text.push('\n');
            to_stdout(text.as_bytes())
        }
    }
}

fn cmd_render(cli: &Cli, a: &RenderArgs) -> Result<()> {
    let mut rec = Recorder::new(cli, "render")?;
    rec.input(&a.map)?;
    let maps = read_maps(&a.map)?;
    let svg = render::render_svg(&maps, &window(cli));
    fs::write(&a.out, svg).with_context(|| format!("writing {}", a.out.display()))?;
    rec.output(&a.out)?;
    rec.finish(&a.out)
}

fn cmd_pipeline(cli: &Cli, a: &PipelineArgs) -> Result<()> {
    let mut rec = Recorder::new(cli, "pipeline")?;
    let win = window(cli);
    if a.synth == 0 || a.batch == 0 || !(a.lr > 0.0) || !(a.range > 0.0) || a.num == 0 {
        return Err(usage("--synth, --batch, --lr, --range and --num must be positive"));
    }
    let cfg = PipelineConfig {
        seed: a.seed,
        corpus_maps: a.synth,
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch,
        n_points: a.points,
        uve: uve_config(&a.encoder, &win, a.points)?,
        corruption: corruption_config(&a.corruption)?,
        fusion: FusionConfig {
            mode: a.merge.into(),
            search_range: a.range,
            prior_num: a.num,
            ..FusionConfig::default()
        },
        history_passes: a.history,
        eval_frames: a.frames,
        ..PipelineConfig::default()
    };
    for s in PIPELINE_STAGES {
        rec.manifest.seed(s, derive_seed(a.seed, s));
    }
    let (_, report) = run_pipeline(&cfg, &a.out_dir, |p| match p {
        Progress::Stage(s) => eprintln!("[{s}]"),
        Progress::Epoch(e) => match e.heldout_error {
            Some(h) => eprintln!("epoch {:>3}  loss {:.4}  held-out corrupted error {:.4} m", e.epoch, e.loss, h),
            None => eprintln!("epoch {:>3}  loss {:.4}", e.epoch, e.loss),
        },
    })?;
    for name in PIPELINE_OUTPUTS {
        rec.output(&a.out_dir.join(name))?;
    }
    eprintln!(
        "denoising: corrupted-point error {} m (input {} m); prior mAP raw {} denoised {}",
        fmt_opt(report.denoising.mean_error_corrupted),
        fmt_opt(report.denoising.identity_error_corrupted),
        fmt_opt(report.raw_prior.ap.map),
        fmt_opt(report.denoised_prior.ap.map),
    );
    rec.finish_at(&a.out_dir.join("manifest.json"), &a.out_dir.join("timing.json"))
}

/// Writes to stdout, treating a closed pipe as success.
fn to_stdout(bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(bytes).and_then(|()| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}
