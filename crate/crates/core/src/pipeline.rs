//! End-to-end desk-scale run (corpus, pre-training, prior store, retrieval,
//! fusion, evaluation), map degradation and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::checkpoint::save_bundle;
use crate::autodiff::Array;
use crate::derive_seed;
use crate::eval::{
    evaluate_ap, iou_dataset, rasterize, ApReport, IouReport, DEFAULT_RESOLUTION,
    DEFAULT_THRESHOLDS,
};
use crate::fusion::{merge, retrieve_priors, FusionConfig, FusionParams, PriorStore, QueryGrid};
use crate::map_io::{ego_to_world, prepare_ego_map, resample_map, world_to_ego, write_map_file};
use crate::pretrain::{
    corrupt_with, denoise_map, pretrain_loop_with_progress, synth_corpus, CorruptionConfig,
    EpochSummary, HeldoutMetrics, TrainConfig, TrainReport,
};
use crate::uve::{UveConfig, UveModel};
use crate::vector::{
    compute_directions, ElementType, Frame, PerceptionWindow, Pose, SourceTag, VectorInstance,
    VectorMap, VectorPoint,
};

/// A failure tagged with the pipeline stage that raised it.
#[derive(Debug, Error)]
#[error("stage `{stage}` failed: {message}")]
pub struct StageError {
    pub stage: &'static str,
    pub message: String,
    /// Numeric failure (divergence, non-finite values) rather than bad data.
    pub numeric: bool,
}

fn stage<E: std::fmt::Display>(name: &'static str) -> impl Fn(E) -> StageError {
    move |e| {
        let message = e.to_string();
        let numeric = message.contains("diverged") || message.contains("non-finite");
        StageError {
            stage: name,
            message,
            numeric,
        }
    }
}

/// Removes the listed classes and shifts each remaining instance by one
/// Gaussian offset (σ = `offset_std` per axis). The result is tagged as an
/// outdated HD map.
pub fn degrade_map<R: Rng>(
    map: &VectorMap,
    drop: &[ElementType],
    offset_std: f64,
    rng: &mut R,
) -> Result<VectorMap, crate::vector::VectorError> {
    let normal = Normal::new(0.0, offset_std.max(0.0)).expect("finite std");
    let mut instances = Vec::new();
    for inst in map.instances.iter().filter(|i| !drop.contains(&i.element_type())) {
        if offset_std > 0.0 {
            let (dx, dy) = (normal.sample(rng), normal.sample(rng));
            instances.push(inst.map_points(|p| VectorPoint {
                x: p.x + dx,
                y: p.y + dy,
                ..*p
            })?);
        } else {
            instances.push(inst.clone());
        }
    }
    Ok(VectorMap {
        instances,
        source: SourceTag::HdMapEx,
        ..map.clone()
    })
}

pub fn degrade_maps(
    maps: &[VectorMap],
    drop: &[ElementType],
    offset_std: f64,
    seed: u64,
) -> Result<Vec<VectorMap>, crate::vector::VectorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    maps.iter().map(|m| degrade_map(m, drop, offset_std, &mut rng)).collect()
}

/// A long global-frame road along world +y with poses that follow it.
#[derive(Debug, Clone)]
pub struct World {
    pub map: VectorMap,
    amplitude: f64,
    wavelength: f64,
    phase: f64,
}

impl World {
    fn lateral(&self, y: f64) -> f64 {
        self.amplitude * (std::f64::consts::TAU * y / self.wavelength + self.phase).sin()
    }

    fn slope(&self, y: f64) -> f64 {
        self.amplitude * std::f64::consts::TAU / self.wavelength
            * (std::f64::consts::TAU * y / self.wavelength + self.phase).cos()
    }

    /// Pose on the road centre at longitudinal position `y`, facing along the road.
    pub fn pose_at(&self, y: f64, lateral_offset: f64, yaw_offset: f64) -> Pose {
        Pose::new(self.lateral(y) + lateral_offset, y, -self.slope(y).atan() + yaw_offset)
    }
}

/// Dividers, two boundaries and periodic pedestrian crossings over
/// `y ∈ [-50, length + 50]`.
pub fn synth_world(seed: u64, length: f64) -> Result<World, crate::vector::VectorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lanes = rng.random_range(3..=5usize);
    let lane_w = rng.random_range(3.0..3.6);
    let mut world = World {
        map: VectorMap::new(Vec::new(), Frame::global(), SourceTag::GroundTruth),
        amplitude: rng.random_range(1.0..3.0),
        wavelength: rng.random_range(150.0..300.0),
        phase: rng.random_range(0.0..std::f64::consts::TAU),
    };
    let half = 0.5 * lanes as f64 * lane_w;
    let ys: Vec<f64> = (0..=(length as usize + 100)).map(|k| k as f64 - 50.0).collect();
    let line = |w: &World, offset: f64| ys.iter().map(|&y| (w.lateral(y) + offset, y)).collect::<Vec<_>>();
    let mut instances = Vec::new();
    let mk = |xy: &[(f64, f64)], t| VectorInstance::from_xy(xy, t, 1.0).map(|i| compute_directions(&i));
    for k in 1..lanes {
        instances.push(mk(&line(&world, k as f64 * lane_w - half), ElementType::LaneDivider)?);
    }
    instances.push(mk(&line(&world, -half - 0.5), ElementType::RoadBoundary)?);
    instances.push(mk(&line(&world, half + 0.5), ElementType::RoadBoundary)?);
    let mut y = rng.random_range(10.0..40.0);
    while y < length {
        let depth = rng.random_range(3.0..5.0);
        let c = world.lateral(y);
        let (xl, xr, ya, yb) = (c - half, c + half, y - 0.5 * depth, y + 0.5 * depth);
        instances.push(mk(
            &[(xl, ya), (xr, ya), (xr, yb), (xl, yb), (xl, ya)],
            ElementType::PedestrianCrossing,
        )?);
        y += rng.random_range(40.0..80.0);
    }
    world.map.instances = instances;
    Ok(world)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus_maps: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub n_points: usize,
    pub uve: UveConfig,
    pub corruption: CorruptionConfig,
    pub fusion: FusionConfig,
    /// Traversals that populate the prior store.
    pub history_passes: usize,
    pub eval_frames: usize,
    /// Longitudinal spacing of evaluation poses, meters.
    pub frame_spacing: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus_maps: 2000,
            epochs: 24,
            lr: 3e-3,
            batch_size: 8,
            n_points: 20,
            uve: UveConfig::default(),
            corruption: CorruptionConfig::default(),
            fusion: FusionConfig::default(),
            history_passes: 2,
            eval_frames: 20,
            frame_spacing: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapScores {
    pub ap: ApReport,
    pub iou: IouReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionSummary {
    pub mode: crate::fusion::MergeMode,
    pub grid: [usize; 3],
    pub mean_backed_slots: f64,
    pub dropped_instances: usize,
    pub dropped_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub frames: usize,
    pub frames_with_priors: usize,
    pub priors_retrieved: usize,
    pub store_entries: usize,
    /// Nearest retrieved prior, as stored, against ground truth.
    pub raw_prior: MapScores,
    /// The same prior after encoder reconstruction.
    pub denoised_prior: MapScores,
    /// Held-out reconstruction error from pre-training.
    pub denoising: HeldoutMetrics,
    pub fusion: FusionSummary,
}

/// Files written by [`run_pipeline`], relative to the output directory.
pub const PIPELINE_OUTPUTS: [&str; 6] = [
    "world.jsonl",
    "uve.ckpt",
    "train_report.json",
    "store.jsonl",
    "fused.bin",
    "eval_report.json",
];

/// Stage names whose seeds are derived from the run seed.
pub const PIPELINE_STAGES: [&str; 7] = ["synth", "pretrain", "world", "history", "eval", "queries", "fusion"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Progress<'a> {
    Stage(&'a str),
    Epoch(&'a EpochSummary),
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

/// Runs every stage and writes [`PIPELINE_OUTPUTS`] into `out_dir`.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    out_dir: &Path,
    mut progress: impl FnMut(Progress<'_>),
) -> Result<(TrainReport, PipelineReport), StageError> {
    let seed = |s: &str| derive_seed(cfg.seed, s);
    let window = cfg.uve.perception_window().map_err(stage("config"))?;
    fs::create_dir_all(out_dir).map_err(stage("config"))?;

    progress(Progress::Stage("synth"));
    let corpus = synth_corpus(cfg.corpus_maps, seed("synth"), &window, cfg.n_points).map_err(stage("synth"))?;

    progress(Progress::Stage("pretrain"));
    let train = TrainConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        seed: seed("pretrain"),
        ..TrainConfig::default()
    };
    let (params, train_report) =
        pretrain_loop_with_progress(&corpus, &cfg.uve, &cfg.corruption, &train, |e| {
            progress(Progress::Epoch(e))
        })
        .map_err(stage("pretrain"))?;
    drop(corpus);
    let model = UveModel::new(cfg.uve.clone()).map_err(stage("pretrain"))?;
    model.save(out_dir.join("uve.ckpt"), &params).map_err(stage("pretrain"))?;
    write_json(&out_dir.join("train_report.json"), &train_report).map_err(stage("pretrain"))?;

    progress(Progress::Stage("store"));
    let length = cfg.eval_frames as f64 * cfg.frame_spacing + 60.0;
    let world = synth_world(seed("world"), length).map_err(stage("store"))?;
    write_map_file(out_dir.join("world.jsonl"), std::slice::from_ref(&world.map)).map_err(stage("store"))?;
    let eval_ys: Vec<f64> = (0..cfg.eval_frames).map(|k| 30.0 + k as f64 * cfg.frame_spacing).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed("history"));
    let mut history = Vec::new();
    for _ in 0..cfg.history_passes {
        for &y in &eval_ys {
            let pose = world.pose_at(
                y + rng.random_range(-4.0..4.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.03..0.03),
            );
            let gt = ego_gt(&world, pose, &window, cfg.n_points).map_err(stage("store"))?;
            let (mut seen, _) = corrupt_with(&gt, &cfg.corruption, &mut rng).map_err(stage("store"))?;
            seen.source = SourceTag::OnlineLocal;
            history.push(ego_to_world(&seen, Some(pose)).map_err(stage("store"))?);
        }
    }
    write_map_file(out_dir.join("store.jsonl"), &history).map_err(stage("store"))?;
    let store = PriorStore::from_maps(&history).map_err(stage("store"))?;

    progress(Progress::Stage("fuse"));
    let fc = &cfg.fusion;
    let grid = QueryGrid::random(fc.grid_instances, fc.grid_points, fc.query_dim, seed("queries"));
    let fusion_params = FusionParams::random(cfg.uve.dim, fc.query_dim, seed("fusion"));
    let mut raw_pairs = Vec::new();
    let mut clean_pairs = Vec::new();
    let mut fused: Vec<(String, Array)> = Vec::new();
    let (mut frames_with_priors, mut priors_retrieved, mut backed, mut dropped_i, mut dropped_p) = (0, 0, 0, 0, 0);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed("eval"));
    for (k, &y) in eval_ys.iter().enumerate() {
        let pose = world.pose_at(y, eval_rng.random_range(-0.5..0.5), 0.0);
        let gt = ego_gt(&world, pose, &window, cfg.n_points).map_err(stage("fuse"))?;
        let priors = retrieve_priors(&store, pose, fc.search_range, fc.prior_num, &window).map_err(stage("fuse"))?;
        let priors = priors
            .iter()
            .map(|p| resample_map(p, cfg.n_points))
            .collect::<Result<Vec<_>, _>>()
            .map_err(stage("fuse"))?;
        let denoised = priors
            .iter()
            .map(|p| denoise_map(&model, &params, p))
            .collect::<Result<Vec<_>, _>>()
            .map_err(stage("fuse"))?;
        let bundles = priors
            .iter()
            .map(|p| model.encode(p, &params))
            .collect::<Result<Vec<_>, _>>()
            .map_err(stage("fuse"))?;
        let merged = merge(&grid, &bundles, &fusion_params, fc.mode).map_err(stage("fuse"))?;
        priors_retrieved += priors.len();
        frames_with_priors += usize::from(!priors.is_empty());
        backed += merged.backed_count();
        dropped_i += merged.dropped_instances;
        dropped_p += merged.dropped_points;
        let flags: Vec<f64> = merged.prior_backed.iter().map(|&b| f64::from(u8::from(b))).collect();
        fused.push((format!("frame{k:03}.features"), merged.features));
        fused.push((
            format!("frame{k:03}.prior_backed"),
            Array::from_vec(&[fc.grid_instances, fc.grid_points], flags).map_err(stage("fuse"))?,
        ));
        let empty = VectorMap::empty_ego(SourceTag::Prediction);
        raw_pairs.push((priors.first().cloned().unwrap_or_else(|| empty.clone()), gt.clone()));
        clean_pairs.push((denoised.first().cloned().unwrap_or(empty), gt));
    }
    let arrays: Vec<(&str, &Array)> = fused.iter().map(|(n, a)| (n.as_str(), a)).collect();
    let fusion_meta = serde_json::to_value(fc).map_err(stage("fuse"))?;
    save_bundle(out_dir.join("fused.bin"), cfg.seed, &fusion_meta, &arrays).map_err(stage("fuse"))?;

    progress(Progress::Stage("eval"));
    let score = |pairs: &[(VectorMap, VectorMap)]| -> Result<MapScores, StageError> {
        let ap = evaluate_ap(pairs, &DEFAULT_THRESHOLDS).map_err(stage("eval"))?;
        let grids = pairs
            .iter()
            .map(|(p, g)| {
                Ok((
                    rasterize(p, &window, DEFAULT_RESOLUTION, DEFAULT_RESOLUTION)?,
                    rasterize(g, &window, DEFAULT_RESOLUTION, DEFAULT_RESOLUTION)?,
                ))
            })
            .collect::<Result<Vec<_>, crate::eval::EvalError>>()
            .map_err(stage("eval"))?;
        let iou = iou_dataset(&grids).map_err(stage("eval"))?;
        Ok(MapScores { ap, iou })
    };
    let report = PipelineReport {
        frames: cfg.eval_frames,
        frames_with_priors,
        priors_retrieved,
        store_entries: store.len(),
        raw_prior: score(&raw_pairs)?,
        denoised_prior: score(&clean_pairs)?,
        denoising: train_report.final_metrics.clone(),
        fusion: FusionSummary {
            mode: fc.mode,
            grid: [fc.grid_instances, fc.grid_points, fc.query_dim],
            mean_backed_slots: backed as f64 / cfg.eval_frames.max(1) as f64,
            dropped_instances: dropped_i,
            dropped_points: dropped_p,
        },
    };
    write_json(&out_dir.join("eval_report.json"), &report).map_err(stage("eval"))?;
    Ok((train_report, report))
}

fn ego_gt(
    world: &World,
    pose: Pose,
    window: &PerceptionWindow,
    n_points: usize,
) -> Result<VectorMap, crate::map_io::MapIoError> {
    let ego = world_to_ego(&world.map, pose)?;
    let mut m = prepare_ego_map(&ego, window, n_points)?;
    m.instances.retain(|i| i.arc_length() >= 1.0);
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHash {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_file(path: impl AsRef<Path>) -> std::io::Result<String> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Record of one command: arguments, resolved flags, seeds and content
/// hashes of everything read and written. Wall-clock time lives in a
/// separate [`Timing`] file so that reruns give identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub flags: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<ArtifactHash>,
    pub outputs: Vec<ArtifactHash>,
}

impl RunManifest {
    pub fn new(subcommand: &str, argv: Vec<String>, flags: serde_json::Value) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            argv,
            flags,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    fn hash(path: &Path) -> std::io::Result<ArtifactHash> {
        Ok(ArtifactHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }

    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs.push(Self::hash(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> std::io::Result<()> {
        self.outputs.push(Self::hash(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        write_json(path, self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub subcommand: String,
    pub wall_clock_s: f64,
}

impl Timing {
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        write_json(path, self)
    }
}

/// `<path>.manifest.json` and `<path>.timing.json` beside an output file.
pub fn sidecar_paths(output: &Path) -> (PathBuf, PathBuf) {
    let name = output.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    (
        output.with_file_name(format!("{name}.manifest.json")),
        output.with_file_name(format!("{name}.timing.json")),
    )
}
