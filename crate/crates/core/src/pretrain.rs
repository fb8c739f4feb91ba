//! Position-modeling pre-training: corruption, reconstruction loss, the
//! training loop and a procedural corpus.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, AdamConfig, Array, AutodiffError, Graph, ParamStore, Var};
use crate::derive_seed;
use crate::eval::EvalError;
use crate::map_io::{clip_to_window, resample_map, MapIoError};
use crate::uve::{apply_coordinates, UveConfig, UveError, UveModel};
use crate::vector::{
    compute_directions, ElementType, Frame, PerceptionWindow, SourceTag, VectorError,
    VectorInstance, VectorMap, VectorPoint,
};

/// Coordinate written into masked points.
pub const MASK_VALUE: f64 = -1.0;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("corruption needs an ego-frame map")]
    NotEgo,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("no valid points")]
    NoValidPoints,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at step {step} (epoch {epoch}): {detail}")]
    Divergence { step: u64, epoch: usize, detail: String },
    #[error(transparent)]
    Uve(#[from] UveError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    MapIo(#[from] MapIoError),
}

type Result<T> = std::result::Result<T, PretrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    Noise,
    Mask,
    None,
}

impl FromStr for CorruptionMode {
    type Err = PretrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Self::Noise),
            "mask" => Ok(Self::Mask),
            "none" => Ok(Self::None),
            other => Err(PretrainError::Config(format!("unknown corruption mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub mode: CorruptionMode,
    /// Fraction of instances that get one corrupted contiguous sub-segment.
    pub seg_fraction: f64,
    /// Probability that each remaining point is corrupted on its own.
    pub pt_fraction: f64,
    /// Gaussian σ in meters for noise mode.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            mode: CorruptionMode::Noise,
            seg_fraction: 0.10,
            pt_fraction: 0.05,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("seg_fraction", self.seg_fraction), ("pt_fraction", self.pt_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PretrainError::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(PretrainError::Config(format!("noise_std = {}", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorruptedPoint {
    pub instance: usize,
    pub point: usize,
    pub original: (f64, f64),
    /// Added offset in noise mode, `None` when the point was masked.
    pub delta: Option<(f64, f64)>,
    /// Chosen as part of a segment rather than individually.
    pub segment: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CorruptionPlan {
    /// Sorted by (instance, point); each point at most once.
    pub points: Vec<CorruptedPoint>,
    /// Instances that received a segment, ascending.
    pub segment_instances: Vec<usize>,
    /// Points eligible for point-level selection (outside every segment).
    pub candidate_points: usize,
}

impl CorruptionPlan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn indices(&self) -> Vec<(usize, usize)> {
        self.points.iter().map(|p| (p.instance, p.point)).collect()
    }

    pub fn point_level(&self) -> usize {
        self.points.iter().filter(|p| !p.segment).count()
    }
}

/// `floor(x)` plus one with probability `frac(x)`, so the expectation is `x`.
fn stochastic_round<R: Rng>(x: f64, rng: &mut R) -> usize {
    let base = x.floor();
    base as usize + usize::from(rng.random::<f64>() < x - base)
}

pub fn corrupt(map: &VectorMap, cfg: &CorruptionConfig) -> Result<(VectorMap, CorruptionPlan)> {
    corrupt_with(map, cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Corruption drawing from a caller-provided RNG; `cfg.seed` is ignored.
pub fn corrupt_with<R: Rng>(
    map: &VectorMap,
    cfg: &CorruptionConfig,
    rng: &mut R,
) -> Result<(VectorMap, CorruptionPlan)> {
    if !map.frame.is_ego() {
        return Err(PretrainError::NotEgo);
    }
    cfg.validate()?;
    let m = map.instances.len();
    if cfg.mode == CorruptionMode::None || m == 0 {
        return Ok((
            map.clone(),
            CorruptionPlan {
                candidate_points: if cfg.mode == CorruptionMode::None { 0 } else { map.num_points() },
                ..CorruptionPlan::default()
            },
        ));
    }

    let mut selected: Vec<Vec<Option<bool>>> =
        map.instances.iter().map(|i| vec![None; i.len()]).collect();
    let k = stochastic_round(cfg.seg_fraction * m as f64, rng).min(m);
    let mut segment_instances = rand::seq::index::sample(rng, m, k).into_vec();
    segment_instances.sort_unstable();
    for &i in &segment_instances {
        let n = map.instances[i].len();
        let lo = ((0.3 * n as f64).ceil() as usize).max(2).min(n);
        let hi = ((0.7 * n as f64).floor() as usize).max(lo).min(n);
        let span = rng.random_range(lo..=hi);
        let start = rng.random_range(0..=n - span);
        for s in &mut selected[i][start..start + span] {
            *s = Some(true);
        }
    }
    let mut candidate_points = 0;
    for inst in &mut selected {
        for s in inst.iter_mut().filter(|s| s.is_none()) {
            candidate_points += 1;
            if rng.random::<f64>() < cfg.pt_fraction {
                *s = Some(false);
            }
        }
    }

    let normal = Normal::new(0.0, cfg.noise_std).expect("validated std");
    let mut plan = CorruptionPlan {
        points: Vec::new(),
        segment_instances,
        candidate_points,
    };
    let mut instances = Vec::with_capacity(m);
    for (i, inst) in map.instances.iter().enumerate() {
        let mut j = 0;
        let moved = inst.map_points(|p| {
            let mut q = *p;
            if let Some(segment) = selected[i][j] {
                let delta = match cfg.mode {
                    CorruptionMode::Noise => {
                        let d = (normal.sample(rng), normal.sample(rng));
                        q.x += d.0;
                        q.y += d.1;
                        Some(d)
                    }
                    _ => {
                        q.x = MASK_VALUE;
                        q.y = MASK_VALUE;
                        None
                    }
                };
                plan.points.push(CorruptedPoint {
                    instance: i,
                    point: j,
                    original: (p.x, p.y),
                    delta,
                    segment,
                });
            }
            j += 1;
            q
        })?;
        instances.push(moved);
    }
    Ok((
        VectorMap {
            instances,
            ..map.clone()
        },
        plan,
    ))
}

/// `[points, 2]` coordinates in instance-major order.
pub fn map_coordinates(map: &VectorMap) -> Array {
    let data: Vec<f64> = map
        .instances
        .iter()
        .flat_map(|i| i.points().iter().flat_map(|p| [p.x, p.y]))
        .collect();
    let n = data.len() / 2;
    Array::from_vec(&[n, 2], data).expect("two values per point")
}

fn check_loss_shapes(pred: &[usize], target: &[usize]) -> Result<usize> {
    if pred != target || target.len() != 2 || target[1] != 2 {
        return Err(PretrainError::Shape(format!("prediction {pred:?} vs target {target:?}")));
    }
    if target[0] == 0 {
        return Err(PretrainError::NoValidPoints);
    }
    Ok(target[0])
}

/// RMSE between `[points, 2]` arrays: sqrt of the mean squared Euclidean distance.
pub fn reconstruction_loss(pred: &Array, target: &Array) -> Result<f64> {
    let n = check_loss_shapes(pred.shape(), target.shape())?;
    let sq: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / n as f64).sqrt())
}

/// Differentiable form of [`reconstruction_loss`].
pub fn reconstruction_loss_graph(g: &mut Graph, pred: Var, target: &Array) -> Result<Var> {
    let n = check_loss_shapes(g.value(pred).shape(), target.shape())?;
    let t = g.constant(target.clone())?;
    let d = g.sub(pred, t)?;
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    let s = g.scale(s, 1.0 / n as f64)?;
    Ok(g.sqrt(s)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub heldout_fraction: f64,
    /// Anneal the step size from `lr` towards zero along a half cosine over
    /// all steps; constant `lr` otherwise.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            lr: 3e-3,
            batch_size: 8,
            seed: 0,
            heldout_fraction: 0.1,
            cosine_decay: true,
        }
    }
}

/// Reconstruction quality on the held-out maps, pooled over points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeldoutMetrics {
    pub rmse: f64,
    pub mean_error_all: f64,
    /// Over corrupted points only; `None` if nothing was corrupted.
    pub mean_error_corrupted: Option<f64>,
    /// The corrupted input itself scored against the clean map.
    pub identity_error_all: f64,
    pub identity_error_corrupted: Option<f64>,
    pub points: usize,
    pub corrupted_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub uve: UveConfig,
    pub corruption: CorruptionConfig,
    pub train: TrainConfig,
    pub train_maps: usize,
    pub heldout_maps: usize,
    /// True when the corpus was too small to hold maps out and the metrics
    /// are computed on the training maps.
    pub heldout_is_train: bool,
    pub steps: u64,
    pub num_params: usize,
    /// Mean training RMSE per epoch.
    pub epoch_loss: Vec<f64>,
    /// Held-out mean error on corrupted points after each epoch.
    pub epoch_heldout_error: Vec<Option<f64>>,
    pub initial: HeldoutMetrics,
    #[serde(rename = "final")]
    pub final_metrics: HeldoutMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub loss: f64,
    pub heldout_error: Option<f64>,
}

struct Heldout {
    clean: Vec<VectorMap>,
    corrupted: Vec<VectorMap>,
    plans: Vec<CorruptionPlan>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn evaluate_heldout(model: &UveModel, params: &ParamStore, h: &Heldout) -> Result<HeldoutMetrics> {
    let (mut sq, mut all, mut corr, mut id_all, mut id_corr) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut points, mut corrupted_points) = (0usize, 0usize);
    for ((clean, noisy), plan) in h.clean.iter().zip(&h.corrupted).zip(&h.plans) {
        if clean.instances.is_empty() {
            continue;
        }
        let pred = model.reconstruct(noisy, params)?;
        let target = map_coordinates(clean);
        let input = map_coordinates(noisy);
        for r in 0..target.rows() {
            let d = dist(pred.row(r), target.row(r));
            sq += d * d;
            all += d;
            id_all += dist(input.row(r), target.row(r));
        }
        let offsets: Vec<usize> = clean
            .instances
            .iter()
            .scan(0, |acc, i| {
                let start = *acc;
                *acc += i.len();
                Some(start)
            })
            .collect();
        for p in &plan.points {
            let r = offsets[p.instance] + p.point;
            corr += dist(pred.row(r), target.row(r));
            id_corr += dist(input.row(r), target.row(r));
        }
        points += target.rows();
        corrupted_points += plan.len();
    }
    if points == 0 {
        return Err(PretrainError::NoValidPoints);
    }
    let n = points as f64;
    let per_corrupted = |v: f64| (corrupted_points > 0).then(|| v / corrupted_points as f64);
    Ok(HeldoutMetrics {
        rmse: (sq / n).sqrt(),
        mean_error_all: all / n,
        mean_error_corrupted: per_corrupted(corr),
        identity_error_all: id_all / n,
        identity_error_corrupted: per_corrupted(id_corr),
        points,
        corrupted_points,
    })
}

fn diverged(step: u64, epoch: usize, e: impl std::fmt::Display) -> PretrainError {
    PretrainError::Divergence {
        step,
        epoch,
        detail: e.to_string(),
    }
}

/// Non-finite values anywhere in `e` become a divergence at `step`.
fn as_divergence(e: PretrainError, step: u64, epoch: usize) -> PretrainError {
    match e {
        PretrainError::Uve(u) if is_numeric(&u) => diverged(step, epoch, u),
        PretrainError::Autodiff(a @ (AutodiffError::NonFinite { .. } | AutodiffError::NonFiniteGrad { .. })) => {
            diverged(step, epoch, a)
        }
        e => e,
    }
}

fn is_numeric(e: &UveError) -> bool {
    matches!(
        e,
        UveError::Autodiff(AutodiffError::NonFinite { .. } | AutodiffError::NonFiniteGrad { .. })
    )
}

pub fn pretrain_loop(
    corpus: &[VectorMap],
    uve: &UveConfig,
    corruption: &CorruptionConfig,
    train: &TrainConfig,
) -> Result<(ParamStore, TrainReport)> {
    pretrain_loop_with_progress(corpus, uve, corruption, train, |_| {})
}

/// Trains a fresh encoder and coordinate head to reconstruct clean maps from
/// corrupted ones. The last `heldout_fraction` of the corpus is held out.
pub fn pretrain_loop_with_progress(
    corpus: &[VectorMap],
    uve: &UveConfig,
    corruption: &CorruptionConfig,
    train: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<(ParamStore, TrainReport)> {
    if corpus.is_empty() {
        return Err(PretrainError::EmptyCorpus);
    }
    corruption.validate()?;
    if train.batch_size == 0 || !(train.lr > 0.0) || !(0.0..1.0).contains(&train.heldout_fraction) {
        return Err(PretrainError::Config(format!("bad training config {train:?}")));
    }
    let model = UveModel::new(uve.clone())?;
    let mut params = model.init_params(derive_seed(train.seed, "init"))?;

    let n_held = if corpus.len() < 2 {
        0
    } else {
        ((train.heldout_fraction * corpus.len() as f64).round() as usize).min(corpus.len() - 1)
    };
    let (train_maps, held_maps) = corpus.split_at(corpus.len() - n_held);
    let held_source = if n_held == 0 { train_maps } else { held_maps };
    let mut held_rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, "heldout"));
    let mut heldout = Heldout {
        clean: held_source.to_vec(),
        corrupted: Vec::new(),
        plans: Vec::new(),
    };
    for m in held_source {
        let (c, p) = corrupt_with(m, corruption, &mut held_rng)?;
        heldout.corrupted.push(c);
        heldout.plans.push(p);
    }
    let initial = evaluate_heldout(&model, &params, &heldout)?;

    let targets: Vec<Array> = train_maps.iter().map(map_coordinates).collect();
    let mut order: Vec<usize> = (0..train_maps.len())
        .filter(|&i| !train_maps[i].instances.is_empty())
        .collect();
    if order.is_empty() {
        return Err(PretrainError::NoValidPoints);
    }
    let mut adam = AdamConfig {
        lr: train.lr,
        ..AdamConfig::default()
    };
    let total_steps = (train.epochs * order.len().div_ceil(train.batch_size)).max(1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, "train"));
    let mut epoch_loss = Vec::with_capacity(train.epochs);
    let mut epoch_heldout_error = Vec::with_capacity(train.epochs);
    let mut step = 0u64;
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size) {
            params.zero_grads();
            for &i in batch {
                let (noisy, _) = corrupt_with(&train_maps[i], corruption, &mut rng)?;
                let mut g = Graph::new();
                let step_err = |e: UveError| {
                    if is_numeric(&e) {
                        diverged(step, epoch, e)
                    } else {
                        e.into()
                    }
                };
                let (tokens, states) = model.forward(&mut g, &noisy, &params).map_err(step_err)?;
                let pred = model
                    .decode_coordinates(&mut g, states, &tokens, &params)
                    .map_err(step_err)?;
                let loss = reconstruction_loss_graph(&mut g, pred, &targets[i])
                    .map_err(|e| diverged(step, epoch, e))?;
                total += g.value(loss).item();
                g.backward(loss).map_err(|e| diverged(step, epoch, e))?;
                params.accumulate_grads(&g);
            }
            params.scale_grads(1.0 / batch.len() as f64);
            if train.cosine_decay {
                let progress = step as f64 / total_steps;
                adam.lr = train.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            }
            adam_step(&mut params, &adam).map_err(|e| diverged(step, epoch, e))?;
            step += 1;
        }
        let loss = total / order.len() as f64;
        let held = evaluate_heldout(&model, &params, &heldout)
            .map_err(|e| as_divergence(e, step, epoch))?
            .mean_error_corrupted;
        epoch_loss.push(loss);
        epoch_heldout_error.push(held);
        on_epoch(&EpochSummary {
            epoch: epoch + 1,
            loss,
            heldout_error: held,
        });
    }
    let final_metrics =
        evaluate_heldout(&model, &params, &heldout).map_err(|e| as_divergence(e, step, train.epochs))?;
    let report = TrainReport {
        uve: uve.clone(),
        corruption: *corruption,
        train: *train,
        train_maps: train_maps.len(),
        heldout_maps: n_held,
        heldout_is_train: n_held == 0,
        steps: step,
        num_params: params.num_scalars(),
        epoch_loss,
        epoch_heldout_error,
        initial,
        final_metrics,
    };
    Ok((params, report))
}

/// Runs the encoder and coordinate head on `map` and returns the
/// reconstructed map with recomputed directions.
pub fn denoise_map(model: &UveModel, params: &ParamStore, map: &VectorMap) -> Result<VectorMap> {
    let coords = model.reconstruct(map, params)?;
    Ok(apply_coordinates(map, &coords)?)
}

/// Shape parameters of one procedural road scene.
struct Road {
    center: f64,
    heading: f64,
    curvature: f64,
}

impl Road {
    fn shift(&self, y: f64) -> f64 {
        self.center + self.heading * y + self.curvature * y * y
    }
}

fn polyline(
    xy: Vec<(f64, f64)>,
    t: ElementType,
) -> Result<VectorInstance> {
    Ok(compute_directions(&VectorInstance::from_xy(&xy, t, 1.0)?))
}

/// One ego-frame scene: 2–4 lane dividers, a road boundary on each side and
/// 0–2 pedestrian crossings spanning the road, clipped to `window` and
/// resampled to `n_points`.
pub fn synth_map<R: Rng>(rng: &mut R, window: &PerceptionWindow, n_points: usize) -> Result<VectorMap> {
    let lanes = rng.random_range(3..=5usize);
    let lane_w = rng.random_range(3.0..3.6);
    let road = Road {
        center: rng.random_range(-2.0..2.0),
        heading: rng.random_range(-0.05..0.05),
        curvature: rng.random_range(-0.002..0.002),
    };
    let half = 0.5 * lanes as f64 * lane_w;
    let margins = (rng.random_range(0.3..0.8), rng.random_range(0.3..0.8));
    let (y0, y1) = (window.y_min - 5.0, window.y_max + 5.0);
    let steps = ((y1 - y0) / 1.0).ceil() as usize;
    let ys: Vec<f64> = (0..=steps).map(|k| y0 + (y1 - y0) * k as f64 / steps as f64).collect();
    let line = |offset: f64| ys.iter().map(|&y| (road.shift(y) + offset, y)).collect::<Vec<_>>();

    let mut instances = Vec::new();
    for k in 1..lanes {
        instances.push(polyline(line(k as f64 * lane_w - half), ElementType::LaneDivider)?);
    }
    instances.push(polyline(line(-half - margins.0), ElementType::RoadBoundary)?);
    instances.push(polyline(line(half + margins.1), ElementType::RoadBoundary)?);

    let crossings = rng.random_range(0..=2usize);
    let mut centers: Vec<f64> = Vec::new();
    for _ in 0..crossings {
        let yc = rng.random_range(window.y_min + 4.0..window.y_max - 4.0);
        if centers.iter().any(|c| (c - yc).abs() < 10.0) {
            continue;
        }
        centers.push(yc);
        let depth = rng.random_range(3.0..5.0);
        let (xl, xr) = (road.shift(yc) - half, road.shift(yc) + half);
        let (ya, yb) = (yc - 0.5 * depth, yc + 0.5 * depth);
        let rect = vec![(xl, ya), (xr, ya), (xr, yb), (xl, yb), (xl, ya)];
        instances.push(polyline(rect, ElementType::PedestrianCrossing)?);
    }
    let map = VectorMap::new(instances, Frame::Ego, SourceTag::GroundTruth);
    let mut clipped = clip_to_window(&map, window)?;
    clipped.instances.retain(|i| i.arc_length() >= 1.0);
    Ok(resample_map(&clipped, n_points)?)
}

/// `n_maps` procedural scenes from one seed.
pub fn synth_corpus(
    n_maps: usize,
    seed: u64,
    window: &PerceptionWindow,
    n_points: usize,
) -> Result<Vec<VectorMap>> {
    if n_maps == 0 {
        return Err(PretrainError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_maps).map(|_| synth_map(&mut rng, window, n_points)).collect()
}

/// Moves every point of `map` by `f`, keeping directions untouched.
pub fn offset_points(map: &VectorMap, mut f: impl FnMut(&VectorPoint) -> (f64, f64)) -> Result<VectorMap> {
    let instances = map
        .instances
        .iter()
        .map(|i| {
            i.map_points(|p| {
                let (x, y) = f(p);
                VectorPoint { x, y, ..*p }
            })
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(VectorMap {
        instances,
        ..map.clone()
    })
}
