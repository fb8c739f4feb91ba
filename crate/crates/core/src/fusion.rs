//! Prior storage and retrieval, and merging encoded priors into learnable
//! query grids.

use std::collections::HashMap;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Array;
use crate::map_io::{clip_to_window, world_to_ego, MapIoError};
use crate::uve::PriorFeatureBundle;
use crate::vector::{PerceptionWindow, Pose, VectorMap};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("prior store entries must be global-frame maps")]
    NotGlobal,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("feature width {found} does not match {expected}")]
    Width { expected: usize, found: usize },
    #[error(transparent)]
    MapIo(#[from] MapIoError),
}

type Result<T> = std::result::Result<T, FusionError>;

pub const DEFAULT_SEARCH_RANGE: f64 = 5.0;
pub const DEFAULT_PRIOR_NUM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Add,
    Replace,
    Concat,
}

impl Default for MergeMode {
    fn default() -> Self {
        Self::Concat
    }
}

impl FromStr for MergeMode {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Self::Add),
            "replace" => Ok(Self::Replace),
            "concat" => Ok(Self::Concat),
            other => Err(FusionError::Invalid(format!("unknown merge mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Instance rows of the query grid.
    pub grid_instances: usize,
    /// Point columns of the query grid.
    pub grid_points: usize,
    pub query_dim: usize,
    pub mode: MergeMode,
    pub search_range: f64,
    pub prior_num: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            grid_instances: 50,
            grid_points: 20,
            query_dim: 64,
            mode: MergeMode::Concat,
            search_range: DEFAULT_SEARCH_RANGE,
            prior_num: DEFAULT_PRIOR_NUM,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntry {
    pub pose: Pose,
    /// Global frame.
    pub map: VectorMap,
    pub timestamp: u64,
}

/// Prior maps keyed by the world position of their pose, bucketed in a
/// uniform grid.
#[derive(Debug, Clone)]
pub struct PriorStore {
    entries: Vec<StoreEntry>,
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl Default for PriorStore {
    fn default() -> Self {
        Self::new(10.0)
    }
}

impl PriorStore {
    pub fn new(cell_size: f64) -> Self {
        assert!(cell_size > 0.0 && cell_size.is_finite(), "cell size must be positive");
        Self {
            entries: Vec::new(),
            cell: cell_size,
            buckets: HashMap::new(),
        }
    }

    /// One entry per map, using each map's pose and its index as timestamp.
    pub fn from_maps(maps: &[VectorMap]) -> Result<Self> {
        let mut store = Self::default();
        for (t, m) in maps.iter().enumerate() {
            let pose = m
                .pose
                .ok_or_else(|| FusionError::Invalid(format!("store map {t} has no pose")))?;
            store.insert(pose, m.clone(), t as u64)?;
        }
        Ok(store)
    }

    fn key(&self, x: f64, y: f64) -> (i64, i64) {
        ((x / self.cell).floor() as i64, (y / self.cell).floor() as i64)
    }

    pub fn insert(&mut self, pose: Pose, map: VectorMap, timestamp: u64) -> Result<()> {
        if map.frame.is_ego() {
            return Err(FusionError::NotGlobal);
        }
        if !(pose.x.is_finite() && pose.y.is_finite() && pose.yaw.is_finite()) {
            return Err(FusionError::Invalid("non-finite pose".into()));
        }
        let key = self.key(pose.x, pose.y);
        self.buckets.entry(key).or_default().push(self.entries.len());
        self.entries.push(StoreEntry { pose, map, timestamp });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[StoreEntry] {
        &self.entries
    }

    /// Entries whose pose position is within `radius` (inclusive) of
    /// `(x, y)`, nearest first, ties by newer timestamp then insertion order.
    /// Returns `(entry index, distance)`.
    pub fn query(&self, x: f64, y: f64, radius: f64) -> Vec<(usize, f64)> {
        if !(radius >= 0.0) {
            return Vec::new();
        }
        let (c0, r0) = self.key(x - radius, y - radius);
        let (c1, r1) = self.key(x + radius, y + radius);
        let mut hits = Vec::new();
        for c in c0..=c1 {
            for r in r0..=r1 {
                for &i in self.buckets.get(&(c, r)).into_iter().flatten() {
                    let p = &self.entries[i].pose;
                    let d = ((p.x - x).powi(2) + (p.y - y).powi(2)).sqrt();
                    if d <= radius {
                        hits.push((i, d));
                    }
                }
            }
        }
        hits.sort_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then(self.entries[b.0].timestamp.cmp(&self.entries[a.0].timestamp))
                .then(a.0.cmp(&b.0))
        });
        hits
    }
}

/// Up to `prior_num` stored maps near `pose`, in the ego frame of `pose` and
/// clipped to `window`, nearest first.
pub fn retrieve_priors(
    store: &PriorStore,
    pose: Pose,
    search_range: f64,
    prior_num: usize,
    window: &PerceptionWindow,
) -> Result<Vec<VectorMap>> {
    if !(search_range > 0.0) || prior_num == 0 {
        return Err(FusionError::Invalid(format!(
            "search_range {search_range} and prior_num {prior_num} must be positive"
        )));
    }
    store
        .query(pose.x, pose.y, search_range)
        .into_iter()
        .take(prior_num)
        .map(|(i, _)| {
            let ego = world_to_ego(&store.entries[i].map, pose)?;
            Ok(clip_to_window(&ego, window)?)
        })
        .collect()
}

/// Learnable instance and point queries; slot (i, j) is `q_ins[i] + q_pt[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGrid {
    /// `[m, query_dim]`
    pub q_ins: Array,
    /// `[n, query_dim]`
    pub q_pt: Array,
}

impl QueryGrid {
    pub fn new(q_ins: Array, q_pt: Array) -> Result<Self> {
        if q_ins.rank() != 2 || q_pt.rank() != 2 || q_ins.last_dim() != q_pt.last_dim() {
            return Err(FusionError::Invalid(format!(
                "query shapes {:?} and {:?}",
                q_ins.shape(),
                q_pt.shape()
            )));
        }
        Ok(Self { q_ins, q_pt })
    }

    pub fn random(m: usize, n: usize, query_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut draw = |rows: usize| {
            let data = (0..rows * query_dim).map(|_| normal.sample(&mut rng)).collect();
            Array::from_vec(&[rows, query_dim], data).expect("sizes agree")
        };
        let q_ins = draw(m);
        let q_pt = draw(n);
        Self { q_ins, q_pt }
    }

    pub fn instances(&self) -> usize {
        self.q_ins.shape()[0]
    }

    pub fn points(&self) -> usize {
        self.q_pt.shape()[0]
    }

    pub fn query_dim(&self) -> usize {
        self.q_ins.last_dim()
    }

    /// `[m, n, query_dim]` slot features.
    pub fn compose(&self) -> Array {
        let (m, n, d) = (self.instances(), self.points(), self.query_dim());
        let mut data = Vec::with_capacity(m * n * d);
        for i in 0..m {
            for j in 0..n {
                data.extend(self.q_ins.row(i).iter().zip(self.q_pt.row(j)).map(|(a, b)| a + b));
            }
        }
        Array::from_vec(&[m, n, d], data).expect("sizes agree")
    }
}

/// Shared merge parameters: projection `p` from encoder width to query
/// width (no bias), concat down-projection `down` and the null prior.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `[uve_dim, query_dim]`
    pub projection: Array,
    /// `[2 * query_dim, query_dim]`
    pub down: Array,
    /// `[query_dim]`
    pub null_prior: Array,
}

impl FusionParams {
    pub fn random(uve_dim: usize, query_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |shape: &[usize], std: f64| {
            let normal = Normal::new(0.0, std).expect("finite std");
            let data = (0..shape.iter().product::<usize>()).map(|_| normal.sample(&mut rng)).collect();
            Array::from_vec(shape, data).expect("sizes agree")
        };
        let projection = draw(&[uve_dim, query_dim], 1.0 / (uve_dim as f64).sqrt());
        let down = draw(&[2 * query_dim, query_dim], 1.0 / (2.0 * query_dim as f64).sqrt());
        let null_prior = draw(&[query_dim], 0.02);
        Self {
            projection,
            down,
            null_prior,
        }
    }

    /// Projection `[I | 0]` (truncating or zero-padding), down-projection
    /// `[I; 0]` and zero null prior: concat merging then returns the grid.
    pub fn identity(uve_dim: usize, query_dim: usize) -> Self {
        let mut projection = Array::zeros(&[uve_dim, query_dim]);
        for k in 0..uve_dim.min(query_dim) {
            projection.data_mut()[k * query_dim + k] = 1.0;
        }
        let mut down = Array::zeros(&[2 * query_dim, query_dim]);
        for k in 0..query_dim {
            down.data_mut()[k * query_dim + k] = 1.0;
        }
        Self {
            projection,
            down,
            null_prior: Array::zeros(&[query_dim]),
        }
    }

    pub fn uve_dim(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn query_dim(&self) -> usize {
        self.projection.shape()[1]
    }

    fn project(&self, f: &[f64]) -> Vec<f64> {
        let qd = self.query_dim();
        let mut out = vec![0.0; qd];
        for (k, &v) in f.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.projection.data()[k * qd..(k + 1) * qd]) {
                *o += v * w;
            }
        }
        out
    }

    fn down_project(&self, c: &[f64]) -> Vec<f64> {
        let qd = self.query_dim();
        let mut out = vec![0.0; qd];
        for (k, &v) in c.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.down.data()[k * qd..(k + 1) * qd]) {
                *o += v * w;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedQueries {
    /// `[m, n, query_dim]`
    pub features: Array,
    /// Row-major `[m, n]`: true where a prior covered the slot.
    pub prior_backed: Vec<bool>,
    /// Prior instances and points that did not fit in the grid.
    pub dropped_instances: usize,
    pub dropped_points: usize,
}

impl MergedQueries {
    pub fn backed_count(&self) -> usize {
        self.prior_backed.iter().filter(|&&b| b).count()
    }

    pub fn slot(&self, i: usize, j: usize) -> &[f64] {
        let (n, d) = (self.features.shape()[1], self.features.shape()[2]);
        &self.features.data()[(i * n + j) * d..(i * n + j + 1) * d]
    }
}

/// Prior coverage of the grid: slot -> (instance feature, point feature).
struct Coverage<'a> {
    slots: Vec<Option<(&'a [f64], &'a [f64])>>,
    dropped_instances: usize,
    dropped_points: usize,
}

fn coverage<'a>(grid: &QueryGrid, bundles: &'a [PriorFeatureBundle], uve_dim: usize) -> Result<Coverage<'a>> {
    let (m, n) = (grid.instances(), grid.points());
    let mut cov = Coverage {
        slots: vec![None; m * n],
        dropped_instances: 0,
        dropped_points: 0,
    };
    let mut next = 0;
    for b in bundles {
        if b.num_instances() > 0 && b.dim() != uve_dim {
            return Err(FusionError::Width {
                expected: uve_dim,
                found: b.dim(),
            });
        }
        for i in 0..b.num_instances() {
            if next >= m {
                cov.dropped_instances += 1;
                continue;
            }
            let np = b.points_per_instance();
            cov.dropped_points += np.saturating_sub(n);
            for j in 0..np.min(n) {
                cov.slots[next * n + j] = Some((b.instance_feature(i), b.point_feature(i, j)));
            }
            next += 1;
        }
    }
    Ok(cov)
}

/// Merges one or more encoded priors (nearest first) into the grid. Priors
/// fill consecutive instance rows; whatever does not fit is dropped and
/// counted.
pub fn merge(
    grid: &QueryGrid,
    bundles: &[PriorFeatureBundle],
    params: &FusionParams,
    mode: MergeMode,
) -> Result<MergedQueries> {
    let qd = grid.query_dim();
    if params.query_dim() != qd || params.down.shape() != [2 * qd, qd] || params.null_prior.len() != qd {
        return Err(FusionError::Width {
            expected: qd,
            found: params.query_dim(),
        });
    }
    let cov = coverage(grid, bundles, params.uve_dim())?;
    let (m, n) = (grid.instances(), grid.points());
    let mut data = Vec::with_capacity(m * n * qd);
    for i in 0..m {
        for j in 0..n {
            let (qi, qj) = (grid.q_ins.row(i), grid.q_pt.row(j));
            let slot = cov.slots[i * n + j];
            match (mode, slot) {
                (MergeMode::Add | MergeMode::Replace, None) => {
                    data.extend(qi.iter().zip(qj).map(|(a, b)| a + b));
                }
                (MergeMode::Add, Some((fi, fp))) => {
                    let (pi, pp) = (params.project(fi), params.project(fp));
                    data.extend((0..qd).map(|k| (qi[k] + pi[k]) + (qj[k] + pp[k])));
                }
                (MergeMode::Replace, Some((fi, fp))) => {
                    let (pi, pp) = (params.project(fi), params.project(fp));
                    data.extend((0..qd).map(|k| pi[k] + pp[k]));
                }
                (MergeMode::Concat, slot) => {
                    let mut cat: Vec<f64> = qi.iter().zip(qj).map(|(a, b)| a + b).collect();
                    match slot {
                        Some((fi, fp)) => {
                            let (pi, pp) = (params.project(fi), params.project(fp));
                            cat.extend((0..qd).map(|k| pi[k] + pp[k]));
                        }
                        None => cat.extend_from_slice(params.null_prior.data()),
                    }
                    data.extend(params.down_project(&cat));
                }
            }
        }
    }
    Ok(MergedQueries {
        features: Array::from_vec(&[m, n, qd], data).expect("sizes agree"),
        prior_backed: cov.slots.iter().map(Option::is_some).collect(),
        dropped_instances: cov.dropped_instances,
        dropped_points: cov.dropped_points,
    })
}

pub fn merge_add(grid: &QueryGrid, bundle: &PriorFeatureBundle, params: &FusionParams) -> Result<MergedQueries> {
    merge(grid, std::slice::from_ref(bundle), params, MergeMode::Add)
}

pub fn merge_replace(grid: &QueryGrid, bundle: &PriorFeatureBundle, params: &FusionParams) -> Result<MergedQueries> {
    merge(grid, std::slice::from_ref(bundle), params, MergeMode::Replace)
}

pub fn merge_concat(grid: &QueryGrid, bundle: &PriorFeatureBundle, params: &FusionParams) -> Result<MergedQueries> {
    merge(grid, std::slice::from_ref(bundle), params, MergeMode::Concat)
}
