//! Map metrics: Chamfer matching and AP, rasterized IoU, point error.

use serde::Serialize;
use thiserror::Error;

use crate::map_io::resample_instance;
use crate::vector::{ElementType, PerceptionWindow, VectorError, VectorInstance, VectorMap};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.5, 1.0, 1.5];
pub const CHAMFER_POINTS: usize = 100;
pub const DEFAULT_RESOLUTION: f64 = 0.15;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("chamfer distance of an empty point set")]
    EmptyInstance,
    #[error("structure mismatch: {0}")]
    StructureMismatch(String),
    #[error("raster grids differ: {0}")]
    DimensionMismatch(String),
    #[error("no points to average over")]
    NoPoints,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Vector(#[from] VectorError),
}

type Result<T> = std::result::Result<T, EvalError>;

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (a.0 - b.0, a.1 - b.1);
    (dx * dx + dy * dy).sqrt()
}

fn mean_nearest(from: &[(f64, f64)], to: &[(f64, f64)]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|&p| to.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min))
        .sum();
    total / from.len() as f64
}

/// Symmetric mean nearest-neighbour distance between two point sets.
pub fn chamfer_points(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptyInstance);
    }
    Ok(0.5 * (mean_nearest(a, b) + mean_nearest(b, a)))
}

/// Chamfer distance after resampling both polylines to [`CHAMFER_POINTS`].
pub fn chamfer_distance(a: &VectorInstance, b: &VectorInstance) -> Result<f64> {
    chamfer_resampled(a, b, CHAMFER_POINTS)
}

pub fn chamfer_resampled(a: &VectorInstance, b: &VectorInstance, n: usize) -> Result<f64> {
    let ra = resample_instance(a, n)?.xy();
    let rb = resample_instance(b, n)?.xy();
    chamfer_points(&ra, &rb)
}

/// Outcome for one prediction of the evaluated class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchEntry {
    /// Index into the full prediction list.
    pub pred: usize,
    /// Index into the full ground-truth list.
    pub gt: Option<usize>,
    /// Chamfer distance to the nearest unmatched GT at decision time.
    pub chamfer: Option<f64>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    pub class: ElementType,
    pub tau: f64,
    /// In processing order (descending confidence).
    pub entries: Vec<MatchEntry>,
    pub num_gt: usize,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.entries.iter().filter(|e| e.gt.is_some()).count()
    }

    pub fn false_positives(&self) -> usize {
        self.entries.len() - self.true_positives()
    }
}

/// Pairwise Chamfer distances between the class's predictions and GTs.
struct ClassTable {
    preds: Vec<usize>,
    gts: Vec<usize>,
    /// `[preds.len() * gts.len()]`, row-major.
    dist: Vec<f64>,
}

impl ClassTable {
    fn new(preds: &[VectorInstance], gts: &[VectorInstance], class: ElementType) -> Result<Self> {
        let mut p: Vec<usize> = (0..preds.len())
            .filter(|&i| preds[i].element_type() == class)
            .collect();
        // descending confidence, stable on input order
        p.sort_by(|&a, &b| preds[b].confidence().total_cmp(&preds[a].confidence()));
        let g: Vec<usize> = (0..gts.len())
            .filter(|&i| gts[i].element_type() == class)
            .collect();
        let rp: Vec<_> = p
            .iter()
            .map(|&i| resample_instance(&preds[i], CHAMFER_POINTS).map(|r| r.xy()))
            .collect::<std::result::Result<_, _>>()?;
        let rg: Vec<_> = g
            .iter()
            .map(|&i| resample_instance(&gts[i], CHAMFER_POINTS).map(|r| r.xy()))
            .collect::<std::result::Result<_, _>>()?;
        let mut dist = Vec::with_capacity(p.len() * g.len());
        for a in &rp {
            for b in &rg {
                dist.push(chamfer_points(a, b)?);
            }
        }
        Ok(Self { preds: p, gts: g, dist })
    }

    fn run(&self, preds: &[VectorInstance], class: ElementType, tau: f64) -> MatchResult {
        let ng = self.gts.len();
        let mut taken = vec![false; ng];
        let entries = self
            .preds
            .iter()
            .enumerate()
            .map(|(pi, &p)| {
                let best = (0..ng)
                    .filter(|&g| !taken[g])
                    .map(|g| (g, self.dist[pi * ng + g]))
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                let matched = best.filter(|&(_, d)| d < tau).map(|(g, _)| g);
                if let Some(g) = matched {
                    taken[g] = true;
                }
                MatchEntry {
                    pred: p,
                    gt: matched.map(|g| self.gts[g]),
                    chamfer: best.map(|(_, d)| d),
                    confidence: preds[p].confidence(),
                }
            })
            .collect();
        MatchResult {
            class,
            tau,
            entries,
            num_gt: ng,
        }
    }
}

/// Greedy matching: predictions in descending confidence each take the
/// closest unmatched GT of the class if its Chamfer distance is below `tau`.
pub fn match_instances(
    preds: &[VectorInstance],
    gts: &[VectorInstance],
    class: ElementType,
    tau: f64,
) -> Result<MatchResult> {
    Ok(ClassTable::new(preds, gts, class)?.run(preds, class, tau))
}

/// 101-point interpolated AP over `(confidence, is_tp)` detections pooled
/// across frames. `None` when there is no ground truth.
pub fn interpolated_ap(detections: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].0.total_cmp(&detections[a].0));
    // (tp, predictions so far) at each cut
    let mut curve = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (k, &i) in order.iter().enumerate() {
        tp += usize::from(detections[i].1);
        curve.push((tp, k + 1));
    }
    let mut total = 0.0;
    for r in 0..=100usize {
        let best = curve
            .iter()
            .filter(|&&(tp, _)| tp * 100 >= r * num_gt)
            .map(|&(tp, n)| tp as f64 / n as f64)
            .fold(0.0, f64::max);
        total += best;
    }
    Some(total / 101.0)
}

/// AP of one frame for one class at one threshold.
pub fn average_precision(
    preds: &[VectorInstance],
    gts: &[VectorInstance],
    class: ElementType,
    tau: f64,
) -> Result<Option<f64>> {
    let m = match_instances(preds, gts, class, tau)?;
    let dets: Vec<_> = m.entries.iter().map(|e| (e.confidence, e.gt.is_some())).collect();
    Ok(interpolated_ap(&dets, m.num_gt))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAp {
    pub class: ElementType,
    /// One value per threshold.
    pub ap_per_tau: Vec<f64>,
    /// Mean over thresholds.
    pub ap: f64,
    pub num_gt: usize,
    pub num_pred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApReport {
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassAp>,
    /// Evaluated classes without any ground truth; left out of `map`.
    pub excluded: Vec<ElementType>,
    /// Mean of class APs; `None` when every class was excluded.
    pub map: Option<f64>,
}

impl ApReport {
    pub fn class(&self, class: ElementType) -> Option<&ClassAp> {
        self.classes.iter().find(|c| c.class == class)
    }
}

/// Dataset-level AP over `(prediction, ground truth)` frame pairs for the
/// three evaluated classes.
pub fn evaluate_ap(frames: &[(VectorMap, VectorMap)], thresholds: &[f64]) -> Result<ApReport> {
    if thresholds.is_empty() {
        return Err(EvalError::Invalid("no thresholds".into()));
    }
    let mut classes = Vec::new();
    let mut excluded = Vec::new();
    for class in ElementType::EVALUATED {
        let mut dets: Vec<Vec<(f64, bool)>> = vec![Vec::new(); thresholds.len()];
        let (mut num_gt, mut num_pred) = (0, 0);
        for (pred, gt) in frames {
            let table = ClassTable::new(&pred.instances, &gt.instances, class)?;
            num_gt += table.gts.len();
            num_pred += table.preds.len();
            for (t, &tau) in thresholds.iter().enumerate() {
                let m = table.run(&pred.instances, class, tau);
                dets[t].extend(m.entries.iter().map(|e| (e.confidence, e.gt.is_some())));
            }
        }
        match dets
            .iter()
            .map(|d| interpolated_ap(d, num_gt))
            .collect::<Option<Vec<f64>>>()
        {
            Some(ap_per_tau) => {
                let ap = ap_per_tau.iter().sum::<f64>() / ap_per_tau.len() as f64;
                classes.push(ClassAp {
                    class,
                    ap_per_tau,
                    ap,
                    num_gt,
                    num_pred,
                });
            }
            None => excluded.push(class),
        }
    }
    let map = (!classes.is_empty())
        .then(|| classes.iter().map(|c| c.ap).sum::<f64>() / classes.len() as f64);
    Ok(ApReport {
        thresholds: thresholds.to_vec(),
        classes,
        excluded,
        map,
    })
}

/// Per-class boolean occupancy over the perception window. Row 0 is the
/// `y_min` edge, column 0 the `x_min` edge.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    pub window: PerceptionWindow,
    pub resolution: f64,
    pub rows: usize,
    pub cols: usize,
    /// One channel per [`ElementType`], indexed by code; `rows * cols` cells.
    pub channels: Vec<Vec<bool>>,
}

impl RasterGrid {
    pub fn empty(window: PerceptionWindow, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(EvalError::Invalid(format!("resolution {resolution}")));
        }
        let cols = (window.width() / resolution).round() as usize;
        let rows = (window.height() / resolution).round() as usize;
        Ok(Self {
            window,
            resolution,
            rows,
            cols,
            channels: vec![vec![false; rows * cols]; ElementType::COUNT],
        })
    }

    pub fn get(&self, class: ElementType, row: usize, col: usize) -> bool {
        self.channels[class.code()][row * self.cols + col]
    }

    pub fn count(&self, class: ElementType) -> usize {
        self.channels[class.code()].iter().filter(|&&c| c).count()
    }
}

/// Draws every instance as its polyline dilated to `line_width_m`. A cell is
/// covered when its centre is closer than half the width to some segment; a
/// centre at exactly half the width is covered only when it lies on the
/// negative side (in (x, y) order) of its nearest point on the segment.
pub fn rasterize(map: &VectorMap, window: &PerceptionWindow, resolution: f64, line_width_m: f64) -> Result<RasterGrid> {
    let mut grid = RasterGrid::empty(*window, resolution)?;
    if !(line_width_m > 0.0) {
        return Err(EvalError::Invalid(format!("line width {line_width_m}")));
    }
    let hw = 0.5 * line_width_m / resolution;
    let to_cell = |(x, y): (f64, f64)| ((x - window.x_min) / resolution, (y - window.y_min) / resolution);
    for inst in &map.instances {
        let channel = &mut grid.channels[inst.element_type().code()];
        let pts: Vec<(f64, f64)> = inst.xy().into_iter().map(to_cell).collect();
        for seg in pts.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let c0 = (a.0.min(b.0) - hw).floor().max(0.0) as usize;
            let c1 = ((a.0.max(b.0) + hw).ceil().max(0.0) as usize).min(grid.cols);
            let r0 = (a.1.min(b.1) - hw).floor().max(0.0) as usize;
            let r1 = ((a.1.max(b.1) + hw).ceil().max(0.0) as usize).min(grid.rows);
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let len2 = dx * dx + dy * dy;
            for r in r0..r1 {
                for c in c0..c1 {
                    let p = (c as f64 + 0.5, r as f64 + 0.5);
                    let t = if len2 > 0.0 {
                        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let near = (a.0 + t * dx, a.1 + t * dy);
                    let off = (p.0 - near.0, p.1 - near.1);
                    let d = (off.0 * off.0 + off.1 * off.1).sqrt();
                    let negative = off.0 < 0.0 || (off.0 == 0.0 && off.1 < 0.0);
                    if d < hw || (d == hw && negative) {
                        channel[r * grid.cols + c] = true;
                    }
                }
            }
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassIou {
    pub class: ElementType,
    pub iou: f64,
    pub intersection: usize,
    pub union: usize,
    /// Both grids empty for this class; `iou` is then defined as 1.
    pub both_empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouReport {
    /// The three evaluated classes.
    pub classes: Vec<ClassIou>,
    pub mean: f64,
}

impl IouReport {
    pub fn class(&self, class: ElementType) -> Option<&ClassIou> {
        self.classes.iter().find(|c| c.class == class)
    }
}

fn iou_from_counts(counts: &[(usize, usize)]) -> IouReport {
    let classes: Vec<ClassIou> = ElementType::EVALUATED
        .iter()
        .map(|&class| {
            let (i, u) = counts[class.code()];
            ClassIou {
                class,
                iou: if u == 0 { 1.0 } else { i as f64 / u as f64 },
                intersection: i,
                union: u,
                both_empty: u == 0,
            }
        })
        .collect();
    let mean = classes.iter().map(|c| c.iou).sum::<f64>() / classes.len() as f64;
    IouReport { classes, mean }
}

fn accumulate(a: &RasterGrid, b: &RasterGrid, counts: &mut [(usize, usize)]) -> Result<()> {
    if a.rows != b.rows || a.cols != b.cols || a.resolution != b.resolution {
        return Err(EvalError::DimensionMismatch(format!(
            "{}x{}@{} vs {}x{}@{}",
            a.rows, a.cols, a.resolution, b.rows, b.cols, b.resolution
        )));
    }
    for (k, (ca, cb)) in a.channels.iter().zip(&b.channels).enumerate() {
        for (&x, &y) in ca.iter().zip(cb) {
            counts[k].0 += usize::from(x && y);
            counts[k].1 += usize::from(x || y);
        }
    }
    Ok(())
}

pub fn iou(a: &RasterGrid, b: &RasterGrid) -> Result<IouReport> {
    let mut counts = vec![(0, 0); ElementType::COUNT];
    accumulate(a, b, &mut counts)?;
    Ok(iou_from_counts(&counts))
}

/// IoU with intersections and unions pooled over frame pairs.
pub fn iou_dataset(pairs: &[(RasterGrid, RasterGrid)]) -> Result<IouReport> {
    let mut counts = vec![(0, 0); ElementType::COUNT];
    for (a, b) in pairs {
        accumulate(a, b, &mut counts)?;
    }
    Ok(iou_from_counts(&counts))
}

fn check_structure(pred: &VectorMap, gt: &VectorMap) -> Result<()> {
    if pred.instances.len() != gt.instances.len() {
        return Err(EvalError::StructureMismatch(format!(
            "{} vs {} instances",
            pred.instances.len(),
            gt.instances.len()
        )));
    }
    for (i, (a, b)) in pred.instances.iter().zip(&gt.instances).enumerate() {
        if a.len() != b.len() {
            return Err(EvalError::StructureMismatch(format!(
                "instance {i}: {} vs {} points",
                a.len(),
                b.len()
            )));
        }
    }
    Ok(())
}

/// Mean Euclidean distance over index-aligned points.
pub fn mean_point_error(pred: &VectorMap, gt: &VectorMap) -> Result<f64> {
    check_structure(pred, gt)?;
    let n = gt.num_points();
    if n == 0 {
        return Err(EvalError::NoPoints);
    }
    let total: f64 = pred
        .instances
        .iter()
        .zip(&gt.instances)
        .flat_map(|(a, b)| a.points().iter().zip(b.points()))
        .map(|(p, q)| dist(p.xy(), q.xy()))
        .sum();
    Ok(total / n as f64)
}

/// Mean Euclidean distance over the listed `(instance, point)` indices.
pub fn mean_point_error_at(pred: &VectorMap, gt: &VectorMap, points: &[(usize, usize)]) -> Result<f64> {
    check_structure(pred, gt)?;
    if points.is_empty() {
        return Err(EvalError::NoPoints);
    }
    let mut total = 0.0;
    for &(i, j) in points {
        let (Some(a), Some(b)) = (
            pred.instances.get(i).and_then(|x| x.points().get(j)),
            gt.instances.get(i).and_then(|x| x.points().get(j)),
        ) else {
            return Err(EvalError::StructureMismatch(format!("no point ({i}, {j})")));
        };
        total += dist(a.xy(), b.xy());
    }
    Ok(total / points.len() as f64)
}
