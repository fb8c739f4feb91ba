//! Vectorized map data model: points, polyline instances and maps.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VectorError {
    #[error("too few points: an instance needs at least 2, got {0}")]
    TooFewPoints(usize),
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("unknown element type `{0}`")]
    UnknownElementType(String),
    #[error("confidence {0} outside [0, 1]")]
    BadConfidence(f64),
    #[error("invalid perception window: {0}")]
    BadWindow(String),
    #[error("direction ({0}, {1}) at point {2} is neither zero nor unit length")]
    BadDirection(f64, f64, usize),
}

/// Map element class. The discriminant is the code used by embedding tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementType {
    LaneDivider = 0,
    PedestrianCrossing = 1,
    RoadBoundary = 2,
    Centerline = 3,
}

impl ElementType {
    pub const ALL: [ElementType; 4] = [
        ElementType::LaneDivider,
        ElementType::PedestrianCrossing,
        ElementType::RoadBoundary,
        ElementType::Centerline,
    ];

    /// The three classes scored by the vector and raster metrics.
    pub const EVALUATED: [ElementType; 3] = [
        ElementType::PedestrianCrossing,
        ElementType::LaneDivider,
        ElementType::RoadBoundary,
    ];

    pub const COUNT: usize = 4;

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ElementType::LaneDivider => "lane_divider",
            ElementType::PedestrianCrossing => "pedestrian_crossing",
            ElementType::RoadBoundary => "road_boundary",
            ElementType::Centerline => "centerline",
        }
    }
}

impl fmt::Display for ElementType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ElementType {
    type Err = VectorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| VectorError::UnknownElementType(s.to_string()))
    }
}

/// A single map point: ego or world position, unit tangent and class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VectorPoint {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub cls: ElementType,
}

impl VectorPoint {
    pub fn new(x: f64, y: f64, cls: ElementType) -> Self {
        Self {
            x,
            y,
            vx: 0.0,
            vy: 0.0,
            cls,
        }
    }

    pub fn xy(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn direction(&self) -> (f64, f64) {
        (self.vx, self.vy)
    }
}

/// Opaque identity of an instance, unique within a process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstanceId(u64);

impl InstanceId {
    fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        InstanceId(NEXT.fetch_add(1, Ordering::Relaxed))
    }

    pub fn get(self) -> u64 {
        self.0
    }
}

/// An ordered polyline of at least two points sharing one element type.
/// Equality compares content and ignores the instance id.
#[derive(Debug, Clone)]
pub struct VectorInstance {
    points: Vec<VectorPoint>,
    element_type: ElementType,
    confidence: f64,
    instance_id: InstanceId,
}

impl PartialEq for VectorInstance {
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points
            && self.element_type == other.element_type
            && self.confidence == other.confidence
    }
}

const DIRECTION_TOL: f64 = 1e-6;

impl VectorInstance {
    /// Builds an instance from raw positions. Directions start as the zero pair;
    /// call [`compute_directions`] to fill them in.
    pub fn from_xy(
        xy: &[(f64, f64)],
        element_type: ElementType,
        confidence: f64,
    ) -> Result<Self, VectorError> {
        let points = xy
            .iter()
            .map(|&(x, y)| VectorPoint::new(x, y, element_type))
            .collect::<Vec<_>>();
        make_instance(points, element_type, confidence)
    }

    pub fn points(&self) -> &[VectorPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn element_type(&self) -> ElementType {
        self.element_type
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn instance_id(&self) -> InstanceId {
        self.instance_id
    }

    pub fn xy(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(VectorPoint::xy).collect()
    }

    /// Total polyline length in meters.
    pub fn arc_length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y))
            .sum()
    }

    pub fn with_confidence(mut self, confidence: f64) -> Result<Self, VectorError> {
        check_confidence(confidence)?;
        self.confidence = confidence;
        Ok(self)
    }

    /// Replaces point positions and directions, keeping type, confidence and id.
    /// Used by transforms that move every point of the instance.
    pub fn map_points<F>(&self, mut f: F) -> Result<Self, VectorError>
    where
        F: FnMut(&VectorPoint) -> VectorPoint,
    {
        let points = self
            .points
            .iter()
            .map(|p| {
                let mut q = f(p);
                q.cls = self.element_type;
                q
            })
            .collect::<Vec<_>>();
        validate_points(&points)?;
        Ok(Self {
            points,
            element_type: self.element_type,
            confidence: self.confidence,
            instance_id: self.instance_id,
        })
    }

    /// Checks the unit-or-zero direction invariant on every point.
    pub fn check_directions(&self) -> Result<(), VectorError> {
        for (i, p) in self.points.iter().enumerate() {
            let norm = p.vx.hypot(p.vy);
            let zero = p.vx == 0.0 && p.vy == 0.0;
            if !zero && (norm - 1.0).abs() > DIRECTION_TOL {
                return Err(VectorError::BadDirection(p.vx, p.vy, i));
            }
        }
        Ok(())
    }
}

fn check_confidence(confidence: f64) -> Result<(), VectorError> {
    if !(0.0..=1.0).contains(&confidence) {
        return Err(VectorError::BadConfidence(confidence));
    }
    Ok(())
}

fn validate_points(points: &[VectorPoint]) -> Result<(), VectorError> {
    if points.len() < 2 {
        return Err(VectorError::TooFewPoints(points.len()));
    }
    for (i, p) in points.iter().enumerate() {
        if !(p.x.is_finite() && p.y.is_finite() && p.vx.is_finite() && p.vy.is_finite()) {
            return Err(VectorError::NonFinite(i));
        }
    }
    Ok(())
}

/// Validates and wraps a point sequence. Point order is kept as given and
/// every point's class is set from `element_type`.
pub fn make_instance(
    mut points: Vec<VectorPoint>,
    element_type: ElementType,
    confidence: f64,
) -> Result<VectorInstance, VectorError> {
    validate_points(&points)?;
    check_confidence(confidence)?;
    for p in &mut points {
        p.cls = element_type;
    }
    Ok(VectorInstance {
        points,
        element_type,
        confidence,
        instance_id: InstanceId::fresh(),
    })
}

fn unit(dx: f64, dy: f64) -> Option<(f64, f64)> {
    let norm = dx.hypot(dy);
    (norm > 0.0).then(|| (dx / norm, dy / norm))
}

/// Unit central-difference tangents. Endpoints use their single adjacent
/// chord; a zero-length chord inherits the previous point's direction.
pub fn compute_directions(instance: &VectorInstance) -> VectorInstance {
    let pts = &instance.points;
    let n = pts.len();
    let mut out = pts.clone();
    let mut prev = (0.0, 0.0);
    for i in 0..n {
        let (a, b) = match i {
            0 => (0, 1),
            _ if i == n - 1 => (n - 2, n - 1),
            _ => (i - 1, i + 1),
        };
        let dir = unit(pts[b].x - pts[a].x, pts[b].y - pts[a].y).unwrap_or(prev);
        out[i].vx = dir.0;
        out[i].vy = dir.1;
        prev = dir;
    }
    // A leading run of zero chords has no predecessor; back-fill it from the
    // first well-defined direction so duplicated start points agree.
    if let Some(first) = out.iter().position(|p| p.vx != 0.0 || p.vy != 0.0) {
        let dir = (out[first].vx, out[first].vy);
        for p in &mut out[..first] {
            p.vx = dir.0;
            p.vy = dir.1;
        }
    }
    VectorInstance {
        points: out,
        ..instance.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Global { origin: String },
    Ego,
}

impl Frame {
    pub fn global() -> Self {
        Frame::Global {
            origin: "world".to_string(),
        }
    }

    pub fn is_ego(&self) -> bool {
        matches!(self, Frame::Ego)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceTag {
    SdMap,
    HdMapEx,
    OnlineLocal,
    GroundTruth,
    Prediction,
}

impl SourceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::SdMap => "sd_map",
            SourceTag::HdMapEx => "hd_map_ex",
            SourceTag::OnlineLocal => "online_local",
            SourceTag::GroundTruth => "ground_truth",
            SourceTag::Prediction => "prediction",
        }
    }
}

impl FromStr for SourceTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "sd_map" => SourceTag::SdMap,
            "hd_map_ex" => SourceTag::HdMapEx,
            "online_local" => SourceTag::OnlineLocal,
            "ground_truth" => SourceTag::GroundTruth,
            "prediction" => SourceTag::Prediction,
            other => return Err(format!("unknown source `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorMap {
    pub instances: Vec<VectorInstance>,
    pub frame: Frame,
    pub pose: Option<Pose>,
    pub source: SourceTag,
}

impl VectorMap {
    pub fn new(instances: Vec<VectorInstance>, frame: Frame, source: SourceTag) -> Self {
        Self {
            instances,
            frame,
            pose: None,
            source,
        }
    }

    pub fn empty_ego(source: SourceTag) -> Self {
        Self::new(Vec::new(), Frame::Ego, source)
    }

    pub fn num_points(&self) -> usize {
        self.instances.iter().map(VectorInstance::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Axis-aligned ego-frame evaluation rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerceptionWindow {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for PerceptionWindow {
    fn default() -> Self {
        Self {
            x_min: -15.0,
            x_max: 15.0,
            y_min: -30.0,
            y_max: 30.0,
        }
    }
}

impl PerceptionWindow {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self, VectorError> {
        let all_finite = [x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite());
        if !all_finite || x_min >= x_max || y_min >= y_max {
            return Err(VectorError::BadWindow(format!(
                "[{x_min}, {x_max}] x [{y_min}, {y_max}]"
            )));
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Maps a point into [-1, 1]^2 relative to this window.
    pub fn normalize(&self, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy) = self.center();
        (
            (x - cx) / (0.5 * self.width()),
            (y - cy) / (0.5 * self.height()),
        )
    }

    pub fn denormalize(&self, u: f64, v: f64) -> (f64, f64) {
        let (cx, cy) = self.center();
        (cx + u * 0.5 * self.width(), cy + v * 0.5 * self.height())
    }
}

impl FromStr for PerceptionWindow {
    type Err = VectorError;

    /// Parses `"x0,x1,y0,y1"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let vals = s
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| VectorError::BadWindow(format!("{s}: {e}")))?;
        match vals[..] {
            [x0, x1, y0, y1] => Self::new(x0, x1, y0, y1),
            _ => Err(VectorError::BadWindow(format!(
                "{s}: expected four comma-separated values"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(xy: &[(f64, f64)]) -> VectorInstance {
        VectorInstance::from_xy(xy, ElementType::LaneDivider, 1.0).unwrap()
    }

    #[test]
    fn minimal_divider() {
        let inst = line(&[(0.0, 0.0), (0.0, 10.0)]);
        assert_eq!(inst.len(), 2);
        assert!(inst.points().iter().all(|p| p.cls == ElementType::LaneDivider));
        assert_eq!(inst.points()[0].cls.code(), 0);
    }

    #[test]
    fn rejects_single_point() {
        let err = VectorInstance::from_xy(&[(0.0, 0.0)], ElementType::LaneDivider, 1.0);
        assert_eq!(err.unwrap_err(), VectorError::TooFewPoints(1));
        assert!(VectorError::TooFewPoints(1).to_string().contains("too few points"));
    }

    #[test]
    fn rejects_non_finite() {
        let err = VectorInstance::from_xy(&[(0.0, 0.0), (f64::NAN, 1.0)], ElementType::Centerline, 1.0);
        assert_eq!(err.unwrap_err(), VectorError::NonFinite(1));
    }

    #[test]
    fn boundary_loop_echo() {
        let xy = (0..20)
            .map(|i| {
                let t = i as f64 / 20.0 * std::f64::consts::TAU;
                (5.0 * t.cos(), 5.0 * t.sin())
            })
            .collect::<Vec<_>>();
        let inst = VectorInstance::from_xy(&xy, ElementType::RoadBoundary, 1.0).unwrap();
        assert_eq!(inst.len(), 20);
        assert_eq!(inst.element_type(), ElementType::RoadBoundary);
        assert_eq!(inst.xy(), xy);
    }

    #[test]
    fn fresh_ids() {
        let a = line(&[(0.0, 0.0), (1.0, 0.0)]);
        let b = line(&[(0.0, 0.0), (1.0, 0.0)]);
        assert_ne!(a.instance_id(), b.instance_id());
    }

    #[test]
    fn straight_directions() {
        let d = compute_directions(&line(&[(0.0, 0.0), (0.0, 5.0), (0.0, 10.0)]));
        for p in d.points() {
            assert_eq!(p.direction(), (0.0, 1.0));
        }
    }

    #[test]
    fn right_angle_central_chord() {
        let d = compute_directions(&line(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)]));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let (vx, vy) = d.points()[1].direction();
        assert!((vx - h).abs() < 1e-15 && (vy - h).abs() < 1e-15);
        assert_eq!(d.points()[0].direction(), (1.0, 0.0));
        assert_eq!(d.points()[2].direction(), (0.0, 1.0));
    }

    #[test]
    fn duplicate_start_points() {
        let d = compute_directions(&line(&[(0.0, 0.0), (0.0, 0.0), (1.0, 0.0)]));
        assert_eq!(d.points()[0].direction(), (1.0, 0.0));
        assert_eq!(d.points()[1].direction(), (1.0, 0.0));
        d.check_directions().unwrap();
    }

    #[test]
    fn all_coincident_points_have_zero_direction() {
        let d = compute_directions(&line(&[(2.0, 2.0), (2.0, 2.0), (2.0, 2.0)]));
        assert!(d.points().iter().all(|p| p.direction() == (0.0, 0.0)));
    }

    #[test]
    fn window_parsing() {
        let w: PerceptionWindow = "-10,10,-20,20".parse().unwrap();
        assert_eq!(w, PerceptionWindow::new(-10.0, 10.0, -20.0, 20.0).unwrap());
        assert!("1,0,0,1".parse::<PerceptionWindow>().is_err());
        assert!("1,2,3".parse::<PerceptionWindow>().is_err());
    }

    #[test]
    fn element_type_names() {
        for t in ElementType::ALL {
            assert_eq!(t.as_str().parse::<ElementType>().unwrap(), t);
            assert_eq!(ElementType::from_code(t.code()), Some(t));
        }
        assert!("sidewalk".parse::<ElementType>().is_err());
    }

    fn polyline() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 2..12)
    }

    proptest! {
        #[test]
        fn directions_translation_invariant(xy in polyline(), dx in -1e3..1e3f64, dy in -1e3..1e3f64) {
            // Translate by values exactly representable on the same grid so
            // the chord differences stay bit-identical.
            let dx = dx.round();
            let dy = dy.round();
            let xy: Vec<_> = xy.iter().map(|&(x, y)| ((x * 64.0).round() / 64.0, (y * 64.0).round() / 64.0)).collect();
            let moved: Vec<_> = xy.iter().map(|&(x, y)| (x + dx, y + dy)).collect();
            let a = compute_directions(&line(&xy));
            let b = compute_directions(&line(&moved));
            for (p, q) in a.points().iter().zip(b.points()) {
                prop_assert_eq!(p.direction(), q.direction());
            }
        }

        #[test]
        fn directions_reverse_negates(xy in polyline()) {
            let rev: Vec<_> = xy.iter().rev().copied().collect();
            let fwd = compute_directions(&line(&xy));
            let bwd = compute_directions(&line(&rev));
            let n = xy.len();
            let has_zero_chord = xy.windows(2).any(|w| w[0] == w[1]);
            prop_assume!(!has_zero_chord);
            for i in 0..n {
                let (a, b) = (fwd.points()[i].direction(), bwd.points()[n - 1 - i].direction());
                prop_assert!((a.0 + b.0).abs() < 1e-12 && (a.1 + b.1).abs() < 1e-12);
            }
        }

        #[test]
        fn make_instance_preserves_order(xy in polyline()) {
            let inst = line(&xy);
            prop_assert_eq!(inst.xy(), xy);
        }

        #[test]
        fn directions_unit_or_zero(xy in polyline()) {
            compute_directions(&line(&xy)).check_directions().unwrap();
        }
    }
}
