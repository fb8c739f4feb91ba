//! Map record I/O, frame transforms, window clipping and arc-length resampling.
//!
//! A map file holds one JSON object per line:
//!
//! ```text
//! {"frame":"ego","pose":[x,y,yaw]|null,"source":"ground_truth",
//!  "instances":[{"type":"lane_divider","confidence":1.0,
//!                "points":[[x,y],...],"dirs":[[vx,vy],...]|null}]}
//! ```
//!
//! `"dirs": null` means the directions are derived with
//! [`compute_directions`]. Global-frame records may carry an optional
//! `"origin"` name. Blank lines and lines starting with `#` are skipped.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::vector::{
    compute_directions, make_instance, ElementType, Frame, PerceptionWindow, Pose, SourceTag,
    VectorError, VectorInstance, VectorMap, VectorPoint,
};

#[derive(Debug, Error)]
pub enum MapIoError {
    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("expected a {expected}-frame map, got {got}")]
    WrongFrame {
        expected: &'static str,
        got: &'static str,
    },
    #[error(transparent)]
    Vector(#[from] VectorError),
}

fn frame_name(frame: &Frame) -> &'static str {
    match frame {
        Frame::Global { .. } => "global",
        Frame::Ego => "ego",
    }
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    #[serde(rename = "type")]
    kind: String,
    confidence: f64,
    points: Vec<[f64; 2]>,
    dirs: Option<Vec<[f64; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct MapRecord {
    frame: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<String>,
    pose: Option<[f64; 3]>,
    source: String,
    instances: Vec<InstanceRecord>,
}

fn perr(line: usize, field: impl Into<String>, message: impl ToString) -> MapIoError {
    MapIoError::Parse {
        line,
        field: field.into(),
        message: message.to_string(),
    }
}

/// Best-effort name of the first field that fails to deserialize, so that
/// schema errors point at something more useful than a column number.
fn locate_bad_field(value: &Value) -> String {
    let Some(obj) = value.as_object() else {
        return "<record>".to_string();
    };
    for key in ["frame", "source", "instances"] {
        if !obj.contains_key(key) {
            return key.to_string();
        }
    }
    if let Some(pose) = obj.get("pose") {
        if serde_json::from_value::<Option<[f64; 3]>>(pose.clone()).is_err() {
            return "pose".to_string();
        }
    }
    if let Some(Value::Array(items)) = obj.get("instances") {
        for (i, item) in items.iter().enumerate() {
            let Some(inst) = item.as_object() else {
                return format!("instances[{i}]");
            };
            for key in ["type", "confidence", "points", "dirs"] {
                let ok = match (key, inst.get(key)) {
                    (_, None) => false,
                    ("type", Some(v)) => v.is_string(),
                    ("confidence", Some(v)) => v.is_number(),
                    ("points", Some(v)) => serde_json::from_value::<Vec<[f64; 2]>>(v.clone()).is_ok(),
                    (_, Some(v)) => serde_json::from_value::<Option<Vec<[f64; 2]>>>(v.clone()).is_ok(),
                };
                if !ok {
                    return format!("instances[{i}].{key}");
                }
            }
        }
    } else {
        return "instances".to_string();
    }
    "<record>".to_string()
}

/// Parses one record line. `line_no` is 1-based and only used in errors.
pub fn parse_map_line(text: &str, line_no: usize) -> Result<VectorMap, MapIoError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| perr(line_no, "<record>", e))?;
    let record: MapRecord = serde_json::from_value(value.clone())
        .map_err(|e| perr(line_no, locate_bad_field(&value), e))?;

    let frame = match record.frame.as_str() {
        "ego" => Frame::Ego,
        "global" => Frame::Global {
            origin: record.origin.unwrap_or_else(|| "world".to_string()),
        },
        other => return Err(perr(line_no, "frame", format!("unknown frame `{other}`"))),
    };
    let source = record
        .source
        .parse::<SourceTag>()
        .map_err(|e| perr(line_no, "source", e))?;
    let pose = record.pose.map(|[x, y, yaw]| Pose::new(x, y, yaw));

    let mut instances = Vec::with_capacity(record.instances.len());
    for (i, inst) in record.instances.into_iter().enumerate() {
        let field = |name: &str| format!("instances[{i}].{name}");
        let kind = inst
            .kind
            .parse::<ElementType>()
            .map_err(|e| perr(line_no, field("type"), e))?;
        let points = inst
            .points
            .iter()
            .map(|&[x, y]| VectorPoint::new(x, y, kind))
            .collect::<Vec<_>>();
        let built = make_instance(points, kind, inst.confidence)
            .map_err(|e| perr(line_no, field("points"), e))?;
        let built = match inst.dirs {
            None => compute_directions(&built),
            Some(dirs) => {
                if dirs.len() != built.len() {
                    return Err(perr(
                        line_no,
                        field("dirs"),
                        format!("{} directions for {} points", dirs.len(), built.len()),
                    ));
                }
                let mut k = 0;
                let with_dirs = built
                    .map_points(|p| {
                        let [vx, vy] = dirs[k];
                        k += 1;
                        VectorPoint { vx, vy, ..*p }
                    })
                    .map_err(|e| perr(line_no, field("dirs"), e))?;
                with_dirs
                    .check_directions()
                    .map_err(|e| perr(line_no, field("dirs"), e))?;
                with_dirs
            }
        };
        instances.push(built);
    }
    Ok(VectorMap {
        instances,
        frame,
        pose,
        source,
    })
}

pub fn parse_maps<R: BufRead>(reader: R) -> Result<Vec<VectorMap>, MapIoError> {
    let mut maps = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        maps.push(parse_map_line(trimmed, idx + 1)?);
    }
    Ok(maps)
}

pub fn parse_map_file(path: impl AsRef<Path>) -> Result<Vec<VectorMap>, MapIoError> {
    let file = std::fs::File::open(path)?;
    parse_maps(std::io::BufReader::new(file))
}

/// Serializes a map to a single record line (no trailing newline). Directions
/// are always written out explicitly.
pub fn serialize_map(map: &VectorMap) -> String {
    let (frame, origin) = match &map.frame {
        Frame::Ego => ("ego".to_string(), None),
        Frame::Global { origin } => ("global".to_string(), Some(origin.clone())),
    };
    let record = MapRecord {
        frame,
        origin,
        pose: map.pose.map(|p| [p.x, p.y, p.yaw]),
        source: map.source.as_str().to_string(),
        instances: map
            .instances
            .iter()
            .map(|inst| InstanceRecord {
                kind: inst.element_type().as_str().to_string(),
                confidence: inst.confidence(),
                points: inst.points().iter().map(|p| [p.x, p.y]).collect(),
                dirs: Some(inst.points().iter().map(|p| [p.vx, p.vy]).collect()),
            })
            .collect(),
    };
    serde_json::to_string(&record).expect("map records always serialize")
}

pub fn write_maps<W: Write>(mut writer: W, maps: &[VectorMap]) -> std::io::Result<()> {
    for map in maps {
        writeln!(writer, "{}", serialize_map(map))?;
    }
    writer.flush()
}

pub fn write_map_file(path: impl AsRef<Path>, maps: &[VectorMap]) -> std::io::Result<()> {
    let file = std::fs::File::create(path)?;
    write_maps(std::io::BufWriter::new(file), maps)
}

fn rotate(x: f64, y: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * x - s * y, s * x + c * y)
}

/// Expresses a global map in the frame of `pose`.
pub fn world_to_ego(map: &VectorMap, pose: Pose) -> Result<VectorMap, MapIoError> {
    if map.frame.is_ego() {
        return Err(MapIoError::WrongFrame {
            expected: "global",
            got: "ego",
        });
    }
    let instances = map
        .instances
        .iter()
        .map(|inst| {
            inst.map_points(|p| {
                let (x, y) = rotate(p.x - pose.x, p.y - pose.y, -pose.yaw);
                let (vx, vy) = rotate(p.vx, p.vy, -pose.yaw);
                VectorPoint { x, y, vx, vy, ..*p }
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VectorMap {
        instances,
        frame: Frame::Ego,
        pose: Some(pose),
        source: map.source,
    })
}

/// Inverse of [`world_to_ego`]. Uses the map's recorded pose unless one is given.
pub fn ego_to_world(map: &VectorMap, pose: Option<Pose>) -> Result<VectorMap, MapIoError> {
    if !map.frame.is_ego() {
        return Err(MapIoError::WrongFrame {
            expected: "ego",
            got: "global",
        });
    }
    let pose = pose.or(map.pose).ok_or_else(|| perr(0, "pose", "ego map has no pose"))?;
    let instances = map
        .instances
        .iter()
        .map(|inst| {
            inst.map_points(|p| {
                let (x, y) = rotate(p.x, p.y, pose.yaw);
                let (vx, vy) = rotate(p.vx, p.vy, pose.yaw);
                VectorPoint {
                    x: x + pose.x,
                    y: y + pose.y,
                    vx,
                    vy,
                    ..*p
                }
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VectorMap {
        instances,
        frame: Frame::global(),
        pose: Some(pose),
        source: map.source,
    })
}

/// Parametric range `[t0, t1]` of segment `a -> b` inside the window
/// (Liang-Barsky), or `None` if the segment misses it.
fn clip_segment(a: (f64, f64), b: (f64, f64), w: &PerceptionWindow) -> Option<(f64, f64)> {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    let checks = [
        (-dx, a.0 - w.x_min),
        (dx, w.x_max - a.0),
        (-dy, a.1 - w.y_min),
        (dy, w.y_max - a.1),
    ];
    for (p, q) in checks {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

fn lerp_point(a: &VectorPoint, b: &VectorPoint, t: f64, w: &PerceptionWindow) -> VectorPoint {
    let x = a.x + t * (b.x - a.x);
    let y = a.y + t * (b.y - a.y);
    VectorPoint {
        x: x.clamp(w.x_min, w.x_max),
        y: y.clamp(w.y_min, w.y_max),
        ..*a
    }
}

fn clip_instance(inst: &VectorInstance, w: &PerceptionWindow) -> Vec<VectorInstance> {
    let pts = inst.points();
    if pts.iter().all(|p| w.contains(p.x, p.y)) {
        return vec![inst.clone()];
    }
    let mut runs: Vec<Vec<VectorPoint>> = Vec::new();
    let mut current: Vec<VectorPoint> = Vec::new();
    for seg in pts.windows(2) {
        let (a, b) = (&seg[0], &seg[1]);
        match clip_segment(a.xy(), b.xy(), w) {
            None => {
                if current.len() >= 2 {
                    runs.push(std::mem::take(&mut current));
                }
                current.clear();
            }
            Some((t0, t1)) => {
                let start = if t0 == 0.0 { *a } else { lerp_point(a, b, t0, w) };
                let end = if t1 == 1.0 { *b } else { lerp_point(a, b, t1, w) };
                if current.is_empty() {
                    current.push(start);
                } else if t0 > 0.0 {
                    // Segment re-enters the window: start a new piece.
                    if current.len() >= 2 {
                        runs.push(std::mem::take(&mut current));
                    }
                    current.clear();
                    current.push(start);
                }
                current.push(end);
                if t1 < 1.0 {
                    if current.len() >= 2 {
                        runs.push(std::mem::take(&mut current));
                    }
                    current.clear();
                }
            }
        }
    }
    if current.len() >= 2 {
        runs.push(current);
    }
    runs.into_iter()
        .filter_map(|run| {
            if run.iter().all(|p| p.xy() == run[0].xy()) {
                return None;
            }
            let piece = make_instance(run, inst.element_type(), inst.confidence()).ok()?;
            Some(compute_directions(&piece))
        })
        .collect()
}

/// Intersects every instance with the window. Crossing instances are split at
/// the boundary intersections; pieces with fewer than two points are dropped.
pub fn clip_to_window(map: &VectorMap, window: &PerceptionWindow) -> Result<VectorMap, MapIoError> {
    if !map.frame.is_ego() {
        return Err(MapIoError::WrongFrame {
            expected: "ego",
            got: frame_name(&map.frame),
        });
    }
    let instances = map
        .instances
        .iter()
        .flat_map(|inst| clip_instance(inst, window))
        .collect();
    Ok(VectorMap {
        instances,
        ..map.clone()
    })
}

/// Resamples to `n_points` points equally spaced by arc length. Endpoints are
/// kept exactly and directions are recomputed.
pub fn resample_instance(inst: &VectorInstance, n_points: usize) -> Result<VectorInstance, VectorError> {
    if n_points < 2 {
        return Err(VectorError::TooFewPoints(n_points));
    }
    let pts = inst.points();
    let mut cumulative = Vec::with_capacity(pts.len());
    let mut total = 0.0;
    cumulative.push(0.0);
    for w in pts.windows(2) {
        total += (w[1].x - w[0].x).hypot(w[1].y - w[0].y);
        cumulative.push(total);
    }
    let cls = inst.element_type();
    let last = *pts.last().expect("instances have at least two points");
    if total == 0.0 {
        let p = VectorPoint::new(pts[0].x, pts[0].y, cls);
        let out = make_instance(vec![p; n_points], cls, inst.confidence())?;
        return Ok(out);
    }
    let mut out = Vec::with_capacity(n_points);
    let mut seg = 0;
    for k in 0..n_points {
        if k == 0 {
            out.push(VectorPoint::new(pts[0].x, pts[0].y, cls));
            continue;
        }
        if k == n_points - 1 {
            out.push(VectorPoint::new(last.x, last.y, cls));
            continue;
        }
        let target = total * k as f64 / (n_points - 1) as f64;
        while seg + 1 < pts.len() - 1 && cumulative[seg + 1] < target {
            seg += 1;
        }
        let len = cumulative[seg + 1] - cumulative[seg];
        let t = if len > 0.0 {
            ((target - cumulative[seg]) / len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (a, b) = (&pts[seg], &pts[seg + 1]);
        out.push(VectorPoint::new(
            a.x + t * (b.x - a.x),
            a.y + t * (b.y - a.y),
            cls,
        ));
    }
    let out = make_instance(out, cls, inst.confidence())?;
    Ok(compute_directions(&out))
}

pub fn resample_map(map: &VectorMap, n_points: usize) -> Result<VectorMap, VectorError> {
    let instances = map
        .instances
        .iter()
        .map(|inst| resample_instance(inst, n_points))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VectorMap {
        instances,
        ..map.clone()
    })
}

/// Clips to the window and resamples every surviving piece: the standard
/// preparation of an ego map before encoding.
pub fn prepare_ego_map(
    map: &VectorMap,
    window: &PerceptionWindow,
    n_points: usize,
) -> Result<VectorMap, MapIoError> {
    let clipped = clip_to_window(map, window)?;
    Ok(resample_map(&clipped, n_points)?)
}
