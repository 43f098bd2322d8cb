//! Scene scripts.
//!
//! A scene is a floor rectangle at z = 0, static obstacle boxes, and labeled
//! object boxes whose placement may change from round to round. Scripts are
//! TOML with a versioned header:
//!
//! ```toml
//! version = 1
//! name = "studio"
//! seed = 7
//! rounds = 3
//! floor = { min = [0.0, 0.0], max = [4.0, 4.0] }
//!
//! [[obstacles]]
//! label = "wall"            # optional, defaults to "obstacle"
//! min = [-0.1, -0.1, 0.0]
//! max = [0.0, 4.1, 1.5]
//!
//! [[objects]]
//! label = "mug"
//! placements = [
//!   { rounds = [0], min = [1.0, 1.0, 0.0], max = [1.12, 1.12, 0.12] },
//!   { rounds = [1, 2], min = [2.0, 1.0, 0.0], max = [2.12, 1.12, 0.12] },
//! ]
//!
//! [camera]                  # all optional
//! width = 160
//! height = 120
//! fx = 100.0
//! fy = 100.0
//! depth_noise = 0.0
//!
//! [trajectory]
//! frame_interval = 1.0      # seconds between frames
//! round_gap = 300.0         # seconds between round starts
//! height = 0.8              # camera height
//! pitch_deg = 40.0          # downward tilt
//! headings = 8              # views per viewpoint, evenly spaced
//! viewpoints = [[1.0, 1.0], [3.0, 3.0]]
//!
//! [[trajectory.rounds]]     # optional per-round viewpoint override
//! round = 1
//! viewpoints = [[3.0, 3.0], [1.0, 1.0]]
//!
//! [[queries]]
//! q = "mug"                 # text issued to the model
//! label = "mug"             # scene label it refers to, defaults to q
//! rounds = [0, 1, 2]        # defaults to every round
//! at = [0.5, 1.0]           # fraction of the round's frames seen, defaults to [1.0]
//!
//! [explore]
//! start = [2.0, 2.0]
//! ```
//!
//! A placement absent for a round means the object is not in the scene then.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::{Point3, Vector3};
use serde::Deserialize;
use thiserror::Error;
use toml::Spanned;
use voxmem_core::{CameraIntrinsics, LabelTable, Pose};

pub const SCENE_FORMAT_VERSION: u32 = 1;
pub const FLOOR_LABEL: &str = "floor";
pub const DEFAULT_OBSTACLE_LABEL: &str = "obstacle";
/// Thickness of the box used to render the floor below z = 0.
pub const FLOOR_THICKNESS: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("scene script has no line information: {0}")]
    Invalid(String),
    #[error("label {label:?} has {count} placements in round {round}")]
    AmbiguousLabel { label: String, round: usize, count: usize },
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Option<Self> {
        let ok = (0..3).all(|i| min[i].is_finite() && max[i].is_finite() && min[i] < max[i]);
        ok.then(|| Self {
            min: Point3::from(min),
            max: Point3::from(max),
        })
    }

    pub fn center(&self) -> Point3<f64> {
        nalgebra::center(&self.min, &self.max)
    }

    pub fn half_diagonal(&self) -> f64 {
        (self.max - self.min).norm() / 2.0
    }

    /// Interiors overlap (touching faces do not count).
    pub fn overlaps(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] < other.max[i] && other.min[i] < self.max[i])
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }

    /// Distance from `p` to the box surface or interior (0 inside).
    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        let d = Vector3::from_fn(|i, _| (self.min[i] - p[i]).max(0.0).max(p[i] - self.max[i]));
        d.norm()
    }

    /// Distance from `p` to the box boundary, for points inside or outside.
    pub fn surface_distance(&self, p: &Point3<f64>) -> f64 {
        if self.contains(p) {
            (0..3)
                .map(|i| (p[i] - self.min[i]).min(self.max[i] - p[i]))
                .fold(f64::INFINITY, f64::min)
        } else {
            self.distance(p)
        }
    }

    /// Ray parameter of the first intersection with `s > 0`, slab method.
    pub fn intersect(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i] == 0.0 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (a, b) = ((self.min[i] - origin[i]) * inv, (self.max[i] - origin[i]) * inv);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        if t0 > 0.0 {
            Some(t0)
        } else if t1 > 0.0 {
            // origin inside the box
            Some(t1)
        } else {
            None
        }
    }

    /// Whether the XY footprint intersects the closed rectangle.
    pub fn footprint_touches(&self, min: [f64; 2], max: [f64; 2]) -> bool {
        self.min.x <= max[0] && min[0] <= self.max.x && self.min.y <= max[1] && min[1] <= self.max.y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticObstacle {
    pub label: String,
    pub aabb: Aabb,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub label: String,
    /// Indexed by round; `None` when the object is absent that round.
    pub placements: Vec<Option<Aabb>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub depth_noise: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            width: 160,
            height: 120,
            fx: 100.0,
            fy: 100.0,
            cx: 79.5,
            cy: 59.5,
            depth_noise: 0.0,
        }
    }
}

impl CameraSpec {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.height, self.width)
            .expect("validated when the scene was parsed")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub frame_interval: f64,
    pub round_gap: f64,
    pub height: f64,
    pub pitch_deg: f64,
    pub headings: usize,
    /// Viewpoints per round.
    pub viewpoints: Vec<Vec<[f64; 2]>>,
}

/// One camera pose of the scripted trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryFrame {
    pub round: usize,
    pub timestamp: f64,
    pub pose: Pose,
}

impl TrajectorySpec {
    /// Camera poses for an 8-way (or `headings`-way) scan at `xy`.
    pub fn scan_poses(&self, xy: [f64; 2]) -> Vec<Pose> {
        scan_poses(xy, self.height, self.pitch_deg, self.headings)
    }

    /// Every pose in time order. Round `r` starts at `r * round_gap`.
    pub fn frames(&self) -> Vec<TrajectoryFrame> {
        let mut out = Vec::new();
        for (round, vps) in self.viewpoints.iter().enumerate() {
            let mut t = round as f64 * self.round_gap;
            for &xy in vps {
                for pose in self.scan_poses(xy) {
                    out.push(TrajectoryFrame {
                        round,
                        timestamp: t,
                        pose,
                    });
                    t += self.frame_interval;
                }
            }
        }
        out
    }
}

/// Poses looking outward from `(x, y, height)` at evenly spaced headings,
/// tilted down by `pitch_deg`. Heading 0 looks along +x.
pub fn scan_poses(xy: [f64; 2], height: f64, pitch_deg: f64, headings: usize) -> Vec<Pose> {
    let eye = Point3::new(xy[0], xy[1], height);
    let pitch = pitch_deg.to_radians();
    (0..headings)
        .map(|i| {
            let yaw = 2.0 * PI * i as f64 / headings as f64;
            let dir = Vector3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), -pitch.sin());
            Pose::look_at(eye, eye + dir, Vector3::z()).expect("pitch is validated below 90 degrees")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryPlan {
    pub q: String,
    pub label: String,
    pub rounds: Vec<usize>,
    pub at: Vec<f64>,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    pub seed: u64,
    pub rounds: usize,
    pub floor_min: [f64; 2],
    pub floor_max: [f64; 2],
    pub obstacles: Vec<StaticObstacle>,
    pub objects: Vec<SceneObject>,
    pub camera: CameraSpec,
    pub trajectory: TrajectorySpec,
    pub queries: Vec<QueryPlan>,
    pub explore_start: Option<[f64; 2]>,
}

/// A box that can be hit by a ray, with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Solid {
    pub label: String,
    pub aabb: Aabb,
}

impl Scene {
    pub fn parse(text: &str) -> Result<Scene, SceneError> {
        let script: Script = toml::from_str(text).map_err(|e| SceneError::Parse {
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
            message: e.message().trim().to_string(),
        })?;
        script.validate(text)
    }

    pub fn floor_aabb(&self) -> Aabb {
        Aabb {
            min: Point3::new(self.floor_min[0], self.floor_min[1], -FLOOR_THICKNESS),
            max: Point3::new(self.floor_max[0], self.floor_max[1], 0.0),
        }
    }

    /// Floor, static obstacles and objects placed in `round`.
    pub fn solids(&self, round: usize) -> Vec<Solid> {
        let mut out = vec![Solid {
            label: FLOOR_LABEL.into(),
            aabb: self.floor_aabb(),
        }];
        out.extend(self.obstacles.iter().map(|o| Solid {
            label: o.label.clone(),
            aabb: o.aabb,
        }));
        out.extend(self.objects.iter().filter_map(|o| {
            o.placements.get(round).copied().flatten().map(|aabb| Solid {
                label: o.label.clone(),
                aabb,
            })
        }));
        out
    }

    /// Label table shared by every rendered frame: floor, obstacle labels,
    /// then object labels, in script order.
    pub fn label_table(&self) -> LabelTable {
        let mut t = LabelTable::new([FLOOR_LABEL]);
        for o in &self.obstacles {
            t.intern(&o.label);
        }
        for o in &self.objects {
            t.intern(&o.label);
        }
        t
    }

    pub fn object_labels(&self) -> BTreeSet<&str> {
        self.objects.iter().map(|o| o.label.as_str()).collect()
    }
}

/// Box center and half-diagonal of `label` in `round`, or `None` when no
/// object with that label is placed then.
pub fn ground_truth_location(
    scene: &Scene,
    round: usize,
    label: &str,
) -> Result<Option<(Point3<f64>, f64)>, SceneError> {
    let placed: Vec<Aabb> = scene
        .objects
        .iter()
        .filter(|o| o.label == label)
        .filter_map(|o| o.placements.get(round).copied().flatten())
        .collect();
    match placed.as_slice() {
        [] => Ok(None),
        [b] => Ok(Some((b.center(), b.half_diagonal()))),
        _ => Err(SceneError::AmbiguousLabel {
            label: label.into(),
            round,
            count: placed.len(),
        }),
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Script {
    version: Spanned<u32>,
    name: String,
    #[serde(default)]
    seed: u64,
    rounds: Spanned<usize>,
    floor: Spanned<FloorScript>,
    #[serde(default)]
    obstacles: Vec<Spanned<ObstacleScript>>,
    #[serde(default)]
    objects: Vec<Spanned<ObjectScript>>,
    #[serde(default)]
    camera: Option<Spanned<CameraScript>>,
    trajectory: Spanned<TrajectoryScript>,
    #[serde(default)]
    queries: Vec<Spanned<QueryScript>>,
    #[serde(default)]
    explore: Option<Spanned<ExploreScript>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FloorScript {
    min: [f64; 2],
    max: [f64; 2],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ObstacleScript {
    label: Option<String>,
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectScript {
    label: String,
    placements: Vec<Spanned<PlacementScript>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlacementScript {
    rounds: Vec<usize>,
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct CameraScript {
    width: Option<usize>,
    height: Option<usize>,
    fx: Option<f64>,
    fy: Option<f64>,
    cx: Option<f64>,
    cy: Option<f64>,
    depth_noise: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryScript {
    #[serde(default = "default_frame_interval")]
    frame_interval: f64,
    #[serde(default = "default_round_gap")]
    round_gap: f64,
    #[serde(default = "default_height")]
    height: f64,
    #[serde(default = "default_pitch")]
    pitch_deg: f64,
    #[serde(default = "default_headings")]
    headings: usize,
    #[serde(default)]
    viewpoints: Vec<[f64; 2]>,
    #[serde(default)]
    rounds: Vec<Spanned<RoundViewpoints>>,
}

fn default_frame_interval() -> f64 {
    1.0
}
fn default_round_gap() -> f64 {
    300.0
}
fn default_height() -> f64 {
    0.8
}
fn default_pitch() -> f64 {
    40.0
}
fn default_headings() -> usize {
    8
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RoundViewpoints {
    round: usize,
    viewpoints: Vec<[f64; 2]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryScript {
    q: String,
    label: Option<String>,
    rounds: Option<Vec<usize>>,
    at: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExploreScript {
    start: [f64; 2],
}

impl Script {
    fn validate(self, text: &str) -> Result<Scene, SceneError> {
        let err = |span: std::ops::Range<usize>, message: String| SceneError::Parse {
            line: line_of(text, span.start),
            message,
        };
        if *self.version.get_ref() != SCENE_FORMAT_VERSION {
            return Err(err(
                self.version.span(),
                format!(
                    "scene format version {} is not supported (expected {SCENE_FORMAT_VERSION})",
                    self.version.get_ref()
                ),
            ));
        }
        let rounds = *self.rounds.get_ref();
        if rounds == 0 {
            return Err(err(self.rounds.span(), "rounds must be at least 1".into()));
        }
        let floor = self.floor.get_ref();
        if !(0..2).all(|i| floor.min[i].is_finite() && floor.max[i].is_finite() && floor.min[i] < floor.max[i]) {
            return Err(err(
                self.floor.span(),
                "floor min must be below max on both axes".into(),
            ));
        }
        let inside_floor = |b: &Aabb| {
            b.min.x >= floor.min[0]
                && b.max.x <= floor.max[0]
                && b.min.y >= floor.min[1]
                && b.max.y <= floor.max[1]
                && b.min.z >= 0.0
        };

        let mut obstacles = Vec::new();
        for o in &self.obstacles {
            let s = o.get_ref();
            let aabb = Aabb::new(s.min, s.max)
                .ok_or_else(|| err(o.span(), "obstacle box needs min < max on every axis".into()))?;
            let label = s.label.clone().unwrap_or_else(|| DEFAULT_OBSTACLE_LABEL.into());
            if label.is_empty() || label == FLOOR_LABEL {
                return Err(err(o.span(), format!("obstacle label {label:?} is reserved")));
            }
            obstacles.push(StaticObstacle { label, aabb });
        }

        let mut objects = Vec::new();
        for o in &self.objects {
            let s = o.get_ref();
            if s.label.trim().is_empty() || s.label == FLOOR_LABEL {
                return Err(err(o.span(), format!("object label {:?} is reserved", s.label)));
            }
            if obstacles.iter().any(|ob| ob.label == s.label) {
                return Err(err(
                    o.span(),
                    format!("object label {:?} is also an obstacle label", s.label),
                ));
            }
            let mut placements = vec![None; rounds];
            for p in &s.placements {
                let ps = p.get_ref();
                let aabb = Aabb::new(ps.min, ps.max)
                    .ok_or_else(|| err(p.span(), "placement box needs min < max on every axis".into()))?;
                if !inside_floor(&aabb) {
                    return Err(err(
                        p.span(),
                        format!("placement of {:?} leaves the floor extent", s.label),
                    ));
                }
                if let Some(ob) = obstacles.iter().find(|ob| ob.aabb.overlaps(&aabb)) {
                    return Err(err(
                        p.span(),
                        format!("placement of {:?} intersects obstacle {:?}", s.label, ob.label),
                    ));
                }
                for &r in &ps.rounds {
                    if r >= rounds {
                        return Err(err(p.span(), format!("round {r} outside 0..{rounds}")));
                    }
                    if placements[r].is_some() {
                        return Err(err(p.span(), format!("{:?} placed twice in round {r}", s.label)));
                    }
                    placements[r] = Some(aabb);
                }
            }
            objects.push(SceneObject {
                label: s.label.clone(),
                placements,
            });
        }
        for r in 0..rounds {
            let placed: Vec<(&str, Aabb)> = objects
                .iter()
                .filter_map(|o| o.placements[r].map(|b| (o.label.as_str(), b)))
                .collect();
            for (i, a) in placed.iter().enumerate() {
                if let Some(b) = placed[i + 1..].iter().find(|b| b.1.overlaps(&a.1)) {
                    return Err(SceneError::Invalid(format!(
                        "objects {:?} and {:?} overlap in round {r}",
                        a.0, b.0
                    )));
                }
            }
        }

        let mut camera = CameraSpec::default();
        if let Some(c) = &self.camera {
            let s = c.get_ref();
            camera.width = s.width.unwrap_or(camera.width);
            camera.height = s.height.unwrap_or(camera.height);
            camera.fx = s.fx.unwrap_or(camera.fx);
            camera.fy = s.fy.unwrap_or(camera.fy);
            camera.cx = s.cx.unwrap_or((camera.width as f64 - 1.0) / 2.0);
            camera.cy = s.cy.unwrap_or((camera.height as f64 - 1.0) / 2.0);
            camera.depth_noise = s.depth_noise.unwrap_or(0.0);
            if CameraIntrinsics::new(camera.fx, camera.fy, camera.cx, camera.cy, camera.height, camera.width).is_err()
                || !(camera.depth_noise >= 0.0)
            {
                return Err(err(
                    c.span(),
                    "camera needs positive size and focal lengths, depth_noise >= 0".into(),
                ));
            }
        }

        let t = self.trajectory.get_ref();
        let tspan = self.trajectory.span();
        if !(t.frame_interval > 0.0) || !(t.round_gap > 0.0) || t.headings == 0 {
            return Err(err(
                tspan,
                "frame_interval, round_gap and headings must be positive".into(),
            ));
        }
        if !(t.pitch_deg > -89.0 && t.pitch_deg < 89.0) || !t.height.is_finite() {
            return Err(err(tspan, "pitch_deg must lie in (-89, 89)".into()));
        }
        let mut viewpoints = vec![t.viewpoints.clone(); rounds];
        for rv in &t.rounds {
            let s = rv.get_ref();
            if s.round >= rounds {
                return Err(err(rv.span(), format!("round {} outside 0..{rounds}", s.round)));
            }
            viewpoints[s.round] = s.viewpoints.clone();
        }
        let trajectory = TrajectorySpec {
            frame_interval: t.frame_interval,
            round_gap: t.round_gap,
            height: t.height,
            pitch_deg: t.pitch_deg,
            headings: t.headings,
            viewpoints,
        };
        for (r, vps) in trajectory.viewpoints.iter().enumerate() {
            let span = (vps.len() * t.headings) as f64 * t.frame_interval;
            if span >= t.round_gap {
                return Err(err(
                    tspan,
                    format!(
                        "round {r} needs {span} s of frames, more than round_gap {}",
                        t.round_gap
                    ),
                ));
            }
        }

        let mut queries = Vec::new();
        for q in &self.queries {
            let s = q.get_ref();
            if s.q.trim().is_empty() {
                return Err(err(q.span(), "query text is empty".into()));
            }
            let qrounds = s.rounds.clone().unwrap_or_else(|| (0..rounds).collect());
            if let Some(r) = qrounds.iter().find(|&&r| r >= rounds) {
                return Err(err(q.span(), format!("round {r} outside 0..{rounds}")));
            }
            let at = s.at.clone().unwrap_or_else(|| vec![1.0]);
            if at.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
                return Err(err(q.span(), "`at` fractions must lie in (0, 1]".into()));
            }
            queries.push(QueryPlan {
                q: s.q.clone(),
                label: s.label.clone().unwrap_or_else(|| s.q.clone()),
                rounds: qrounds,
                at,
                line: line_of(text, q.span().start),
            });
        }

        let explore_start = self.explore.as_ref().map(|e| e.get_ref().start);
        Ok(Scene {
            name: self.name,
            seed: self.seed,
            rounds,
            floor_min: floor.min,
            floor_max: floor.max,
            obstacles,
            objects,
            camera,
            trajectory,
            queries,
            explore_start,
        })
    }
}
