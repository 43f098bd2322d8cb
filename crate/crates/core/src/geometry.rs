//! Pinhole camera model, poses and depth back-projection.
//!
//! Camera frame convention: x right, y down, z forward (optical axis).
//! Pixels are addressed as `(h, w)` = (row, column) with pixel centers at
//! integer coordinates.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use thiserror::Error;

/// Depth readings beyond this range (meters) are ignored by default.
pub const DEFAULT_MAX_DEPTH: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("rotation is not orthonormal with det +1 (deviation {0:.3e})")]
    InvalidRotation(f64),
    #[error("image dimension mismatch: expected {expected_h}x{expected_w}, got {got_h}x{got_w} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("invalid depth value {value} at ({h}, {w})")]
    InvalidDepth { h: usize, w: usize, value: f32 },
    #[error("frame {0}: {1}")]
    InvalidFrame(u64, String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: usize,
    pub width: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, height: usize, width: usize) -> Result<Self, GeometryError> {
        let intrinsics = Self {
            fx,
            fy,
            cx,
            cy,
            height,
            width,
        };
        intrinsics.validate()?;
        Ok(intrinsics)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(GeometryError::InvalidIntrinsics(
                "image dimensions must be positive".into(),
            ));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Rounds continuous pixel coordinates to the nearest pixel, returning
    /// `None` unless `0 <= h < H` and `0 <= w < W`.
    pub fn pixel_at(&self, h: f64, w: f64) -> Option<(usize, usize)> {
        if !(h.is_finite() && w.is_finite()) {
            return None;
        }
        let hr = h.round();
        let wr = w.round();
        if hr < 0.0 || wr < 0.0 || hr >= self.height as f64 || wr >= self.width as f64 {
            return None;
        }
        Some((hr as usize, wr as usize))
    }
}

/// Rigid transform taking camera-frame coordinates to world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Rotation3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let deviation = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        let worst = deviation.max((det - 1.0).abs());
        if !worst.is_finite() || worst > 1e-6 || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidRotation(worst));
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(rotation),
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation,
        }
    }

    pub fn from_parts(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Camera at `eye` with its optical axis pointing at `target`. `up` is the
    /// world up direction; image rows grow against it.
    pub fn look_at(eye: Point3<f64>, target: Point3<f64>, up: Vector3<f64>) -> Result<Self, GeometryError> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::InvalidPose("eye and target coincide".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::InvalidPose("view direction parallel to up".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self::new(rotation, eye.coords)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        self.rotation.matrix()
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn camera_to_world(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn world_to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.inverse() * (p.coords - self.translation))
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Row-major metric depth; 0 marks an invalid reading.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl DepthImage {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self, GeometryError> {
        if values.len() != height * width {
            return Err(GeometryError::DimensionMismatch {
                what: "depth buffer length",
                expected_h: height,
                expected_w: width,
                got_h: values.len() / width.max(1),
                got_w: width,
            });
        }
        for (idx, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(GeometryError::InvalidDepth {
                    h: idx / width,
                    w: idx % width,
                    value: v,
                });
            }
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize) -> f32 {
        self.values[h * self.width + w]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, v: f32) {
        self.values[h * self.width + w] = v;
    }
}

/// Label names indexed by the values stored in a [`LabelImage`]. Index 0 is
/// reserved for "no label".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTable {
    names: Vec<String>,
}

impl Default for LabelTable {
    fn default() -> Self {
        Self {
            names: vec![String::new()],
        }
    }
}

impl LabelTable {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut table = Self {
            names: vec![String::new()],
        };
        for n in names {
            table.intern(&n.into());
        }
        table
    }

    /// Returns the index of `name`, adding it if absent.
    pub fn intern(&mut self, name: &str) -> u16 {
        if let Some(i) = self.index_of(name) {
            return i;
        }
        self.names.push(name.to_string());
        (self.names.len() - 1) as u16
    }

    pub fn index_of(&self, name: &str) -> Option<u16> {
        self.names.iter().position(|n| n == name).map(|i| i as u16)
    }

    pub fn name(&self, index: u16) -> Option<&str> {
        self.names.get(index as usize).map(String::as_str)
    }

    /// All names, including the empty entry at index 0.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn from_names(names: Vec<String>) -> Self {
        if names.first().map(String::is_empty).unwrap_or(false) {
            Self { names }
        } else {
            Self::new(names)
        }
    }
}

/// Per-pixel label indices: the appearance channel of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelImage {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
    pub table: Arc<LabelTable>,
}

impl LabelImage {
    pub fn new(height: usize, width: usize, labels: Vec<u16>, table: Arc<LabelTable>) -> Result<Self, GeometryError> {
        if labels.len() != height * width {
            return Err(GeometryError::DimensionMismatch {
                what: "label buffer length",
                expected_h: height,
                expected_w: width,
                got_h: labels.len() / width.max(1),
                got_w: width,
            });
        }
        Ok(Self {
            height,
            width,
            labels,
            table,
        })
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize) -> u16 {
        self.labels[h * self.width + w]
    }

    pub fn label(&self, h: usize, w: usize) -> &str {
        self.table.name(self.index(h, w)).unwrap_or("")
    }
}

/// A timestamped, posed depth + label observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedFrame {
    pub frame_id: u64,
    pub timestamp: f64,
    pub depth: DepthImage,
    pub appearance: LabelImage,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

impl PosedFrame {
    pub fn new(
        frame_id: u64,
        timestamp: f64,
        depth: DepthImage,
        appearance: LabelImage,
        intrinsics: CameraIntrinsics,
        pose: Pose,
    ) -> Result<Self, GeometryError> {
        let frame = Self {
            frame_id,
            timestamp,
            depth,
            appearance,
            intrinsics,
            pose,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        self.intrinsics.validate()?;
        if !self.timestamp.is_finite() {
            return Err(GeometryError::InvalidFrame(
                self.frame_id,
                "timestamp is not finite".into(),
            ));
        }
        let (eh, ew) = (self.intrinsics.height, self.intrinsics.width);
        for (what, h, w, len) in [
            ("depth", self.depth.height, self.depth.width, self.depth.values.len()),
            (
                "appearance",
                self.appearance.height,
                self.appearance.width,
                self.appearance.labels.len(),
            ),
        ] {
            if h != eh || w != ew || len != eh * ew {
                return Err(GeometryError::DimensionMismatch {
                    what,
                    expected_h: eh,
                    expected_w: ew,
                    got_h: h,
                    got_w: w,
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for PosedFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "frame {} @ {:.3}s ({}x{})",
            self.frame_id, self.timestamp, self.intrinsics.width, self.intrinsics.height
        )
    }
}

/// A valid depth pixel lifted into the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackprojectedPixel {
    pub point: Point3<f64>,
    pub pixel: (usize, usize),
}

/// Continuous image coordinates plus signed camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub h: f64,
    pub w: f64,
    pub d: f64,
}

/// Lifts pixel `(h, w)` at depth `depth` (along the optical axis) to the world frame.
#[inline]
pub fn unproject_pixel(intrinsics: &CameraIntrinsics, pose: &Pose, h: f64, w: f64, depth: f64) -> Point3<f64> {
    let x = (w - intrinsics.cx) / intrinsics.fx * depth;
    let y = (h - intrinsics.cy) / intrinsics.fy * depth;
    pose.camera_to_world(&Point3::new(x, y, depth))
}

/// Back-projects every pixel with `0 < depth <= max_depth`, in row-major order.
pub fn backproject(frame: &PosedFrame, max_depth: f64) -> Result<Vec<BackprojectedPixel>, GeometryError> {
    frame.validate()?;
    let intr = &frame.intrinsics;
    let mut out = Vec::new();
    for h in 0..intr.height {
        for w in 0..intr.width {
            let d = frame.depth.get(h, w) as f64;
            if d > 0.0 && d <= max_depth {
                out.push(BackprojectedPixel {
                    point: unproject_pixel(intr, &frame.pose, h as f64, w as f64, d),
                    pixel: (h, w),
                });
            }
        }
    }
    Ok(out)
}

/// Projects a world point into the camera. Total: no clamping or culling.
#[inline]
pub fn project(point: &Point3<f64>, intrinsics: &CameraIntrinsics, pose: &Pose) -> Projection {
    let c = pose.world_to_camera(point);
    Projection {
        h: intrinsics.fy * c.y / c.z + intrinsics.cy,
        w: intrinsics.fx * c.x / c.z + intrinsics.cx,
        d: c.z,
    }
}
