//! Ray-cast depth and label rendering of box scenes.

use std::sync::Arc;

use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use voxmem_core::{CameraIntrinsics, DepthImage, LabelImage, LabelTable, Pose, PosedFrame};

use crate::scene::{CameraSpec, Scene, Solid};

/// Hits farther than this along the optical axis read as invalid depth.
pub const FAR_DEPTH: f64 = 60.0;

/// Depth (along the optical axis) and label index per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub depth: Vec<f32>,
    pub labels: Vec<u16>,
}

/// Nearest hit along the ray through pixel `(h, w)`: z-depth and solid index.
pub fn cast_pixel(
    solids: &[Solid],
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    h: usize,
    w: usize,
) -> Option<(f64, usize)> {
    let cam = Vector3::new(
        (w as f64 - intrinsics.cx) / intrinsics.fx,
        (h as f64 - intrinsics.cy) / intrinsics.fy,
        1.0,
    );
    let dir = pose.rotation() * cam;
    let origin = Point3::from(*pose.translation());
    // the camera-frame z component of `dir` is 1, so the ray parameter is the depth
    solids
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.aabb.intersect(&origin, &dir).map(|t| (t, i)))
        .filter(|(t, _)| *t <= FAR_DEPTH)
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

/// Renders every pixel. Missed rays get depth 0 and label 0.
pub fn render_view(solids: &[Solid], table: &LabelTable, intrinsics: &CameraIntrinsics, pose: &Pose) -> RenderedView {
    let ids: Vec<u16> = solids.iter().map(|s| table.index_of(&s.label).unwrap_or(0)).collect();
    let n = intrinsics.width * intrinsics.height;
    let mut depth = vec![0.0f32; n];
    let mut labels = vec![0u16; n];
    for h in 0..intrinsics.height {
        for w in 0..intrinsics.width {
            if let Some((d, i)) = cast_pixel(solids, intrinsics, pose, h, w) {
                let k = h * intrinsics.width + w;
                depth[k] = d as f32;
                labels[k] = ids[i];
            }
        }
    }
    RenderedView { depth, labels }
}

/// Per-frame noise stream derived from the scene seed and the frame id.
pub fn frame_rng(seed: u64, frame_id: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(frame_id.to_le_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// Adds zero-mean Gaussian noise to valid depths; values that would drop to
/// zero or below become invalid.
pub fn add_depth_noise(depth: &mut [f32], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    for d in depth.iter_mut().filter(|d| **d > 0.0) {
        let v = *d as f64 + normal.sample(rng);
        *d = if v > 0.0 { v as f32 } else { 0.0 };
    }
}

/// Renders one frame of `scene` as it is in `round`.
pub fn render_frame(
    scene: &Scene,
    round: usize,
    frame_id: u64,
    timestamp: f64,
    pose: Pose,
    table: Arc<LabelTable>,
) -> PosedFrame {
    render_with(
        &scene.solids(round),
        &scene.camera,
        scene.seed,
        frame_id,
        timestamp,
        pose,
        table,
    )
}

/// Renders one frame from an explicit list of solids.
pub fn render_with(
    solids: &[Solid],
    camera: &CameraSpec,
    seed: u64,
    frame_id: u64,
    timestamp: f64,
    pose: Pose,
    table: Arc<LabelTable>,
) -> PosedFrame {
    let intr = camera.intrinsics();
    let mut view = render_view(solids, &table, &intr, &pose);
    add_depth_noise(&mut view.depth, camera.depth_noise, &mut frame_rng(seed, frame_id));
    let depth = DepthImage::new(intr.height, intr.width, view.depth).expect("sized from the intrinsics");
    let labels = LabelImage::new(intr.height, intr.width, view.labels, table).expect("sized from the intrinsics");
    PosedFrame::new(frame_id, timestamp, depth, labels, intr, pose).expect("rendered frames are well formed")
}
