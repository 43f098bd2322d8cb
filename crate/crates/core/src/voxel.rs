//! Dynamic sparse voxel memory.
//!
//! Each occupied cell keeps an observation count, a count-weighted mean
//! feature, the time and frame id of its most recent contribution, and the
//! weighted centroid of its points. Cells are dropped when a new frame shows
//! free space where they sit: the centroid projects into the image in front
//! of the observed surface (within `epsilon`) and closer than `max_depth`.
//!
//! The map is stored in persistent ordered maps so [`VoxelMemory::snapshot`]
//! is O(1) and readers never see a half-applied frame.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Deref;

use imbl::OrdMap;
use nalgebra::{Point3, Vector3};
use thiserror::Error;

use crate::feature::Feature;
use crate::geometry::{backproject, project, GeometryError, PosedFrame, DEFAULT_MAX_DEPTH};

#[derive(Debug, Error, PartialEq)]
pub enum MemoryError {
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    FeatureDim { expected: usize, got: usize },
    #[error("observation weight must be positive and finite, got {0}")]
    InvalidWeight(f64),
    #[error("observation has non-finite position or time")]
    NonFinite,
    #[error("{expected} features expected for the frame's valid pixels, got {got}")]
    FeatureCount { expected: usize, got: usize },
    #[error("invalid memory configuration: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryConfig {
    /// Cell edge length in meters.
    pub voxel_size: f64,
    pub feature_dim: usize,
    /// Depth tolerance added to the observed surface when testing removal.
    pub epsilon: f64,
    /// Depth cap for both insertion and removal.
    pub max_depth: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.05,
            feature_dim: 512,
            epsilon: 0.05,
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<(), MemoryError> {
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            return Err(MemoryError::Config(format!(
                "voxel_size must be positive, got {}",
                self.voxel_size
            )));
        }
        if self.feature_dim == 0 {
            return Err(MemoryError::Config("feature_dim must be positive".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(MemoryError::Config(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        if !(self.max_depth.is_finite() && self.max_depth > 0.0) {
            return Err(MemoryError::Config(format!(
                "max_depth must be positive, got {}",
                self.max_depth
            )));
        }
        Ok(())
    }
}

/// Integer cell index: `floor(coordinate / voxel_size)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey {
    pub i: i32,
    pub j: i32,
    pub k: i32,
}

impl VoxelKey {
    pub const fn new(i: i32, j: i32, k: i32) -> Self {
        Self { i, j, k }
    }

    pub fn from_point(p: &Point3<f64>, voxel_size: f64) -> Self {
        Self {
            i: (p.x / voxel_size).floor() as i32,
            j: (p.y / voxel_size).floor() as i32,
            k: (p.z / voxel_size).floor() as i32,
        }
    }

    pub fn center(&self, voxel_size: f64) -> Point3<f64> {
        Point3::new(
            (self.i as f64 + 0.5) * voxel_size,
            (self.j as f64 + 0.5) * voxel_size,
            (self.k as f64 + 0.5) * voxel_size,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelRecord {
    /// Accumulated observation weight; always positive for stored records.
    pub count: f64,
    pub feature: Feature,
    pub last_seen: f64,
    pub image_id: u64,
    pub centroid: Point3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointObservation {
    pub position: Point3<f64>,
    pub feature: Feature,
    pub weight: f64,
    pub time: f64,
    pub image_id: u64,
}

/// Summary of one [`VoxelMemory::ingest_frame`] call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub removed: Vec<VoxelKey>,
    pub inserted_points: usize,
    pub touched_cells: usize,
}

#[derive(Debug, Clone)]
pub struct VoxelMemory {
    config: MemoryConfig,
    cells: OrdMap<VoxelKey, VoxelRecord>,
    // image id -> number of cells pointing at it
    live: OrdMap<u64, usize>,
}

/// Read-only view of a memory taken between ingests.
#[derive(Debug, Clone)]
pub struct MemorySnapshot(VoxelMemory);

impl Deref for MemorySnapshot {
    type Target = VoxelMemory;

    fn deref(&self) -> &VoxelMemory {
        &self.0
    }
}

struct BatchAccumulator {
    weight: f64,
    mean_feature: Vec<f64>,
    mean_position: Vector3<f64>,
    // run of consecutive observations sharing one feature allocation
    pending: Option<(Feature, f64)>,
    // the single allocation every flushed run used, if there was only one
    shared: Option<Feature>,
    mixed: bool,
    latest: (f64, u64),
}

impl BatchAccumulator {
    fn new(dim: usize) -> Self {
        Self {
            weight: 0.0,
            mean_feature: vec![0.0; dim],
            mean_position: Vector3::zeros(),
            pending: None,
            shared: None,
            mixed: false,
            latest: (f64::NEG_INFINITY, 0),
        }
    }

    fn push(&mut self, obs: &PointObservation) {
        match &mut self.pending {
            Some((f, w)) if f.ptr_eq(&obs.feature) => *w += obs.weight,
            _ => {
                self.flush();
                self.pending = Some((obs.feature.clone(), obs.weight));
            }
        }
        // positions are folded eagerly, features lazily per run
        let total = self.weight + self.pending_weight();
        let frac = obs.weight / total;
        self.mean_position += (obs.position.coords - self.mean_position) * frac;
        if (obs.time, obs.image_id) > self.latest {
            self.latest = (obs.time, obs.image_id);
        }
    }

    /// The batch feature as a shared allocation when all runs used one.
    fn shared_feature(&self) -> Option<&Feature> {
        if self.mixed {
            None
        } else {
            self.shared.as_ref()
        }
    }

    fn pending_weight(&self) -> f64 {
        self.pending.as_ref().map(|(_, w)| *w).unwrap_or(0.0)
    }

    fn flush(&mut self) {
        if let Some((f, w)) = self.pending.take() {
            match &self.shared {
                None => self.shared = Some(f.clone()),
                Some(s) if !s.ptr_eq(&f) => self.mixed = true,
                Some(_) => {}
            }
            self.weight += w;
            let frac = w / self.weight;
            for (m, x) in self.mean_feature.iter_mut().zip(f.iter()) {
                *m += (x - *m) * frac;
            }
        }
    }
}

impl VoxelMemory {
    pub fn new(config: MemoryConfig) -> Result<Self, MemoryError> {
        config.validate()?;
        Ok(Self {
            config,
            cells: OrdMap::new(),
            live: OrdMap::new(),
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn voxel_size(&self) -> f64 {
        self.config.voxel_size
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&VoxelRecord> {
        self.cells.get(key)
    }

    /// Cells in ascending key order.
    pub fn iter(&self) -> impl Iterator<Item = (&VoxelKey, &VoxelRecord)> {
        self.cells.iter()
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot(self.clone())
    }

    /// Frame ids referenced by at least one stored cell.
    pub fn live_images(&self) -> BTreeSet<u64> {
        self.live.keys().copied().collect()
    }

    pub fn is_live(&self, image_id: u64) -> bool {
        self.live.contains_key(&image_id)
    }

    /// The set of frames still referenced by the map. Frames outside it may be
    /// dropped by the caller's frame store.
    pub fn prune_dead_images(&self) -> BTreeSet<u64> {
        self.live_images()
    }

    /// Folds a batch of observations into the map.
    ///
    /// Per cell, with stored count `C`, feature `f` and incoming batch weight
    /// `n` and weighted-mean feature `g`: `C' = C + n` and
    /// `f' = (C f + n g) / (C + n)`. The batch is validated up front; on error
    /// the map is left untouched.
    pub fn insert_points(&mut self, observations: &[PointObservation]) -> Result<usize, MemoryError> {
        let dim = self.config.feature_dim;
        for obs in observations {
            if obs.feature.dim() != dim {
                return Err(MemoryError::FeatureDim {
                    expected: dim,
                    got: obs.feature.dim(),
                });
            }
            if !(obs.weight.is_finite() && obs.weight > 0.0) {
                return Err(MemoryError::InvalidWeight(obs.weight));
            }
            if !(obs.time.is_finite() && obs.position.iter().all(|v| v.is_finite())) {
                return Err(MemoryError::NonFinite);
            }
        }

        let vs = self.config.voxel_size;
        let mut batches: BTreeMap<VoxelKey, BatchAccumulator> = BTreeMap::new();
        for obs in observations {
            batches
                .entry(VoxelKey::from_point(&obs.position, vs))
                .or_insert_with(|| BatchAccumulator::new(dim))
                .push(obs);
        }
        let touched = batches.len();

        for (key, mut batch) in batches {
            batch.flush();
            let n = batch.weight;
            let (record, previous_image) = match self.cells.get(&key) {
                Some(old) => {
                    let total = old.count + n;
                    let frac = n / total;
                    // f + (g - f) * frac == f exactly when g == f
                    let feature = match batch.shared_feature() {
                        Some(s) if s.ptr_eq(&old.feature) || s.as_slice() == old.feature.as_slice() => {
                            old.feature.clone()
                        }
                        _ => Feature::new(
                            old.feature
                                .iter()
                                .zip(&batch.mean_feature)
                                .map(|(f, g)| f + (g - f) * frac)
                                .collect(),
                        ),
                    };
                    let centroid = old.centroid + (Point3::from(batch.mean_position) - old.centroid) * frac;
                    let (last_seen, image_id) = if batch.latest >= (old.last_seen, old.image_id) {
                        batch.latest
                    } else {
                        (old.last_seen, old.image_id)
                    };
                    (
                        VoxelRecord {
                            count: total,
                            feature,
                            last_seen,
                            image_id,
                            centroid,
                        },
                        Some(old.image_id),
                    )
                }
                None => (
                    VoxelRecord {
                        count: n,
                        feature: match batch.shared_feature() {
                            Some(s) => s.clone(),
                            None => Feature::new(batch.mean_feature),
                        },
                        last_seen: batch.latest.0,
                        image_id: batch.latest.1,
                        centroid: Point3::from(batch.mean_position),
                    },
                    None,
                ),
            };
            if let Some(prev) = previous_image {
                self.release_image(prev);
            }
            self.retain_image(record.image_id);
            self.cells.insert(key, record);
        }
        Ok(touched)
    }

    /// Whether a cell centroid lies in the free space observed by `frame`.
    pub fn is_in_free_space(&self, centroid: &Point3<f64>, frame: &PosedFrame) -> bool {
        let proj = project(centroid, &frame.intrinsics, &frame.pose);
        if !(proj.d > 0.0) {
            return false;
        }
        let Some((h, w)) = frame.intrinsics.pixel_at(proj.h, proj.w) else {
            return false;
        };
        let observed = frame.depth.get(h, w) as f64;
        if observed <= 0.0 {
            return false;
        }
        proj.d < self.config.max_depth.min(observed + self.config.epsilon)
    }

    /// Removes every cell whose centroid falls inside the frame's observed
    /// free space. Returns the removed keys in ascending order.
    pub fn remove_stale(&mut self, frame: &PosedFrame) -> Result<Vec<VoxelKey>, MemoryError> {
        frame.validate()?;
        let removed: Vec<VoxelKey> = self
            .cells
            .iter()
            .filter(|(_, rec)| self.is_in_free_space(&rec.centroid, frame))
            .map(|(k, _)| *k)
            .collect();
        for key in &removed {
            if let Some(rec) = self.cells.remove(key) {
                self.release_image(rec.image_id);
            }
        }
        Ok(removed)
    }

    /// Removal followed by insertion of the frame's back-projected points,
    /// one unit-weight observation per valid pixel. `features` must align
    /// with [`backproject`]'s output for the configured depth cap.
    pub fn ingest_frame(&mut self, frame: &PosedFrame, features: &[Feature]) -> Result<IngestReport, MemoryError> {
        self.ingest_frame_with(frame, features, true)
    }

    /// Like [`ingest_frame`](Self::ingest_frame); `remove = false` only adds points.
    pub fn ingest_frame_with(
        &mut self,
        frame: &PosedFrame,
        features: &[Feature],
        remove: bool,
    ) -> Result<IngestReport, MemoryError> {
        let observations = self.frame_observations(frame, features)?;
        let removed = if remove { self.remove_stale(frame)? } else { Vec::new() };
        let touched_cells = self.insert_points(&observations)?;
        Ok(IngestReport {
            removed,
            inserted_points: observations.len(),
            touched_cells,
        })
    }

    fn frame_observations(
        &self,
        frame: &PosedFrame,
        features: &[Feature],
    ) -> Result<Vec<PointObservation>, MemoryError> {
        let points = backproject(frame, self.config.max_depth)?;
        if points.len() != features.len() {
            return Err(MemoryError::FeatureCount {
                expected: points.len(),
                got: features.len(),
            });
        }
        Ok(points
            .into_iter()
            .zip(features)
            .map(|(p, f)| PointObservation {
                position: p.point,
                feature: f.clone(),
                weight: 1.0,
                time: frame.timestamp,
                image_id: frame.frame_id,
            })
            .collect())
    }

    fn retain_image(&mut self, id: u64) {
        *self.live.entry(id).or_insert(0) += 1;
    }

    fn release_image(&mut self, id: u64) {
        if let Some(n) = self.live.get_mut(&id) {
            *n -= 1;
            if *n == 0 {
                self.live.remove(&id);
            }
        }
    }

    /// Rebuilds a memory from raw records (used by persistence).
    pub fn from_records<I>(config: MemoryConfig, records: I) -> Result<Self, MemoryError>
    where
        I: IntoIterator<Item = (VoxelKey, VoxelRecord)>,
    {
        let mut mem = Self::new(config)?;
        for (key, rec) in records {
            if rec.feature.dim() != config.feature_dim {
                return Err(MemoryError::FeatureDim {
                    expected: config.feature_dim,
                    got: rec.feature.dim(),
                });
            }
            mem.retain_image(rec.image_id);
            if let Some(old) = mem.cells.insert(key, rec) {
                mem.release_image(old.image_id);
            }
        }
        mem.check_invariants()?;
        Ok(mem)
    }

    /// Verifies the structural invariants of the map.
    pub fn check_invariants(&self) -> Result<(), MemoryError> {
        let vs = self.config.voxel_size;
        let mut refs: BTreeMap<u64, usize> = BTreeMap::new();
        for (key, rec) in self.cells.iter() {
            if !(rec.count > 0.0 && rec.count.is_finite()) {
                return Err(MemoryError::Invariant(format!("cell {key:?} has count {}", rec.count)));
            }
            if rec.feature.dim() != self.config.feature_dim {
                return Err(MemoryError::Invariant(format!(
                    "cell {key:?} has feature dim {}",
                    rec.feature.dim()
                )));
            }
            let off = (rec.centroid - key.center(vs)).amax();
            if !(off <= vs / 2.0 + 1e-9) {
                return Err(MemoryError::Invariant(format!(
                    "cell {key:?} centroid {off} from center"
                )));
            }
            *refs.entry(rec.image_id).or_insert(0) += 1;
        }
        let live: BTreeMap<u64, usize> = self.live.iter().map(|(k, v)| (*k, *v)).collect();
        if refs != live {
            return Err(MemoryError::Invariant("live image index out of sync with cells".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, DepthImage, LabelImage, LabelTable, Pose};
    use std::sync::Arc;

    fn cfg(dim: usize) -> MemoryConfig {
        MemoryConfig {
            feature_dim: dim,
            ..MemoryConfig::default()
        }
    }

    fn obs(p: [f64; 3], f: &Feature, w: f64, t: f64, id: u64) -> PointObservation {
        PointObservation {
            position: Point3::new(p[0], p[1], p[2]),
            feature: f.clone(),
            weight: w,
            time: t,
            image_id: id,
        }
    }

    fn frame(depth_at_center: f32, pose: Pose) -> PosedFrame {
        let i = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let depth = DepthImage::new(100, 100, vec![depth_at_center; 10_000]).unwrap();
        let labels = LabelImage::new(100, 100, vec![0; 10_000], Arc::new(LabelTable::default())).unwrap();
        PosedFrame::new(9, 1.0, depth, labels, i, pose).unwrap()
    }

    #[test]
    fn first_insert_initializes_from_zero() {
        let mut m = VoxelMemory::new(cfg(3)).unwrap();
        let v = Feature::new(vec![0.1, 0.2, 0.3]);
        m.insert_points(&[obs([0.01, 0.01, 0.01], &v, 1.0, 4.0, 7)]).unwrap();
        let rec = m.get(&VoxelKey::new(0, 0, 0)).unwrap();
        assert_eq!(rec.count, 1.0);
        assert_eq!(rec.feature.as_slice(), v.as_slice());
        assert_eq!((rec.last_seen, rec.image_id), (4.0, 7));
        assert_eq!(m.live_images(), BTreeSet::from([7]));
    }

    #[test]
    fn second_insert_averages() {
        let mut m = VoxelMemory::new(cfg(2)).unwrap();
        let v1 = Feature::new(vec![1.0, 0.0]);
        let v2 = Feature::new(vec![0.0, 1.0]);
        m.insert_points(&[obs([0.01; 3], &v1, 1.0, 1.0, 1)]).unwrap();
        m.insert_points(&[obs([0.02; 3], &v2, 1.0, 2.0, 2)]).unwrap();
        let rec = m.get(&VoxelKey::new(0, 0, 0)).unwrap();
        assert_eq!(rec.count, 2.0);
        assert!((rec.feature[0] - 0.5).abs() < 1e-15 && (rec.feature[1] - 0.5).abs() < 1e-15);
        assert_eq!(rec.image_id, 2);
        assert_eq!(m.live_images(), BTreeSet::from([2]));
        assert!((rec.centroid - Point3::new(0.015, 0.015, 0.015)).norm() < 1e-12);
    }

    #[test]
    fn identical_features_stay_bit_exact() {
        let mut m = VoxelMemory::new(cfg(4)).unwrap();
        let v = Feature::new(vec![0.3, -0.7, 0.11, 0.5]);
        for t in 0..5 {
            let batch: Vec<_> = (0..7)
                .map(|i| {
                    obs(
                        [0.001 * i as f64, 0.0, 0.0],
                        &v.clone().as_slice().to_vec().into(),
                        1.0,
                        t as f64,
                        t,
                    )
                })
                .collect();
            m.insert_points(&batch).unwrap();
        }
        let rec = m.get(&VoxelKey::new(0, 0, 0)).unwrap();
        assert_eq!(rec.feature.as_slice(), v.as_slice());
    }

    #[test]
    fn rejects_bad_batches_atomically() {
        let mut m = VoxelMemory::new(cfg(2)).unwrap();
        let good = Feature::new(vec![1.0, 0.0]);
        let bad = Feature::new(vec![1.0]);
        let err = m
            .insert_points(&[obs([0.0; 3], &good, 1.0, 0.0, 1), obs([0.0; 3], &bad, 1.0, 0.0, 1)])
            .unwrap_err();
        assert_eq!(err, MemoryError::FeatureDim { expected: 2, got: 1 });
        assert!(m.is_empty());
        assert!(matches!(
            m.insert_points(&[obs([0.0; 3], &good, 0.0, 0.0, 1)]),
            Err(MemoryError::InvalidWeight(_))
        ));
    }

    #[test]
    fn removal_examples() {
        let f = Feature::new(vec![1.0]);
        let mut m = VoxelMemory::new(cfg(1)).unwrap();
        // on the principal ray, 1 m ahead, surface at 1.5 m
        m.insert_points(&[obs([0.0, 0.0, 1.0], &f, 1.0, 0.0, 1)]).unwrap();
        let removed = m.remove_stale(&frame(1.5, Pose::identity())).unwrap();
        assert_eq!(removed.len(), 1);
        assert!(m.is_empty() && m.live_images().is_empty());

        // beyond the 2 m cap
        let mut m = VoxelMemory::new(cfg(1)).unwrap();
        m.insert_points(&[obs([0.0, 0.0, 2.5], &f, 1.0, 0.0, 1)]).unwrap();
        assert!(m.remove_stale(&frame(3.0, Pose::identity())).unwrap().is_empty());

        // out of view: projects to h = -5
        let mut m = VoxelMemory::new(cfg(1)).unwrap();
        m.insert_points(&[obs([0.0, -0.55, 1.0], &f, 1.0, 0.0, 1)]).unwrap();
        let c = m.iter().next().unwrap().1.centroid;
        let p = project(&c, &frame(1.5, Pose::identity()).intrinsics, &Pose::identity());
        assert!((p.h + 5.0).abs() < 1e-9);
        assert!(m.remove_stale(&frame(1.5, Pose::identity())).unwrap().is_empty());

        // invalid depth never removes
        let mut m = VoxelMemory::new(cfg(1)).unwrap();
        m.insert_points(&[obs([0.0, 0.0, 1.0], &f, 1.0, 0.0, 1)]).unwrap();
        assert!(m.remove_stale(&frame(0.0, Pose::identity())).unwrap().is_empty());
    }

    #[test]
    fn all_invalid_frame_leaves_memory_unchanged() {
        let f = Feature::new(vec![1.0]);
        let mut m = VoxelMemory::new(cfg(1)).unwrap();
        m.insert_points(&[obs([0.0, 0.0, 1.0], &f, 1.0, 0.0, 1)]).unwrap();
        let before: Vec<_> = m.iter().map(|(k, r)| (*k, r.clone())).collect();
        let report = m.ingest_frame(&frame(0.0, Pose::identity()), &[]).unwrap();
        assert_eq!(report, IngestReport::default());
        let after: Vec<_> = m.iter().map(|(k, r)| (*k, r.clone())).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn feature_count_must_match_pixels() {
        let mut m = VoxelMemory::new(cfg(1)).unwrap();
        let err = m.ingest_frame(&frame(1.0, Pose::identity()), &[]).unwrap_err();
        assert_eq!(
            err,
            MemoryError::FeatureCount {
                expected: 10_000,
                got: 0
            }
        );
    }

    #[test]
    fn snapshot_is_isolated_from_later_writes() {
        let f = Feature::new(vec![1.0]);
        let mut m = VoxelMemory::new(cfg(1)).unwrap();
        m.insert_points(&[obs([0.0, 0.0, 1.0], &f, 1.0, 0.0, 1)]).unwrap();
        let snap = m.snapshot();
        m.insert_points(&[obs([1.0, 0.0, 1.0], &f, 1.0, 0.0, 2)]).unwrap();
        assert_eq!(snap.len(), 1);
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn empty_memory_has_no_live_images() {
        let m = VoxelMemory::new(cfg(1)).unwrap();
        assert!(m.prune_dead_images().is_empty());
        m.check_invariants().unwrap();
    }
}
