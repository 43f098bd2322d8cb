//! Binary map container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        6 bytes  "VOXMAP"
//! version      u8       = 1
//! flags        u8       bit 0: frame section present
//! voxel_size   f64
//! epsilon      f64
//! max_depth    f64
//! feature_dim  u32
//! cell_count   u64
//! cells        cell_count x { i i32, j i32, k i32, count f64, last_seen f64,
//!                             image_id u64, centroid 3 x f64, feature dim x f64 }
//!              (ascending key order)
//! live_count   u64
//! live_ids     live_count x u64 (ascending)
//! [frame section, when flag bit 0 is set]
//!   label_count  u32
//!   labels       label_count x { len u32, utf-8 bytes }   (index 0 is "")
//!   frame_count  u64
//!   frames       frame_count x { frame_id u64, timestamp f64,
//!                                fx fy cx cy f64, height u32, width u32,
//!                                rotation 9 x f64 (row-major), translation 3 x f64,
//!                                depth height*width x f32, labels height*width x u16 }
//! checksum     8 bytes: first 8 bytes of SHA-256 over everything above
//! ```

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{Matrix3, Point3, Vector3};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::feature::Feature;
use crate::frames::{FrameStore, FrameStoreError};
use crate::geometry::{CameraIntrinsics, DepthImage, GeometryError, LabelImage, LabelTable, Pose, PosedFrame};
use crate::voxel::{MemoryConfig, MemoryError, VoxelKey, VoxelMemory, VoxelRecord};

pub const MAGIC: &[u8; 6] = b"VOXMAP";
pub const FORMAT_VERSION: u8 = 1;
const FLAG_FRAMES: u8 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("not a map file (bad magic)")]
    BadMagic,
    #[error("unsupported map format version {0} (expected {FORMAT_VERSION})")]
    Version(u8),
    #[error("map file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("map file checksum mismatch")]
    Checksum,
    #[error("{0} trailing bytes after map payload")]
    Trailing(usize),
    #[error("corrupt map: {0}")]
    Corrupt(String),
    #[error("frames use differing label tables; cannot persist")]
    MixedLabelTables,
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Frames(#[from] FrameStoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], PersistError> {
        let end = self.pos.checked_add(n).ok_or(PersistError::Truncated(what))?;
        if end > self.buf.len() {
            return Err(PersistError::Truncated(what));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, what: &'static str) -> Result<u8, PersistError> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &'static str) -> Result<u16, PersistError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &'static str) -> Result<u32, PersistError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn i32(&mut self, what: &'static str) -> Result<i32, PersistError> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64, PersistError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f32(&mut self, what: &'static str) -> Result<f32, PersistError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &'static str) -> Result<f64, PersistError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    /// Guards element counts against the remaining buffer before allocating.
    fn count(&mut self, n: u64, elem_size: usize, what: &'static str) -> Result<usize, PersistError> {
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(elem_size as u64) > remaining {
            return Err(PersistError::Truncated(what));
        }
        Ok(n as usize)
    }
}

/// A memory plus, optionally, the frames its cells point at.
#[derive(Debug, Clone)]
pub struct MapBundle {
    pub memory: VoxelMemory,
    pub frames: Option<FrameStore>,
}

pub fn encode_map(memory: &VoxelMemory, frames: Option<&FrameStore>) -> Result<Vec<u8>, PersistError> {
    let cfg = memory.config();
    let mut w = Writer(Vec::with_capacity(64 + memory.len() * (64 + 8 * cfg.feature_dim)));
    w.0.extend_from_slice(MAGIC);
    w.u8(FORMAT_VERSION);
    w.u8(if frames.is_some() { FLAG_FRAMES } else { 0 });
    w.f64(cfg.voxel_size);
    w.f64(cfg.epsilon);
    w.f64(cfg.max_depth);
    w.u32(cfg.feature_dim as u32);
    w.u64(memory.len() as u64);
    for (key, rec) in memory.iter() {
        w.i32(key.i);
        w.i32(key.j);
        w.i32(key.k);
        w.f64(rec.count);
        w.f64(rec.last_seen);
        w.u64(rec.image_id);
        for c in rec.centroid.iter() {
            w.f64(*c);
        }
        for v in rec.feature.iter() {
            w.f64(*v);
        }
    }
    let live = memory.live_images();
    w.u64(live.len() as u64);
    for id in &live {
        w.u64(*id);
    }
    if let Some(store) = frames {
        encode_frames(&mut w, store)?;
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest[..8]);
    Ok(w.0)
}

fn encode_frames(w: &mut Writer, store: &FrameStore) -> Result<(), PersistError> {
    let table = match store.iter().next() {
        Some(f) => f.appearance.table.clone(),
        None => Arc::new(LabelTable::default()),
    };
    if store.iter().any(|f| *f.appearance.table != *table) {
        return Err(PersistError::MixedLabelTables);
    }
    w.u32(table.names().len() as u32);
    for name in table.names() {
        w.u32(name.len() as u32);
        w.0.extend_from_slice(name.as_bytes());
    }
    w.u64(store.len() as u64);
    for f in store.iter() {
        w.u64(f.frame_id);
        w.f64(f.timestamp);
        let i = &f.intrinsics;
        for v in [i.fx, i.fy, i.cx, i.cy] {
            w.f64(v);
        }
        w.u32(i.height as u32);
        w.u32(i.width as u32);
        let r = f.pose.rotation();
        for row in 0..3 {
            for col in 0..3 {
                w.f64(r[(row, col)]);
            }
        }
        for v in f.pose.translation().iter() {
            w.f64(*v);
        }
        for d in &f.depth.values {
            w.f32(*d);
        }
        for l in &f.appearance.labels {
            w.u16(*l);
        }
    }
    Ok(())
}

pub fn decode_map(bytes: &[u8]) -> Result<MapBundle, PersistError> {
    if bytes.len() < MAGIC.len() + 2 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(PersistError::BadMagic);
    }
    if bytes[MAGIC.len()] != FORMAT_VERSION {
        return Err(PersistError::Version(bytes[MAGIC.len()]));
    }
    if bytes.len() < MAGIC.len() + 2 + 8 {
        return Err(PersistError::Truncated("checksum"));
    }
    let (payload, checksum) = bytes.split_at(bytes.len() - 8);
    if Sha256::digest(payload)[..8] != *checksum {
        return Err(PersistError::Checksum);
    }
    let mut r = Reader {
        buf: payload,
        pos: MAGIC.len() + 1,
    };
    let flags = r.u8("flags")?;
    if flags & !FLAG_FRAMES != 0 {
        return Err(PersistError::Corrupt(format!("unknown flags {flags:#x}")));
    }
    let config = MemoryConfig {
        voxel_size: r.f64("voxel_size")?,
        epsilon: r.f64("epsilon")?,
        max_depth: r.f64("max_depth")?,
        feature_dim: r.u32("feature_dim")? as usize,
    };
    config.validate()?;
    let dim = config.feature_dim;
    let n_cells = r.u64("cell_count")?;
    let n_cells = r.count(n_cells, 12 + 8 * 6 + 8 * dim, "cells")?;
    let mut records = Vec::with_capacity(n_cells);
    let mut prev: Option<VoxelKey> = None;
    for _ in 0..n_cells {
        let key = VoxelKey::new(r.i32("cell key")?, r.i32("cell key")?, r.i32("cell key")?);
        if prev.is_some_and(|p| p >= key) {
            return Err(PersistError::Corrupt("cells not in ascending key order".into()));
        }
        prev = Some(key);
        let count = r.f64("count")?;
        let last_seen = r.f64("last_seen")?;
        let image_id = r.u64("image_id")?;
        let centroid = Point3::new(r.f64("centroid")?, r.f64("centroid")?, r.f64("centroid")?);
        let mut feature = Vec::with_capacity(dim);
        for _ in 0..dim {
            feature.push(r.f64("feature")?);
        }
        records.push((
            key,
            VoxelRecord {
                count,
                feature: Feature::new(feature),
                last_seen,
                image_id,
                centroid,
            },
        ));
    }
    let memory = VoxelMemory::from_records(config, records).map_err(|e| PersistError::Corrupt(e.to_string()))?;
    let n_live = r.u64("live_count")?;
    let n_live = r.count(n_live, 8, "live ids")?;
    let mut live = BTreeSet::new();
    for _ in 0..n_live {
        live.insert(r.u64("live id")?);
    }
    if live != memory.live_images() {
        return Err(PersistError::Corrupt("live image index disagrees with cells".into()));
    }
    let frames = if flags & FLAG_FRAMES != 0 {
        Some(decode_frames(&mut r)?)
    } else {
        None
    };
    if r.pos != payload.len() {
        return Err(PersistError::Trailing(payload.len() - r.pos));
    }
    Ok(MapBundle { memory, frames })
}

fn decode_frames(r: &mut Reader<'_>) -> Result<FrameStore, PersistError> {
    let n_labels = r.u32("label_count")? as u64;
    let n_labels = r.count(n_labels, 4, "labels")?;
    let mut names = Vec::with_capacity(n_labels);
    for _ in 0..n_labels {
        let len = r.u32("label length")? as usize;
        let bytes = r.take(len, "label")?;
        names.push(String::from_utf8(bytes.to_vec()).map_err(|_| PersistError::Corrupt("label is not utf-8".into()))?);
    }
    let table = Arc::new(LabelTable::from_names(names));
    let n_frames = r.u64("frame_count")?;
    let n_frames = r.count(n_frames, 8 * 18 + 8, "frames")?;
    let mut store = FrameStore::new();
    for _ in 0..n_frames {
        let frame_id = r.u64("frame_id")?;
        let timestamp = r.f64("timestamp")?;
        let (fx, fy, cx, cy) = (r.f64("fx")?, r.f64("fy")?, r.f64("cx")?, r.f64("cy")?);
        let height = r.u32("height")? as usize;
        let width = r.u32("width")? as usize;
        let intrinsics = CameraIntrinsics::new(fx, fy, cx, cy, height, width)?;
        let mut rot = Matrix3::zeros();
        for row in 0..3 {
            for col in 0..3 {
                rot[(row, col)] = r.f64("rotation")?;
            }
        }
        let t = Vector3::new(r.f64("translation")?, r.f64("translation")?, r.f64("translation")?);
        let pose = Pose::new(rot, t)?;
        let px = r.count((height * width) as u64, 6, "frame pixels")?;
        let mut depth = Vec::with_capacity(px);
        for _ in 0..px {
            depth.push(r.f32("depth")?);
        }
        let mut labels = Vec::with_capacity(px);
        for _ in 0..px {
            let l = r.u16("labels")?;
            if l as usize >= table.names().len() {
                return Err(PersistError::Corrupt(format!(
                    "frame {frame_id}: label index {l} out of range"
                )));
            }
            labels.push(l);
        }
        let frame = PosedFrame::new(
            frame_id,
            timestamp,
            DepthImage::new(height, width, depth)?,
            LabelImage::new(height, width, labels, table.clone())?,
            intrinsics,
            pose,
        )?;
        store.insert(Arc::new(frame))?;
    }
    Ok(store)
}

pub fn save_map(path: &std::path::Path, memory: &VoxelMemory, frames: Option<&FrameStore>) -> Result<(), PersistError> {
    std::fs::write(path, encode_map(memory, frames)?)?;
    Ok(())
}

pub fn load_map(path: &std::path::Path) -> Result<MapBundle, PersistError> {
    decode_map(&std::fs::read(path)?)
}
