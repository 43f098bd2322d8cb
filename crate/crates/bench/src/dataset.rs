//! On-disk dataset format.
//!
//! A dataset is a directory holding `manifest.json` plus one 16-bit grayscale
//! PNG pair per frame:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/frames/000001_depth.png    depth in millimeters, 0 = invalid
//! <dir>/frames/000001_labels.png   indices into the manifest label table
//! ```
//!
//! The manifest lists the label table (index 0 is the empty "no label"
//! entry), every frame with its pose (world-from-camera, row-major rotation)
//! and intrinsics, and the query annotations. Frames appear in timestamp order.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use voxmem_core::{CameraIntrinsics, DepthImage, LabelImage, LabelTable, Pose, PosedFrame};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: manifest is not valid: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}: format version {found} is not supported (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("frame {frame_id}: missing file {path}")]
    MissingFile { frame_id: u64, path: PathBuf },
    #[error("frame {frame_id}: {path}: {message}")]
    CorruptImage {
        frame_id: u64,
        path: PathBuf,
        message: String,
    },
    #[error("frame {frame_id}: {message}")]
    InvalidFrame { frame_id: u64, message: String },
    #[error("query {index} ({query:?}): {message}")]
    InvalidQuery {
        index: usize,
        query: String,
        message: String,
    },
    #[error("frame {frame_id}: depth {depth} m cannot be stored as 16-bit millimeters")]
    DepthRange { frame_id: u64, depth: f32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub name: String,
    pub rounds: usize,
    pub labels: Vec<String>,
    pub frames: Vec<FrameRecord>,
    pub queries: Vec<QueryAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub timestamp: f64,
    pub round: usize,
    pub depth: String,
    pub labels: String,
    pub intrinsics: IntrinsicsRecord,
    pub pose: PoseRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl From<&CameraIntrinsics> for IntrinsicsRecord {
    fn from(i: &CameraIntrinsics) -> Self {
        Self {
            fx: i.fx,
            fy: i.fy,
            cx: i.cx,
            cy: i.cy,
            width: i.width,
            height: i.height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    /// Row-major world-from-camera rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        let r = p.rotation();
        let t = p.translation();
        Self {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [t.x, t.y, t.z],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryAnnotation {
    pub q: String,
    pub t: f64,
    pub round: usize,
    pub kind: QueryKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum QueryKind {
    Positive { location: [f64; 3], epsilon: f64 },
    Negative { reason: NegativeReason },
}

impl QueryKind {
    pub fn is_positive(&self) -> bool {
        matches!(self, QueryKind::Positive { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeReason {
    /// The object exists but has not been observed before the query time.
    NotYetObserved,
    /// The object was observed and later removed from the scene.
    Removed,
}

/// A loaded manifest; frames are read from disk on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    table: Arc<LabelTable>,
}

/// Opens a dataset directory, validates its manifest and checks that every
/// referenced image file exists. Image contents are read lazily.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    // read the version first so old or future formats get a clear error
    #[derive(Deserialize)]
    struct Header {
        version: u32,
    }
    let header: Header = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if header.version != DATASET_FORMAT_VERSION {
        return Err(DatasetError::Version {
            path,
            found: header.version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let ds = Dataset::from_manifest(dir, manifest)?;
    for f in &ds.manifest.frames {
        for rel in [&f.depth, &f.labels] {
            let p = ds.root.join(rel);
            if !p.is_file() {
                return Err(DatasetError::MissingFile {
                    frame_id: f.frame_id,
                    path: p,
                });
            }
        }
    }
    Ok(ds)
}

impl Dataset {
    /// Wraps an in-memory manifest rooted at `dir` after validating it.
    pub fn from_manifest(dir: &Path, manifest: Manifest) -> Result<Self, DatasetError> {
        let bad = |message: String| DatasetError::Manifest {
            path: dir.join(MANIFEST_FILE),
            message,
        };
        if manifest.labels.first().map(String::as_str) != Some("") {
            return Err(bad("label table must start with the empty label".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &manifest.labels[1..] {
            if l.is_empty() || !seen.insert(l.as_str()) {
                return Err(bad(format!("label table entry {l:?} is empty or duplicated")));
            }
        }
        if manifest.labels.len() > u16::MAX as usize + 1 {
            return Err(bad("label table exceeds 16-bit indices".into()));
        }
        let mut last: Option<(u64, f64)> = None;
        for f in &manifest.frames {
            if let Some((id, t)) = last {
                if f.frame_id <= id || f.timestamp < t {
                    return Err(DatasetError::InvalidFrame {
                        frame_id: f.frame_id,
                        message: format!("out of order after frame {id} at t={t}"),
                    });
                }
            }
            if f.round >= manifest.rounds {
                return Err(DatasetError::InvalidFrame {
                    frame_id: f.frame_id,
                    message: format!("round {} outside 0..{}", f.round, manifest.rounds),
                });
            }
            last = Some((f.frame_id, f.timestamp));
        }
        for (index, q) in manifest.queries.iter().enumerate() {
            let bad_q = |message: &str| DatasetError::InvalidQuery {
                index,
                query: q.q.clone(),
                message: message.into(),
            };
            if !q.t.is_finite() {
                return Err(bad_q("timestamp is not finite"));
            }
            if let Some(first) = manifest.frames.first() {
                if q.t < first.timestamp {
                    return Err(bad_q("timestamp precedes the first frame"));
                }
            }
            if let QueryKind::Positive { epsilon, location } = &q.kind {
                if !(*epsilon > 0.0) || !location.iter().all(|v| v.is_finite()) {
                    return Err(bad_q("positive query needs finite location and epsilon > 0"));
                }
            }
        }
        let table = Arc::new(LabelTable::from_names(manifest.labels.clone()));
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
            table,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn label_table(&self) -> &Arc<LabelTable> {
        &self.table
    }

    pub fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames.is_empty()
    }

    /// Reads and decodes the `index`-th frame of the manifest.
    pub fn load_frame(&self, index: usize) -> Result<PosedFrame, DatasetError> {
        let rec = &self.manifest.frames[index];
        let id = rec.frame_id;
        let invalid = |message: String| DatasetError::InvalidFrame { frame_id: id, message };
        let i = &rec.intrinsics;
        let intr =
            CameraIntrinsics::new(i.fx, i.fy, i.cx, i.cy, i.height, i.width).map_err(|e| invalid(e.to_string()))?;
        let r = &rec.pose.rotation;
        let pose = Pose::new(
            Matrix3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            Vector3::from(rec.pose.translation),
        )
        .map_err(|e| invalid(e.to_string()))?;

        let depth_path = self.root.join(&rec.depth);
        let (dw, dh, mm) = read_png16(id, &depth_path)?;
        let labels_path = self.root.join(&rec.labels);
        let (lw, lh, labels) = read_png16(id, &labels_path)?;
        for (path, w, h) in [(&depth_path, dw, dh), (&labels_path, lw, lh)] {
            if (w, h) != (intr.width, intr.height) {
                return Err(DatasetError::CorruptImage {
                    frame_id: id,
                    path: path.clone(),
                    message: format!("image is {w}x{h}, intrinsics say {}x{}", intr.width, intr.height),
                });
            }
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= self.table.names().len()) {
            return Err(DatasetError::CorruptImage {
                frame_id: id,
                path: labels_path,
                message: format!("label index {bad} outside the label table"),
            });
        }
        let depth = DepthImage::new(dh, dw, mm.iter().map(|&v| v as f32 / 1000.0).collect())
            .map_err(|e| invalid(e.to_string()))?;
        let appearance = LabelImage::new(lh, lw, labels, self.table.clone()).map_err(|e| invalid(e.to_string()))?;
        PosedFrame::new(id, rec.timestamp, depth, appearance, intr, pose).map_err(|e| invalid(e.to_string()))
    }

    /// Frames in manifest (timestamp) order, decoded one at a time.
    pub fn frames(&self) -> impl Iterator<Item = Result<PosedFrame, DatasetError>> + '_ {
        (0..self.len()).map(move |i| self.load_frame(i))
    }
}

/// Writes a frame's depth and label images under `<root>/frames/` and returns
/// the manifest record for it.
pub fn write_frame(root: &Path, frame: &PosedFrame, round: usize) -> Result<FrameRecord, DatasetError> {
    let dir = root.join("frames");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let depth_rel = format!("frames/{:06}_depth.png", frame.frame_id);
    let labels_rel = format!("frames/{:06}_labels.png", frame.frame_id);
    let mut mm = Vec::with_capacity(frame.depth.values.len());
    for &d in &frame.depth.values {
        let v = if d.is_finite() && d > 0.0 {
            (d as f64 * 1000.0).round()
        } else {
            0.0
        };
        if v > u16::MAX as f64 {
            return Err(DatasetError::DepthRange {
                frame_id: frame.frame_id,
                depth: d,
            });
        }
        mm.push(v as u16);
    }
    let (w, h) = (frame.intrinsics.width, frame.intrinsics.height);
    write_png16(&root.join(&depth_rel), w, h, &mm)?;
    write_png16(&root.join(&labels_rel), w, h, &frame.appearance.labels)?;
    Ok(FrameRecord {
        frame_id: frame.frame_id,
        timestamp: frame.timestamp,
        round,
        depth: depth_rel,
        labels: labels_rel,
        intrinsics: (&frame.intrinsics).into(),
        pose: (&frame.pose).into(),
    })
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<(), DatasetError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let path = root.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| DatasetError::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))
}

fn write_png16(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<(), DatasetError> {
    let mut bytes = Vec::with_capacity(values.len() * 2);
    for v in values {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    let mut out = Vec::new();
    let enc_err = |e: png::EncodingError| DatasetError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc.write_header().map_err(enc_err)?;
        writer.write_image_data(&bytes).map_err(enc_err)?;
    }
    fs::write(path, out).map_err(io_err(path))
}

fn read_png16(frame_id: u64, path: &Path) -> Result<(usize, usize, Vec<u16>), DatasetError> {
    let corrupt = |message: String| DatasetError::CorruptImage {
        frame_id,
        path: path.to_path_buf(),
        message,
    };
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DatasetError::MissingFile {
            frame_id,
            path: path.to_path_buf(),
        },
        _ => DatasetError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    let mut reader = png::Decoder::new(Cursor::new(bytes))
        .read_info()
        .map_err(|e| corrupt(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(corrupt(format!(
            "expected 16-bit grayscale, found {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| corrupt("image too large".into()))?;
    let mut buf = vec![0; size];
    reader.next_frame(&mut buf).map_err(|e| corrupt(e.to_string()))?;
    let values = buf
        .chunks_exact(2)
        .take(w * h)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((w, h, values))
}
