//! Dynamic 3D voxel memory for robots: geometry, feature aggregation with
//! free-space removal, retrieval pipelines and a 2D planning layer.

pub mod dbscan;
pub mod feature;
pub mod frames;
pub mod geometry;
pub mod navigation;
pub mod persist;
pub mod query;
pub mod semantics;
pub mod voxel;

pub use feature::Feature;
pub use frames::{FrameStore, FrameStoreError};
pub use geometry::{
    backproject, project, unproject_pixel, CameraIntrinsics, DepthImage, GeometryError, LabelImage, LabelTable, Pose,
    PosedFrame, DEFAULT_MAX_DEPTH,
};
pub use query::{QueryConfig, QueryContext, QueryError, QueryResult};
pub use semantics::{Detector, PatchEmbedder, StubConfig, StubDetector, StubLabelEmbedder, TextEmbedder};
pub use voxel::{MemoryConfig, MemoryError, MemorySnapshot, VoxelKey, VoxelMemory, VoxelRecord};
