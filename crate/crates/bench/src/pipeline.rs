use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;
use voxmem_core::query::{hybrid_query, mllm_query, vlm_query, MllmClient};
use voxmem_core::semantics::PatchEmbedder;
use voxmem_core::{
    FrameStore, MemoryConfig, PosedFrame, QueryConfig, QueryContext, QueryError, QueryResult, StubConfig, StubDetector,
    StubLabelEmbedder, VoxelMemory,
};

use crate::eval::LocalizationPipeline;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Vlm,
    Mllm,
    Hybrid,
}

impl Method {
    pub fn needs_client(self) -> bool {
        !matches!(self, Method::Vlm)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Vlm => "vlm",
            Method::Mllm => "mllm",
            Method::Hybrid => "hybrid",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vlm" => Ok(Method::Vlm),
            "mllm" => Ok(Method::Mllm),
            "hybrid" => Ok(Method::Hybrid),
            other => Err(format!("unknown method {other:?} (expected vlm, mllm or hybrid)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub memory: MemoryConfig,
    pub query: QueryConfig,
    pub stub: StubConfig,
    /// Free-space removal on ingest; off means the memory only adds points.
    pub removal: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            memory: MemoryConfig::default(),
            query: QueryConfig::default(),
            stub: StubConfig::default(),
            removal: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("method {0} needs an mLLM client (mock fixture or endpoint)")]
    MissingClient(Method),
    #[error("stub feature dimension {stub} differs from memory feature dimension {memory}")]
    DimensionMismatch { stub: usize, memory: usize },
    #[error(transparent)]
    Memory(#[from] voxmem_core::MemoryError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Frames(#[from] voxmem_core::FrameStoreError),
}

/// Voxel memory + frame store driven by the stub embedder and detector.
pub struct MemoryPipeline {
    method: Method,
    options: PipelineOptions,
    memory: VoxelMemory,
    frames: FrameStore,
    embedder: StubLabelEmbedder,
    detector: StubDetector,
    client: Option<Box<dyn MllmClient>>,
}

impl MemoryPipeline {
    pub fn new(
        method: Method,
        options: PipelineOptions,
        client: Option<Box<dyn MllmClient>>,
    ) -> Result<Self, PipelineError> {
        if method.needs_client() && client.is_none() {
            return Err(PipelineError::MissingClient(method));
        }
        if options.stub.dim != options.memory.feature_dim {
            return Err(PipelineError::DimensionMismatch {
                stub: options.stub.dim,
                memory: options.memory.feature_dim,
            });
        }
        options.query.validate()?;
        Ok(Self {
            method,
            memory: VoxelMemory::new(options.memory)?,
            frames: FrameStore::new(),
            embedder: StubLabelEmbedder::new(options.stub.clone()),
            detector: StubDetector::new(&options.stub),
            client,
            options,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn options(&self) -> &PipelineOptions {
        &self.options
    }

    pub fn memory(&self) -> &VoxelMemory {
        &self.memory
    }

    pub fn frames(&self) -> &FrameStore {
        &self.frames
    }

    /// Resumes from a previously saved memory and its frames.
    pub fn with_state(mut self, memory: VoxelMemory, frames: FrameStore) -> Self {
        self.memory = memory;
        self.frames = frames;
        self
    }

    pub fn ingest_frame(&mut self, frame: PosedFrame) -> Result<voxmem_core::voxel::IngestReport, PipelineError> {
        let features = self
            .embedder
            .embed_frame(&frame, self.memory.config().max_depth)
            .map_err(voxmem_core::MemoryError::from)?;
        let report = self.memory.ingest_frame_with(&frame, &features, self.options.removal)?;
        self.frames.insert(Arc::new(frame))?;
        Ok(report)
    }

    pub fn query(&self, query: &str) -> Result<QueryResult, QueryError> {
        let ctx = QueryContext {
            memory: &self.memory,
            frames: &self.frames,
            text: &self.embedder,
            detector: &self.detector,
            config: &self.options.query,
        };
        match (self.method, self.client.as_deref()) {
            (Method::Vlm, _) => vlm_query(&ctx, query),
            (Method::Mllm, Some(c)) => mllm_query(&ctx, c, query),
            (Method::Hybrid, Some(c)) => hybrid_query(&ctx, c, query),
            (_, None) => unreachable!("checked in MemoryPipeline::new"),
        }
    }
}

impl LocalizationPipeline for MemoryPipeline {
    fn name(&self) -> String {
        let mut name = self.method.to_string();
        let q = &self.options.query;
        for (off, flag) in [
            (!self.options.removal, "no-removal"),
            (!q.detector_check, "no-detector-check"),
            (!q.use_threshold, "no-threshold"),
            (!q.image_filter, "no-image-filter"),
        ] {
            if off {
                name.push('+');
                name.push_str(flag);
            }
        }
        name
    }

    fn ingest(&mut self, frame: PosedFrame) -> Result<(), String> {
        self.ingest_frame(frame).map(|_| ()).map_err(|e| e.to_string())
    }

    fn answer(&mut self, query: &str) -> Result<QueryResult, String> {
        self.query(query).map_err(|e| e.to_string())
    }
}
