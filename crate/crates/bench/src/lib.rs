//! Offline benchmark: dataset format, evaluation harness and the standard
//! memory-backed localization pipeline.

pub mod dataset;
pub mod eval;
pub mod pipeline;

pub use dataset::{load_dataset, Dataset, DatasetError, Manifest, NegativeReason, QueryAnnotation, QueryKind};
pub use eval::{evaluate, EvalError, EvalReport, LocalizationPipeline, QueryOutcome, Tally};
pub use pipeline::{MemoryPipeline, Method, PipelineError, PipelineOptions};
