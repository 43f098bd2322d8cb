//! Run configuration: every tunable, with defaults < config file < flags.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use voxmem_bench::PipelineOptions;
use voxmem_core::navigation::{ExplorationParams, PlannerConfig};
use voxmem_core::query::HttpMllmConfig;
use voxmem_core::{MemoryConfig, QueryConfig, StubConfig};
use voxmem_sim::{ExploreOptions, GenerateOptions};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub memory: MemorySection,
    pub query: QuerySection,
    pub stub: StubSection,
    pub ingest: IngestSection,
    pub simulate: SimulateSection,
    pub explore: ExploreSection,
    pub mllm: MllmSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySection {
    pub voxel_size: f64,
    pub feature_dim: usize,
    pub epsilon: f64,
    pub max_depth: f64,
}

impl Default for MemorySection {
    fn default() -> Self {
        let m = MemoryConfig::default();
        Self {
            voxel_size: m.voxel_size,
            feature_dim: m.feature_dim,
            epsilon: m.epsilon,
            max_depth: m.max_depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuerySection {
    pub similarity_threshold: f64,
    pub k: usize,
    pub max_context_images: usize,
    pub dbscan_eps: f64,
    pub dbscan_min_points: usize,
    pub use_threshold: bool,
    pub detector_check: bool,
    pub image_filter: bool,
    pub mllm_retries: u32,
    pub retry_backoff_ms: u64,
}

impl Default for QuerySection {
    fn default() -> Self {
        let q = QueryConfig::default();
        Self {
            similarity_threshold: q.similarity_threshold,
            k: q.k,
            max_context_images: q.max_context_images,
            dbscan_eps: q.dbscan_eps,
            dbscan_min_points: q.dbscan_min_points,
            use_threshold: q.use_threshold,
            detector_check: q.detector_check,
            image_filter: q.image_filter,
            mllm_retries: q.mllm_retries,
            retry_backoff_ms: q.retry_backoff_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StubSection {
    pub dim: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub synonyms: BTreeMap<String, String>,
    pub text_aliases: BTreeMap<String, String>,
    pub detector_failures: BTreeSet<String>,
}

impl Default for StubSection {
    fn default() -> Self {
        let s = StubConfig::default();
        Self {
            dim: s.dim,
            seed: s.seed,
            noise_sigma: s.noise_sigma,
            synonyms: s.synonyms,
            text_aliases: s.text_aliases,
            detector_failures: s.detector_failures,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub removal: bool,
}

impl Default for IngestSection {
    fn default() -> Self {
        Self {
            removal: PipelineOptions::default().removal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub min_pixels: usize,
    pub max_depth: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let g = GenerateOptions::default();
        Self {
            min_pixels: g.min_pixels,
            max_depth: g.max_depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExploreSection {
    pub step_budget: usize,
    pub z_threshold: f64,
    pub resolution: f64,
    pub max_waypoints: usize,
    pub max_pursuit: usize,
    pub beta_t: f64,
    pub mu_t: f64,
    pub beta_s: f64,
    pub mu_s: f64,
    pub lambda: f64,
    pub explorable_penalty: f64,
}

impl Default for ExploreSection {
    fn default() -> Self {
        let e = ExploreOptions::default();
        Self {
            step_budget: e.step_budget,
            z_threshold: e.z_threshold,
            resolution: e.resolution,
            max_waypoints: e.max_waypoints,
            max_pursuit: e.max_pursuit,
            beta_t: e.params.beta_t,
            mu_t: e.params.mu_t,
            beta_s: e.params.beta_s,
            mu_s: e.params.mu_s,
            lambda: e.params.lambda,
            explorable_penalty: e.planner.explorable_penalty,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MllmClientKind {
    None,
    /// Answers from the label channel of the attached images.
    Oracle,
    /// Replies from the fixture file.
    Scripted,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MllmSection {
    pub client: MllmClientKind,
    pub fixture: String,
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_ms: u64,
}

impl Default for MllmSection {
    fn default() -> Self {
        Self {
            client: MllmClientKind::None,
            fixture: String::new(),
            endpoint: String::new(),
            model: String::new(),
            api_key_env: "VOXMEM_MLLM_API_KEY".into(),
            timeout_ms: 30_000,
        }
    }
}

/// One line per key for `--help`.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("explore.beta_s", "similarity value slope"),
    ("explore.beta_t", "staleness value slope (per second)"),
    ("explore.explorable_penalty", "A* cost multiplier for unexplored cells"),
    ("explore.lambda", "weight of the staleness map in the mixed value"),
    ("explore.max_pursuit", "steps spent on one target before dropping it"),
    ("explore.max_waypoints", "waypoints executed before replanning"),
    ("explore.mu_s", "similarity value midpoint"),
    ("explore.mu_t", "staleness value midpoint (seconds)"),
    ("explore.resolution", "2D map cell size (m)"),
    ("explore.step_budget", "steps allowed over all rounds"),
    ("explore.z_threshold", "height above which voxels are obstacles (m)"),
    ("ingest.removal", "remove voxels seen as free space"),
    ("memory.epsilon", "depth tolerance for removal (m)"),
    ("memory.feature_dim", "feature vector length"),
    ("memory.max_depth", "depth cap for insertion and removal (m)"),
    ("memory.voxel_size", "voxel edge length (m)"),
    ("mllm.api_key_env", "environment variable holding the endpoint key"),
    ("mllm.client", "none, oracle, scripted or http"),
    ("mllm.endpoint", "URL for the http client"),
    ("mllm.fixture", "reply table for the scripted client"),
    ("mllm.model", "model name sent to the endpoint"),
    ("mllm.timeout_ms", "request timeout"),
    ("query.dbscan_eps", "DBSCAN neighborhood radius (m)"),
    ("query.dbscan_min_points", "DBSCAN core point threshold"),
    ("query.detector_check", "confirm answers with the detector"),
    ("query.image_filter", "only send frames still referenced by the map"),
    ("query.k", "candidate images for hybrid queries"),
    ("query.max_context_images", "image cap for mLLM prompts"),
    ("query.mllm_retries", "retries after a transport failure"),
    ("query.retry_backoff_ms", "initial retry delay"),
    ("query.similarity_threshold", "abstain below this similarity"),
    ("query.use_threshold", "apply the similarity threshold"),
    ("simulate.max_depth", "depth cap when deciding what was observed (m)"),
    ("simulate.min_pixels", "pixels needed to count an object as observed"),
    ("stub.detector_failures", "queries the stub detector always misses"),
    ("stub.dim", "stub feature length"),
    ("stub.noise_sigma", "Gaussian noise on stub patch features"),
    ("stub.seed", "seed of the stub label vectors"),
    ("stub.synonyms", "query -> label for embedder and detector"),
    ("stub.text_aliases", "query -> label for the text embedder only"),
];

impl RunConfig {
    /// Defaults, then `file`, then `--set key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.memory_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.query_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.stub.dim != self.memory.feature_dim {
            return Err(CliError::Config(format!(
                "stub.dim {} must equal memory.feature_dim {}",
                self.stub.dim, self.memory.feature_dim
            )));
        }
        let e = &self.explore;
        if !(e.resolution > 0.0) || e.max_waypoints == 0 || e.max_pursuit == 0 || !(0.0..=1.0).contains(&e.lambda) {
            return Err(CliError::Config(
                "explore needs resolution > 0, max_waypoints and max_pursuit >= 1, lambda in [0, 1]".into(),
            ));
        }
        if !(e.explorable_penalty >= 1.0) {
            return Err(CliError::Config("explore.explorable_penalty must be at least 1".into()));
        }
        Ok(())
    }

    /// Effective configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn memory_config(&self) -> MemoryConfig {
        MemoryConfig {
            voxel_size: self.memory.voxel_size,
            feature_dim: self.memory.feature_dim,
            epsilon: self.memory.epsilon,
            max_depth: self.memory.max_depth,
        }
    }

    pub fn query_config(&self) -> QueryConfig {
        let q = &self.query;
        QueryConfig {
            similarity_threshold: q.similarity_threshold,
            k: q.k,
            max_context_images: q.max_context_images,
            dbscan_eps: q.dbscan_eps,
            dbscan_min_points: q.dbscan_min_points,
            use_threshold: q.use_threshold,
            detector_check: q.detector_check,
            image_filter: q.image_filter,
            mllm_retries: q.mllm_retries,
            retry_backoff_ms: q.retry_backoff_ms,
        }
    }

    pub fn stub_config(&self) -> StubConfig {
        StubConfig {
            dim: self.stub.dim,
            seed: self.stub.seed,
            noise_sigma: self.stub.noise_sigma,
            synonyms: self.stub.synonyms.clone(),
            text_aliases: self.stub.text_aliases.clone(),
            detector_failures: self.stub.detector_failures.clone(),
        }
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            memory: self.memory_config(),
            query: self.query_config(),
            stub: self.stub_config(),
            removal: self.ingest.removal,
        }
    }

    pub fn generate_options(&self) -> GenerateOptions {
        GenerateOptions {
            max_depth: self.simulate.max_depth,
            min_pixels: self.simulate.min_pixels,
        }
    }

    pub fn explore_options(&self) -> ExploreOptions {
        let e = &self.explore;
        ExploreOptions {
            step_budget: e.step_budget,
            z_threshold: e.z_threshold,
            resolution: e.resolution,
            max_waypoints: e.max_waypoints,
            max_pursuit: e.max_pursuit,
            params: ExplorationParams {
                beta_t: e.beta_t,
                mu_t: e.mu_t,
                beta_s: e.beta_s,
                mu_s: e.mu_s,
                lambda: e.lambda,
            },
            planner: PlannerConfig {
                explorable_penalty: e.explorable_penalty,
            },
            memory: self.memory_config(),
            stub: self.stub_config(),
            ..ExploreOptions::default()
        }
    }

    pub fn http_config(&self) -> HttpMllmConfig {
        HttpMllmConfig {
            endpoint: self.mllm.endpoint.clone(),
            model: self.mllm.model.clone(),
            api_key: std::env::var(&self.mllm.api_key_env).ok().filter(|k| !k.is_empty()),
            timeout: Duration::from_millis(self.mllm.timeout_ms),
        }
    }
}

/// Flattened `section.key = value` lines of a config, sorted by key.
pub fn flatten(cfg: &RunConfig) -> Vec<(String, String)> {
    let table = toml::Table::try_from(cfg).expect("config always serializes");
    let mut out = Vec::new();
    for (section, v) in &table {
        if let toml::Value::Table(t) = v {
            for (k, v) in t {
                out.push((format!("{section}.{k}"), v.to_string()));
            }
        }
    }
    // empty maps serialize as nothing at all; list them explicitly
    for (key, _) in KEY_DOCS {
        if !out.iter().any(|(k, _)| k == key) {
            out.push((key.to_string(), "{}".into()));
        }
    }
    out.sort();
    out
}

/// The config-key section of `--help`.
pub fn help_text() -> String {
    let defaults: BTreeMap<String, String> = flatten(&RunConfig::default()).into_iter().collect();
    let mut s = String::from("Config keys (set in --config FILE or with --set key=value):\n");
    for (key, doc) in KEY_DOCS {
        let default = defaults.get(*key).map(String::as_str).unwrap_or("");
        s.push_str(&format!("  {key:<28} {doc} [default: {default}]\n"));
    }
    s
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {spec:?}")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    let [section, field] = parts.as_slice() else {
        return Err(CliError::Config(format!(
            "--set key {key:?} must look like section.key"
        )));
    };
    if !KEY_DOCS.iter().any(|(k, _)| *k == key) {
        return Err(CliError::Config(format!("unknown config key {key:?}")));
    }
    let value = parse_value(raw.trim());
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(t) = entry else {
        return Err(CliError::Config(format!("config section {section:?} is not a table")));
    };
    t.insert(field.to_string(), value);
    Ok(())
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
