//! `voxmem` command-line tool.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;
use voxmem_bench::{evaluate, load_dataset, EvalError, MemoryPipeline, Method, PipelineError};
use voxmem_core::navigation::{export_obstacle_map, export_value_map};
use voxmem_core::persist::{load_map, save_map};
use voxmem_core::query::{HttpMllmClient, LabelOracleMllm, MllmClient, ScriptedMllm};
use voxmem_core::{FrameStore, QueryError, QueryResult};
use voxmem_sim::{bundled_scene, generate_dataset, ExploreOutcome, Explorer, GenerateError, Scene, ValueKind};

use config::MllmClientKind;
pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("internal error: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Invariant(_) => EXIT_INVARIANT,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::MissingClient(_) | PipelineError::DimensionMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            PipelineError::Query(QueryError::Config(_)) => CliError::Config(e.to_string()),
            _ => CliError::Invariant(e.to_string()),
        }
    }
}

impl From<QueryError> for CliError {
    fn from(e: QueryError) -> Self {
        match e {
            QueryError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "voxmem",
    version,
    about = "Dynamic voxel memory: simulate, ingest, query, benchmark, explore",
    after_long_help = config::help_text()
)]
pub struct Cli {
    /// TOML file with config overrides.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct MllmArgs {
    /// Scripted mLLM reply table (TOML: `default = "None"` plus a `[replies]` table).
    #[arg(long, value_name = "FILE")]
    pub mllm_fixture: Option<PathBuf>,
    /// Answer mLLM prompts from the images' label channel.
    #[arg(long, conflicts_with = "mllm_fixture")]
    pub mllm_oracle: bool,
}

#[derive(Debug, Args, Default)]
pub struct AblationArgs {
    /// Only add points; never remove voxels seen as free space.
    #[arg(long)]
    pub no_removal: bool,
    /// Skip the detector cross-check before answering.
    #[arg(long)]
    pub no_detector_check: bool,
    /// Do not abstain on low similarity.
    #[arg(long)]
    pub no_threshold: bool,
    /// Send frames regardless of whether the map still references them.
    #[arg(long)]
    pub no_image_filter: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a scene script into a benchmark dataset.
    Simulate {
        /// Scene script path, or `bundled:NAME`.
        scene: String,
        out: PathBuf,
        /// Override the scene seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stream a dataset's frames into a map file.
    Ingest {
        dataset: PathBuf,
        map: PathBuf,
        /// Only ingest frames with timestamp below this.
        #[arg(long)]
        until: Option<f64>,
        #[arg(long)]
        no_removal: bool,
    },
    /// Localize an object in a saved map.
    Query {
        map: PathBuf,
        text: String,
        #[arg(long, default_value = "vlm")]
        method: Method,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        mllm: MllmArgs,
    },
    /// Evaluate a method on a dataset.
    Bench {
        dataset: PathBuf,
        #[arg(long, default_value = "vlm")]
        method: Method,
        /// Directory for the text and TSV reports.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        ablation: AblationArgs,
        #[command(flatten)]
        mllm: MllmArgs,
    },
    /// Explore a scene with the closed-loop frontier planner.
    Explore {
        /// Scene script path, or `bundled:NAME`.
        scene: String,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long, default_value = "time")]
        value: ValueKind,
        /// Query text for the similarity and mixed value maps.
        #[arg(long)]
        query: Option<String>,
        #[arg(long)]
        budget: Option<usize>,
        /// Exit nonzero when the step budget runs out.
        #[arg(long)]
        strict: bool,
        /// Write the per-step trace as TSV.
        #[arg(long, value_name = "FILE")]
        trace: Option<PathBuf>,
        /// Write the final obstacle and value maps as PGM images.
        #[arg(long, value_name = "DIR")]
        export_maps: Option<PathBuf>,
    },
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    match execute(cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, CliError> {
    let mut overrides = cli.set.clone();
    // dedicated flags beat both the file and --set
    match &cli.command {
        Command::Ingest { no_removal: true, .. } => overrides.push("ingest.removal=false".into()),
        Command::Query { k: Some(k), .. } => overrides.push(format!("query.k={k}")),
        Command::Bench { k, ablation, .. } => {
            if let Some(k) = k {
                overrides.push(format!("query.k={k}"));
            }
            for (on, key) in [
                (ablation.no_removal, "ingest.removal"),
                (ablation.no_detector_check, "query.detector_check"),
                (ablation.no_threshold, "query.use_threshold"),
                (ablation.no_image_filter, "query.image_filter"),
            ] {
                if on {
                    overrides.push(format!("{key}=false"));
                }
            }
        }
        Command::Explore { budget: Some(b), .. } => overrides.push(format!("explore.step_budget={b}")),
        _ => {}
    }
    if let Command::Query { mllm, .. } | Command::Bench { mllm, .. } = &cli.command {
        if let Some(p) = &mllm.mllm_fixture {
            overrides.push("mllm.client=\"scripted\"".into());
            overrides.push(format!("mllm.fixture={}", toml::Value::String(p.display().to_string())));
        } else if mllm.mllm_oracle {
            overrides.push("mllm.client=\"oracle\"".into());
        }
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let _ = writeln!(err, "# effective config\n{}", cfg.to_toml());

    match cli.command {
        Command::Simulate { scene, out: dir, seed } => {
            let mut scene = read_scene(&scene)?;
            if let Some(s) = seed {
                scene.seed = s;
            }
            let summary = generate_dataset(&scene, &cfg.generate_options(), &dir).map_err(|e| match e {
                GenerateError::OutputNotEmpty(_) => CliError::Config(e.to_string()),
                _ => CliError::Data(e.to_string()),
            })?;
            let _ = writeln!(out, "{summary}");
            let _ = writeln!(
                out,
                "positives_per_round={:?} not_yet_observed={} removed={}",
                summary.positives_per_round, summary.not_yet_observed, summary.removed
            );
            Ok(EXIT_OK)
        }
        Command::Ingest {
            dataset, map, until, ..
        } => {
            let ds = load_dataset(&dataset).map_err(|e| CliError::Data(e.to_string()))?;
            let mut pipeline = MemoryPipeline::new(Method::Vlm, cfg.pipeline_options(), None)?;
            let mut n = 0;
            for (i, rec) in ds.manifest().frames.iter().enumerate() {
                if until.is_some_and(|t| rec.timestamp >= t) {
                    break;
                }
                let frame = ds.load_frame(i).map_err(|e| CliError::Data(e.to_string()))?;
                pipeline.ingest_frame(frame)?;
                n += 1;
            }
            let mut frames = pipeline.frames().clone();
            frames.retain_live(&pipeline.memory().live_images());
            save_map(&map, pipeline.memory(), Some(&frames)).map_err(|e| CliError::Data(e.to_string()))?;
            let _ = writeln!(
                out,
                "frames={n} voxels={} live_images={}",
                pipeline.memory().len(),
                frames.len()
            );
            Ok(EXIT_OK)
        }
        Command::Query { map, text, method, .. } => {
            let bundle = load_map(&map).map_err(|e| CliError::Data(format!("{}: {e}", map.display())))?;
            let mut options = cfg.pipeline_options();
            options.memory = *bundle.memory.config();
            let client = make_client(&cfg, method)?;
            let pipeline = MemoryPipeline::new(method, options, client)?
                .with_state(bundle.memory, bundle.frames.unwrap_or_else(FrameStore::new));
            match pipeline.query(&text)? {
                QueryResult::Found {
                    position,
                    image_id,
                    score,
                } => {
                    let _ = writeln!(
                        out,
                        "found x={:.3} y={:.3} z={:.3} image={image_id} score={score:.4}",
                        position.x, position.y, position.z
                    );
                }
                QueryResult::NotFound => {
                    let _ = writeln!(out, "not found");
                }
            }
            Ok(EXIT_OK)
        }
        Command::Bench {
            dataset,
            method,
            out: dir,
            ..
        } => {
            let ds = load_dataset(&dataset).map_err(|e| CliError::Data(e.to_string()))?;
            let client = make_client(&cfg, method)?;
            let mut pipeline = MemoryPipeline::new(method, cfg.pipeline_options(), client)?;
            let report = evaluate(&ds, &mut pipeline).map_err(|e| match e {
                EvalError::Dataset(d) => CliError::Data(d.to_string()),
                EvalError::Ingest { .. } => CliError::Invariant(e.to_string()),
            })?;
            let _ = write!(out, "{}", report.to_text());
            if let Some(dir) = dir {
                let stem = report.method.replace('+', "_");
                report
                    .write(&dir, &stem)
                    .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
            }
            Ok(EXIT_OK)
        }
        Command::Explore {
            scene,
            rounds,
            value,
            query,
            strict,
            trace,
            export_maps,
            ..
        } => {
            let scene = read_scene(&scene)?;
            let mut options = cfg.explore_options();
            options.rounds = rounds;
            options.value = value;
            options.query = query;
            let mut explorer = Explorer::new(&scene, options).map_err(|e| CliError::Config(e.to_string()))?;
            let report = explorer.run().map_err(|e| CliError::Invariant(e.to_string()))?;
            for s in &report.steps {
                let _ = writeln!(
                    out,
                    "step {} round {} pos=({:.2}, {:.2}) target=({:.2}, {:.2}) value={:.4}{} prefix={} coverage={:.1}%",
                    s.step,
                    s.round,
                    s.position[0],
                    s.position[1],
                    s.target_xy[0],
                    s.target_xy[1],
                    s.value,
                    if s.is_stale { " stale" } else { "" },
                    s.prefix_len,
                    100.0 * s.coverage
                );
            }
            let _ = write!(out, "{}", report.to_text());
            if let Some(p) = trace {
                std::fs::write(&p, report.to_tsv()).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            }
            if let Some(dir) = export_maps {
                let io = |e: std::io::Error| CliError::Data(format!("{}: {e}", dir.display()));
                std::fs::create_dir_all(&dir).map_err(io)?;
                export_obstacle_map(&explorer.obstacle_map(), &dir.join("obstacles.pgm")).map_err(io)?;
                let values = explorer.value_map().map_err(|e| CliError::Invariant(e.to_string()))?;
                export_value_map(&values, &dir.join("values.pgm")).map_err(io)?;
            }
            if strict && report.outcome == ExploreOutcome::BudgetExhausted {
                let _ = writeln!(err, "error: step budget exhausted before exploration finished");
                return Ok(EXIT_DATA);
            }
            Ok(EXIT_OK)
        }
    }
}

/// Loads `bundled:NAME` or a scene script file.
pub fn read_scene(spec: &str) -> Result<Scene, CliError> {
    if let Some(name) = spec.strip_prefix("bundled:") {
        return bundled_scene(name).ok_or_else(|| {
            let names: Vec<_> = voxmem_sim::BUNDLED_SCENES.iter().map(|(n, _)| *n).collect();
            CliError::Config(format!("no bundled scene {name:?} (have {})", names.join(", ")))
        });
    }
    let text = std::fs::read_to_string(spec).map_err(|e| CliError::Data(format!("{spec}: {e}")))?;
    Scene::parse(&text).map_err(|e| CliError::Data(format!("{spec}: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Fixture {
    #[serde(default = "none_reply")]
    default: String,
    #[serde(default)]
    replies: BTreeMap<String, String>,
}

fn none_reply() -> String {
    "None".into()
}

/// Scripted mLLM from a fixture file.
pub fn load_fixture(path: &Path) -> Result<ScriptedMllm, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let f: Fixture = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(ScriptedMllm::new(f.replies, f.default))
}

fn make_client(cfg: &RunConfig, method: Method) -> Result<Option<Box<dyn MllmClient>>, CliError> {
    if !method.needs_client() {
        return Ok(None);
    }
    Ok(Some(match cfg.mllm.client {
        MllmClientKind::None => {
            return Err(CliError::Config(format!(
                "method {method} needs an mLLM client: pass --mllm-fixture, --mllm-oracle or set mllm.client"
            )))
        }
        MllmClientKind::Oracle => Box::new(LabelOracleMllm {
            synonyms: cfg.stub.synonyms.clone(),
        }),
        MllmClientKind::Scripted => {
            if cfg.mllm.fixture.is_empty() {
                return Err(CliError::Config("mllm.client = \"scripted\" needs mllm.fixture".into()));
            }
            Box::new(load_fixture(Path::new(&cfg.mllm.fixture))?)
        }
        MllmClientKind::Http => {
            if cfg.mllm.endpoint.is_empty() || cfg.mllm.model.is_empty() {
                return Err(CliError::Config(
                    "mllm.client = \"http\" needs mllm.endpoint and mllm.model".into(),
                ));
            }
            Box::new(HttpMllmClient::new(cfg.http_config()))
        }
    }))
}
