//! Benchmark dataset generation from a scene script.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;
use voxmem_bench::dataset::{write_frame, write_manifest, DATASET_FORMAT_VERSION};
use voxmem_bench::{DatasetError, Manifest, NegativeReason, QueryAnnotation, QueryKind};
use voxmem_core::{project, LabelTable, PosedFrame, DEFAULT_MAX_DEPTH};

use crate::render::render_frame;
use crate::scene::{ground_truth_location, Aabb, Scene, SceneError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    /// Pixels farther than this do not count as observations.
    pub max_depth: f64,
    /// Pixels of a label a frame needs for the object to count as observed.
    pub min_pixels: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_depth: DEFAULT_MAX_DEPTH,
            min_pixels: 20,
        }
    }
}

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("output directory {0} is not empty")]
    OutputNotEmpty(String),
    #[error("line {line}: query {q:?} in round {round}: {message}")]
    Query {
        line: usize,
        q: String,
        round: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenerateSummary {
    pub frames: usize,
    pub queries: usize,
    pub rounds: usize,
    pub positives_per_round: Vec<usize>,
    pub not_yet_observed: usize,
    pub removed: usize,
}

impl fmt::Display for GenerateSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "frames={} queries={} rounds={}",
            self.frames, self.queries, self.rounds
        )
    }
}

/// Rendered frames plus annotations, before anything touches the disk.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub table: Arc<LabelTable>,
    pub frames: Vec<(PosedFrame, usize)>,
    pub queries: Vec<QueryAnnotation>,
}

/// Renders the whole trajectory in time order. Depths are rounded to
/// millimeters so in-memory frames equal what a dataset reader decodes.
pub fn render_trajectory(scene: &Scene) -> (Arc<LabelTable>, Vec<(PosedFrame, usize)>) {
    let table = Arc::new(scene.label_table());
    let frames = scene
        .trajectory
        .frames()
        .into_par_iter()
        .enumerate()
        .map(|(i, tf)| {
            let mut frame = render_frame(scene, tf.round, i as u64 + 1, tf.timestamp, tf.pose, table.clone());
            for d in frame.depth.values.iter_mut() {
                *d = ((*d as f64 * 1000.0).round() / 1000.0) as f32;
            }
            (frame, tf.round)
        })
        .collect();
    (table, frames)
}

/// Builds the annotated stream for `scene` without writing it.
pub fn annotate(scene: &Scene, options: &GenerateOptions) -> Result<GeneratedData, GenerateError> {
    let (table, frames) = render_trajectory(scene);
    let seen: Vec<HashMap<u16, usize>> = frames
        .iter()
        .map(|(f, _)| {
            let mut counts = HashMap::new();
            for (d, l) in f.depth.values.iter().zip(&f.appearance.labels) {
                if *d > 0.0 && (*d as f64) <= options.max_depth {
                    *counts.entry(*l).or_insert(0) += 1;
                }
            }
            counts
        })
        .collect();

    let mut round_start = vec![0usize; scene.rounds + 1];
    for (_, r) in &frames {
        round_start[r + 1] += 1;
    }
    for r in 0..scene.rounds {
        round_start[r + 1] += round_start[r];
    }

    let mut queries = Vec::new();
    for plan in &scene.queries {
        let label_idx = table.index_of(&plan.label).filter(|&i| i != 0);
        for &round in &plan.rounds {
            let n = round_start[round + 1] - round_start[round];
            for &frac in &plan.at {
                let err = |message: String| GenerateError::Query {
                    line: plan.line,
                    q: plan.q.clone(),
                    round,
                    message,
                };
                if n == 0 {
                    return Err(err("the round has no frames".into()));
                }
                let k = ((frac * n as f64).ceil() as usize).clamp(1, n) - 1;
                let cutoff = round_start[round] + k + 1;
                let t = frames[cutoff - 1].0.timestamp + scene.trajectory.frame_interval / 2.0;

                let observed: Vec<usize> = match label_idx {
                    Some(li) => (0..cutoff)
                        .filter(|&i| seen[i].get(&li).copied().unwrap_or(0) >= options.min_pixels)
                        .collect(),
                    None => vec![],
                };
                let current = ground_truth_location(scene, round, &plan.label)?;
                let kind = match (observed.last(), current) {
                    (None, _) => QueryKind::Negative {
                        reason: NegativeReason::NotYetObserved,
                    },
                    (Some(&last), current) => {
                        let box_at = |i: usize| placement(scene, &plan.label, frames[i].1);
                        if let Some((center, radius)) = current {
                            if box_at(last).map(|b| b.center()) != Some(center) {
                                return Err(err(format!(
                                    "{:?} moved and has not been seen at its new placement before t={t}",
                                    plan.label
                                )));
                            }
                            check_vacated(scene, &frames, &observed, cutoff, &plan.label, options, &err)?;
                            QueryKind::Positive {
                                location: [center.x, center.y, center.z],
                                epsilon: radius,
                            }
                        } else {
                            check_vacated(scene, &frames, &observed, cutoff, &plan.label, options, &err)?;
                            QueryKind::Negative {
                                reason: NegativeReason::Removed,
                            }
                        }
                    }
                };
                queries.push(QueryAnnotation {
                    q: plan.q.clone(),
                    t,
                    round,
                    kind,
                });
            }
        }
    }
    queries.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(GeneratedData { table, frames, queries })
}

fn placement(scene: &Scene, label: &str, round: usize) -> Option<Aabb> {
    scene
        .objects
        .iter()
        .filter(|o| o.label == label)
        .find_map(|o| o.placements.get(round).copied().flatten())
}

/// Every earlier placement the object was seen at (other than its current
/// one) must have been seen empty afterwards, or the memory could still
/// legitimately hold the old location.
fn check_vacated(
    scene: &Scene,
    frames: &[(PosedFrame, usize)],
    observed: &[usize],
    cutoff: usize,
    label: &str,
    options: &GenerateOptions,
    err: &dyn Fn(String) -> GenerateError,
) -> Result<(), GenerateError> {
    let current = frames.get(cutoff - 1).and_then(|(_, r)| placement(scene, label, *r));
    let mut last_seen_at: Vec<(Aabb, usize)> = Vec::new();
    for &i in observed {
        let Some(b) = placement(scene, label, frames[i].1) else {
            continue;
        };
        match last_seen_at.iter_mut().find(|(x, _)| *x == b) {
            Some(entry) => entry.1 = i,
            None => last_seen_at.push((b, i)),
        }
    }
    for (b, last) in last_seen_at {
        if Some(b) == current {
            continue;
        }
        let vacated = (last + 1..cutoff).any(|i| {
            placement(scene, label, frames[i].1) != Some(b) && sees_through(&frames[i].0, &b, options.max_depth)
        });
        if !vacated {
            let c = b.center();
            return Err(err(format!(
                "old placement of {label:?} at ({:.2}, {:.2}, {:.2}) is not seen empty before the query",
                c.x, c.y, c.z
            )));
        }
    }
    Ok(())
}

/// The box center projects into the image, within range, in front of the
/// observed surface.
fn sees_through(frame: &PosedFrame, b: &Aabb, max_depth: f64) -> bool {
    let p = project(&b.center(), &frame.intrinsics, &frame.pose);
    if !(p.d > 0.0 && p.d < max_depth) {
        return false;
    }
    let Some((h, w)) = frame.intrinsics.pixel_at(p.h, p.w) else {
        return false;
    };
    frame.depth.get(h, w) as f64 > p.d
}

/// Renders `scene`, annotates its query plan and writes the dataset to
/// `out_dir`, which must be empty or absent.
pub fn generate_dataset(
    scene: &Scene,
    options: &GenerateOptions,
    out_dir: &Path,
) -> Result<GenerateSummary, GenerateError> {
    if out_dir.exists() {
        let mut entries = std::fs::read_dir(out_dir).map_err(|source| DatasetError::Io {
            path: out_dir.to_path_buf(),
            source,
        })?;
        if entries.next().is_some() {
            return Err(GenerateError::OutputNotEmpty(out_dir.display().to_string()));
        }
    }
    let data = annotate(scene, options)?;
    let records = data
        .frames
        .iter()
        .map(|(f, r)| write_frame(out_dir, f, *r))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = Manifest {
        version: DATASET_FORMAT_VERSION,
        name: scene.name.clone(),
        rounds: scene.rounds,
        labels: data.table.names().to_vec(),
        frames: records,
        queries: data.queries,
    };
    write_manifest(out_dir, &manifest)?;
    Ok(summarize(&manifest))
}

pub fn summarize(manifest: &Manifest) -> GenerateSummary {
    let mut s = GenerateSummary {
        frames: manifest.frames.len(),
        queries: manifest.queries.len(),
        rounds: manifest.rounds,
        positives_per_round: vec![0; manifest.rounds],
        ..Default::default()
    };
    for q in &manifest.queries {
        match q.kind {
            QueryKind::Positive { .. } => {
                if let Some(c) = s.positives_per_round.get_mut(q.round) {
                    *c += 1;
                }
            }
            QueryKind::Negative {
                reason: NegativeReason::NotYetObserved,
            } => s.not_yet_observed += 1,
            QueryKind::Negative {
                reason: NegativeReason::Removed,
            } => s.removed += 1,
        }
    }
    s
}
