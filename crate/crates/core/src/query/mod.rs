//! Object localization against a memory snapshot.
//!
//! Every method picks one candidate image and then confirms the object in it
//! with a [`Detector`]; the location is the back-projected median pixel of the
//! detection mask. Without confirmation the query abstains with
//! [`QueryResult::NotFound`].

mod http;
mod mllm;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::Point3;
use thiserror::Error;

pub use http::{HttpMllmClient, HttpMllmConfig};
pub use mllm::{
    build_mllm_prompt, parse_answer, LabelOracleMllm, MllmAnswer, MllmClient, MllmError, MllmPrompt, MllmRequest,
    ScriptedMllm, PROMPT_TEMPLATE, PROMPT_TEMPLATE_VERSION,
};

use crate::dbscan::dbscan;
use crate::feature::Feature;
use crate::frames::FrameStore;
use crate::geometry::{unproject_pixel, PosedFrame};
use crate::semantics::{Detector, TextEmbedder};
use crate::voxel::{VoxelKey, VoxelMemory};

#[derive(Debug, Error, PartialEq)]
pub enum QueryError {
    #[error("memory is empty")]
    EmptyMemory,
    #[error("frame {0} is referenced by the memory but missing from the frame store")]
    MissingFrame(u64),
    #[error("malformed mLLM answer: {0}")]
    MalformedAnswer(String),
    #[error("mLLM transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("query feature has dimension {got}, memory expects {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("invalid query configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryResult {
    Found {
        position: Point3<f64>,
        image_id: u64,
        score: f64,
    },
    NotFound,
}

impl QueryResult {
    pub fn is_found(&self) -> bool {
        matches!(self, QueryResult::Found { .. })
    }

    pub fn position(&self) -> Option<Point3<f64>> {
        match self {
            QueryResult::Found { position, .. } => Some(*position),
            QueryResult::NotFound => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryConfig {
    pub similarity_threshold: f64,
    /// Candidate images for the hybrid method.
    pub k: usize,
    pub max_context_images: usize,
    pub dbscan_eps: f64,
    pub dbscan_min_points: usize,
    /// Abstain when the best voxel scores below `similarity_threshold`.
    pub use_threshold: bool,
    /// Confirm candidates with the detector before answering.
    pub detector_check: bool,
    /// Restrict mLLM context to frames still referenced by the memory.
    pub image_filter: bool,
    /// Extra attempts after an mLLM transport failure.
    pub mllm_retries: u32,
    pub retry_backoff_ms: u64,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            similarity_threshold: 0.6,
            k: 3,
            max_context_images: 60,
            dbscan_eps: 0.15,
            dbscan_min_points: 5,
            use_threshold: true,
            detector_check: true,
            image_filter: true,
            mllm_retries: 2,
            retry_backoff_ms: 250,
        }
    }
}

impl QueryConfig {
    pub fn validate(&self) -> Result<(), QueryError> {
        if self.k == 0 {
            return Err(QueryError::Config("k must be at least 1".into()));
        }
        if self.max_context_images < self.k {
            return Err(QueryError::Config(format!(
                "max_context_images ({}) must be >= k ({})",
                self.max_context_images, self.k
            )));
        }
        if !(self.dbscan_eps > 0.0) || self.dbscan_min_points == 0 {
            return Err(QueryError::Config(
                "dbscan_eps and dbscan_min_points must be positive".into(),
            ));
        }
        if !self.similarity_threshold.is_finite() {
            return Err(QueryError::Config("similarity_threshold must be finite".into()));
        }
        Ok(())
    }

    fn effective_threshold(&self) -> f64 {
        if self.use_threshold {
            self.similarity_threshold
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Everything a query reads: a memory snapshot, its frames, and the models.
#[derive(Clone, Copy)]
pub struct QueryContext<'a> {
    pub memory: &'a VoxelMemory,
    pub frames: &'a FrameStore,
    pub text: &'a dyn TextEmbedder,
    pub detector: &'a dyn Detector,
    pub config: &'a QueryConfig,
}

/// Higher score first, then smaller key.
fn better(a: (f64, VoxelKey), b: (f64, VoxelKey)) -> bool {
    match a.0.total_cmp(&b.0) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.1 < b.1,
    }
}

fn check_dim(memory: &VoxelMemory, q: &Feature) -> Result<(), QueryError> {
    if q.dim() != memory.feature_dim() {
        return Err(QueryError::FeatureDim {
            expected: memory.feature_dim(),
            got: q.dim(),
        });
    }
    Ok(())
}

/// The stored voxel whose feature has the largest dot product with
/// `query_feature`. Ties go to the lexicographically smallest key.
pub fn best_voxel(memory: &VoxelMemory, query_feature: &Feature) -> Result<(VoxelKey, f64), QueryError> {
    check_dim(memory, query_feature)?;
    let mut best: Option<(f64, VoxelKey)> = None;
    for (key, rec) in memory.iter() {
        let s = rec.feature.dot(query_feature);
        if best.is_none_or(|b| better((s, *key), b)) {
            best = Some((s, *key));
        }
    }
    best.map(|(s, k)| (k, s)).ok_or(QueryError::EmptyMemory)
}

/// A candidate image with the score of the voxel that nominated it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageCandidate {
    pub image_id: u64,
    pub score: f64,
    pub voxel: VoxelKey,
}

/// Clusters above-threshold voxels with DBSCAN and nominates, per cluster,
/// the image of its best voxel. Clusters are ranked by that best score;
/// DBSCAN noise points count as singleton clusters. Image ids are
/// deduplicated, best first, and at most `k` are returned.
pub fn top_k_candidates(
    memory: &VoxelMemory,
    query_feature: &Feature,
    k: usize,
    config: &QueryConfig,
) -> Result<Vec<ImageCandidate>, QueryError> {
    check_dim(memory, query_feature)?;
    let threshold = config.effective_threshold();
    let scored: Vec<(VoxelKey, f64, Point3<f64>, u64)> = memory
        .iter()
        .filter_map(|(key, rec)| {
            let s = rec.feature.dot(query_feature);
            (s >= threshold).then_some((*key, s, rec.centroid, rec.image_id))
        })
        .collect();
    if scored.is_empty() || k == 0 {
        return Ok(Vec::new());
    }
    let centroids: Vec<_> = scored.iter().map(|v| v.2).collect();
    let labels = dbscan(&centroids, config.dbscan_eps, config.dbscan_min_points);

    // cluster id -> index of its best voxel; noise gets its own slot
    let mut best_of: BTreeMap<(bool, usize), usize> = BTreeMap::new();
    for (idx, label) in labels.iter().enumerate() {
        let slot = match label {
            Some(c) => (false, *c),
            None => (true, idx),
        };
        best_of
            .entry(slot)
            .and_modify(|cur| {
                if better((scored[idx].1, scored[idx].0), (scored[*cur].1, scored[*cur].0)) {
                    *cur = idx;
                }
            })
            .or_insert(idx);
    }
    let mut winners: Vec<usize> = best_of.into_values().collect();
    winners.sort_by(|&a, &b| {
        if better((scored[a].1, scored[a].0), (scored[b].1, scored[b].0)) {
            Ordering::Less
        } else {
            Ordering::Greater
        }
    });
    let mut out: Vec<ImageCandidate> = Vec::new();
    for idx in winners {
        let (voxel, score, _, image_id) = scored[idx];
        if out.iter().any(|c| c.image_id == image_id) {
            continue;
        }
        out.push(ImageCandidate { image_id, score, voxel });
        if out.len() == k {
            break;
        }
    }
    Ok(out)
}

/// Image ids of [`top_k_candidates`], best first.
pub fn top_k_images(
    memory: &VoxelMemory,
    query_feature: &Feature,
    k: usize,
    config: &QueryConfig,
) -> Result<Vec<u64>, QueryError> {
    Ok(top_k_candidates(memory, query_feature, k, config)?
        .into_iter()
        .map(|c| c.image_id)
        .collect())
}

/// Component-wise median of the mask coordinates, snapped to the nearest
/// mask pixel (ties: smallest `(h, w)`).
pub fn median_mask_pixel(mask: &[(usize, usize)]) -> Option<(usize, usize)> {
    if mask.is_empty() {
        return None;
    }
    let mut hs: Vec<usize> = mask.iter().map(|p| p.0).collect();
    let mut ws: Vec<usize> = mask.iter().map(|p| p.1).collect();
    hs.sort_unstable();
    ws.sort_unstable();
    let mid = (hs.len() - 1) / 2;
    let target = (hs[mid], ws[mid]);
    nearest_by(mask, target, |_| true)
}

fn nearest_by(
    pixels: &[(usize, usize)],
    target: (usize, usize),
    keep: impl Fn(&(usize, usize)) -> bool,
) -> Option<(usize, usize)> {
    pixels
        .iter()
        .filter(|p| keep(p))
        .min_by_key(|&&(h, w)| {
            let dh = h as i64 - target.0 as i64;
            let dw = w as i64 - target.1 as i64;
            (dh * dh + dw * dw, h, w)
        })
        .copied()
}

/// 3D location of a detection mask: the median mask pixel, or the nearest
/// mask pixel with valid depth when the median's depth is invalid.
pub fn locate_mask(frame: &PosedFrame, mask: &[(usize, usize)]) -> Option<Point3<f64>> {
    let median = median_mask_pixel(mask)?;
    let valid = |&(h, w): &(usize, usize)| frame.depth.get(h, w) > 0.0;
    let pixel = if valid(&median) {
        median
    } else {
        nearest_by(mask, median, valid)?
    };
    let d = frame.depth.get(pixel.0, pixel.1) as f64;
    Some(unproject_pixel(
        &frame.intrinsics,
        &frame.pose,
        pixel.0 as f64,
        pixel.1 as f64,
        d,
    ))
}

/// Best voxel among those whose latest image is `image_id`.
fn best_voxel_in_image(
    memory: &VoxelMemory,
    query_feature: &Feature,
    image_id: u64,
) -> Option<(VoxelKey, f64, Point3<f64>)> {
    let mut best: Option<(f64, VoxelKey, Point3<f64>)> = None;
    for (key, rec) in memory.iter().filter(|(_, r)| r.image_id == image_id) {
        let s = rec.feature.dot(query_feature);
        if best.is_none_or(|b| better((s, *key), (b.0, b.1))) {
            best = Some((s, *key, rec.centroid));
        }
    }
    best.map(|(s, k, c)| (k, s, c))
}

/// Confirms `query` in the chosen image and localizes it.
fn confirm_in_image(
    ctx: &QueryContext<'_>,
    query: &str,
    query_feature: &Feature,
    image_id: u64,
) -> Result<QueryResult, QueryError> {
    let frame = ctx.frames.get(image_id).ok_or(QueryError::MissingFrame(image_id))?;
    let nominee = best_voxel_in_image(ctx.memory, query_feature, image_id);
    if !ctx.config.detector_check {
        return Ok(match nominee {
            Some((_, score, centroid)) => QueryResult::Found {
                position: centroid,
                image_id,
                score,
            },
            None => QueryResult::NotFound,
        });
    }
    let Some(detection) = ctx.detector.detect(&frame.appearance, query) else {
        return Ok(QueryResult::NotFound);
    };
    let Some(position) = locate_mask(frame, &detection.mask) else {
        return Ok(QueryResult::NotFound);
    };
    let score = nominee.map(|n| n.1).unwrap_or(detection.confidence);
    Ok(QueryResult::Found {
        position,
        image_id,
        score,
    })
}

/// Feature-argmax query with detector confirmation.
pub fn vlm_query(ctx: &QueryContext<'_>, query: &str) -> Result<QueryResult, QueryError> {
    ctx.config.validate()?;
    let q = ctx.text.embed_text(query);
    let (key, score) = match best_voxel(ctx.memory, &q) {
        Ok(best) => best,
        Err(QueryError::EmptyMemory) => return Ok(QueryResult::NotFound),
        Err(e) => return Err(e),
    };
    if score < ctx.config.effective_threshold() {
        return Ok(QueryResult::NotFound);
    }
    let image_id = ctx.memory.get(&key).map(|r| r.image_id).expect("best voxel is stored");
    confirm_in_image(ctx, query, &q, image_id)
}

/// Frames eligible for mLLM context, oldest first.
pub fn context_frames(ctx: &QueryContext<'_>) -> Vec<Arc<PosedFrame>> {
    ctx.frames
        .iter()
        .filter(|f| !ctx.config.image_filter || ctx.memory.is_live(f.frame_id))
        .cloned()
        .collect()
}

fn ask_with_retries(
    client: &dyn MllmClient,
    request: &MllmRequest<'_>,
    config: &QueryConfig,
) -> Result<MllmAnswer, QueryError> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        match client.answer(request) {
            Ok(answer) => return Ok(answer),
            Err(MllmError::Malformed(raw)) => return Err(QueryError::MalformedAnswer(raw)),
            Err(MllmError::Transport(message)) => {
                if attempt > config.mllm_retries {
                    return Err(QueryError::Transport {
                        attempts: attempt,
                        message,
                    });
                }
                let backoff = config.retry_backoff_ms.saturating_mul(1 << (attempt - 1).min(10));
                if backoff > 0 {
                    std::thread::sleep(std::time::Duration::from_millis(backoff));
                }
            }
        }
    }
}

fn answer_over_images(
    ctx: &QueryContext<'_>,
    client: &dyn MllmClient,
    query: &str,
    images: Vec<Arc<PosedFrame>>,
) -> Result<QueryResult, QueryError> {
    if images.is_empty() {
        return Ok(QueryResult::NotFound);
    }
    let prompt = build_mllm_prompt(&images, query, ctx.config);
    let request = MllmRequest {
        prompt: &prompt.text,
        query,
        images: &prompt.images,
    };
    match ask_with_retries(client, &request, ctx.config)? {
        MllmAnswer::NoneAnswer => Ok(QueryResult::NotFound),
        MllmAnswer::Index(i) => {
            if i == 0 || i > prompt.images.len() {
                return Err(QueryError::MalformedAnswer(format!(
                    "index {i} outside 1..={}",
                    prompt.images.len()
                )));
            }
            let q = ctx.text.embed_text(query);
            confirm_in_image(ctx, query, &q, prompt.images[i - 1].frame_id)
        }
    }
}

/// Asks the mLLM for the latest image showing the object, then confirms it.
pub fn mllm_query(ctx: &QueryContext<'_>, client: &dyn MllmClient, query: &str) -> Result<QueryResult, QueryError> {
    ctx.config.validate()?;
    answer_over_images(ctx, client, query, context_frames(ctx))
}

/// Top-k retrieval from the memory followed by mLLM selection among those
/// images (presented in chronological order).
pub fn hybrid_query(ctx: &QueryContext<'_>, client: &dyn MllmClient, query: &str) -> Result<QueryResult, QueryError> {
    ctx.config.validate()?;
    let q = ctx.text.embed_text(query);
    let mut ids = top_k_images(ctx.memory, &q, ctx.config.k, ctx.config)?;
    ids.sort_unstable();
    let images = ids
        .into_iter()
        .map(|id| ctx.frames.get(id).cloned().ok_or(QueryError::MissingFrame(id)))
        .collect::<Result<Vec<_>, _>>()?;
    answer_over_images(ctx, client, query, images)
}
