use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use super::QueryConfig;
use crate::geometry::PosedFrame;

/// Bumped whenever [`PROMPT_TEMPLATE`] changes.
pub const PROMPT_TEMPLATE_VERSION: u32 = 1;

/// `{n}` is the number of attached images, `{query}` the object description.
pub const PROMPT_TEMPLATE: &str = "\
You are shown {n} images taken by a robot moving through a room, in the order they were captured. \
Image 1 is the oldest and image {n} is the most recent.\n\
Object: \"{query}\"\n\
Reply with the index (an integer from 1 to {n}) of the most recent image in which this object is visible. \
If the object is not visible in any image, reply with the single word None. \
Reply with nothing else.";

#[derive(Debug, Clone, PartialEq)]
pub struct MllmPrompt {
    pub text: String,
    /// Attached images, oldest first; the prompt's indices are 1-based into this list.
    pub images: Vec<Arc<PosedFrame>>,
}

/// What a client receives. `query` is the raw object text, available to
/// scripted test doubles; real adapters only need `prompt` and `images`.
#[derive(Debug, Clone, Copy)]
pub struct MllmRequest<'a> {
    pub prompt: &'a str,
    pub query: &'a str,
    pub images: &'a [Arc<PosedFrame>],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MllmAnswer {
    /// 1-based image index.
    Index(usize),
    NoneAnswer,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MllmError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed reply {0:?}")]
    Malformed(String),
}

pub trait MllmClient: Send + Sync {
    fn answer(&self, request: &MllmRequest<'_>) -> Result<MllmAnswer, MllmError>;
}

/// Keeps the newest `max_context_images` of `frames` (given oldest first) and
/// renders the prompt for them.
pub fn build_mllm_prompt(frames: &[Arc<PosedFrame>], query: &str, config: &QueryConfig) -> MllmPrompt {
    let skip = frames.len().saturating_sub(config.max_context_images);
    let images: Vec<_> = frames[skip..].to_vec();
    let text = PROMPT_TEMPLATE
        .replace("{n}", &images.len().to_string())
        .replace("{query}", query);
    MllmPrompt { text, images }
}

/// Accepts a bare integer or `None`, with surrounding whitespace only.
pub fn parse_answer(raw: &str) -> Result<MllmAnswer, MllmError> {
    let t = raw.trim();
    if t == "None" {
        return Ok(MllmAnswer::NoneAnswer);
    }
    if !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit()) {
        if let Ok(i) = t.parse::<usize>() {
            return Ok(MllmAnswer::Index(i));
        }
    }
    Err(MllmError::Malformed(raw.to_string()))
}

/// Replies from a fixed table keyed by query text.
#[derive(Debug, Clone, Default)]
pub struct ScriptedMllm {
    pub replies: BTreeMap<String, String>,
    pub default_reply: String,
}

impl ScriptedMllm {
    pub fn new(replies: BTreeMap<String, String>, default_reply: impl Into<String>) -> Self {
        Self {
            replies,
            default_reply: default_reply.into(),
        }
    }
}

impl MllmClient for ScriptedMllm {
    fn answer(&self, request: &MllmRequest<'_>) -> Result<MllmAnswer, MllmError> {
        let raw = self.replies.get(request.query.trim()).unwrap_or(&self.default_reply);
        parse_answer(raw)
    }
}

/// Answers by reading the label channel: the newest attached image containing
/// the queried label (after synonym lookup), else `None`.
#[derive(Debug, Clone, Default)]
pub struct LabelOracleMllm {
    pub synonyms: BTreeMap<String, String>,
}

impl MllmClient for LabelOracleMllm {
    fn answer(&self, request: &MllmRequest<'_>) -> Result<MllmAnswer, MllmError> {
        let q = request.query.trim();
        let label = self.synonyms.get(q).map(String::as_str).unwrap_or(q);
        let hit = request.images.iter().rposition(|f| {
            f.appearance
                .table
                .index_of(label)
                .is_some_and(|idx| f.appearance.labels.contains(&idx))
        });
        Ok(match hit {
            Some(i) => MllmAnswer::Index(i + 1),
            None => MllmAnswer::NoneAnswer,
        })
    }
}
