use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::geometry::PosedFrame;

#[derive(Debug, Error, PartialEq)]
pub enum FrameStoreError {
    #[error("frame id {got} is not greater than the last stored id {last}")]
    NonMonotoneId { last: u64, got: u64 },
    #[error("frame {id} timestamp {got} precedes the previous timestamp {last}")]
    NonMonotoneTime { id: u64, last: f64, got: f64 },
}

/// Frames kept for query-time image lookups, keyed by frame id.
#[derive(Debug, Clone, Default)]
pub struct FrameStore {
    frames: BTreeMap<u64, Arc<PosedFrame>>,
    last: Option<(u64, f64)>,
}

impl FrameStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a frame. Ids must strictly increase and timestamps must not
    /// decrease across the stream, including frames already pruned.
    pub fn insert(&mut self, frame: Arc<PosedFrame>) -> Result<(), FrameStoreError> {
        if let Some((last_id, last_t)) = self.last {
            if frame.frame_id <= last_id {
                return Err(FrameStoreError::NonMonotoneId {
                    last: last_id,
                    got: frame.frame_id,
                });
            }
            if frame.timestamp < last_t {
                return Err(FrameStoreError::NonMonotoneTime {
                    id: frame.frame_id,
                    last: last_t,
                    got: frame.timestamp,
                });
            }
        }
        self.last = Some((frame.frame_id, frame.timestamp));
        self.frames.insert(frame.frame_id, frame);
        Ok(())
    }

    pub fn get(&self, id: u64) -> Option<&Arc<PosedFrame>> {
        self.frames.get(&id)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Stored frames, oldest first.
    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &Arc<PosedFrame>> {
        self.frames.values()
    }

    pub fn ids(&self) -> BTreeSet<u64> {
        self.frames.keys().copied().collect()
    }

    /// Drops every frame not in `live`.
    pub fn retain_live(&mut self, live: &BTreeSet<u64>) {
        self.frames.retain(|id, _| live.contains(id));
    }
}
