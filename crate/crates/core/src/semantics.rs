//! Embedding and detection interfaces, with deterministic label-driven stubs.
//!
//! The stubs read the label channel of a frame: every label string maps to a
//! fixed pseudo-random unit vector derived from `(seed, label)`, so a text
//! query naming a label has dot product exactly 1 with that label's patch
//! features when noise is off.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::feature::Feature;
use crate::geometry::{backproject, GeometryError, LabelImage, PosedFrame};

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_text(&self, query: &str) -> Feature;
}

pub trait PatchEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    /// One feature per requested pixel, in the same order.
    fn embed_pixels(&self, frame: &PosedFrame, pixels: &[(usize, usize)]) -> Vec<Feature>;

    /// Features for every back-projectable pixel of the frame, aligned with
    /// [`backproject`] under the same depth cap.
    fn embed_frame(&self, frame: &PosedFrame, max_depth: f64) -> Result<Vec<Feature>, GeometryError> {
        let pixels: Vec<_> = backproject(frame, max_depth)?.into_iter().map(|p| p.pixel).collect();
        Ok(self.embed_pixels(frame, &pixels))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Non-empty set of `(h, w)` pixels, row-major order.
    pub mask: Vec<(usize, usize)>,
    pub confidence: f64,
}

pub trait Detector: Send + Sync {
    fn detect(&self, appearance: &LabelImage, query: &str) -> Option<Detection>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct StubConfig {
    pub dim: usize,
    pub seed: u64,
    /// Std-dev of isotropic Gaussian noise added to patch features before
    /// renormalizing. Drawn once per (frame, label) patch.
    pub noise_sigma: f64,
    /// Query string -> label, honored by both the text embedder and the detector.
    pub synonyms: BTreeMap<String, String>,
    /// Query string -> label, honored by the text embedder only. Models
    /// feature-space confusions the detector does not share.
    pub text_aliases: BTreeMap<String, String>,
    /// Queries (or labels) the detector always misses.
    pub detector_failures: BTreeSet<String>,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            seed: 7,
            noise_sigma: 0.0,
            synonyms: BTreeMap::new(),
            text_aliases: BTreeMap::new(),
            detector_failures: BTreeSet::new(),
        }
    }
}

fn seeded_rng(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Unit vector for `label` under `seed`; stable across calls and processes.
pub fn stub_label_vector(label: &str, seed: u64, dim: usize) -> Feature {
    let mut rng = seeded_rng(&[b"label", &seed.to_le_bytes(), label.as_bytes()]);
    Feature::new(gaussian(&mut rng, dim)).normalized()
}

/// Text and patch embedder backed by label hashing.
#[derive(Debug, Clone)]
pub struct StubLabelEmbedder {
    config: StubConfig,
}

impl StubLabelEmbedder {
    pub fn new(config: StubConfig) -> Self {
        Self { config }
    }

    pub fn config(&self) -> &StubConfig {
        &self.config
    }

    pub fn label_vector(&self, label: &str) -> Feature {
        stub_label_vector(label, self.config.seed, self.config.dim)
    }

    /// The label a text query embeds as.
    pub fn resolve_text<'a>(&'a self, query: &'a str) -> &'a str {
        let q = query.trim();
        self.config
            .text_aliases
            .get(q)
            .or_else(|| self.config.synonyms.get(q))
            .map(String::as_str)
            .unwrap_or(q)
    }

    fn patch_feature(&self, frame_id: u64, label: &str) -> Feature {
        let base = self.label_vector(label);
        if self.config.noise_sigma == 0.0 {
            return base;
        }
        let mut rng = seeded_rng(&[
            b"noise",
            &self.config.seed.to_le_bytes(),
            &frame_id.to_le_bytes(),
            label.as_bytes(),
        ]);
        let noise = gaussian(&mut rng, self.config.dim);
        Feature::new(
            base.iter()
                .zip(noise)
                .map(|(b, n)| b + self.config.noise_sigma * n)
                .collect(),
        )
        .normalized()
    }
}

impl TextEmbedder for StubLabelEmbedder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed_text(&self, query: &str) -> Feature {
        self.label_vector(self.resolve_text(query))
    }
}

impl PatchEmbedder for StubLabelEmbedder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed_pixels(&self, frame: &PosedFrame, pixels: &[(usize, usize)]) -> Vec<Feature> {
        // one feature allocation per label patch in this frame
        let mut cache: HashMap<u16, Feature> = HashMap::new();
        pixels
            .iter()
            .map(|&(h, w)| {
                let idx = frame.appearance.index(h, w);
                cache
                    .entry(idx)
                    .or_insert_with(|| {
                        let label = frame.appearance.table.name(idx).unwrap_or("");
                        self.patch_feature(frame.frame_id, label)
                    })
                    .clone()
            })
            .collect()
    }
}

/// Detector that matches the query against the label channel.
#[derive(Debug, Clone, Default)]
pub struct StubDetector {
    synonyms: BTreeMap<String, String>,
    failures: BTreeSet<String>,
}

impl StubDetector {
    pub fn new(config: &StubConfig) -> Self {
        Self {
            synonyms: config.synonyms.clone(),
            failures: config.detector_failures.clone(),
        }
    }
}

impl Detector for StubDetector {
    fn detect(&self, appearance: &LabelImage, query: &str) -> Option<Detection> {
        let q = query.trim();
        let label = self.synonyms.get(q).map(String::as_str).unwrap_or(q);
        if label.is_empty() || self.failures.contains(q) || self.failures.contains(label) {
            return None;
        }
        let idx = appearance.table.index_of(label)?;
        let mask: Vec<(usize, usize)> = (0..appearance.height)
            .flat_map(|h| (0..appearance.width).map(move |w| (h, w)))
            .filter(|&(h, w)| appearance.index(h, w) == idx)
            .collect();
        if mask.is_empty() {
            None
        } else {
            Some(Detection { mask, confidence: 1.0 })
        }
    }
}
