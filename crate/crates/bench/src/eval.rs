use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::Point3;
use thiserror::Error;
use voxmem_core::{PosedFrame, QueryResult};

use crate::dataset::{Dataset, DatasetError, NegativeReason, QueryKind};

/// A localization method under test: it sees frames in stream order and
/// answers queries from whatever it has ingested so far.
pub trait LocalizationPipeline {
    fn name(&self) -> String;
    fn ingest(&mut self, frame: PosedFrame) -> Result<(), String>;
    fn answer(&mut self, query: &str) -> Result<QueryResult, String>;
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("pipeline failed to ingest frame {frame_id}: {message}")]
    Ingest { frame_id: u64, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    /// Position in the manifest's query list.
    pub index: usize,
    pub query: String,
    pub t: f64,
    pub round: usize,
    pub kind: QueryKind,
    pub success: bool,
    pub predicted: Option<[f64; 3]>,
    pub image_id: Option<u64>,
    pub score: Option<f64>,
    /// Distance to the ground truth for positives answered with a location.
    pub distance: Option<f64>,
    pub error: Option<String>,
    /// Frames ingested when the query was issued.
    pub frames_seen: usize,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub successes: usize,
    pub total: usize,
}

impl Tally {
    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.successes += ok as usize;
    }

    /// Success fraction; 0 for an empty tally.
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.successes as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub method: String,
    /// Ordered as issued (by time, then manifest position).
    pub outcomes: Vec<QueryOutcome>,
}

/// Success rule for one answer: positives need a location within epsilon,
/// negatives need an abstention.
pub fn judge(kind: &QueryKind, result: &QueryResult) -> (bool, Option<f64>) {
    match (kind, result) {
        (QueryKind::Positive { location, epsilon }, QueryResult::Found { position, .. }) => {
            let d = (position - Point3::from(*location)).norm();
            (d <= *epsilon, Some(d))
        }
        (QueryKind::Positive { .. }, QueryResult::NotFound) => (false, None),
        (QueryKind::Negative { .. }, r) => (!r.is_found(), None),
    }
}

/// Replays the dataset through `pipeline`. Before each query at time `t`,
/// every frame with timestamp `< t` has been ingested and no other frame.
/// Queries sharing a timestamp are issued in manifest order.
pub fn evaluate(dataset: &Dataset, pipeline: &mut dyn LocalizationPipeline) -> Result<EvalReport, EvalError> {
    let manifest = dataset.manifest();
    let mut order: Vec<usize> = (0..manifest.queries.len()).collect();
    order.sort_by(|&a, &b| manifest.queries[a].t.total_cmp(&manifest.queries[b].t).then(a.cmp(&b)));

    let mut next_frame = 0;
    let mut outcomes = Vec::with_capacity(order.len());
    for qi in order {
        let ann = &manifest.queries[qi];
        while next_frame < dataset.len() && manifest.frames[next_frame].timestamp < ann.t {
            let frame = dataset.load_frame(next_frame)?;
            let frame_id = frame.frame_id;
            pipeline
                .ingest(frame)
                .map_err(|message| EvalError::Ingest { frame_id, message })?;
            next_frame += 1;
        }
        let start = Instant::now();
        let answer = pipeline.answer(&ann.q);
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        let mut outcome = QueryOutcome {
            index: qi,
            query: ann.q.clone(),
            t: ann.t,
            round: ann.round,
            kind: ann.kind.clone(),
            success: false,
            predicted: None,
            image_id: None,
            score: None,
            distance: None,
            error: None,
            frames_seen: next_frame,
            latency_ms,
        };
        match answer {
            Ok(result) => {
                let (ok, d) = judge(&ann.kind, &result);
                outcome.success = ok;
                outcome.distance = d;
                if let QueryResult::Found {
                    position,
                    image_id,
                    score,
                } = result
                {
                    outcome.predicted = Some([position.x, position.y, position.z]);
                    outcome.image_id = Some(image_id);
                    outcome.score = Some(score);
                }
            }
            Err(e) => outcome.error = Some(e),
        }
        outcomes.push(outcome);
    }
    Ok(EvalReport {
        dataset: manifest.name.clone(),
        method: pipeline.name(),
        outcomes,
    })
}

impl EvalReport {
    pub fn overall(&self) -> Tally {
        self.tally(|_| true)
    }

    pub fn positives(&self) -> Tally {
        self.tally(|o| o.kind.is_positive())
    }

    pub fn negatives(&self) -> Tally {
        self.tally(|o| !o.kind.is_positive())
    }

    pub fn tally(&self, keep: impl Fn(&QueryOutcome) -> bool) -> Tally {
        let mut t = Tally::default();
        for o in self.outcomes.iter().filter(|o| keep(o)) {
            t.add(o.success);
        }
        t
    }

    pub fn by_round(&self) -> BTreeMap<usize, Tally> {
        let mut m: BTreeMap<usize, Tally> = BTreeMap::new();
        for o in &self.outcomes {
            m.entry(o.round).or_default().add(o.success);
        }
        m
    }

    pub fn success_rate(&self) -> f64 {
        self.overall().rate()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let line = |s: &mut String, name: &str, t: Tally| {
            let _ = writeln!(s, "{name:<12} {:>4}/{:<4} {:.2}", t.successes, t.total, t.rate());
        };
        let _ = writeln!(s, "dataset: {}", self.dataset);
        let _ = writeln!(s, "method:  {}", self.method);
        line(&mut s, "overall", self.overall());
        line(&mut s, "positive", self.positives());
        line(&mut s, "negative", self.negatives());
        for (r, t) in self.by_round() {
            line(&mut s, &format!("round {r}"), t);
        }
        let _ = writeln!(s, "success_rate={:.2}", self.success_rate());
        s
    }

    /// Tab-separated table, one row per query. Latency is the only column
    /// that varies between otherwise identical runs.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "index\tquery\tt\tround\tkind\treason\tsuccess\tpredicted_x\tpredicted_y\tpredicted_z\timage_id\tscore\tdistance\tframes_seen\tlatency_ms\terror\n",
        );
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for o in &self.outcomes {
            let (kind, reason) = match &o.kind {
                QueryKind::Positive { .. } => ("positive", String::new()),
                QueryKind::Negative { reason } => (
                    "negative",
                    match reason {
                        NegativeReason::NotYetObserved => "not_yet_observed".to_string(),
                        NegativeReason::Removed => "removed".to_string(),
                    },
                ),
            };
            let p = o.predicted;
            let _ = writeln!(
                s,
                "{}\t{}\t{:.3}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}\t{}",
                o.index,
                o.query.replace(['\t', '\n'], " "),
                o.t,
                o.round,
                kind,
                reason,
                o.success as u8,
                opt(p.map(|p| p[0])),
                opt(p.map(|p| p[1])),
                opt(p.map(|p| p[2])),
                o.image_id.map(|i| i.to_string()).unwrap_or_default(),
                opt(o.score),
                opt(o.distance),
                o.frames_seen,
                o.latency_ms,
                o.error.as_deref().unwrap_or("").replace(['\t', '\n'], " "),
            );
        }
        s
    }

    /// Writes `<stem>.txt` and `<stem>.tsv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.to_text())?;
        std::fs::write(dir.join(format!("{stem}.tsv")), self.to_tsv())
    }
}
