//! Closed-loop frontier exploration inside a simulated scene.
//!
//! The robot is a point on the obstacle-map grid carrying the scene camera.
//! Each step it picks the highest-valued candidate cell, plans with A*,
//! drives the first few waypoints, then rescans all headings and rebuilds
//! its maps. A drive into a cell the scene actually blocks stops the robot
//! before that cell and marks it as an obstacle from then on.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;
use voxmem_core::navigation::{
    build_obstacle_map_in, closed_loop_step, combine_value_maps, plan_astar, similarity_value_map, temporal_value_map,
    Cell, CellState, ExplorationParams, GridGeometry, NavError, ObstacleMap2D, PlannerConfig, ValueMap2D,
    DEFAULT_MAX_WAYPOINTS,
};
use voxmem_core::semantics::PatchEmbedder;
use voxmem_core::{LabelTable, MemoryConfig, MemoryError, StubConfig, StubLabelEmbedder, TextEmbedder, VoxelMemory};

use crate::render::render_with;
use crate::scene::{scan_poses, Scene, Solid, DEFAULT_OBSTACLE_LABEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueKind {
    Time,
    Similarity,
    Mixed,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueKind::Time => "time",
            ValueKind::Similarity => "similarity",
            ValueKind::Mixed => "mixed",
        })
    }
}

impl FromStr for ValueKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "time" => Ok(ValueKind::Time),
            "similarity" => Ok(ValueKind::Similarity),
            "mixed" => Ok(ValueKind::Mixed),
            other => Err(format!(
                "unknown value map {other:?} (expected time, similarity or mixed)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExploreOptions {
    pub value: ValueKind,
    /// Rounds to run; `None` runs every round of the scene.
    pub rounds: Option<usize>,
    /// Total steps over all rounds.
    pub step_budget: usize,
    /// Query text for the similarity and mixed value maps.
    pub query: Option<String>,
    /// Voxels above this height mark their column as an obstacle.
    pub z_threshold: f64,
    pub resolution: f64,
    pub max_waypoints: usize,
    /// Consecutive steps spent on one target before giving up on it.
    pub max_pursuit: usize,
    /// Start position; defaults to the scene's, then the floor center.
    pub start: Option<[f64; 2]>,
    pub params: ExplorationParams,
    pub planner: PlannerConfig,
    pub memory: MemoryConfig,
    pub stub: StubConfig,
}

impl Default for ExploreOptions {
    fn default() -> Self {
        Self {
            value: ValueKind::Time,
            rounds: None,
            step_budget: 500,
            query: None,
            z_threshold: 0.2,
            resolution: 0.1,
            max_waypoints: DEFAULT_MAX_WAYPOINTS,
            max_pursuit: 25,
            start: None,
            params: ExplorationParams::default(),
            planner: PlannerConfig::default(),
            memory: MemoryConfig::default(),
            stub: StubConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Nav(#[from] NavError),
    #[error("value map {0} needs a query")]
    MissingQuery(ValueKind),
    #[error("start position ({0:.2}, {1:.2}) is blocked or off the floor")]
    BlockedStart(f64, f64),
    #[error("invalid explore options: {0}")]
    Options(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    pub round: usize,
    pub time: f64,
    /// Robot position after the step.
    pub position: [f64; 2],
    pub target: Cell,
    pub target_xy: [f64; 2],
    pub value: f64,
    /// The target was last observed before the current round began.
    pub is_stale: bool,
    /// Highest value among stale candidates when the target was chosen.
    pub max_stale_value: Option<f64>,
    /// Waypoints in the executed prefix, start included.
    pub prefix_len: usize,
    pub moved: usize,
    pub reached: bool,
    pub collided: bool,
    pub no_path: bool,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundSummary {
    pub round: usize,
    pub steps: usize,
    pub reachable: usize,
    pub covered: usize,
    pub complete: bool,
}

impl RoundSummary {
    pub fn coverage(&self) -> f64 {
        if self.reachable == 0 {
            1.0
        } else {
            self.covered as f64 / self.reachable as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExploreOutcome {
    Complete,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExploreReport {
    pub scene: String,
    pub value: ValueKind,
    pub steps: Vec<TraceStep>,
    pub rounds: Vec<RoundSummary>,
    pub outcome: ExploreOutcome,
}

impl ExploreReport {
    pub fn final_coverage(&self) -> f64 {
        self.rounds.last().map_or(0.0, RoundSummary::coverage)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "step\tround\ttime\tx\ty\ttarget_ix\ttarget_iy\tvalue\tstale\tmax_stale_value\tprefix_len\tmoved\treached\tcollided\tno_path\tcoverage\n",
        );
        for t in &self.steps {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.1}\t{:.3}\t{:.3}\t{}\t{}\t{:.6}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.4}",
                t.step,
                t.round,
                t.time,
                t.position[0],
                t.position[1],
                t.target.ix,
                t.target.iy,
                t.value,
                t.is_stale as u8,
                t.max_stale_value.map(|v| format!("{v:.6}")).unwrap_or_default(),
                t.prefix_len,
                t.moved,
                t.reached as u8,
                t.collided as u8,
                t.no_path as u8,
                t.coverage,
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scene: {}", self.scene);
        let _ = writeln!(s, "value: {}", self.value);
        for r in &self.rounds {
            let _ = writeln!(
                s,
                "round {}: steps={} covered={}/{} coverage={:.2}% {}",
                r.round,
                r.steps,
                r.covered,
                r.reachable,
                100.0 * r.coverage(),
                if r.complete { "complete" } else { "incomplete" }
            );
        }
        let _ = writeln!(
            s,
            "outcome: {}",
            match self.outcome {
                ExploreOutcome::Complete => "exploration-complete",
                ExploreOutcome::BudgetExhausted => "budget-exhausted",
            }
        );
        let _ = writeln!(s, "final_coverage={:.4}", self.final_coverage());
        s
    }
}

/// Result of driving to a fixed goal.
#[derive(Debug, Clone, PartialEq)]
pub struct NavigateReport {
    /// Executed prefixes, each starting at the robot's position.
    pub prefixes: Vec<Vec<Cell>>,
    pub collisions: usize,
    pub reached: bool,
}

/// Robot, memory and the world it moves in.
pub struct Explorer<'a> {
    scene: &'a Scene,
    options: ExploreOptions,
    table: Arc<LabelTable>,
    embedder: StubLabelEmbedder,
    memory: VoxelMemory,
    geometry: GridGeometry,
    round: usize,
    round_start: f64,
    position: Cell,
    time: f64,
    next_frame_id: u64,
    bumped: HashSet<Cell>,
    /// Extra boxes placed into the world on top of the scene's own.
    pub extra_solids: Vec<Solid>,
}

impl<'a> Explorer<'a> {
    pub fn new(scene: &'a Scene, options: ExploreOptions) -> Result<Self, ExploreError> {
        if options.max_waypoints == 0 || options.max_pursuit == 0 {
            return Err(ExploreError::Options(
                "max_waypoints and max_pursuit must be positive".into(),
            ));
        }
        if options.stub.dim != options.memory.feature_dim {
            return Err(ExploreError::Options("stub dim differs from memory feature_dim".into()));
        }
        if options.value != ValueKind::Time && options.query.is_none() {
            return Err(ExploreError::MissingQuery(options.value));
        }
        let geometry = GridGeometry::covering(scene.floor_min, scene.floor_max, options.resolution)?;
        let mut table = scene.label_table();
        // extra solids added by callers are labeled with the default obstacle label
        table.intern(DEFAULT_OBSTACLE_LABEL);
        let start = options.start.or(scene.explore_start).unwrap_or([
            (scene.floor_min[0] + scene.floor_max[0]) / 2.0,
            (scene.floor_min[1] + scene.floor_max[1]) / 2.0,
        ]);
        let position = geometry
            .cell_of(start[0], start[1])
            .ok_or(ExploreError::BlockedStart(start[0], start[1]))?;
        Ok(Self {
            scene,
            table: Arc::new(table),
            embedder: StubLabelEmbedder::new(options.stub.clone()),
            memory: VoxelMemory::new(options.memory)?,
            geometry,
            round: 0,
            round_start: 0.0,
            position,
            time: 0.0,
            next_frame_id: 1,
            bumped: HashSet::new(),
            extra_solids: Vec::new(),
            options,
        })
    }

    pub fn memory(&self) -> &VoxelMemory {
        &self.memory
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn position(&self) -> Cell {
        self.position
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn round(&self) -> usize {
        self.round
    }

    fn solids(&self) -> Vec<Solid> {
        let mut s = self.scene.solids(self.round);
        s.extend(self.extra_solids.iter().cloned());
        s
    }

    /// Ground truth: the cell center is off the floor, or the closed cell
    /// square touches a box taller than the obstacle height threshold.
    pub fn is_blocked(&self, c: Cell) -> bool {
        blocked(&self.solids(), self.scene, &self.geometry, self.options.z_threshold, c)
    }

    /// Cells reachable from the robot over unblocked cells, 8-connected,
    /// without cutting blocked corners.
    pub fn reachable_cells(&self) -> HashSet<Cell> {
        let solids = self.solids();
        let mut is_free = vec![false; self.geometry.len()];
        for c in self.geometry.cells() {
            is_free[self.geometry.index(c)] =
                !blocked(&solids, self.scene, &self.geometry, self.options.z_threshold, c);
        }
        let g = self.geometry;
        let ok = |c: Cell| is_free[g.index(c)];
        let mut seen = HashSet::new();
        if !ok(self.position) {
            return seen;
        }
        let mut queue = VecDeque::from([self.position]);
        seen.insert(self.position);
        while let Some(c) = queue.pop_front() {
            for n in g.neighbors(c) {
                if !ok(n) || seen.contains(&n) {
                    continue;
                }
                if n.ix != c.ix && n.iy != c.iy && !(ok(Cell::new(n.ix, c.iy)) && ok(Cell::new(c.ix, n.iy))) {
                    continue;
                }
                seen.insert(n);
                queue.push_back(n);
            }
        }
        seen
    }

    /// Renders and ingests one frame per heading at the robot's position.
    pub fn scan(&mut self) -> Result<(), ExploreError> {
        let solids = self.solids();
        let traj = &self.scene.trajectory;
        let xy = self.geometry.center(self.position);
        for pose in scan_poses(xy, traj.height, traj.pitch_deg, traj.headings) {
            let frame = render_with(
                &solids,
                &self.scene.camera,
                self.scene.seed,
                self.next_frame_id,
                self.time,
                pose,
                self.table.clone(),
            );
            let features = self
                .embedder
                .embed_frame(&frame, self.memory.config().max_depth)
                .map_err(MemoryError::from)?;
            self.memory.ingest_frame_with(&frame, &features, true)?;
            self.next_frame_id += 1;
            self.time += traj.frame_interval;
        }
        Ok(())
    }

    /// Obstacle map from memory, with bumped cells forced to obstacles.
    pub fn obstacle_map(&self) -> ObstacleMap2D {
        let mut map = build_obstacle_map_in(&self.memory, self.options.z_threshold, self.geometry);
        for &c in &self.bumped {
            map.set(c, CellState::Obstacle);
        }
        map
    }

    pub fn value_map(&self) -> Result<ValueMap2D, ExploreError> {
        let p = &self.options.params;
        let query = || {
            let q = self
                .options
                .query
                .as_deref()
                .ok_or(ExploreError::MissingQuery(self.options.value))?;
            Ok::<_, ExploreError>(self.embedder.embed_text(q))
        };
        Ok(match self.options.value {
            ValueKind::Time => temporal_value_map(&self.memory, self.geometry, self.time, p)?,
            ValueKind::Similarity => similarity_value_map(&self.memory, self.geometry, &query()?, p)?,
            ValueKind::Mixed => {
                let t = temporal_value_map(&self.memory, self.geometry, self.time, p)?;
                let s = similarity_value_map(&self.memory, self.geometry, &query()?, p)?;
                combine_value_maps(&t, &s, p.lambda)?
            }
        })
    }

    /// Most recent observation time per column, row-major.
    fn column_last_seen(&self) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; self.geometry.len()];
        for (_, r) in self.memory.iter() {
            if let Some(c) = self.geometry.cell_of(r.centroid.x, r.centroid.y) {
                let slot = &mut out[self.geometry.index(c)];
                *slot = slot.max(r.last_seen);
            }
        }
        out
    }

    fn covered(&self, reachable: &HashSet<Cell>) -> usize {
        let map = self.obstacle_map();
        let last = self.column_last_seen();
        reachable
            .iter()
            .filter(|&&c| map.state(c) == CellState::Navigable && last[self.geometry.index(c)] >= self.round_start)
            .count()
    }

    /// Drives along `prefix` (which starts at the robot). Returns the number
    /// of cells moved and whether a blocked cell stopped the robot.
    fn execute(&mut self, prefix: &[Cell]) -> (usize, bool) {
        let mut moved = 0;
        for &c in prefix.iter().skip(1) {
            if self.is_blocked(c) {
                self.bumped.insert(c);
                return (moved, true);
            }
            self.position = c;
            moved += 1;
        }
        (moved, false)
    }

    /// Switches the world to `round`. The clock jumps to the round's start
    /// and target bookkeeping resets; the memory is kept.
    pub fn begin_round(&mut self, round: usize) -> Result<(), ExploreError> {
        self.round = round;
        self.time = self.time.max(round as f64 * self.scene.trajectory.round_gap);
        self.round_start = self.time;
        self.bumped.clear();
        if self.is_blocked(self.position) {
            let [x, y] = self.geometry.center(self.position);
            return Err(ExploreError::BlockedStart(x, y));
        }
        self.scan()
    }

    /// Closed-loop drive to `goal`: plan, execute a prefix, rescan, replan.
    pub fn navigate_to(&mut self, goal: Cell, max_steps: usize) -> Result<NavigateReport, ExploreError> {
        let mut report = NavigateReport {
            prefixes: Vec::new(),
            collisions: 0,
            reached: self.position == goal,
        };
        for _ in 0..max_steps {
            if report.reached {
                break;
            }
            let map = self.obstacle_map();
            let path = plan_astar(&map, self.position, goal, &self.options.planner)?;
            let step = closed_loop_step(&path, self.options.max_waypoints);
            let (moved, collided) = self.execute(&step.prefix);
            report.prefixes.push(step.prefix[..=moved].to_vec());
            report.collisions += collided as usize;
            self.scan()?;
            report.reached = self.position == goal;
        }
        Ok(report)
    }

    /// Runs every requested round until no candidate remains or the step
    /// budget runs out.
    pub fn run(&mut self) -> Result<ExploreReport, ExploreError> {
        let rounds = self.options.rounds.unwrap_or(self.scene.rounds).min(self.scene.rounds);
        let mut steps = Vec::new();
        let mut summaries = Vec::new();
        let mut outcome = ExploreOutcome::Complete;
        for round in 0..rounds {
            self.begin_round(round)?;
            let reachable = self.reachable_cells();
            let mut blacklist: HashSet<Cell> = HashSet::new();
            let mut pursuit: HashMap<Cell, usize> = HashMap::new();
            let mut last_target = None;
            let mut round_steps = 0;
            let mut complete = false;
            loop {
                if steps.len() >= self.options.step_budget {
                    outcome = ExploreOutcome::BudgetExhausted;
                    break;
                }
                let Some(choice) = self.choose_target(&blacklist)? else {
                    complete = true;
                    break;
                };
                let target = choice.cell;
                if last_target != Some(target) {
                    pursuit.clear();
                }
                last_target = Some(target);
                let n = pursuit.entry(target).or_insert(0);
                *n += 1;
                if *n > self.options.max_pursuit {
                    blacklist.insert(target);
                    continue;
                }

                let map = self.obstacle_map();
                let mut trace = TraceStep {
                    step: steps.len(),
                    round,
                    time: self.time,
                    position: self.geometry.center(self.position),
                    target,
                    target_xy: self.geometry.center(target),
                    value: choice.value,
                    is_stale: choice.stale,
                    max_stale_value: choice.max_stale,
                    prefix_len: 0,
                    moved: 0,
                    reached: false,
                    collided: false,
                    no_path: false,
                    coverage: 0.0,
                };
                match plan_astar(&map, self.position, target, &self.options.planner) {
                    Ok(path) => {
                        let step = closed_loop_step(&path, self.options.max_waypoints);
                        let (moved, collided) = self.execute(&step.prefix);
                        trace.prefix_len = step.prefix.len();
                        trace.moved = moved;
                        trace.collided = collided;
                        trace.reached = self.position == target;
                        if moved > 0 {
                            self.scan()?;
                        }
                        if trace.reached || (moved == 0 && !collided) {
                            blacklist.insert(target);
                        }
                    }
                    Err(NavError::NoPath { .. }) => {
                        trace.no_path = true;
                        blacklist.insert(target);
                    }
                    Err(e) => return Err(e.into()),
                }
                trace.position = self.geometry.center(self.position);
                trace.time = self.time;
                trace.coverage = ratio(self.covered(&reachable), reachable.len());
                steps.push(trace);
                round_steps += 1;
            }
            summaries.push(RoundSummary {
                round,
                steps: round_steps,
                reachable: reachable.len(),
                covered: self.covered(&reachable),
                complete,
            });
            if outcome == ExploreOutcome::BudgetExhausted {
                break;
            }
        }
        Ok(ExploreReport {
            scene: self.scene.name.clone(),
            value: self.options.value,
            steps,
            rounds: summaries,
            outcome,
        })
    }

    /// Highest-valued candidate: frontier cells plus, after the first round,
    /// navigable cells not observed since the round began. Ties go to the
    /// smallest cell.
    fn choose_target(&self, blacklist: &HashSet<Cell>) -> Result<Option<Choice>, ExploreError> {
        let map = self.obstacle_map();
        let values = self.value_map()?;
        let last = self.column_last_seen();
        let mut best: Option<Choice> = None;
        let mut max_stale: Option<f64> = None;
        for c in self.geometry.cells() {
            if blacklist.contains(&c) {
                continue;
            }
            let stale = self.round > 0
                && map.state(c) == CellState::Navigable
                && last[self.geometry.index(c)] < self.round_start;
            if !stale && !map.is_frontier(c) {
                continue;
            }
            let v = values.get(c);
            if stale {
                max_stale = Some(max_stale.map_or(v, |m: f64| m.max(v)));
            }
            if best.as_ref().is_none_or(|b| v > b.value) {
                best = Some(Choice {
                    cell: c,
                    value: v,
                    stale,
                    max_stale: None,
                });
            }
        }
        Ok(best.map(|b| Choice { max_stale, ..b }))
    }
}

struct Choice {
    cell: Cell,
    value: f64,
    stale: bool,
    max_stale: Option<f64>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

fn blocked(solids: &[Solid], scene: &Scene, g: &GridGeometry, z_threshold: f64, c: Cell) -> bool {
    let [x, y] = g.center(c);
    if x < scene.floor_min[0] || x > scene.floor_max[0] || y < scene.floor_min[1] || y > scene.floor_max[1] {
        return true;
    }
    let h = g.resolution / 2.0;
    solids
        .iter()
        .filter(|s| s.aabb.max.z > z_threshold)
        .any(|s| s.aabb.footprint_touches([x - h, y - h], [x + h, y + h]))
}

/// Runs an exploration of `scene` with `options`.
pub fn explore(scene: &Scene, options: ExploreOptions) -> Result<ExploreReport, ExploreError> {
    Explorer::new(scene, options)?.run()
}
