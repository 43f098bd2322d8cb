//! 2D planning layer derived from the voxel memory: obstacle map, temporal
//! and similarity value maps, frontier selection, A* and closed-loop steps.

mod astar;
mod export;

use std::collections::HashSet;

use thiserror::Error;

pub use astar::{path_cost, plan_astar, step_cost, Path, PlannerConfig};
pub use export::{export_obstacle_map, export_value_map, read_pgm, ExportMeta};

use crate::feature::Feature;
use crate::voxel::VoxelMemory;

#[derive(Debug, Error, PartialEq)]
pub enum NavError {
    #[error("grid geometry mismatch")]
    GeometryMismatch,
    #[error("no frontier left: exploration complete")]
    ExplorationComplete,
    #[error("no path from {start:?} to {goal:?}")]
    NoPath { start: Cell, goal: Cell },
    #[error("start cell {0:?} is an obstacle or outside the map")]
    InvalidStart(Cell),
    #[error("goal cell {0:?} is an obstacle or outside the map")]
    InvalidGoal(Cell),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("query feature has dimension {got}, memory expects {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("current time {now} precedes a stored observation at {latest}")]
    TimeBeforeObservation { now: f64, latest: f64 },
    #[error("mix weight {0} outside [0, 1]")]
    InvalidMix(f64),
}

/// Grid cell `(ix, iy)`; ordering is lexicographic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub ix: usize,
    pub iy: usize,
}

impl Cell {
    pub const fn new(ix: usize, iy: usize) -> Self {
        Self { ix, iy }
    }
}

/// Axis-aligned XY grid; cell `(ix, iy)` covers
/// `[ox + ix*res, ox + (ix+1)*res) x [oy + iy*res, oy + (iy+1)*res)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub origin: [f64; 2],
    pub resolution: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridGeometry {
    pub fn new(origin: [f64; 2], resolution: f64, nx: usize, ny: usize) -> Result<Self, NavError> {
        if !(resolution.is_finite() && resolution > 0.0) || nx == 0 || ny == 0 {
            return Err(NavError::InvalidGrid(format!(
                "resolution {resolution} and size {nx}x{ny} must be positive"
            )));
        }
        Ok(Self {
            origin,
            resolution,
            nx,
            ny,
        })
    }

    /// Smallest grid aligned to multiples of `resolution` that covers the box.
    pub fn covering(min: [f64; 2], max: [f64; 2], resolution: f64) -> Result<Self, NavError> {
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(NavError::InvalidGrid(format!("resolution {resolution}")));
        }
        let lo = [(min[0] / resolution).floor(), (min[1] / resolution).floor()];
        let hi = [(max[0] / resolution).floor(), (max[1] / resolution).floor()];
        Self::new(
            [lo[0] * resolution, lo[1] * resolution],
            resolution,
            (hi[0] - lo[0]) as usize + 1,
            (hi[1] - lo[1]) as usize + 1,
        )
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<Cell> {
        let fx = ((x - self.origin[0]) / self.resolution).floor();
        let fy = ((y - self.origin[1]) / self.resolution).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.nx as f64 || fy >= self.ny as f64 {
            return None;
        }
        Some(Cell::new(fx as usize, fy as usize))
    }

    pub fn center(&self, c: Cell) -> [f64; 2] {
        [
            self.origin[0] + (c.ix as f64 + 0.5) * self.resolution,
            self.origin[1] + (c.iy as f64 + 0.5) * self.resolution,
        ]
    }

    #[inline]
    pub fn index(&self, c: Cell) -> usize {
        c.iy * self.nx + c.ix
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.ix < self.nx && c.iy < self.ny
    }

    /// Cells in lexicographic `(ix, iy)` order.
    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.nx).flat_map(move |ix| (0..self.ny).map(move |iy| Cell::new(ix, iy)))
    }

    /// 8-connected in-bounds neighbors.
    pub fn neighbors(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        const OFFS: [(i64, i64); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
        OFFS.iter().filter_map(move |&(dx, dy)| {
            let x = c.ix as i64 + dx;
            let y = c.iy as i64 + dy;
            (x >= 0 && y >= 0 && (x as usize) < self.nx && (y as usize) < self.ny)
                .then(|| Cell::new(x as usize, y as usize))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellState {
    Obstacle,
    Navigable,
    Explorable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleMap2D {
    pub geometry: GridGeometry,
    cells: Vec<CellState>,
}

impl ObstacleMap2D {
    pub fn filled(geometry: GridGeometry, state: CellState) -> Self {
        Self {
            geometry,
            cells: vec![state; geometry.len()],
        }
    }

    pub fn state(&self, c: Cell) -> CellState {
        self.cells[self.geometry.index(c)]
    }

    pub fn set(&mut self, c: Cell, s: CellState) {
        let i = self.geometry.index(c);
        self.cells[i] = s;
    }

    pub fn count(&self, s: CellState) -> usize {
        self.cells.iter().filter(|&&c| c == s).count()
    }

    pub fn is_frontier(&self, c: Cell) -> bool {
        self.state(c) == CellState::Explorable
            && self
                .geometry
                .neighbors(c)
                .any(|n| self.state(n) == CellState::Navigable)
    }

    /// Explorable cells with at least one navigable 8-neighbor, lexicographic order.
    pub fn frontiers(&self) -> Vec<Cell> {
        self.geometry.cells().filter(|&c| self.is_frontier(c)).collect()
    }
}

/// Obstacle map over the XY bounding box of the stored voxel centroids.
/// An empty memory yields a single explorable cell at the origin.
pub fn build_obstacle_map(memory: &VoxelMemory, z_threshold: f64, resolution: f64) -> Result<ObstacleMap2D, NavError> {
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for (_, rec) in memory.iter() {
        min[0] = min[0].min(rec.centroid.x);
        min[1] = min[1].min(rec.centroid.y);
        max[0] = max[0].max(rec.centroid.x);
        max[1] = max[1].max(rec.centroid.y);
    }
    let geometry = if memory.is_empty() {
        GridGeometry::new([0.0, 0.0], resolution, 1, 1)?
    } else {
        GridGeometry::covering(min, max, resolution)?
    };
    Ok(build_obstacle_map_in(memory, z_threshold, geometry))
}

/// Obstacle map on a caller-supplied grid; voxels outside it are ignored.
/// Obstacle wins over navigable when a column holds both.
pub fn build_obstacle_map_in(memory: &VoxelMemory, z_threshold: f64, geometry: GridGeometry) -> ObstacleMap2D {
    let mut map = ObstacleMap2D::filled(geometry, CellState::Explorable);
    for (_, rec) in memory.iter() {
        let Some(c) = geometry.cell_of(rec.centroid.x, rec.centroid.y) else {
            continue;
        };
        let idx = geometry.index(c);
        if rec.centroid.z > z_threshold {
            map.cells[idx] = CellState::Obstacle;
        } else if map.cells[idx] == CellState::Explorable {
            map.cells[idx] = CellState::Navigable;
        }
    }
    map
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplorationParams {
    pub beta_t: f64,
    pub mu_t: f64,
    pub beta_s: f64,
    pub mu_s: f64,
    /// Weight of the temporal map when mixing.
    pub lambda: f64,
}

impl Default for ExplorationParams {
    fn default() -> Self {
        Self {
            beta_t: -1.0 / 60.0,
            mu_t: 120.0,
            beta_s: -10.0,
            mu_s: 0.5,
            lambda: 0.5,
        }
    }
}

/// Values are clamped this far inside (0, 1) so saturation never reaches the bounds.
pub const VALUE_MARGIN: f64 = 1e-15;

/// Logistic function, clamped to `[VALUE_MARGIN, 1 - VALUE_MARGIN]`.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(VALUE_MARGIN, 1.0 - VALUE_MARGIN)
}

/// `sigmoid(-beta * (x - mu))`, with `x = +inf` handled as the limit.
pub fn value_of(x: f64, beta: f64, mu: f64) -> f64 {
    if x == f64::INFINITY {
        return sigmoid(if beta < 0.0 {
            f64::INFINITY
        } else if beta > 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        });
    }
    sigmoid(-beta * (x - mu))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueMap2D {
    pub geometry: GridGeometry,
    values: Vec<f64>,
}

impl ValueMap2D {
    pub fn from_values(geometry: GridGeometry, values: Vec<f64>) -> Result<Self, NavError> {
        if values.len() != geometry.len() {
            return Err(NavError::GeometryMismatch);
        }
        Ok(Self { geometry, values })
    }

    pub fn get(&self, c: Cell) -> f64 {
        self.values[self.geometry.index(c)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Per column, the largest of `f(voxel)`; `None` for empty columns.
fn column_max<F>(memory: &VoxelMemory, geometry: &GridGeometry, f: F) -> Vec<Option<f64>>
where
    F: Fn(&crate::voxel::VoxelRecord) -> f64,
{
    let mut out: Vec<Option<f64>> = vec![None; geometry.len()];
    for (_, rec) in memory.iter() {
        if let Some(c) = geometry.cell_of(rec.centroid.x, rec.centroid.y) {
            let v = f(rec);
            let slot = &mut out[geometry.index(c)];
            *slot = Some(slot.map_or(v, |cur| cur.max(v)));
        }
    }
    out
}

/// Staleness map: per column `T* = max (now - last_seen)` and
/// `V = sigmoid(-beta_t (T* - mu_t))`. Empty columns take the `T* -> inf` limit.
pub fn temporal_value_map(
    memory: &VoxelMemory,
    geometry: GridGeometry,
    now: f64,
    params: &ExplorationParams,
) -> Result<ValueMap2D, NavError> {
    if let Some(latest) = memory.iter().map(|(_, r)| r.last_seen).reduce(f64::max) {
        if latest > now {
            return Err(NavError::TimeBeforeObservation { now, latest });
        }
    }
    let ages = column_max(memory, &geometry, |r| now - r.last_seen);
    let values = ages
        .into_iter()
        .map(|a| value_of(a.unwrap_or(f64::INFINITY), params.beta_t, params.mu_t))
        .collect();
    ValueMap2D::from_values(geometry, values)
}

/// Similarity map: per column `S* = max f_q . f` and
/// `V = sigmoid(-beta_s (S* - mu_s))`; empty columns use `S* = 0`.
pub fn similarity_value_map(
    memory: &VoxelMemory,
    geometry: GridGeometry,
    query_feature: &Feature,
    params: &ExplorationParams,
) -> Result<ValueMap2D, NavError> {
    if query_feature.dim() != memory.feature_dim() {
        return Err(NavError::FeatureDim {
            expected: memory.feature_dim(),
            got: query_feature.dim(),
        });
    }
    let sims = column_max(memory, &geometry, |r| r.feature.dot(query_feature));
    let values = sims
        .into_iter()
        .map(|s| value_of(s.unwrap_or(0.0), params.beta_s, params.mu_s))
        .collect();
    ValueMap2D::from_values(geometry, values)
}

/// `lambda * a + (1 - lambda) * b` per cell.
pub fn combine_value_maps(a: &ValueMap2D, b: &ValueMap2D, lambda: f64) -> Result<ValueMap2D, NavError> {
    if a.geometry != b.geometry {
        return Err(NavError::GeometryMismatch);
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(NavError::InvalidMix(lambda));
    }
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
        .collect();
    ValueMap2D::from_values(a.geometry, values)
}

/// The frontier cell with the highest value; ties go to the smallest cell.
pub fn select_frontier(obstacles: &ObstacleMap2D, values: &ValueMap2D) -> Result<Cell, NavError> {
    select_frontier_excluding(obstacles, values, &HashSet::new())
}

/// [`select_frontier`] skipping cells in `excluded`.
pub fn select_frontier_excluding(
    obstacles: &ObstacleMap2D,
    values: &ValueMap2D,
    excluded: &HashSet<Cell>,
) -> Result<Cell, NavError> {
    if obstacles.geometry != values.geometry {
        return Err(NavError::GeometryMismatch);
    }
    let mut best: Option<(f64, Cell)> = None;
    for c in obstacles.frontiers() {
        if excluded.contains(&c) {
            continue;
        }
        let v = values.get(c);
        if best.is_none_or(|(bv, _)| v > bv) {
            best = Some((v, c));
        }
    }
    best.map(|(_, c)| c).ok_or(NavError::ExplorationComplete)
}

/// Executable prefix of a plan in the closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub prefix: Vec<Cell>,
    /// The prefix ends at the plan's goal.
    pub reached: bool,
}

/// Default number of waypoints executed before re-observing and replanning.
pub const DEFAULT_MAX_WAYPOINTS: usize = 7;

/// The first `min(max_waypoints, |plan|)` waypoints of a non-empty plan.
pub fn closed_loop_step(plan: &Path, max_waypoints: usize) -> StepOutcome {
    let n = plan.cells.len().min(max_waypoints.max(1));
    StepOutcome {
        prefix: plan.cells[..n].to_vec(),
        reached: n == plan.cells.len(),
    }
}
