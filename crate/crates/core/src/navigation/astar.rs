use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{Cell, CellState, NavError, ObstacleMap2D};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerConfig {
    /// Multiplier on the cost of entering an explorable cell.
    pub explorable_penalty: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            explorable_penalty: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    /// Start first, goal last.
    pub cells: Vec<Cell>,
    pub cost: f64,
}

/// Cost of moving between 8-adjacent cells, or `None` if the move is blocked.
/// Diagonal moves may not cut past an obstacle corner.
pub fn step_cost(map: &ObstacleMap2D, from: Cell, to: Cell, config: &PlannerConfig) -> Option<f64> {
    let dx = to.ix.abs_diff(from.ix);
    let dy = to.iy.abs_diff(from.iy);
    if dx > 1 || dy > 1 || (dx == 0 && dy == 0) || !map.geometry.contains(to) {
        return None;
    }
    let target = map.state(to);
    if target == CellState::Obstacle {
        return None;
    }
    let diagonal = dx == 1 && dy == 1;
    if diagonal
        && (map.state(Cell::new(to.ix, from.iy)) == CellState::Obstacle
            || map.state(Cell::new(from.ix, to.iy)) == CellState::Obstacle)
    {
        return None;
    }
    let base = if diagonal { std::f64::consts::SQRT_2 } else { 1.0 };
    let factor = if target == CellState::Explorable {
        config.explorable_penalty
    } else {
        1.0
    };
    Some(base * factor)
}

/// Sum of step costs along `cells`, or `None` if any step is invalid.
pub fn path_cost(map: &ObstacleMap2D, cells: &[Cell], config: &PlannerConfig) -> Option<f64> {
    cells.windows(2).map(|w| step_cost(map, w[0], w[1], config)).sum()
}

fn octile(a: Cell, b: Cell) -> f64 {
    let dx = a.ix.abs_diff(b.ix) as f64;
    let dy = a.iy.abs_diff(b.iy) as f64;
    let (lo, hi) = if dx < dy { (dx, dy) } else { (dy, dx) };
    hi - lo + std::f64::consts::SQRT_2 * lo
}

#[derive(PartialEq)]
struct Open {
    f: f64,
    g: f64,
    cell: Cell,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on f, then prefer larger g, then smaller cell
        other
            .f
            .total_cmp(&self.f)
            .then(self.g.total_cmp(&other.g))
            .then(other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimum-cost 8-connected path. The start may be navigable or explorable;
/// the goal may be any non-obstacle cell.
pub fn plan_astar(map: &ObstacleMap2D, start: Cell, goal: Cell, config: &PlannerConfig) -> Result<Path, NavError> {
    let g = &map.geometry;
    if !g.contains(start) || map.state(start) == CellState::Obstacle {
        return Err(NavError::InvalidStart(start));
    }
    if !g.contains(goal) || map.state(goal) == CellState::Obstacle {
        return Err(NavError::InvalidGoal(goal));
    }
    // octile distance stays admissible only while no step is cheaper than 1
    let h_scale = config.explorable_penalty.min(1.0);
    let n = g.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut parent: Vec<Option<Cell>> = vec![None; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    dist[g.index(start)] = 0.0;
    open.push(Open {
        f: octile(start, goal) * h_scale,
        g: 0.0,
        cell: start,
    });
    while let Some(Open { g: gc, cell, .. }) = open.pop() {
        let ci = g.index(cell);
        if closed[ci] {
            continue;
        }
        closed[ci] = true;
        if cell == goal {
            let mut cells = vec![goal];
            let mut cur = goal;
            while let Some(p) = parent[g.index(cur)] {
                cells.push(p);
                cur = p;
            }
            cells.reverse();
            return Ok(Path { cells, cost: gc });
        }
        for nb in g.neighbors(cell) {
            let ni = g.index(nb);
            if closed[ni] {
                continue;
            }
            let Some(c) = step_cost(map, cell, nb, config) else {
                continue;
            };
            let nd = gc + c;
            if nd < dist[ni] {
                dist[ni] = nd;
                parent[ni] = Some(cell);
                open.push(Open {
                    f: nd + octile(nb, goal) * h_scale,
                    g: nd,
                    cell: nb,
                });
            }
        }
    }
    Err(NavError::NoPath { start, goal })
}
