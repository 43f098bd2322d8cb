//! DBSCAN over 3D points with a uniform-grid neighbor index.

use std::collections::HashMap;

use nalgebra::Point3;

/// Cluster assignment per input point; `None` marks noise.
pub fn dbscan(points: &[Point3<f64>], eps: f64, min_points: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    if n == 0 || !(eps > 0.0) {
        return labels;
    }
    let index = GridIndex::new(points, eps);
    let mut visited = vec![false; n];
    let mut next_cluster = 0;
    let mut neighbors = Vec::new();
    for start in 0..n {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        index.neighbors(points, start, &mut neighbors);
        if neighbors.len() < min_points {
            continue;
        }
        let cluster = next_cluster;
        next_cluster += 1;
        labels[start] = Some(cluster);
        let mut frontier: Vec<usize> = neighbors.clone();
        while let Some(p) = frontier.pop() {
            if labels[p].is_none() {
                labels[p] = Some(cluster);
            }
            if visited[p] {
                continue;
            }
            visited[p] = true;
            index.neighbors(points, p, &mut neighbors);
            if neighbors.len() >= min_points {
                frontier.extend(
                    neighbors
                        .iter()
                        .copied()
                        .filter(|&q| labels[q].is_none() || !visited[q]),
                );
            }
        }
    }
    labels
}

struct GridIndex {
    eps: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl GridIndex {
    fn new(points: &[Point3<f64>], eps: f64) -> Self {
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::cell(p, eps)).or_default().push(i);
        }
        Self { eps, cells }
    }

    fn cell(p: &Point3<f64>, eps: f64) -> (i64, i64, i64) {
        (
            (p.x / eps).floor() as i64,
            (p.y / eps).floor() as i64,
            (p.z / eps).floor() as i64,
        )
    }

    /// All points within `eps` of `points[i]`, including `i` itself.
    fn neighbors(&self, points: &[Point3<f64>], i: usize, out: &mut Vec<usize>) {
        out.clear();
        let p = &points[i];
        let (cx, cy, cz) = Self::cell(p, self.eps);
        let eps2 = self.eps * self.eps;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        out.extend(
                            bucket
                                .iter()
                                .copied()
                                .filter(|&j| (points[j] - p).norm_squared() <= eps2),
                        );
                    }
                }
            }
        }
        out.sort_unstable();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_neighbors(points: &[Point3<f64>], i: usize, eps: f64) -> Vec<usize> {
        (0..points.len())
            .filter(|&j| (points[j] - points[i]).norm() <= eps)
            .collect()
    }

    #[test]
    fn separates_two_blobs_and_noise() {
        let mut pts = Vec::new();
        for i in 0..6 {
            pts.push(Point3::new(0.01 * i as f64, 0.0, 0.0));
            pts.push(Point3::new(5.0 + 0.01 * i as f64, 0.0, 0.0));
        }
        pts.push(Point3::new(2.5, 2.5, 2.5));
        let labels = dbscan(&pts, 0.05, 3);
        assert_eq!(labels[12], None);
        let a = labels[0].unwrap();
        let b = labels[1].unwrap();
        assert_ne!(a, b);
        for i in 0..6 {
            assert_eq!(labels[2 * i], Some(a));
            assert_eq!(labels[2 * i + 1], Some(b));
        }
    }

    #[test]
    fn core_points_match_brute_force_connectivity() {
        // deterministic pseudo-random cloud
        let mut s = 12345u64;
        let mut rnd = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let pts: Vec<_> = (0..300).map(|_| Point3::new(rnd(), rnd(), rnd() * 0.2)).collect();
        let (eps, minp) = (0.08, 4);
        let labels = dbscan(&pts, eps, minp);
        let core: Vec<bool> = (0..pts.len())
            .map(|i| brute_neighbors(&pts, i, eps).len() >= minp)
            .collect();
        for i in 0..pts.len() {
            if core[i] {
                assert!(labels[i].is_some());
                for j in brute_neighbors(&pts, i, eps) {
                    if core[j] {
                        assert_eq!(labels[i], labels[j]);
                    }
                    assert!(labels[j].is_some());
                }
            } else if labels[i].is_some() {
                // border point: some core neighbor in the same cluster
                assert!(brute_neighbors(&pts, i, eps)
                    .into_iter()
                    .any(|j| core[j] && labels[j] == labels[i]));
            }
        }
    }
}
