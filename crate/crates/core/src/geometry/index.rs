use std::collections::HashMap;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

/// Clouds smaller than this are searched by linear scan.
pub const BRUTE_FORCE_LIMIT: usize = 256;

type Cell = [i64; 3];

/// Uniform hash grid over a fixed point set.
///
/// Nearest-neighbor results are exact and identical to a linear scan,
/// including the lowest-index tie break.
#[derive(Debug, Clone)]
pub struct NeighborIndex<'a> {
    points: &'a [Point],
    cell_size: f64,
    cells: HashMap<Cell, Vec<usize>>,
    lo: Cell,
    hi: Cell,
}

impl<'a> NeighborIndex<'a> {
    /// `cell_size` should be on the order of the typical query radius.
    /// Non-positive or non-finite sizes fall back to linear scans.
    pub fn new(points: &'a [Point], cell_size: f64) -> Self {
        let use_grid = points.len() >= BRUTE_FORCE_LIMIT && cell_size.is_finite() && cell_size > 0.0;
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        if use_grid {
            for (i, p) in points.iter().enumerate() {
                let c = cell_of(p, cell_size);
                for k in 0..3 {
                    lo[k] = lo[k].min(c[k]);
                    hi[k] = hi[k].max(c[k]);
                }
                cells.entry(c).or_default().push(i);
            }
        }
        Self {
            points,
            cell_size: if use_grid { cell_size } else { 0.0 },
            cells,
            lo,
            hi,
        }
    }

    pub fn for_cloud(cloud: &'a PointCloud, cell_size: f64) -> Self {
        Self::new(cloud.points(), cell_size)
    }

    /// Cell size derived from the cloud extent, tuned for surface-like data.
    pub fn auto(cloud: &'a PointCloud) -> Self {
        let n = cloud.len().max(1) as f64;
        let size = cloud.diameter() / n.sqrt() * 2.0;
        Self::new(cloud.points(), size)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn is_grid(&self) -> bool {
        self.cell_size > 0.0
    }

    /// Index and Euclidean distance of the closest point; ties go to the
    /// lowest index. `None` only for an empty point set.
    pub fn nearest(&self, query: &Point) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        if !self.is_grid() {
            return Some(linear_nearest(self.points, query));
        }
        let qc = cell_of(query, self.cell_size);
        let max_shell = (0..3)
            .map(|k| (qc[k] - self.lo[k]).abs().max((self.hi[k] - qc[k]).abs()))
            .max()
            .unwrap_or(0);
        let mut best: Option<(usize, f64)> = None;
        for r in 0..=max_shell {
            // Large empty shells: a linear scan is cheaper than probing cells.
            if (2 * r + 1).pow(3) as usize > 8 * self.cells.len() + 64 {
                return Some(linear_nearest(self.points, query));
            }
            for_each_shell_cell(qc, r, |c| {
                if let Some(members) = self.cells.get(&c) {
                    for &i in members {
                        let d2 = (self.points[i] - query).norm_squared();
                        if better(d2, i, best) {
                            best = Some((i, d2));
                        }
                    }
                }
            });
            if let Some((_, d2)) = best {
                // every unvisited cell is at least r cells away from the query
                let reach = r as f64 * self.cell_size;
                if d2 < reach * reach {
                    break;
                }
            }
        }
        best.map(|(i, d2)| (i, d2.sqrt()))
    }

    /// All points with distance `< radius`, as `(index, distance)` sorted by index.
    pub fn within_radius(&self, query: &Point, radius: f64) -> Vec<(usize, f64)> {
        let r2 = radius * radius;
        let mut out = Vec::new();
        if !self.is_grid() {
            for (i, p) in self.points.iter().enumerate() {
                let d2 = (p - query).norm_squared();
                if d2 < r2 {
                    out.push((i, d2.sqrt()));
                }
            }
            return out;
        }
        let span = (radius / self.cell_size).ceil() as i64;
        if (2 * span + 1).pow(3) as usize > 8 * self.cells.len() + 64 {
            return self.linear_within(query, r2);
        }
        let qc = cell_of(query, self.cell_size);
        for dz in -span..=span {
            for dy in -span..=span {
                for dx in -span..=span {
                    let c = [qc[0] + dx, qc[1] + dy, qc[2] + dz];
                    if let Some(members) = self.cells.get(&c) {
                        for &i in members {
                            let d2 = (self.points[i] - query).norm_squared();
                            if d2 < r2 {
                                out.push((i, d2.sqrt()));
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable_by_key(|&(i, _)| i);
        out
    }

    fn linear_within(&self, query: &Point, r2: f64) -> Vec<(usize, f64)> {
        self.points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let d2 = (p - query).norm_squared();
                (d2 < r2).then(|| (i, d2.sqrt()))
            })
            .collect()
    }
}

fn cell_of(p: &Point, size: f64) -> Cell {
    [
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    ]
}

fn better(d2: f64, i: usize, best: Option<(usize, f64)>) -> bool {
    match best {
        None => true,
        Some((bi, bd)) => d2 < bd || (d2 == bd && i < bi),
    }
}

fn for_each_shell_cell(center: Cell, r: i64, mut f: impl FnMut(Cell)) {
    for dz in -r..=r {
        for dy in -r..=r {
            let on_face = dz.abs() == r || dy.abs() == r;
            if on_face {
                for dx in -r..=r {
                    f([center[0] + dx, center[1] + dy, center[2] + dz]);
                }
            } else {
                f([center[0] - r, center[1] + dy, center[2] + dz]);
                if r > 0 {
                    f([center[0] + r, center[1] + dy, center[2] + dz]);
                }
            }
        }
    }
}

fn linear_nearest(points: &[Point], query: &Point) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - query).norm_squared();
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    (best.0, best.1.sqrt())
}

/// Exhaustive nearest-neighbor query against a whole cloud.
pub fn nearest_neighbor(query: &Point, cloud: &PointCloud) -> Result<(usize, f64)> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("nearest-neighbor target cloud"));
    }
    Ok(linear_nearest(cloud.points(), query))
}
