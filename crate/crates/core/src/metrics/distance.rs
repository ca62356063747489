//! Point-cloud distances with an exact uniform-grid nearest-neighbour index.

use crate::error::{CoreError, Result};
use crate::geom::{self, Vec3};

/// Bucket grid over a point set. Queries search shells of cells outward
/// until no unvisited cell can hold a closer point, so results are exact.
#[derive(Clone, Debug)]
pub struct PointIndex<'a> {
    points: &'a [Vec3],
    min: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> PointIndex<'a> {
    pub fn new(points: &'a [Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(CoreError::Empty("point cloud"));
        }
        let mut min = points[0];
        let mut max = points[0];
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| max[a] - min[a]).fold(0.0, f64::max);
        // About two points per occupied cell on a surface-like cloud.
        let per_axis = ((points.len() as f64 / 2.0).sqrt().ceil() as usize).clamp(1, 256);
        let cell = if extent > 0.0 { extent / per_axis as f64 } else { 1.0 };
        let dims = [0, 1, 2].map(|a| (((max[a] - min[a]) / cell).floor() as usize + 1).min(per_axis + 1));
        let ncell = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; ncell + 1];
        let mut idx = Self {
            points,
            min,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let cells: Vec<usize> = points.iter().map(|&p| idx.flat(idx.cell_of(p))).collect();
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for c in 0..ncell {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &c) in cells.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        idx.starts = counts;
        idx.order = order;
        Ok(idx)
    }

    fn cell_of(&self, p: Vec3) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - self.min[a]) / self.cell).floor();
            (c.max(0.0) as usize).min(self.dims[a] - 1)
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn scan_cell(&self, c: [isize; 3], q: Vec3, best: &mut f64) {
        if (0..3).any(|a| c[a] < 0 || c[a] as usize >= self.dims[a]) {
            return;
        }
        let f = self.flat([c[0] as usize, c[1] as usize, c[2] as usize]);
        for &i in &self.order[self.starts[f]..self.starts[f + 1]] {
            let d = geom::sub(self.points[i], q);
            let d2 = geom::dot(d, d);
            if d2 < *best {
                *best = d2;
            }
        }
    }

    /// Squared distance from `q` to the nearest indexed point.
    pub fn nearest_sq(&self, q: Vec3) -> f64 {
        // Position of q in cell units; may lie outside the grid.
        let rel = [0, 1, 2].map(|a| (q[a] - self.min[a]) / self.cell);
        let home = rel.map(|r| r.floor() as isize);
        let max_ring = (0..3)
            .map(|a| (home[a].abs() + self.dims[a] as isize).max(1))
            .max()
            .unwrap_or(1);
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            let lo = [0, 1, 2].map(|a| (home[a] - ring).max(0));
            let hi = [0, 1, 2].map(|a| (home[a] + ring).min(self.dims[a] as isize - 1));
            for cz in lo[2]..=hi[2] {
                for cy in lo[1]..=hi[1] {
                    for cx in lo[0]..=hi[0] {
                        let c = [cx, cy, cz];
                        let cheb = (0..3).map(|a| (c[a] - home[a]).abs()).max().unwrap_or(0);
                        if cheb == ring {
                            self.scan_cell(c, q, &mut best);
                        }
                    }
                }
            }
            // Every unvisited cell is at least this far from q.
            let reach = (0..3)
                .map(|a| {
                    let lo = rel[a] - (home[a] - ring) as f64;
                    let hi = (home[a] + ring + 1) as f64 - rel[a];
                    lo.min(hi)
                })
                .fold(f64::INFINITY, f64::min)
                * self.cell;
            if best.is_finite() && best <= reach * reach {
                break;
            }
        }
        best
    }
}

fn directed(a: &[Vec3], b: &[Vec3]) -> Result<Vec<f64>> {
    let idx = PointIndex::new(b)?;
    Ok(a.iter().map(|&p| idx.nearest_sq(p)).collect())
}

fn check(a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(CoreError::Empty("point cloud"));
    }
    Ok(())
}

/// Symmetric chamfer distance `½ (mean_a min_b d + mean_b min_a d)`. With
/// `squared`, squared distances are averaged instead.
pub fn chamfer(a: &[Vec3], b: &[Vec3], squared: bool) -> Result<f64> {
    check(a, b)?;
    let term = |d2: Vec<f64>| {
        let n = d2.len() as f64;
        d2.into_iter().map(|x| if squared { x } else { x.sqrt() }).sum::<f64>() / n
    };
    Ok(0.5 * (term(directed(a, b)?) + term(directed(b, a)?)))
}

pub fn hausdorff(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    check(a, b)?;
    let ab = directed(a, b)?.into_iter().fold(0.0, f64::max);
    let ba = directed(b, a)?.into_iter().fold(0.0, f64::max);
    Ok(ab.max(ba).sqrt())
}
