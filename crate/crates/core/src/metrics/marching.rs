//! Marching-cubes extraction of the zero level set.
//!
//! Each cell's polygons are built by walking its six faces: every face with a
//! sign change contributes one or two directed segments, and the segments
//! chain into closed loops that are split into triangles. Faces with four
//! crossings are resolved by the sign of the face-centre average, which both
//! neighbouring cells compute identically, so the surface has no cracks.
//! Vertices are shared through their grid edge.

use std::collections::HashMap;
use std::thread;

use serde::{Deserialize, Serialize};

use super::mesh::TriangleMesh;
use crate::csdf::CsdfModel;
use crate::error::{CoreError, Result};
use crate::geom::{self, Vec3};

pub const MIN_RESOLUTION: usize = 16;

/// Regular sampling grid with `resolution` cells per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grid {
    pub resolution: usize,
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for Grid {
    fn default() -> Self {
        Self::cube(64, 1.0)
    }
}

impl Grid {
    pub fn cube(resolution: usize, half_extent: f64) -> Self {
        Self {
            resolution,
            min: [-half_extent; 3],
            max: [half_extent; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < MIN_RESOLUTION {
            return Err(CoreError::Config(format!(
                "grid resolution {} is below {MIN_RESOLUTION}",
                self.resolution
            )));
        }
        if (0..3).any(|a| !(self.max[a] > self.min[a])) {
            return Err(CoreError::Config("grid bounds are empty".into()));
        }
        Ok(())
    }

    pub fn spacing(&self) -> Vec3 {
        let n = self.resolution as f64;
        [0, 1, 2].map(|a| (self.max[a] - self.min[a]) / n)
    }

    /// Samples per axis.
    pub fn points_per_axis(&self) -> usize {
        self.resolution + 1
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let h = self.spacing();
        [
            self.min[0] + i as f64 * h[0],
            self.min[1] + j as f64 * h[1],
            self.min[2] + k as f64 * h[2],
        ]
    }

    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let n = self.points_per_axis();
        (k * n + j) * n + i
    }
}

/// Evaluates `field` at every grid point (x fastest), one z-slab per task.
pub fn sample_grid<F>(grid: &Grid, field: F) -> Vec<f64>
where
    F: Fn(&[Vec3]) -> Vec<f64> + Sync,
{
    let n = grid.points_per_axis();
    let workers = thread::available_parallelism().map_or(1, |p| p.get()).min(n);
    let slabs: Vec<Vec<usize>> = (0..workers).map(|w| (w..n).step_by(workers).collect()).collect();
    let mut out = vec![0.0; n * n * n];
    let results: Vec<(usize, Vec<f64>)> = thread::scope(|s| {
        let handles: Vec<_> = slabs
            .iter()
            .map(|ks| {
                let field = &field;
                s.spawn(move || {
                    ks.iter()
                        .map(|&k| {
                            let pts: Vec<Vec3> =
                                (0..n * n).map(|idx| grid.point(idx % n, idx / n, k)).collect();
                            (k, field(&pts))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("grid worker panicked")).collect()
    });
    for (k, vals) in results {
        out[k * n * n..(k + 1) * n * n].copy_from_slice(&vals);
    }
    out
}

/// Corner `c` of a cell sits at offset `(c & 1, c >> 1 & 1, c >> 2 & 1)`.
fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The six faces as corner cycles, counter-clockwise seen from outside.
fn face_cycles() -> [[usize; 4]; 6] {
    let mut faces = [[0; 4]; 6];
    for axis in 0..3 {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let mut cyc = [0usize; 4];
            for (slot, (da, db)) in [(0, 0), (1, 0), (1, 1), (0, 1)].into_iter().enumerate() {
                cyc[slot] = (side << axis) | (da << a) | (db << b);
            }
            // (a, b, axis) is right-handed, so this cycle faces +axis.
            if side == 0 {
                cyc.reverse();
            }
            faces[axis * 2 + side] = cyc;
        }
    }
    faces
}

/// Local edge id of the cell edge joining corners `p` and `q`.
fn edge_id(p: usize, q: usize) -> usize {
    let (lo, hi) = (p.min(q), p.max(q));
    let axis = (hi ^ lo).trailing_zeros() as usize;
    // Remaining two bits pick one of four parallel edges.
    let rest: Vec<usize> = (0..3).filter(|&a| a != axis).map(|a| (lo >> a) & 1).collect();
    axis * 4 + rest[0] + 2 * rest[1]
}

/// Triangulates the zero level set of sampled `values` (as from
/// [`sample_grid`]). Negative values are inside. Returns `None` when the
/// field has no sign change on the grid.
pub fn marching_cubes_values(grid: &Grid, values: &[f64]) -> Option<TriangleMesh> {
    let n = grid.points_per_axis();
    assert_eq!(values.len(), n * n * n, "one value per grid point");
    // Exact zeros would put several vertices on one point.
    let tiny = 1e-12 * geom::norm(grid.spacing());
    let vals: Vec<f64> = values.iter().map(|&v| if v == 0.0 { tiny } else { v }).collect();
    let faces_cyc = face_cycles();
    let mut mesh = TriangleMesh::default();
    let mut vertex_of: HashMap<(usize, usize), usize> = HashMap::new();
    let cells = grid.resolution;
    for k in 0..cells {
        for j in 0..cells {
            for i in 0..cells {
                let base = [i, j, k];
                let idx = |c: usize| {
                    let o = corner_offset(c);
                    grid.index(i + o[0], j + o[1], k + o[2])
                };
                let v: [f64; 8] = std::array::from_fn(|c| vals[idx(c)]);
                let inside = v.map(|x| x < 0.0);
                if inside.iter().all(|&b| b) || inside.iter().all(|&b| !b) {
                    continue;
                }
                // next[e] = edge reached from crossing e along its segment.
                let mut next = [usize::MAX; 12];
                for cyc in &faces_cyc {
                    let mut entries = Vec::with_capacity(2);
                    let mut exits = Vec::with_capacity(2);
                    for s in 0..4 {
                        let (p, q) = (cyc[s], cyc[(s + 1) % 4]);
                        if inside[p] != inside[q] {
                            if inside[q] {
                                entries.push(s);
                            } else {
                                exits.push(s);
                            }
                        }
                    }
                    let eid = |s: usize| edge_id(cyc[s], cyc[(s + 1) % 4]);
                    match entries.len() {
                        0 => {}
                        1 => next[eid(entries[0])] = eid(exits[0]),
                        _ => {
                            let centre: f64 = cyc.iter().map(|&c| v[c]).sum::<f64>() / 4.0;
                            for &s in &entries {
                                // Inside corners joined: go to the exit before
                                // this entry; otherwise the one after it.
                                let t = if centre < 0.0 { (s + 3) % 4 } else { (s + 1) % 4 };
                                next[eid(s)] = eid(t);
                            }
                        }
                    }
                }
                let mut visited = [false; 12];
                for start in 0..12 {
                    if next[start] == usize::MAX || visited[start] {
                        continue;
                    }
                    let mut loop_edges = Vec::new();
                    let mut e = start;
                    while !visited[e] {
                        visited[e] = true;
                        loop_edges.push(e);
                        e = next[e];
                    }
                    let polygon: Vec<usize> = loop_edges
                        .iter()
                        .map(|&e| edge_vertex(grid, &v, base, e, &mut vertex_of, &mut mesh))
                        .collect();
                    triangulate(&loop_edges, &polygon, &mut mesh);
                }
            }
        }
    }
    if mesh.faces.is_empty() {
        return None;
    }
    mesh.remove_degenerate_faces();
    Some(mesh)
}

/// Cube faces `(axis, side)` an edge lies on.
fn edge_faces(edge: usize) -> [(usize, usize); 2] {
    let axis = edge / 4;
    let r = edge % 4;
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    [(others[0], r & 1), (others[1], (r >> 1) & 1)]
}

fn share_face(a: usize, b: usize) -> bool {
    let fb = edge_faces(b);
    edge_faces(a).iter().any(|f| fb.contains(f))
}

/// Splits a loop into triangles without creating an edge between two
/// vertices on a common cell face, since the neighbouring cell may use that
/// pair as a boundary segment. Triangles keep the loop's winding.
fn triangulate(edges: &[usize], polygon: &[usize], mesh: &mut TriangleMesh) {
    match polygon.len() {
        0..=2 => {}
        3 => mesh.faces.push([polygon[0], polygon[1], polygon[2]]),
        4 if !share_face(edges[0], edges[2]) => {
            mesh.faces.push([polygon[0], polygon[1], polygon[2]]);
            mesh.faces.push([polygon[0], polygon[2], polygon[3]]);
        }
        4 if !share_face(edges[1], edges[3]) => {
            mesh.faces.push([polygon[1], polygon[2], polygon[3]]);
            mesh.faces.push([polygon[1], polygon[3], polygon[0]]);
        }
        n => {
            let c = polygon
                .iter()
                .fold([0.0; 3], |acc, &i| geom::add(acc, mesh.vertices[i]));
            mesh.vertices.push(geom::scale(c, 1.0 / n as f64));
            let centre = mesh.vertices.len() - 1;
            for t in 0..n {
                mesh.faces.push([centre, polygon[t], polygon[(t + 1) % n]]);
            }
        }
    }
}

fn edge_vertex(
    grid: &Grid,
    v: &[f64; 8],
    base: [usize; 3],
    edge: usize,
    vertex_of: &mut HashMap<(usize, usize), usize>,
    mesh: &mut TriangleMesh,
) -> usize {
    let axis = edge / 4;
    let r = edge % 4;
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let lo = ((r & 1) << others[0]) | (((r >> 1) & 1) << others[1]);
    let hi = lo | (1 << axis);
    let o = corner_offset(lo);
    let key = (grid.index(base[0] + o[0], base[1] + o[1], base[2] + o[2]), axis);
    *vertex_of.entry(key).or_insert_with(|| {
        let p = grid.point(base[0] + o[0], base[1] + o[1], base[2] + o[2]);
        let t = v[lo] / (v[lo] - v[hi]);
        let mut x = p;
        x[axis] += t * grid.spacing()[axis];
        mesh.vertices.push(x);
        mesh.vertices.len() - 1
    })
}

/// Extracts the surface of an analytic or closure-defined field.
pub fn marching_cubes_fn<F>(grid: &Grid, field: F) -> Result<Option<TriangleMesh>>
where
    F: Fn(Vec3) -> f64 + Sync,
{
    grid.validate()?;
    let values = sample_grid(grid, |pts| pts.iter().map(|&p| field(p)).collect());
    Ok(marching_cubes_values(grid, &values))
}

/// Extracts the zero level set of the decoder at latent `z`.
pub fn marching_cubes(model: &CsdfModel, z: &[f64], grid: &Grid) -> Result<Option<TriangleMesh>> {
    grid.validate()?;
    model.check_latent(z)?;
    let values = sample_grid(grid, |pts| model.eval_many(z, pts));
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numerical("non-finite SDF value on the extraction grid".into()));
    }
    Ok(marching_cubes_values(grid, &values))
}
