//! Indexed triangle meshes: measures, topology checks and OBJ export.

use std::collections::HashMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geom::{self, Vec3};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// Millimetres per model unit, when known.
    pub mm_per_unit: Option<f64>,
}

fn tri_cross(a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    geom::cross(geom::sub(b, a), geom::sub(c, a))
}

impl TriangleMesh {
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(CoreError::ShapeMismatch(format!("face {i} indexes past {n} vertices")));
            }
        }
        Ok(())
    }

    fn corners(&self, f: &[usize; 3]) -> (Vec3, Vec3, Vec3) {
        (self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]])
    }

    /// Unnormalized face normal (twice the area, right-hand winding).
    pub fn face_normal(&self, face: usize) -> Vec3 {
        let (a, b, c) = self.corners(&self.faces[face]);
        tri_cross(a, b, c)
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|i| 0.5 * geom::norm(self.face_normal(i))).sum()
    }

    /// Signed enclosed volume; positive for outward-wound closed meshes.
    pub fn volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let (a, b, c) = self.corners(f);
                geom::dot(a, geom::cross(b, c)) / 6.0
            })
            .sum()
    }

    /// Directed edge counts keyed by unordered vertex pair.
    fn edge_uses(&self) -> HashMap<(usize, usize), (u32, u32)> {
        let mut edges: HashMap<(usize, usize), (u32, u32)> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let e = edges.entry((a.min(b), a.max(b))).or_default();
                if a < b {
                    e.0 += 1;
                } else {
                    e.1 += 1;
                }
            }
        }
        edges
    }

    pub fn edge_count(&self) -> usize {
        self.edge_uses().len()
    }

    /// V − E + F over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for f in &self.faces {
            for &v in f {
                used[v] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_count() as i64 + self.faces.len() as i64
    }

    /// Every edge is shared by exactly two faces traversing it in opposite
    /// directions.
    pub fn is_watertight(&self) -> bool {
        !self.faces.is_empty() && self.edge_uses().values().all(|&(a, b)| a == 1 && b == 1)
    }

    /// Drops faces with repeated indices or zero area.
    pub fn remove_degenerate_faces(&mut self) -> usize {
        let before = self.faces.len();
        let verts = &self.vertices;
        self.faces.retain(|f| {
            f[0] != f[1] && f[1] != f[2] && f[0] != f[2] && {
                let n = tri_cross(verts[f[0]], verts[f[1]], verts[f[2]]);
                geom::dot(n, n) > 0.0
            }
        });
        before - self.faces.len()
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.vertices.len().max(1) as f64;
        let s = self.vertices.iter().fold([0.0; 3], |acc, &v| geom::add(acc, v));
        geom::scale(s, 1.0 / n)
    }

    /// `n` points uniformly distributed over the surface by area.
    pub fn sample_surface<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec3>> {
        let mut cdf = Vec::with_capacity(self.faces.len());
        let mut acc = 0.0;
        for i in 0..self.faces.len() {
            acc += geom::norm(self.face_normal(i));
            cdf.push(acc);
        }
        if !(acc > 0.0) {
            return Err(CoreError::Empty("mesh surface"));
        }
        Ok((0..n)
            .map(|_| {
                let r = rng.gen::<f64>() * acc;
                let i = cdf.partition_point(|&c| c < r).min(cdf.len() - 1);
                let (a, b, c) = self.corners(&self.faces[i]);
                let (mut s, mut t) = (rng.gen::<f64>(), rng.gen::<f64>());
                if s + t > 1.0 {
                    s = 1.0 - s;
                    t = 1.0 - t;
                }
                geom::add(a, geom::add(geom::scale(geom::sub(b, a), s), geom::scale(geom::sub(c, a), t)))
            })
            .collect())
    }

    /// ASCII OBJ with 1-based indices. Coordinates are in model units.
    pub fn write_obj<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# {} vertices, {} faces", self.vertices.len(), self.faces.len())?;
        if let Some(mm) = self.mm_per_unit {
            writeln!(w, "# mm_per_unit {mm}")?;
        }
        for v in &self.vertices {
            writeln!(w, "v {:.9} {:.9} {:.9}", v[0], v[1], v[2])?;
        }
        write_obj_faces(&self.faces, &mut w)
    }

    pub fn save_obj(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_obj(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Reads the `v` and `f` records of an OBJ file (polygons are fanned).
    pub fn read_obj(text: &str) -> Result<Self> {
        let bad = |line: usize, why: &str| CoreError::Format {
            path: "<obj>".into(),
            reason: format!("line {}: {why}", line + 1),
        };
        let mut mesh = Self::default();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it.take(3).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(ln, "bad vertex"))?;
                    if c.len() != 3 {
                        return Err(bad(ln, "vertex needs 3 coordinates"));
                    }
                    mesh.vertices.push([c[0], c[1], c[2]]);
                }
                Some("f") => {
                    let idx: Vec<usize> = it
                        .map(|tok| tok.split('/').next().unwrap_or("").parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(ln, "bad face index"))?;
                    if idx.len() < 3 || idx.contains(&0) {
                        return Err(bad(ln, "face needs at least 3 positive indices"));
                    }
                    for k in 1..idx.len() - 1 {
                        mesh.faces.push([idx[0] - 1, idx[k] - 1, idx[k + 1] - 1]);
                    }
                }
                _ => {}
            }
        }
        mesh.validate()?;
        Ok(mesh)
    }
}

pub(crate) fn write_obj_faces<W: Write>(faces: &[[usize; 3]], w: &mut W) -> std::io::Result<()> {
    for f in faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}
