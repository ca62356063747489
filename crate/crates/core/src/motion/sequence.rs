//! Frame sequences and the topology-locked mesh sequence.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geom::Vec3;
use crate::metrics::mesh::write_obj_faces;
use crate::metrics::TriangleMesh;
use crate::shapegen::Mask;

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Normalized time in `[0, 1]`; frame 0 is the anchor.
    pub time: f64,
    pub masks: Vec<Mask>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Frame>,
}

impl FrameSequence {
    /// `T` frames at times `i / T`.
    pub fn uniform(masks: Vec<Vec<Mask>>) -> Self {
        let t = masks.len() as f64;
        Self {
            frames: masks
                .into_iter()
                .enumerate()
                .map(|(i, m)| Frame {
                    time: i as f64 / t,
                    masks: m,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.time).collect()
    }

    pub fn validate(&self, views: usize) -> Result<()> {
        if self.frames.is_empty() {
            return Err(CoreError::Empty("frame sequence"));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if !(0.0..=1.0).contains(&f.time) {
                return Err(CoreError::Config(format!("frame {i} time {} is outside [0, 1]", f.time)));
            }
            if i > 0 && !(f.time > self.frames[i - 1].time) {
                return Err(CoreError::Config(format!("frame {i} time does not increase")));
            }
            if f.masks.len() != views {
                return Err(CoreError::ShapeMismatch(format!(
                    "frame {i} has {} masks for {views} probes",
                    f.masks.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub time: f64,
    pub volume: f64,
    pub max_residual: f64,
    pub mean_residual: f64,
    pub degenerate_vertices: usize,
    pub non_contracting_vertices: usize,
}

/// One face list, per-frame vertex positions in correspondence.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagatedMesh {
    pub faces: Vec<[usize; 3]>,
    pub frames: Vec<Vec<Vec3>>,
    pub stats: Vec<FrameStats>,
    pub mm_per_unit: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceFrameEntry {
    pub index: usize,
    pub file: String,
    #[serde(flatten)]
    pub stats: FrameStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub build: String,
    pub vertex_count: usize,
    pub face_count: usize,
    pub mm_per_unit: Option<f64>,
    pub frames: Vec<SequenceFrameEntry>,
    pub config: serde_json::Value,
}

impl PropagatedMesh {
    pub fn frame_mesh(&self, i: usize) -> TriangleMesh {
        TriangleMesh {
            vertices: self.frames[i].clone(),
            faces: self.faces.clone(),
            mm_per_unit: self.mm_per_unit,
        }
    }

    pub fn volumes(&self) -> Vec<f64> {
        (0..self.frames.len()).map(|i| self.frame_mesh(i).volume()).collect()
    }

    /// Writes `<stem>_NNN.obj` per frame (identical face blocks) and
    /// `<stem>_sequence.json`.
    pub fn write_sequence(&self, dir: &Path, stem: &str, build: &str, config: serde_json::Value) -> Result<SequenceManifest> {
        std::fs::create_dir_all(dir)?;
        let mut faces = Vec::new();
        write_obj_faces(&self.faces, &mut faces)?;
        let mut entries = Vec::with_capacity(self.frames.len());
        for (i, verts) in self.frames.iter().enumerate() {
            let file = format!("{stem}_{i:03}.obj");
            let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(&file))?);
            writeln!(w, "# frame {i} time {}", self.stats[i].time)?;
            for v in verts {
                writeln!(w, "v {:.9} {:.9} {:.9}", v[0], v[1], v[2])?;
            }
            w.write_all(&faces)?;
            w.flush()?;
            entries.push(SequenceFrameEntry {
                index: i,
                file,
                stats: self.stats[i].clone(),
            });
        }
        let manifest = SequenceManifest {
            build: build.to_string(),
            vertex_count: self.frames.first().map_or(0, Vec::len),
            face_count: self.faces.len(),
            mm_per_unit: self.mm_per_unit,
            frames: entries,
            config,
        };
        std::fs::write(
            dir.join(format!("{stem}_sequence.json")),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(manifest)
    }
}

/// `Σ |v_{i+1} − v_i|`.
pub fn total_variation(values: &[f64]) -> f64 {
    values.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}
