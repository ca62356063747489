//! Vertex propagation along the velocity field and projection back onto the
//! zero level set along the normalized SDF gradient.

use serde::{Deserialize, Serialize};

use super::velocity::VelocityField;
use crate::csdf::CsdfModel;
use crate::error::{CoreError, Result};
use crate::geom::{self, Vec3};

/// One explicit Euler step `x + v(x, t)`, index order preserved.
pub fn propagate_vertices(vertices: &[Vec3], field: &VelocityField, t: f64) -> Vec<Vec3> {
    let v = field.eval_many(vertices, t);
    vertices.iter().zip(v).map(|(&x, d)| geom::add(x, d)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub max_iterations: usize,
    /// A vertex is done once `|f| <` this.
    pub tolerance: f64,
    /// Gradients shorter than this are treated as degenerate.
    pub min_gradient: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            max_iterations: 3,
            tolerance: 1e-3,
            min_gradient: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignFlag {
    /// `‖∇f‖` below the threshold; the vertex was left where it was.
    DegenerateGradient,
    /// A step failed to reduce `|f|`; the vertex keeps its best position.
    NotContracting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignResult {
    pub vertices: Vec<Vec3>,
    pub flags: Vec<(usize, AlignFlag)>,
    /// `|f|` at each output vertex.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub mean_displacement: f64,
}

impl AlignResult {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_residual(&self) -> f64 {
        self.residuals.iter().sum::<f64>() / self.residuals.len().max(1) as f64
    }

    pub fn count(&self, flag: AlignFlag) -> usize {
        self.flags.iter().filter(|(_, f)| *f == flag).count()
    }
}

/// Iterated `x ← x − f ∇f / ‖∇f‖` for any field returning values and
/// gradients at a batch of points.
pub fn radial_align_with<F>(vertices: &[Vec3], cfg: &AlignConfig, mut field: F) -> Result<AlignResult>
where
    F: FnMut(&[Vec3]) -> (Vec<f64>, Vec<Vec3>),
{
    if vertices.is_empty() {
        return Err(CoreError::Empty("vertices"));
    }
    let mut x = vertices.to_vec();
    let mut flags: Vec<Option<AlignFlag>> = vec![None; x.len()];
    let (mut f, mut g) = field(&x);
    let mut iterations = 0;
    for _ in 0..cfg.max_iterations {
        let active: Vec<usize> = (0..x.len())
            .filter(|&i| flags[i].is_none() && f[i].abs() >= cfg.tolerance)
            .collect();
        if active.is_empty() {
            break;
        }
        iterations += 1;
        let mut moved = Vec::with_capacity(active.len());
        let mut targets = Vec::with_capacity(active.len());
        for &i in &active {
            let n = geom::norm(g[i]);
            if !(n >= cfg.min_gradient) {
                flags[i] = Some(AlignFlag::DegenerateGradient);
                continue;
            }
            moved.push(i);
            targets.push(geom::sub(x[i], geom::scale(g[i], f[i] / n)));
        }
        if moved.is_empty() {
            break;
        }
        let (nf, ng) = field(&targets);
        for (k, &i) in moved.iter().enumerate() {
            if !nf[k].is_finite() {
                return Err(CoreError::Numerical(format!("non-finite SDF at aligned vertex {i}")));
            }
            if nf[k].abs() < f[i].abs() {
                x[i] = targets[k];
                f[i] = nf[k];
                g[i] = ng[k];
            } else {
                flags[i] = Some(AlignFlag::NotContracting);
            }
        }
    }
    let mean_displacement =
        x.iter().zip(vertices).map(|(a, b)| geom::norm(geom::sub(*a, *b))).sum::<f64>() / x.len() as f64;
    Ok(AlignResult {
        residuals: f.iter().map(|v| v.abs()).collect(),
        flags: flags.iter().enumerate().filter_map(|(i, f)| f.map(|f| (i, f))).collect(),
        vertices: x,
        iterations,
        mean_displacement,
    })
}

/// Projects `vertices` onto the decoder's zero level set at latent `z`.
pub fn radial_align(model: &CsdfModel, z: &[f64], vertices: &[Vec3], cfg: &AlignConfig) -> Result<AlignResult> {
    model.check_latent(z)?;
    radial_align_with(vertices, cfg, |pts| model.eval_with_grad(z, pts))
}
