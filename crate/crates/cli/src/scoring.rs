//! Probe perturbation, initial codes and 3-D error metrics shared by the
//! fitting commands.

use std::path::Path;

use cardio_core::config::{EvalConfig, LatentInit};
use cardio_core::geom;
use cardio_core::metrics::{chamfer, hausdorff, marching_cubes, marching_cubes_fn, sdf_errors, Grid, TriangleMesh, METRIC_NOTE};
use cardio_core::render::ProbeParams;
use cardio_core::shapegen::sampling::random_direction;
use cardio_core::shapegen::{AnalyticShape, Mask, ProbeView, SdfSample};
use cardio_core::CoreError;
use rand::Rng;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::model_io::Bundle;

/// Nominal probe moved by `deg` degrees about a random axis and `shift`
/// along a random direction.
pub fn perturbed_probe<R: Rng + ?Sized>(view: &ProbeView, deg: f64, shift: f64, rng: &mut R) -> ProbeParams {
    let p = ProbeParams::from_view(view);
    if deg == 0.0 && shift == 0.0 {
        return p;
    }
    let axis = random_direction(rng);
    let dir = random_direction(rng);
    p.perturbed(geom::scale(axis, deg.to_radians()), geom::scale(dir, shift))
}

pub fn initial_code(bundle: &Bundle, init: LatentInit, masks: &[&Mask]) -> Result<Vec<f64>> {
    match init {
        LatentInit::MeanCode => Ok(bundle.mean_code()),
        LatentInit::Encoder => {
            let enc = bundle.encoder.as_ref().ok_or_else(|| {
                CliError::Usage("checkpoint has no trained encoder; set eval.latent_init = \"mean-code\"".into())
            })?;
            Ok(enc.encode_masks(masks)?)
        }
    }
}

/// Names of `views` split into (fitted, withheld) index lists.
pub fn partition_views(views: &[ProbeView], withheld: &[String]) -> (Vec<usize>, Vec<usize>) {
    (0..views.len()).partition(|&i| !withheld.contains(&views[i].name))
}

pub fn eval_grid(eval: &EvalConfig) -> Grid {
    Grid::cube(eval.grid_resolution, 1.0)
}

pub fn extract(bundle: &Bundle, z: &[f64], grid: &Grid) -> Result<TriangleMesh> {
    marching_cubes(&bundle.model, z, grid)?
        .ok_or_else(|| CliError::Core(CoreError::Numerical("the fitted shape has no surface inside the grid".into())))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShapeErrors {
    pub mae_mm: f64,
    pub rmse_mm: f64,
    pub hd_mm: f64,
    pub cd_mm: f64,
    pub sdf_samples: usize,
    pub surface_points: usize,
}

/// SDF errors at the reference samples (targets clamped to the decoder's
/// truncation band) and surface distances to the analytic shape.
#[allow(clippy::too_many_arguments)]
pub fn shape_errors<R: Rng + ?Sized>(
    bundle: &Bundle,
    z: &[f64],
    pred_mesh: &TriangleMesh,
    shape: &AnalyticShape,
    samples: &[SdfSample],
    mm: f64,
    eval: &EvalConfig,
    rng: &mut R,
) -> Result<ShapeErrors> {
    let delta = bundle.model.config.delta;
    let pts: Vec<_> = samples.iter().map(|s| s.point).collect();
    let gt: Vec<f64> = samples.iter().map(|s| s.distance.clamp(-delta, delta)).collect();
    let (mae, rmse) = sdf_errors(&bundle.model.eval_many(z, &pts), &gt, mm)?;
    let grid = eval_grid(eval);
    let gt_mesh = marching_cubes_fn(&grid, |p| shape.sdf(p))?
        .ok_or_else(|| CliError::Usage("reference shape does not fit inside the evaluation grid".into()))?;
    let a = pred_mesh.sample_surface(eval.surface_points, rng)?;
    let b = gt_mesh.sample_surface(eval.surface_points, rng)?;
    let cd_scale = if eval.squared_chamfer { mm * mm } else { mm };
    Ok(ShapeErrors {
        mae_mm: mae,
        rmse_mm: rmse,
        hd_mm: hausdorff(&a, &b)? * mm,
        cd_mm: chamfer(&a, &b, eval.squared_chamfer)? * cd_scale,
        sdf_samples: samples.len(),
        surface_points: eval.surface_points,
    })
}

pub fn metric_note(eval: &EvalConfig) -> String {
    if eval.squared_chamfer {
        METRIC_NOTE.replace("chamfer not squared", "chamfer squared, in mm^2")
    } else {
        METRIC_NOTE.to_string()
    }
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| CliError::io(format!("creating {}", path.display()), e))?;
    mask.write_pgm(std::io::BufWriter::new(f))
        .map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}
