//! Run configuration covering every stage, and the build identifier stamped
//! into output artifacts.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::csdf::{CsdfConfig, EncoderConfig, PretrainConfig};
use crate::error::{CoreError, Result};
use crate::motion::MotionConfig;
use crate::render::TtoConfig;
use crate::shapegen::DatasetConfig;

/// `<crate version>+<git hash>`.
pub fn build_id() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("CARDIO_GIT_HASH"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            checkpoint: PathBuf::from("model.ckpt"),
            output: PathBuf::from("out"),
        }
    }
}

/// Where the fitting starts from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentInit {
    /// Encoder prediction from the input masks.
    #[default]
    Encoder,
    /// Mean of the training codes.
    MeanCode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub latent_init: LatentInit,
    /// Points sampled on each surface for chamfer and Hausdorff distances.
    pub surface_points: usize,
    pub grid_resolution: usize,
    pub squared_chamfer: bool,
    /// Views excluded from fitting and scored separately.
    pub withheld_views: Vec<String>,
    /// Input-view counts compared by the cross-view evaluation.
    pub input_view_counts: Vec<usize>,
    /// Rotation (degrees) and translation applied to the probes handed to
    /// fitting, as a stand-in for imperfect acquisition.
    pub probe_rotation_deg: f64,
    pub probe_shift: f64,
    /// Held-out shapes evaluated by `eval-crossview`.
    pub subjects: usize,
    /// PGM dumps of predicted masks every this many fitting steps (0 = off).
    pub dump_masks_every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            latent_init: LatentInit::Encoder,
            surface_points: 10_000,
            grid_resolution: 64,
            squared_chamfer: false,
            withheld_views: vec!["a2c".to_string()],
            input_view_counts: vec![1, 2],
            probe_rotation_deg: 5.0,
            probe_shift: 0.05,
            subjects: 5,
            dump_masks_every: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub dataset: DatasetConfig,
    pub decoder: CsdfConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub tto: TtoConfig,
    pub motion: MotionConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.decoder.validate()?;
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.tto.validate()?;
        self.motion.validate()?;
        if self.eval.surface_points == 0 {
            return Err(CoreError::Config("eval.surface_points must be positive".into()));
        }
        if self.encoder.resolution != self.dataset.resolution {
            return Err(CoreError::Config(format!(
                "encoder resolution {} differs from dataset resolution {}",
                self.encoder.resolution, self.dataset.resolution
            )));
        }
        Ok(())
    }

    /// The resolved config as JSON, for embedding in artifacts.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}
