//! Checkpoint layout shared by `pretrain` and the fitting commands.

use std::path::Path;

use cardio_autodiff::Checkpoint;
use cardio_core::config::RunConfig;
use cardio_core::csdf::pretrain::mean_rows;
use cardio_core::csdf::{CsdfConfig, CsdfModel, EncoderConfig, MaskEncoder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// JSON stored in the checkpoint metadata block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub build: String,
    pub decoder: CsdfConfig,
    pub encoder: EncoderConfig,
    /// Dataset record ids, in the row order of `codes`.
    pub train_ids: Vec<u32>,
    pub mm_per_unit: f64,
    pub decoder_done: bool,
    pub encoder_done: bool,
    pub config: serde_json::Value,
}

pub struct Bundle {
    pub meta: CheckpointMeta,
    pub model: CsdfModel,
    pub codes: Vec<Vec<f64>>,
    pub encoder: Option<MaskEncoder>,
}

impl Bundle {
    pub fn mean_code(&self) -> Vec<f64> {
        mean_rows(&self.codes)
    }
}

pub fn read_checkpoint(path: &Path) -> Result<(Checkpoint, CheckpointMeta)> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&ck.metadata)
        .map_err(|e| CliError::Usage(format!("{} has unreadable metadata: {e}", path.display())))?;
    Ok((ck, meta))
}

/// Writes to a sibling temp file first so an interrupted save never leaves a
/// truncated checkpoint behind.
pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    ck.save(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(format!("moving checkpoint to {}", path.display()), e))
}

/// Loads a finished (or at least decoder-complete) checkpoint. The
/// architecture comes from the checkpoint; a run config asking for a
/// different latent size is an error rather than a silent reinterpretation.
pub fn load_bundle(path: &Path, cfg: &RunConfig) -> Result<Bundle> {
    let (ck, meta) = read_checkpoint(path)?;
    if meta.decoder.latent_dim != cfg.decoder.latent_dim {
        return Err(CliError::Usage(format!(
            "latent size mismatch: checkpoint {} has {} dimensions, config asks for {}",
            path.display(),
            meta.decoder.latent_dim,
            cfg.decoder.latent_dim
        )));
    }
    if meta.decoder != cfg.decoder {
        log::warn!("decoder settings differ from the config; using the checkpoint's");
    }
    if !meta.decoder_done {
        return Err(CliError::Usage(format!(
            "checkpoint {} holds an unfinished decoder stage; resume `pretrain` first",
            path.display()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = CsdfModel::new(meta.decoder.clone(), &mut rng)?;
    ck.load_module("decoder", &mut model)?;
    let codes_t = ck
        .get("codes")
        .ok_or_else(|| CliError::Usage(format!("checkpoint {} has no latent codes", path.display())))?;
    let codes: Vec<Vec<f64>> = codes_t.data().chunks(meta.decoder.latent_dim).map(<[f64]>::to_vec).collect();
    let encoder = if ck.get("encoder_trainer.step").is_some() {
        let mut enc = MaskEncoder::new(meta.encoder.clone(), meta.decoder.latent_dim, &mut rng)?;
        ck.load_module("encoder", &mut enc)?;
        if !meta.encoder_done {
            log::warn!("encoder stage in {} is unfinished", path.display());
        }
        Some(enc)
    } else {
        None
    };
    Ok(Bundle {
        meta,
        model,
        codes,
        encoder,
    })
}

/// Reads a latent code stored as a JSON array of numbers.
pub fn read_latent(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    let z: Vec<f64> = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{} is not a JSON array of numbers: {e}", path.display())))?;
    if z.len() != expected {
        return Err(CliError::Usage(format!(
            "latent size mismatch: {} holds {} values, the decoder expects {expected}",
            path.display(),
            z.len()
        )));
    }
    Ok(z)
}
