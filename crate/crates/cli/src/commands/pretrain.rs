use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use cardio_autodiff::Checkpoint;
use cardio_core::config::{build_id, RunConfig};
use cardio_core::csdf::pretrain::{write_log_csv, DecoderTrainer, EncoderTrainer};
use cardio_core::csdf::{CsdfModel, LossTerms, MaskEncoder};
use cardio_core::shapegen::{Dataset, ShapeRecord, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, Result};
use crate::model_io::{read_checkpoint, write_checkpoint, CheckpointMeta};
use crate::scoring::create_dir;

#[derive(Clone, Debug, clap::Args)]
pub struct PretrainArgs {
    /// Continue from the checkpoint at `paths.checkpoint` if it exists.
    #[arg(long)]
    pub resume: bool,
    /// Save a resumable checkpoint every this many steps.
    #[arg(long, default_value_t = 250)]
    pub save_every: usize,
    /// Train only the decoder and codes.
    #[arg(long)]
    pub no_encoder: bool,
}

/// Each stage and step gets its own stream so a resumed run draws the same
/// batches as an uninterrupted one.
fn step_rng(seed: u64, stage: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage << 32 | step as u64);
    rng
}

struct Logs {
    decoder: PathBuf,
    encoder: PathBuf,
}

impl Logs {
    fn new(out: &Path) -> Self {
        Self {
            decoder: out.join("decoder_log.csv"),
            encoder: out.join("encoder_log.csv"),
        }
    }

    /// Appends rows, writing the header when the file is new or was reset.
    fn append(path: &Path, rows: &[LossTerms]) -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let fresh = !path.exists();
        let mut buf = Vec::new();
        write_log_csv(rows, &mut buf).map_err(|e| CliError::io("formatting log", e))?;
        let body = if fresh {
            &buf[..]
        } else {
            let header_end = buf.iter().position(|&b| b == b'\n').map_or(0, |i| i + 1);
            &buf[header_end..]
        };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CliError::io(format!("opening {}", path.display()), e))?;
        f.write_all(body).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
    }

    fn reset(&self) -> Result<()> {
        for p in [&self.decoder, &self.encoder] {
            if p.exists() {
                std::fs::remove_file(p).map_err(|e| CliError::io(format!("removing {}", p.display()), e))?;
            }
        }
        Ok(())
    }
}

pub fn run(cfg: &RunConfig, args: &PretrainArgs) -> Result<()> {
    if args.save_every == 0 {
        return Err(CliError::Usage("--save-every must be positive".into()));
    }
    let ds = Dataset::load(&cfg.paths.dataset)?;
    if ds.manifest.config.resolution != cfg.encoder.resolution {
        return Err(CliError::Usage(format!(
            "dataset masks are {}px but the encoder expects {}px",
            ds.manifest.config.resolution, cfg.encoder.resolution
        )));
    }
    let records: Vec<&ShapeRecord> = ds.split(Split::Train);
    if records.is_empty() {
        return Err(CliError::Usage("dataset has no training records".into()));
    }
    let ids: Vec<u32> = records.iter().map(|r| r.id).collect();
    let pcfg = &cfg.pretrain;
    let ck_path = &cfg.paths.checkpoint;
    create_dir(&cfg.paths.output)?;
    let logs = Logs::new(&cfg.paths.output);

    let mut meta = CheckpointMeta {
        build: build_id(),
        decoder: cfg.decoder.clone(),
        encoder: cfg.encoder.clone(),
        train_ids: ids.clone(),
        mm_per_unit: ds.manifest.config.family.mm_per_unit,
        decoder_done: false,
        encoder_done: false,
        config: cfg.echo(),
    };

    let resumed = if args.resume && ck_path.exists() {
        let (ck, old) = read_checkpoint(ck_path)?;
        if old.train_ids != ids {
            return Err(CliError::Usage("checkpoint was trained on a different set of records".into()));
        }
        if old.decoder != cfg.decoder {
            return Err(CliError::Usage("checkpoint decoder settings differ from the config".into()));
        }
        Some(ck)
    } else {
        logs.reset()?;
        None
    };

    let mut dec = match &resumed {
        Some(ck) => {
            let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed);
            DecoderTrainer::load_from(ck, CsdfModel::new(cfg.decoder.clone(), &mut rng)?)?
        }
        None => {
            let mut rng = step_rng(pcfg.seed, 0, 0);
            let model = CsdfModel::new(cfg.decoder.clone(), &mut rng)?;
            DecoderTrainer::new(model, records.len(), pcfg.latent_init_std, &mut rng)?
        }
    };
    let mut enc: Option<EncoderTrainer> = match &resumed {
        Some(ck) if ck.get("encoder_trainer.step").is_some() => {
            let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed);
            let e = MaskEncoder::new(cfg.encoder.clone(), cfg.decoder.latent_dim, &mut rng)?;
            Some(EncoderTrainer::load_from(ck, e)?)
        }
        _ => None,
    };
    if resumed.is_some() {
        log::info!(
            "resuming at decoder step {} / encoder step {}",
            dec.step,
            enc.as_ref().map_or(0, |e| e.step)
        );
    }

    let save = |meta: &CheckpointMeta, dec: &DecoderTrainer, enc: Option<&EncoderTrainer>| -> Result<()> {
        let json = serde_json::to_string(meta).map_err(|e| CliError::Config(e.to_string()))?;
        let mut ck = Checkpoint::new(json);
        dec.save_into(&mut ck);
        if let Some(e) = enc {
            e.save_into(&mut ck);
        }
        write_checkpoint(ck_path, &ck)
    };

    let mut pending = Vec::new();
    while dec.step < pcfg.decoder_steps {
        let mut rng = step_rng(pcfg.seed, 1, dec.step);
        pending.push(dec.train_step(&records, pcfg, &mut rng)?);
        if dec.step % args.save_every == 0 || dec.step == pcfg.decoder_steps {
            meta.decoder_done = dec.step == pcfg.decoder_steps;
            save(&meta, &dec, enc.as_ref())?;
            Logs::append(&logs.decoder, &pending)?;
            let last = pending.last().expect("non-empty");
            log::info!("decoder step {} l1 {:.5} reg {:.3e}", dec.step, last.l1, last.reg);
            pending.clear();
        }
    }
    meta.decoder_done = true;
    let final_l1 = training_l1(&dec, &records, pcfg.l1_target);
    log::info!("decoder done; training L1 {final_l1:.5} (target {})", pcfg.l1_target);

    if !args.no_encoder && pcfg.encoder_steps > 0 {
        let mut et = match enc.take() {
            Some(e) => e,
            None => {
                let mut rng = step_rng(pcfg.seed, 2, 0);
                EncoderTrainer::new(MaskEncoder::new(cfg.encoder.clone(), cfg.decoder.latent_dim, &mut rng)?)
            }
        };
        while et.step < pcfg.encoder_steps {
            let mut rng = step_rng(pcfg.seed, 3, et.step);
            pending.push(et.train_step(&dec.model, &records, pcfg, &mut rng)?);
            if et.step % args.save_every == 0 || et.step == pcfg.encoder_steps {
                meta.encoder_done = et.step == pcfg.encoder_steps;
                save(&meta, &dec, Some(&et))?;
                Logs::append(&logs.encoder, &pending)?;
                let last = pending.last().expect("non-empty");
                log::info!("encoder step {} l1 {:.5}", et.step, last.l1);
                pending.clear();
            }
        }
        meta.encoder_done = true;
        enc = Some(et);
    }
    save(&meta, &dec, enc.as_ref())?;
    log::info!("checkpoint written to {}", ck_path.display());
    Ok(())
}

/// Clamped L1 of the learned codes over every training sample, warning when
/// it misses the configured target.
fn training_l1(dec: &DecoderTrainer, records: &[&ShapeRecord], target: f64) -> f64 {
    let l1 = records
        .iter()
        .enumerate()
        .map(|(i, r)| cardio_core::csdf::sdf_l1(&dec.model, dec.code(i), &r.samples))
        .sum::<f64>()
        / records.len() as f64;
    if l1 > target {
        log::warn!("training L1 {l1:.5} is above the target {target}");
    }
    l1
}
