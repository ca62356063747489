use std::path::{Path, PathBuf};

use cardio_core::config::{build_id, RunConfig};
use cardio_core::shapegen::dataset::{draw_weights, export_masks_pgm, shape_rng};
use cardio_core::shapegen::{generate_dataset, generate_shape, slice_to_mask, Dataset, ModeWeights, ProbeView};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::scoring::{create_dir, write_mask};

pub const SEQUENCE_FILE: &str = "sequence.json";

#[derive(Clone, Debug, clap::Args)]
pub struct GenerateArgs {
    /// Also export every mask as PGM under `<dataset>/pgm`.
    #[arg(long)]
    pub pgm: bool,
    /// Write a synthetic contracting sequence with this many frames.
    #[arg(long, value_name = "T")]
    pub sequence_frames: Option<usize>,
    /// Peak linear contraction of the sequence, as a fraction of the size.
    #[arg(long, default_value_t = 0.15)]
    pub sequence_amplitude: f64,
    /// Where the sequence goes (default `<dataset>/sequence`).
    #[arg(long)]
    pub sequence_dir: Option<PathBuf>,
}

/// Input of `reconstruct --sequence`: per-frame masks on fixed probes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceFile {
    #[serde(default)]
    pub build: String,
    pub views: Vec<ProbeView>,
    #[serde(default)]
    pub mm_per_unit: Option<f64>,
    pub frames: Vec<SequenceFrame>,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceFrame {
    pub time: f64,
    /// PGM paths relative to the sequence file, one per view.
    pub masks: Vec<String>,
    #[serde(default)]
    pub reference_volume: Option<f64>,
}

pub fn run(cfg: &RunConfig, args: &GenerateArgs) -> Result<()> {
    let dir = &cfg.paths.dataset;
    let build = build_id();
    let manifest = generate_dataset(&cfg.dataset, dir, &build)?;
    log::info!(
        "wrote {} records ({} train, {} test) to {}",
        manifest.records.len(),
        manifest.train_count,
        manifest.test_count,
        dir.display()
    );
    if args.pgm {
        let ds = Dataset::load(dir)?;
        for r in &ds.records {
            export_masks_pgm(r, &dir.join("pgm"))?;
        }
    }
    if let Some(frames) = args.sequence_frames {
        let seq_dir = args.sequence_dir.clone().unwrap_or_else(|| dir.join("sequence"));
        write_sequence(cfg, frames, args.sequence_amplitude, &seq_dir)?;
        log::info!("wrote a {frames}-frame sequence to {}", seq_dir.display());
    }
    Ok(())
}

/// Scale factor of frame `i` of `t`: 1 at end-diastole, `1 - amplitude`
/// half-way through the cycle.
pub fn contraction(i: usize, t: usize, amplitude: f64) -> f64 {
    let phase = std::f64::consts::TAU * i as f64 / t as f64;
    1.0 - amplitude * 0.5 * (1.0 - phase.cos())
}

/// A shape outside the dataset scaled uniformly about the origin over the
/// cycle. Scaling the shape by `s` is the same as slicing the original with
/// the plane scale and offset divided by `s`, so the masks stay exact and the
/// reference volume is `s³ V`.
pub fn write_sequence(cfg: &RunConfig, frames: usize, amplitude: f64, dir: &Path) -> Result<SequenceFile> {
    if frames == 0 {
        return Err(CliError::Usage("a sequence needs at least one frame".into()));
    }
    if !(0.0..1.0).contains(&amplitude) {
        return Err(CliError::Usage(format!("sequence amplitude {amplitude} must be in [0, 1)")));
    }
    let ds = &cfg.dataset;
    let index = ds.count as u64;
    let weights: ModeWeights = draw_weights(ds.family.modes, &mut shape_rng(ds.seed, index));
    let shape = generate_shape(&weights, &ds.family)?;
    let views = ds.views();
    create_dir(dir)?;
    let mut out = Vec::with_capacity(frames);
    for i in 0..frames {
        let s = contraction(i, frames, amplitude);
        let mut files = Vec::with_capacity(views.len());
        for v in &views {
            let scaled = ProbeView {
                scale: v.scale / s,
                translation: v.translation.map(|x| x / s),
                ..v.clone()
            };
            let mask = slice_to_mask(&shape, &scaled, ds.resolution, ds.resolution)?;
            let name = format!("frame_{i:03}_{}.pgm", v.name);
            write_mask(&dir.join(&name), &mask)?;
            files.push(name);
        }
        out.push(SequenceFrame {
            time: i as f64 / frames as f64,
            masks: files,
            reference_volume: Some(shape.volume() * s.powi(3)),
        });
    }
    let seq = SequenceFile {
        build: build_id(),
        views,
        mm_per_unit: Some(ds.family.mm_per_unit),
        frames: out,
        config: serde_json::json!({ "dataset": ds, "amplitude": amplitude, "weights": weights }),
    };
    cardio_core::metrics::report::save_json(&seq, dir.join(SEQUENCE_FILE))?;
    Ok(seq)
}
