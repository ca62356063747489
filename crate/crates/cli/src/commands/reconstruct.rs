use std::path::{Path, PathBuf};

use cardio_core::config::{build_id, RunConfig};
use cardio_core::metrics::report::{save_csv, save_json};
use cardio_core::metrics::MetricReport;
use cardio_core::motion::{tto_motion, Frame, FrameSequence, MotionStep, SequenceManifest};
use cardio_core::render::loss::{render_binary_mask, EVAL_ALPHA};
use cardio_core::render::{mask_scores, tto_shape_observed, DicePoint, LossPoint, ProbeParams, TtoResult};
use cardio_core::shapegen::{Dataset, Mask, ProbeView, ShapeRecord, Split};
use cardio_core::CoreError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::generate::{SequenceFile, SEQUENCE_FILE};
use crate::error::{CliError, Result};
use crate::model_io::{load_bundle, read_latent, Bundle};
use crate::scoring::{
    create_dir, eval_grid, extract, initial_code, metric_note, partition_views, perturbed_probe, shape_errors,
    write_mask, write_text,
};

#[derive(Clone, Debug, clap::Args)]
pub struct ReconstructArgs {
    /// Dataset record id to fit (default: the first test record).
    #[arg(long, conflicts_with = "sequence")]
    pub subject: Option<u32>,
    /// Directory holding `sequence.json` and its PGM masks; fits the whole
    /// cycle and writes one mesh per frame.
    #[arg(long)]
    pub sequence: Option<PathBuf>,
    /// Start from this latent (JSON array) instead of `eval.latent_init`.
    #[arg(long)]
    pub init_latent: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ViewScore {
    pub view: String,
    pub withheld: bool,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FitReport {
    pub steps: usize,
    pub aborted: Option<String>,
    pub fitted_views: Vec<String>,
    pub withheld_views: Vec<String>,
    /// Fitted views at the recovered probes, withheld views at the nominal pose.
    pub scores: Vec<ViewScore>,
    pub probes_input: Vec<ProbeParams>,
    pub probes_recovered: Vec<ProbeParams>,
    pub latent_init: Vec<f64>,
    pub latent: Vec<f64>,
    pub losses: Vec<LossPoint>,
    pub dice_history: Vec<DicePoint>,
}

#[derive(Clone, Debug, Serialize)]
struct ShapeReport {
    build: String,
    subject: u32,
    fit: FitReport,
    metrics: Option<MetricReport>,
    mesh: Option<String>,
    config: serde_json::Value,
}

#[derive(Clone, Debug, Serialize)]
struct FrameScores {
    frame: usize,
    time: f64,
    scores: Vec<ViewScore>,
}

#[derive(Clone, Debug, Serialize)]
struct SequenceReport {
    build: String,
    anchor: FitReport,
    frames: Vec<FrameScores>,
    latents: Vec<Vec<f64>>,
    motion_losses: Vec<MotionStep>,
    meshes: Option<SequenceManifest>,
    config: serde_json::Value,
}

pub fn run(cfg: &RunConfig, args: &ReconstructArgs) -> Result<()> {
    let bundle = load_bundle(&cfg.paths.checkpoint, cfg)?;
    let z_file = match &args.init_latent {
        Some(p) => Some(read_latent(p, bundle.model.latent_dim())?),
        None => None,
    };
    create_dir(&cfg.paths.output)?;
    match &args.sequence {
        Some(dir) => run_sequence(cfg, &bundle, dir, z_file),
        None => run_single(cfg, &bundle, args.subject, z_file),
    }
}

fn warn_missing_withheld(views: &[ProbeView], withheld: &[String]) {
    for name in withheld {
        if !views.iter().any(|v| &v.name == name) {
            log::warn!("withheld view `{name}` is not among the input views");
        }
    }
}

/// Runs the fitting on the `fit` views, dumping predicted masks when asked,
/// and scores every view afterwards.
#[allow(clippy::too_many_arguments)]
fn fit_views(
    cfg: &RunConfig,
    bundle: &Bundle,
    views: &[ProbeView],
    masks: &[&Mask],
    z_file: Option<Vec<f64>>,
    dump_dir: &Path,
    rng: &mut ChaCha8Rng,
) -> Result<(FitReport, TtoResult)> {
    let (fit, held) = partition_views(views, &cfg.eval.withheld_views);
    warn_missing_withheld(views, &cfg.eval.withheld_views);
    if fit.is_empty() {
        return Err(CliError::Usage("every view is withheld; nothing left to fit".into()));
    }
    let fit_masks: Vec<&Mask> = fit.iter().map(|&i| masks[i]).collect();
    let probes: Vec<ProbeParams> = fit
        .iter()
        .map(|&i| perturbed_probe(&views[i], cfg.eval.probe_rotation_deg, cfg.eval.probe_shift, rng))
        .collect();
    let z0 = match z_file {
        Some(z) => z,
        None => initial_code(bundle, cfg.eval.latent_init, &fit_masks)?,
    };
    let every = cfg.eval.dump_masks_every;
    if every > 0 {
        create_dir(dump_dir)?;
    }
    let mut dump_err = None;
    let res = tto_shape_observed(&bundle.model, &z0, &fit_masks, &probes, &cfg.tto, rng, |step, z, ps| {
        if every == 0 || dump_err.is_some() || (step % every != 0 && step != cfg.tto.steps) {
            return;
        }
        for (p, m) in ps.iter().zip(&fit_masks) {
            let pred = render_binary_mask(&bundle.model, z, p, m.height, m.width, EVAL_ALPHA);
            let path = dump_dir.join(format!("step_{step:06}_{}.pgm", p.name));
            if let Err(e) = write_mask(&path, &pred) {
                dump_err = Some(e);
                return;
            }
        }
    })?;
    if let Some(e) = dump_err {
        return Err(e);
    }

    let mut scores: Vec<ViewScore> = fit
        .iter()
        .zip(res.final_dice.iter().zip(&res.final_iou))
        .map(|(&i, (&dice, &iou))| ViewScore {
            view: views[i].name.clone(),
            withheld: false,
            dice,
            iou,
        })
        .collect();
    scores.extend(score_withheld(bundle, &res.z, views, masks, &held));
    let report = FitReport {
        steps: res.losses.len(),
        aborted: res.aborted.clone(),
        fitted_views: fit.iter().map(|&i| views[i].name.clone()).collect(),
        withheld_views: held.iter().map(|&i| views[i].name.clone()).collect(),
        scores,
        probes_input: probes,
        probes_recovered: res.probes.clone(),
        latent_init: z0,
        latent: res.z.clone(),
        losses: res.losses.clone(),
        dice_history: res.history.clone(),
    };
    Ok((report, res))
}

fn score_withheld(bundle: &Bundle, z: &[f64], views: &[ProbeView], masks: &[&Mask], held: &[usize]) -> Vec<ViewScore> {
    let probes: Vec<ProbeParams> = held.iter().map(|&i| ProbeParams::from_view(&views[i])).collect();
    let hm: Vec<&Mask> = held.iter().map(|&i| masks[i]).collect();
    let (dice, iou) = mask_scores(&bundle.model, z, &probes, &hm);
    held.iter()
        .zip(dice.into_iter().zip(iou))
        .map(|(&i, (dice, iou))| ViewScore {
            view: views[i].name.clone(),
            withheld: true,
            dice,
            iou,
        })
        .collect()
}

fn aborted_error(msg: &str) -> CliError {
    CliError::Core(CoreError::Numerical(format!("fitting aborted: {msg}")))
}

fn pick_record<'a>(ds: &'a Dataset, id: Option<u32>) -> Result<&'a ShapeRecord> {
    match id {
        Some(id) => ds
            .records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| CliError::Usage(format!("dataset has no record {id}"))),
        None => ds
            .split(Split::Test)
            .first()
            .copied()
            .ok_or_else(|| CliError::Usage("dataset has no test records; pass --subject".into())),
    }
}

fn run_single(cfg: &RunConfig, bundle: &Bundle, subject: Option<u32>, z_file: Option<Vec<f64>>) -> Result<()> {
    let ds = Dataset::load(&cfg.paths.dataset)?;
    let record = pick_record(&ds, subject)?;
    let out = &cfg.paths.output;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let masks: Vec<&Mask> = record.masks.iter().collect();
    let (fit, res) = fit_views(cfg, bundle, &record.views, &masks, z_file, &out.join("masks"), &mut rng)?;
    let latent_json = serde_json::to_string(&res.z).map_err(CoreError::from)?;
    write_text(&out.join("latent.json"), &(latent_json + "\n"))?;

    let mut report = ShapeReport {
        build: build_id(),
        subject: record.id,
        fit,
        metrics: None,
        mesh: None,
        config: cfg.echo(),
    };
    if let Some(msg) = &res.aborted {
        save_json(&report, out.join("report.json"))?;
        return Err(aborted_error(msg));
    }

    let mesh = extract(bundle, &res.z, &eval_grid(&cfg.eval))?;
    mesh.save_obj(out.join("mesh.obj"))?;
    report.mesh = Some("mesh.obj".into());
    let shape = ds.shape(record)?;
    let mm = ds.manifest.config.family.mm_per_unit;
    let err = shape_errors(bundle, &res.z, &mesh, &shape, &record.samples, mm, &cfg.eval, &mut rng)?;
    let scored: Vec<&ViewScore> = {
        let held: Vec<_> = report.fit.scores.iter().filter(|s| s.withheld).collect();
        if held.is_empty() {
            report.fit.scores.iter().collect()
        } else {
            held
        }
    };
    let n = scored.len() as f64;
    let which = if scored.iter().any(|s| s.withheld) { "withheld" } else { "fitted" };
    let metrics = MetricReport {
        label: format!("subject-{}", record.id),
        mae_mm: err.mae_mm,
        rmse_mm: err.rmse_mm,
        hd_mm: err.hd_mm,
        cd_mm: err.cd_mm,
        dice: scored.iter().map(|s| s.dice).sum::<f64>() / n,
        iou: scored.iter().map(|s| s.iou).sum::<f64>() / n,
        sdf_samples: err.sdf_samples,
        surface_points: err.surface_points,
        mask_views: scored.len(),
        note: format!("{}; dice/iou: mean over {which} views", metric_note(&cfg.eval)),
        config: serde_json::json!({ "build": build_id(), "run": cfg.echo() }),
    };
    save_csv(std::slice::from_ref(&metrics), out.join("metrics.csv"))?;
    save_json(&metrics, out.join("metrics.json"))?;
    report.metrics = Some(metrics);
    save_json(&report, out.join("report.json"))?;
    for s in &report.fit.scores {
        let role = if s.withheld { "withheld" } else { "fitted" };
        log::info!("{} ({role}): dice {:.4} iou {:.4}", s.view, s.dice, s.iou);
    }
    Ok(())
}

pub fn read_sequence(dir: &Path) -> Result<(SequenceFile, Vec<Vec<Mask>>)> {
    let path = dir.join(SEQUENCE_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    let seq: SequenceFile =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if seq.frames.is_empty() {
        return Err(CliError::Usage(format!("{} lists no frames", path.display())));
    }
    let mut frames = Vec::with_capacity(seq.frames.len());
    for (i, f) in seq.frames.iter().enumerate() {
        if f.masks.len() != seq.views.len() {
            return Err(CliError::Usage(format!(
                "frame {i} has {} masks for {} views",
                f.masks.len(),
                seq.views.len()
            )));
        }
        let masks = f
            .masks
            .iter()
            .map(|m| Mask::read_pgm(dir.join(m)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        frames.push(masks);
    }
    Ok((seq, frames))
}

fn run_sequence(cfg: &RunConfig, bundle: &Bundle, dir: &Path, z_file: Option<Vec<f64>>) -> Result<()> {
    let (seq, all_masks) = read_sequence(dir)?;
    let out = &cfg.paths.output;
    let build = build_id();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let first: Vec<&Mask> = all_masks[0].iter().collect();
    let (anchor, res) = fit_views(cfg, bundle, &seq.views, &first, z_file, &out.join("masks"), &mut rng)?;
    let mut report = SequenceReport {
        build: build.clone(),
        anchor,
        frames: Vec::new(),
        latents: Vec::new(),
        motion_losses: Vec::new(),
        meshes: None,
        config: cfg.echo(),
    };
    if let Some(msg) = &res.aborted {
        save_json(&report, out.join("report.json"))?;
        return Err(aborted_error(msg));
    }

    let (fit, held) = partition_views(&seq.views, &cfg.eval.withheld_views);
    let frames = FrameSequence {
        frames: seq
            .frames
            .iter()
            .zip(&all_masks)
            .map(|(f, m)| Frame {
                time: f.time,
                masks: fit.iter().map(|&i| m[i].clone()).collect(),
            })
            .collect(),
    };
    let motion = tto_motion(&bundle.model, &frames, &res.z, &res.probes, &cfg.motion, &mut rng)?;
    for (t, z) in motion.latents.iter().enumerate() {
        let masks: Vec<&Mask> = all_masks[t].iter().collect();
        let fm: Vec<&Mask> = fit.iter().map(|&i| masks[i]).collect();
        let (dice, iou) = mask_scores(&bundle.model, z, &res.probes, &fm);
        let mut scores: Vec<ViewScore> = fit
            .iter()
            .zip(dice.into_iter().zip(iou))
            .map(|(&i, (dice, iou))| ViewScore {
                view: seq.views[i].name.clone(),
                withheld: false,
                dice,
                iou,
            })
            .collect();
        scores.extend(score_withheld(bundle, z, &seq.views, &masks, &held));
        report.frames.push(FrameScores {
            frame: t,
            time: seq.frames[t].time,
            scores,
        });
    }
    report.latents = motion.latents.clone();
    report.motion_losses = motion.losses.clone();

    let mut mesh = motion.mesh;
    let mm = seq.mm_per_unit.unwrap_or(bundle.meta.mm_per_unit);
    mesh.mm_per_unit = Some(mm);
    let manifest = mesh.write_sequence(&out.join("sequence"), "frame", &build, cfg.echo())?;

    let mut vol = String::from("frame,time,volume,volume_ml,reference_volume,relative_error\n");
    let mut flags = String::from("frame,degenerate_vertices,non_contracting_vertices,max_residual,mean_residual\n");
    let ml = mm.powi(3) / 1000.0;
    for (i, s) in mesh.stats.iter().enumerate() {
        let reference = seq.frames[i].reference_volume;
        let (r, e) = match reference {
            Some(r) => (format!("{r:.8}"), format!("{:.6}", (s.volume - r) / r)),
            None => (String::new(), String::new()),
        };
        vol += &format!("{i},{:.6},{:.8},{:.6},{r},{e}\n", s.time, s.volume, s.volume * ml);
        flags += &format!(
            "{i},{},{},{:.6e},{:.6e}\n",
            s.degenerate_vertices, s.non_contracting_vertices, s.max_residual, s.mean_residual
        );
        if s.degenerate_vertices + s.non_contracting_vertices > 0 {
            log::warn!(
                "frame {i}: {} degenerate and {} non-contracting vertices (max residual {:.3e})",
                s.degenerate_vertices,
                s.non_contracting_vertices,
                s.max_residual
            );
        }
    }
    write_text(&out.join("volumes.csv"), &vol)?;
    write_text(&out.join("flagged_vertices.csv"), &flags)?;
    report.meshes = Some(manifest);
    save_json(&report, out.join("report.json"))?;
    log::info!("wrote {} frames to {}", mesh.frames.len(), out.join("sequence").display());
    Ok(())
}
