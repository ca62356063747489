use cardio_core::config::{build_id, RunConfig};
use cardio_core::metrics::report::{save_csv, save_json};
use cardio_core::metrics::{summarize, MetricReport, MetricSummary};
use cardio_core::render::{mask_scores, tto_shape, ProbeParams};
use cardio_core::shapegen::{Dataset, Mask, Split};
use cardio_core::CoreError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::model_io::load_bundle;
use crate::scoring::{create_dir, eval_grid, extract, initial_code, metric_note, partition_views, perturbed_probe, shape_errors};

#[derive(Clone, Debug, clap::Args)]
pub struct CrossViewArgs {
    /// Number of test subjects (default `eval.subjects`).
    #[arg(long)]
    pub subjects: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
struct SummaryRow {
    label: String,
    refined: bool,
    input_views: usize,
    #[serde(flatten)]
    summary: MetricSummary,
}

#[derive(Clone, Debug, Serialize)]
struct CrossViewReport {
    build: String,
    withheld_views: Vec<String>,
    input_views: Vec<Vec<String>>,
    subjects: Vec<u32>,
    aborted: Vec<String>,
    summary: Vec<SummaryRow>,
    rows: Vec<MetricReport>,
    config: serde_json::Value,
}

fn label(refined: bool, views: usize) -> String {
    let mode = if refined { "with-refinement" } else { "without-refinement" };
    format!("{mode}/{views}-view")
}

/// Scores shapes recovered from 1..n input views on views never shown to
/// the fitting, with and without the rendering-based refinement.
pub fn run(cfg: &RunConfig, args: &CrossViewArgs) -> Result<()> {
    let eval = &cfg.eval;
    if eval.withheld_views.is_empty() {
        return Err(CliError::Usage("eval.withheld_views is empty; cross-view scoring needs a withheld view".into()));
    }
    let ds = Dataset::load(&cfg.paths.dataset)?;
    let views = &ds.manifest.views;
    for name in &eval.withheld_views {
        if !views.iter().any(|v| &v.name == name) {
            return Err(CliError::Usage(format!("withheld view `{name}` is not in the dataset")));
        }
    }
    let (candidates, held) = partition_views(views, &eval.withheld_views);
    if eval.input_view_counts.is_empty() {
        return Err(CliError::Usage("eval.input_view_counts is empty".into()));
    }
    for &c in &eval.input_view_counts {
        if c == 0 || c > candidates.len() {
            return Err(CliError::Usage(format!(
                "cannot use {c} input views: {} are available besides the withheld ones",
                candidates.len()
            )));
        }
    }
    let n = args.subjects.unwrap_or(eval.subjects);
    let subjects: Vec<_> = ds.split(Split::Test).into_iter().take(n).collect();
    if subjects.is_empty() {
        return Err(CliError::Usage("no test subjects to evaluate".into()));
    }
    let bundle = load_bundle(&cfg.paths.checkpoint, cfg)?;
    let out = &cfg.paths.output;
    create_dir(out)?;
    let mm = ds.manifest.config.family.mm_per_unit;
    let grid = eval_grid(eval);
    let note = format!("{}; dice/iou: withheld views at the nominal pose", metric_note(eval));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    let mut aborted = Vec::new();

    for r in &subjects {
        let shape = ds.shape(r)?;
        let held_probes: Vec<ProbeParams> = held.iter().map(|&i| ProbeParams::from_view(&r.views[i])).collect();
        let held_masks: Vec<&Mask> = held.iter().map(|&i| &r.masks[i]).collect();
        for &c in &eval.input_view_counts {
            let inputs = &candidates[..c];
            let masks: Vec<&Mask> = inputs.iter().map(|&i| &r.masks[i]).collect();
            let probes: Vec<ProbeParams> = inputs
                .iter()
                .map(|&i| perturbed_probe(&r.views[i], eval.probe_rotation_deg, eval.probe_shift, &mut rng))
                .collect();
            let z0 = initial_code(&bundle, eval.latent_init, &masks)?;
            let fitted = tto_shape(&bundle.model, &z0, &masks, &probes, &cfg.tto, &mut rng)?;
            if let Some(msg) = &fitted.aborted {
                log::warn!("subject {} with {c} views: fitting aborted ({msg}); scoring the last finite state", r.id);
                aborted.push(format!("subject {} / {c} views: {msg}", r.id));
            }
            for (refined, z) in [(false, &z0), (true, &fitted.z)] {
                let (dice, iou) = mask_scores(&bundle.model, z, &held_probes, &held_masks);
                let mesh = extract(&bundle, z, &grid)?;
                let err = shape_errors(&bundle, z, &mesh, &shape, &r.samples, mm, eval, &mut rng)?;
                let k = dice.len() as f64;
                rows.push(MetricReport {
                    label: format!("{}/subject-{}", label(refined, c), r.id),
                    mae_mm: err.mae_mm,
                    rmse_mm: err.rmse_mm,
                    hd_mm: err.hd_mm,
                    cd_mm: err.cd_mm,
                    dice: dice.iter().sum::<f64>() / k,
                    iou: iou.iter().sum::<f64>() / k,
                    sdf_samples: err.sdf_samples,
                    surface_points: err.surface_points,
                    mask_views: dice.len(),
                    note: note.clone(),
                    config: serde_json::Value::Null,
                });
            }
            log::info!("subject {} / {c} views done", r.id);
        }
    }

    let mut summary = Vec::new();
    for &c in &eval.input_view_counts {
        for refined in [false, true] {
            let prefix = format!("{}/", label(refined, c));
            let group: Vec<MetricReport> = rows.iter().filter(|m| m.label.starts_with(&prefix)).cloned().collect();
            summary.push(SummaryRow {
                label: label(refined, c),
                refined,
                input_views: c,
                summary: summarize(&group)?,
            });
        }
    }
    let means: Vec<MetricReport> = summary
        .iter()
        .map(|s| {
            let [mae_mm, rmse_mm, hd_mm, cd_mm, dice, iou] = s.summary.mean;
            MetricReport {
                label: s.label.clone(),
                mae_mm,
                rmse_mm,
                hd_mm,
                cd_mm,
                dice,
                iou,
                sdf_samples: 0,
                surface_points: eval.surface_points,
                mask_views: held.len(),
                note: format!("mean over {} subjects; {note}", s.summary.count),
                config: serde_json::Value::Null,
            }
        })
        .collect();
    save_csv(&rows, out.join("crossview_subjects.csv"))?;
    save_csv(&means, out.join("crossview.csv"))?;
    for s in &summary {
        log::info!(
            "{}: withheld dice {:.4} ± {:.4}",
            s.label,
            s.summary.mean[4],
            s.summary.std[4]
        );
    }
    let report = CrossViewReport {
        build: build_id(),
        withheld_views: held.iter().map(|&i| views[i].name.clone()).collect(),
        input_views: eval
            .input_view_counts
            .iter()
            .map(|&c| candidates[..c].iter().map(|&i| views[i].name.clone()).collect())
            .collect(),
        subjects: subjects.iter().map(|r| r.id).collect(),
        aborted,
        summary,
        rows,
        config: cfg.echo(),
    };
    save_json(&report, out.join("crossview.json"))?;
    if !report.aborted.is_empty() {
        return Err(CliError::Core(CoreError::Numerical(format!(
            "{} fitting run(s) aborted on non-finite values",
            report.aborted.len()
        ))));
    }
    Ok(())
}
