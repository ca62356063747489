use std::path::PathBuf;

use cardio_core::config::{build_id, RunConfig};
use cardio_core::metrics::report::{save_csv, save_json};
use cardio_core::metrics::{chamfer, dice_iou, hausdorff, summarize, MetricReport, MetricSummary, TriangleMesh, CSV_COLUMNS};
use cardio_core::shapegen::Mask;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::scoring::{create_dir, write_text};

#[derive(Clone, Debug, clap::Args)]
pub struct MetricsArgs {
    /// Metric reports (`metrics.json` from `reconstruct`) to aggregate.
    #[arg(long, num_args = 1.., conflicts_with_all = ["pred", "gt"])]
    pub reports: Vec<PathBuf>,
    /// Predicted mesh (OBJ).
    #[arg(long, requires = "gt")]
    pub pred: Option<PathBuf>,
    /// Reference mesh (OBJ).
    #[arg(long, requires = "pred")]
    pub gt: Option<PathBuf>,
    /// Predicted and reference PGM masks, alternating.
    #[arg(long, num_args = 2.., value_name = "PRED GT")]
    pub masks: Vec<PathBuf>,
    /// Millimetres per model unit for the mesh distances.
    #[arg(long, default_value_t = 1.0)]
    pub mm_per_unit: f64,
    /// Row label in the output files.
    #[arg(long, default_value = "comparison")]
    pub label: String,
}

#[derive(Clone, Debug, Serialize)]
struct MeshComparison {
    build: String,
    label: String,
    hd_mm: Option<f64>,
    cd_mm: Option<f64>,
    chamfer_squared: bool,
    pred_volume: Option<f64>,
    gt_volume: Option<f64>,
    dice: Option<f64>,
    iou: Option<f64>,
    mask_pairs: usize,
    surface_points: usize,
    config: serde_json::Value,
}

#[derive(Clone, Debug, Serialize)]
struct Aggregate {
    build: String,
    columns: [&'static str; 6],
    summary: MetricSummary,
    reports: Vec<MetricReport>,
    config: serde_json::Value,
}

pub fn run(cfg: &RunConfig, args: &MetricsArgs) -> Result<()> {
    let out = &cfg.paths.output;
    if !args.reports.is_empty() {
        create_dir(out)?;
        return aggregate(cfg, args);
    }
    if args.pred.is_none() && args.masks.is_empty() {
        return Err(CliError::Usage("nothing to score: pass --reports, --pred/--gt or --masks".into()));
    }
    if args.masks.len() % 2 != 0 {
        return Err(CliError::Usage("--masks takes predicted/reference pairs".into()));
    }
    if !(args.mm_per_unit > 0.0) {
        return Err(CliError::Usage("--mm-per-unit must be positive".into()));
    }
    create_dir(out)?;
    let eval = &cfg.eval;
    let mut cmp = MeshComparison {
        build: build_id(),
        label: args.label.clone(),
        hd_mm: None,
        cd_mm: None,
        chamfer_squared: eval.squared_chamfer,
        pred_volume: None,
        gt_volume: None,
        dice: None,
        iou: None,
        mask_pairs: args.masks.len() / 2,
        surface_points: eval.surface_points,
        config: cfg.echo(),
    };
    if let (Some(p), Some(g)) = (&args.pred, &args.gt) {
        let read = |path: &PathBuf| -> Result<TriangleMesh> {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
            Ok(TriangleMesh::read_obj(&text)?)
        };
        let (a, b) = (read(p)?, read(g)?);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pa = a.sample_surface(eval.surface_points, &mut rng)?;
        let pb = b.sample_surface(eval.surface_points, &mut rng)?;
        let mm = args.mm_per_unit;
        let cd_scale = if eval.squared_chamfer { mm * mm } else { mm };
        cmp.hd_mm = Some(hausdorff(&pa, &pb)? * mm);
        cmp.cd_mm = Some(chamfer(&pa, &pb, eval.squared_chamfer)? * cd_scale);
        cmp.pred_volume = Some(a.volume());
        cmp.gt_volume = Some(b.volume());
    }
    if !args.masks.is_empty() {
        let (mut d, mut j) = (0.0, 0.0);
        for pair in args.masks.chunks(2) {
            let (dice, iou) = dice_iou(&Mask::read_pgm(&pair[0])?, &Mask::read_pgm(&pair[1])?)?;
            d += dice;
            j += iou;
        }
        let n = cmp.mask_pairs as f64;
        cmp.dice = Some(d / n);
        cmp.iou = Some(j / n);
    }
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    let csv = format!(
        "label,hd_mm,cd_mm,dice,iou,pred_volume,gt_volume\n{},{},{},{},{},{},{}\n",
        cmp.label,
        cell(cmp.hd_mm),
        cell(cmp.cd_mm),
        cell(cmp.dice),
        cell(cmp.iou),
        cell(cmp.pred_volume),
        cell(cmp.gt_volume)
    );
    write_text(&out.join("metrics.csv"), &csv)?;
    save_json(&cmp, out.join("metrics.json"))?;
    log::info!(
        "{}: hd {} cd {} dice {} iou {}",
        cmp.label,
        cell(cmp.hd_mm),
        cell(cmp.cd_mm),
        cell(cmp.dice),
        cell(cmp.iou)
    );
    Ok(())
}

fn aggregate(cfg: &RunConfig, args: &MetricsArgs) -> Result<()> {
    let mut reports = Vec::with_capacity(args.reports.len());
    for p in &args.reports {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::io(format!("reading {}", p.display()), e))?;
        let r: MetricReport =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{} is not a metric report: {e}", p.display())))?;
        r.validate()?;
        reports.push(r);
    }
    let summary = summarize(&reports)?;
    let out = &cfg.paths.output;
    let mut rows = reports.clone();
    for (label, vals) in [("mean", summary.mean), ("std", summary.std)] {
        let [mae_mm, rmse_mm, hd_mm, cd_mm, dice, iou] = vals;
        rows.push(MetricReport {
            label: label.into(),
            mae_mm,
            rmse_mm,
            hd_mm,
            cd_mm,
            dice,
            iou,
            sdf_samples: 0,
            surface_points: 0,
            mask_views: 0,
            note: String::new(),
            config: serde_json::Value::Null,
        });
    }
    save_csv(&rows, out.join("summary.csv"))?;
    save_json(
        &Aggregate {
            build: build_id(),
            columns: CSV_COLUMNS,
            summary,
            reports,
            config: cfg.echo(),
        },
        out.join("summary.json"),
    )?;
    Ok(())
}
