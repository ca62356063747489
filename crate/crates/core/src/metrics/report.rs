//! Evaluation reports in JSON and CSV.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Column order of CSV rows.
pub const CSV_COLUMNS: [&str; 6] = ["mae_mm", "rmse_mm", "hd_mm", "cd_mm", "dice", "iou"];

/// Recorded in every report: MAE and RMSE are SDF-value errors at reference
/// samples, HD and CD are surface point-cloud distances.
pub const METRIC_NOTE: &str =
    "mae/rmse: SDF value error at reference samples; hd/cd: distances between surface point clouds (chamfer not squared)";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub mae_mm: f64,
    pub rmse_mm: f64,
    pub hd_mm: f64,
    pub cd_mm: f64,
    pub dice: f64,
    pub iou: f64,
    pub sdf_samples: usize,
    pub surface_points: usize,
    pub mask_views: usize,
    pub note: String,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(CoreError::Numerical(format!("report `{}`: {why}", self.label)));
        if self.mae_mm > self.rmse_mm * (1.0 + 1e-12) + 1e-15 {
            return bad("mae exceeds rmse");
        }
        if !(0.0..=1.0).contains(&self.dice) || !(0.0..=1.0).contains(&self.iou) {
            return bad("overlap scores outside [0, 1]");
        }
        if self.iou > self.dice + 1e-12 {
            return bad("iou exceeds dice");
        }
        Ok(())
    }

    pub fn values(&self) -> [f64; 6] {
        [self.mae_mm, self.rmse_mm, self.hd_mm, self.cd_mm, self.dice, self.iou]
    }
}

/// Mean and sample standard deviation of each column over several reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub mean: [f64; 6],
    pub std: [f64; 6],
}

pub fn summarize(reports: &[MetricReport]) -> Result<MetricSummary> {
    if reports.is_empty() {
        return Err(CoreError::Empty("metric reports"));
    }
    let n = reports.len() as f64;
    let mut mean = [0.0; 6];
    for r in reports {
        for (m, v) in mean.iter_mut().zip(r.values()) {
            *m += v / n;
        }
    }
    let mut std = [0.0; 6];
    if reports.len() > 1 {
        for r in reports {
            for ((s, v), m) in std.iter_mut().zip(r.values()).zip(mean) {
                *s += (v - m).powi(2) / (n - 1.0);
            }
        }
        std = std.map(f64::sqrt);
    }
    Ok(MetricSummary {
        count: reports.len(),
        mean,
        std,
    })
}

pub fn write_csv<W: Write>(reports: &[MetricReport], mut w: W) -> std::io::Result<()> {
    writeln!(w, "label,{}", CSV_COLUMNS.join(","))?;
    for r in reports {
        let vals: Vec<String> = r.values().iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{},{}", r.label, vals.join(","))?;
    }
    Ok(())
}

pub fn save_csv(reports: &[MetricReport], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(reports, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn save_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}
