//! Surface extraction and evaluation metrics.

pub mod distance;
pub mod marching;
pub mod mesh;
pub mod overlap;
pub mod report;

pub use distance::{chamfer, hausdorff, PointIndex};
pub use marching::{marching_cubes, marching_cubes_fn, marching_cubes_values, sample_grid, Grid};
pub use mesh::TriangleMesh;
pub use overlap::{dice_iou, projected_dice, sdf_errors, surface_sdf_errors};
pub use report::{summarize, MetricReport, MetricSummary, CSV_COLUMNS, METRIC_NOTE};
