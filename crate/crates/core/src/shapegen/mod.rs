//! Synthetic shape family with exact signed distances, SDF sampling, planar
//! mask slicing and the on-disk dataset format.

pub mod dataset;
pub mod ellipsoid;
pub mod sampling;
pub mod shape;
pub mod view;

pub use dataset::{generate_dataset, Dataset, DatasetConfig, Manifest, ShapeRecord, Split};
pub use sampling::{sample_sdf, SamplingStrategy, SdfSample};
pub use shape::{generate_shape, AnalyticShape, BaseShape, FamilyConfig, ModeWeights};
pub use view::{pixel_center, slice_to_mask, Mask, ProbeView};
