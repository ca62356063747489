//! Temporal reconstruction: per-frame latents smoothed over time, a velocity
//! field trained with a transport loss, and a single anchor mesh carried
//! through the sequence.

pub mod align;
pub mod sequence;
pub mod smoother;
pub mod transport;
pub mod tto;
pub mod velocity;

pub use align::{propagate_vertices, radial_align, radial_align_with, AlignConfig, AlignFlag, AlignResult};
pub use sequence::{total_variation, Frame, FrameSequence, FrameStats, PropagatedMesh, SequenceManifest};
pub use smoother::{SmootherConfig, TemporalSmoother};
pub use transport::{boundary_weight, near_surface_points, transport_loss, transport_loss_tape, TransportConfig, TransportSamples, TransportTerms};
pub use tto::{propagate_sequence, tto_motion, MotionConfig, MotionResult, MotionStep};
pub use velocity::{VelocityConfig, VelocityField};
