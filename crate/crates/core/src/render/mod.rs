//! Differentiable slice rendering of the implicit surface, the silhouette
//! loss, and per-subject latent/probe fitting.

pub mod loss;
pub mod probe;
pub mod tto;

pub use loss::{
    render_binary_mask, render_loss, render_loss_tape, render_mask, sigmoid_mask, PixelSampler, RenderConfig,
    RenderTerms, ViewSamples, EVAL_ALPHA,
};
pub use probe::{log_map, ProbeParams, ProbeVars};
pub use tto::{draw_samples, mask_scores, tto_shape, tto_shape_observed, DicePoint, LossPoint, TtoConfig, TtoResult, UpdateTarget};
