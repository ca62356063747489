//! Bidirectional transport loss between adjacent frames:
//!
//! `E_a[w f(z_b, x + v(x, t_a))²] + E_b[w f(z_a, x − v(x, t_b))²] + λ E‖v‖²`
//!
//! with `w(x) = exp(−|f|)` evaluated with the latent of the frame the
//! sample came from, held constant during differentiation.

use cardio_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::velocity::{VelocityField, VelocityVars};
use crate::csdf::{points_tensor, CsdfModel, CsdfVars};
use crate::error::{CoreError, Result};
use crate::geom::{self, Vec3};
use crate::shapegen::sampling::uniform_in_cube;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransportConfig {
    pub lambda_smooth: f64,
    /// Near-surface samples drawn per frame each step.
    pub near_samples: usize,
    /// Uniform samples for the smoothness term.
    pub uniform_samples: usize,
    /// Std of the noise added to projected surface samples.
    pub near_noise: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            lambda_smooth: 1e-3,
            near_samples: 512,
            uniform_samples: 256,
            near_noise: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransportTerms {
    pub forward: f64,
    pub backward: f64,
    pub smooth: f64,
    pub total: f64,
}

/// Samples for one frame pair `(a, b)`, plus the constant weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransportSamples {
    pub near_a: Vec<Vec3>,
    pub near_b: Vec<Vec3>,
    pub uniform: Vec<Vec3>,
    pub weights_a: Vec<f64>,
    pub weights_b: Vec<f64>,
}

pub fn boundary_weight(f: f64) -> f64 {
    (-f.abs()).exp()
}

impl TransportSamples {
    /// Fills the weights from each sample's own frame latent.
    pub fn new(model: &CsdfModel, z_a: &[f64], z_b: &[f64], near_a: Vec<Vec3>, near_b: Vec<Vec3>, uniform: Vec<Vec3>) -> Self {
        let weights_a = model.eval_many(z_a, &near_a).into_iter().map(boundary_weight).collect();
        let weights_b = model.eval_many(z_b, &near_b).into_iter().map(boundary_weight).collect();
        Self {
            near_a,
            near_b,
            uniform,
            weights_a,
            weights_b,
        }
    }
}

/// Points near the zero level set at `z`: uniform draws pulled onto the
/// surface by two projection steps, kept if they land within `δ / 2`, then
/// jittered by `noise`.
pub fn near_surface_points<R: Rng + ?Sized>(model: &CsdfModel, z: &[f64], n: usize, noise: f64, rng: &mut R) -> Vec<Vec3> {
    let half_band = 0.5 * model.config.delta;
    let mut out = Vec::with_capacity(n);
    for _ in 0..8 {
        if out.len() >= n {
            break;
        }
        let mut pts: Vec<Vec3> = (0..2 * n).map(|_| uniform_in_cube(rng)).collect();
        for _ in 0..2 {
            let (vals, grads) = model.eval_with_grad(z, &pts);
            for ((p, &v), g) in pts.iter_mut().zip(&vals).zip(&grads) {
                let gn = geom::norm(*g);
                if gn > 1e-6 {
                    *p = geom::sub(*p, geom::scale(*g, v / gn));
                }
            }
        }
        let last = model.eval_many(z, &pts);
        for (p, v) in pts.into_iter().zip(last) {
            if v.abs() < half_band && out.len() < n {
                let jitter: Vec3 = std::array::from_fn(|_| {
                    let g: f64 = StandardNormal.sample(rng);
                    noise * g
                });
                out.push(geom::add(p, jitter));
            }
        }
    }
    out
}

fn weighted_sq_mean(tape: &mut Tape, f: Var, w: &[f64]) -> Var {
    let sq = tape.square(f);
    let wv = tape.constant(Tensor::from_vec(&[w.len(), 1], w.to_vec()));
    let ws = tape.mul(sq, wv);
    tape.mean(ws)
}

/// Transport terms on the tape. Returns `(total, forward, backward, smooth)`.
#[allow(clippy::too_many_arguments)]
pub fn transport_loss_tape(
    tape: &mut Tape,
    dec: &CsdfVars,
    vel: &VelocityVars,
    bias_a: Var,
    bias_b: Var,
    time_a: f64,
    time_b: f64,
    samples: &TransportSamples,
    cfg: &TransportConfig,
) -> (Var, Var, Var, Var) {
    let xa = tape.constant(points_tensor(&samples.near_a));
    let va = vel.forward(tape, xa, time_a);
    let moved_a = tape.add(xa, va);
    let fa = dec.forward(tape, bias_b, moved_a);
    let forward = weighted_sq_mean(tape, fa, &samples.weights_a);

    let xb = tape.constant(points_tensor(&samples.near_b));
    let vb = vel.forward(tape, xb, time_b);
    let moved_b = tape.sub(xb, vb);
    let fb = dec.forward(tape, bias_a, moved_b);
    let backward = weighted_sq_mean(tape, fb, &samples.weights_b);

    let smooth = if samples.uniform.is_empty() || cfg.lambda_smooth == 0.0 {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let xu = tape.constant(points_tensor(&samples.uniform));
        let vu = vel.forward(tape, xu, time_a);
        let sq = tape.square(vu);
        let s = tape.sum(sq);
        tape.scale(s, cfg.lambda_smooth / samples.uniform.len() as f64)
    };
    let fb_sum = tape.add(forward, backward);
    (tape.add(fb_sum, smooth), forward, backward, smooth)
}

/// Evaluates the transport loss without keeping gradients.
#[allow(clippy::too_many_arguments)]
pub fn transport_loss(
    model: &CsdfModel,
    field: &VelocityField,
    z_a: &[f64],
    z_b: &[f64],
    time_a: f64,
    time_b: f64,
    samples: &TransportSamples,
    cfg: &TransportConfig,
) -> Result<TransportTerms> {
    model.check_latent(z_a)?;
    model.check_latent(z_b)?;
    if samples.near_a.is_empty() || samples.near_b.is_empty() {
        return Err(CoreError::Empty("transport samples"));
    }
    let mut tape = Tape::new();
    let dec = model.bind(&mut tape, false);
    let vel = field.bind(&mut tape, false);
    let za = tape.constant(Tensor::from_vec(&[1, z_a.len()], z_a.to_vec()));
    let zb = tape.constant(Tensor::from_vec(&[1, z_b.len()], z_b.to_vec()));
    let ba = dec.latent_bias(&mut tape, za);
    let bb = dec.latent_bias(&mut tape, zb);
    let (total, forward, backward, smooth) = transport_loss_tape(&mut tape, &dec, &vel, ba, bb, time_a, time_b, samples, cfg);
    Ok(TransportTerms {
        forward: tape.value(forward).item(),
        backward: tape.value(backward).item(),
        smooth: tape.value(smooth).item(),
        total: tape.value(total).item(),
    })
}
