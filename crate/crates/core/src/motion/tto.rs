//! Shape-motion fitting over a frame sequence with the probes frozen, then
//! mesh extraction at the anchor and propagation to every frame.

use cardio_autodiff::{AdamConfig, AdamState, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::align::{propagate_vertices, radial_align, AlignConfig, AlignFlag};
use super::sequence::{FrameSequence, FrameStats, PropagatedMesh};
use super::smoother::{SmootherConfig, TemporalSmoother};
use super::transport::{near_surface_points, transport_loss_tape, TransportConfig, TransportSamples, TransportTerms};
use super::velocity::{VelocityConfig, VelocityField};
use crate::csdf::pretrain::cap_rows;
use crate::csdf::CsdfModel;
use crate::error::{CoreError, Result};
use crate::metrics::{marching_cubes, Grid, TriangleMesh};
use crate::render::{draw_samples, render_loss_tape, PixelSampler, ProbeParams, RenderConfig, RenderTerms};
use crate::shapegen::sampling::uniform_in_cube;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    pub steps: usize,
    pub latent_lr: f64,
    pub velocity_lr: f64,
    pub smoother_lr: f64,
    /// Weight of the transport loss next to the render loss.
    pub lambda_transport: f64,
    /// The anchor fit has already annealed the sharpness, so both ends
    /// default to its final value.
    pub render: RenderConfig,
    pub transport: TransportConfig,
    pub velocity: VelocityConfig,
    pub smoother: SmootherConfig,
    pub align: AlignConfig,
    pub grid: Grid,
}

impl Default for MotionConfig {
    fn default() -> Self {
        let render = RenderConfig::default();
        Self {
            steps: 2000,
            latent_lr: 5e-4,
            velocity_lr: 1e-3,
            smoother_lr: 1e-3,
            lambda_transport: 0.5,
            render: RenderConfig {
                alpha_start: render.alpha_end,
                ..render
            },
            transport: TransportConfig::default(),
            velocity: VelocityConfig::default(),
            smoother: SmootherConfig::default(),
            align: AlignConfig::default(),
            grid: Grid::cube(64, 1.0),
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("latent_lr", self.latent_lr),
            ("velocity_lr", self.velocity_lr),
            ("smoother_lr", self.smoother_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(CoreError::Config(format!("{name} must be positive")));
            }
        }
        if self.lambda_transport < 0.0 || self.transport.lambda_smooth < 0.0 {
            return Err(CoreError::Config("loss weights must be non-negative".into()));
        }
        if self.transport.near_samples == 0 {
            return Err(CoreError::Config("transport needs near-surface samples".into()));
        }
        self.velocity.validate()?;
        self.grid.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionStep {
    pub step: usize,
    pub frame: usize,
    pub render: RenderTerms,
    pub transport: TransportTerms,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct MotionResult {
    /// Per-frame latents before smoothing.
    pub raw_latents: Vec<Vec<f64>>,
    /// Smoothed latents used for rendering and meshing.
    pub latents: Vec<Vec<f64>>,
    pub field: VelocityField,
    pub smoother: TemporalSmoother,
    pub mesh: PropagatedMesh,
    pub losses: Vec<MotionStep>,
}

/// Builds the mesh sequence: surface extracted once at frame 0, then each
/// frame's vertices advected from the previous frame and re-projected.
pub fn propagate_sequence(
    model: &CsdfModel,
    latents: &[Vec<f64>],
    times: &[f64],
    field: Option<&VelocityField>,
    cfg: &MotionConfig,
) -> Result<PropagatedMesh> {
    let m0 = extract_anchor(model, &latents[0], &cfg.grid)?;
    let stats0 = FrameStats {
        time: times[0],
        volume: m0.volume(),
        ..Default::default()
    };
    let mut out = PropagatedMesh {
        faces: m0.faces.clone(),
        frames: vec![m0.vertices.clone()],
        stats: vec![stats0],
        mm_per_unit: None,
    };
    for t in 1..latents.len() {
        let prev = out.frames.last().expect("frame 0 present");
        let moved = match field {
            Some(f) => propagate_vertices(prev, f, times[t - 1]),
            None => prev.clone(),
        };
        let aligned = radial_align(model, &latents[t], &moved, &cfg.align)?;
        let stats = FrameStats {
            time: times[t],
            volume: 0.0,
            max_residual: aligned.max_residual(),
            mean_residual: aligned.mean_residual(),
            degenerate_vertices: aligned.count(AlignFlag::DegenerateGradient),
            non_contracting_vertices: aligned.count(AlignFlag::NotContracting),
        };
        out.frames.push(aligned.vertices);
        out.stats.push(stats);
        let v = out.frame_mesh(t).volume();
        out.stats[t].volume = v;
    }
    Ok(out)
}

fn extract_anchor(model: &CsdfModel, z: &[f64], grid: &Grid) -> Result<TriangleMesh> {
    marching_cubes(model, z, grid)?
        .ok_or_else(|| CoreError::Numerical("anchor latent has no surface inside the grid".into()))
}

pub fn tto_motion<R: Rng + ?Sized>(
    model: &CsdfModel,
    frames: &FrameSequence,
    anchor: &[f64],
    probes: &[ProbeParams],
    cfg: &MotionConfig,
    rng: &mut R,
) -> Result<MotionResult> {
    cfg.validate()?;
    model.check_latent(anchor)?;
    if probes.is_empty() {
        return Err(CoreError::Empty("probes"));
    }
    frames.validate(probes.len())?;
    let n = frames.len();
    let l = model.latent_dim();
    let times = frames.times();
    let mut field = VelocityField::new(cfg.velocity.clone(), rng)?;
    let mut smoother = TemporalSmoother::new(l, &cfg.smoother, rng)?;
    let mut latents = Tensor::from_vec(&[n, l], anchor.repeat(n));
    let mut losses = Vec::new();

    if n > 1 {
        let samplers: Vec<Vec<PixelSampler>> = frames
            .frames
            .iter()
            .map(|f| f.masks.iter().map(PixelSampler::new).collect())
            .collect();
        let mut adam_z = AdamState::new(AdamConfig::default());
        let mut adam_v = AdamState::new(AdamConfig::default());
        let mut adam_s = AdamState::new(AdamConfig::default());
        for step in 0..cfg.steps {
            let t = rng.gen_range(0..n);
            let (a, b) = if t + 1 < n { (t, t + 1) } else { (t - 1, t) };
            let alpha = cfg.render.alpha(step, cfg.steps);
            let pixels = draw_samples(&samplers[t], &cfg.render, rng);

            let mut tape = Tape::new();
            let dec = model.bind(&mut tape, false);
            let zv = tape.leaf(latents.clone());
            let sm = smoother.bind(&mut tape, true);
            let smoothed = sm.forward(&mut tape, zv);
            let zt = tape.slice_rows(smoothed, t, 1);
            let bias = dec.latent_bias(&mut tape, zt);
            let pv: Vec<_> = probes.iter().map(|p| p.bind(&mut tape, false)).collect();
            let (render, r_bce, r_dice) = render_loss_tape(&mut tape, &dec, bias, &pv, &pixels, alpha, &cfg.render);

            // Transport sees the smoothed latents as constants.
            let sv = tape.value(smoothed).clone();
            let (za, zb) = (sv.row(a).to_vec(), sv.row(b).to_vec());
            let tc = &cfg.transport;
            let samples = TransportSamples::new(
                model,
                &za,
                &zb,
                near_surface_points(model, &za, tc.near_samples, tc.near_noise, rng),
                near_surface_points(model, &zb, tc.near_samples, tc.near_noise, rng),
                (0..tc.uniform_samples).map(|_| uniform_in_cube(rng)).collect(),
            );
            if samples.near_a.is_empty() || samples.near_b.is_empty() {
                return Err(CoreError::Numerical(format!(
                    "step {step}: no surface samples for frames {a} and {b}"
                )));
            }
            let vel = field.bind(&mut tape, true);
            let zac = tape.constant(Tensor::from_vec(&[1, l], za));
            let zbc = tape.constant(Tensor::from_vec(&[1, l], zb));
            let ba = dec.latent_bias(&mut tape, zac);
            let bb = dec.latent_bias(&mut tape, zbc);
            let (transport, tf, tb, ts) =
                transport_loss_tape(&mut tape, &dec, &vel, ba, bb, times[a], times[b], &samples, tc);
            let weighted = tape.scale(transport, cfg.lambda_transport);
            let total = tape.add(render, weighted);
            let record = MotionStep {
                step,
                frame: t,
                render: RenderTerms {
                    bce: tape.value(r_bce).item(),
                    dice: tape.value(r_dice).item(),
                    total: tape.value(render).item(),
                },
                transport: TransportTerms {
                    forward: tape.value(tf).item(),
                    backward: tape.value(tb).item(),
                    smooth: tape.value(ts).item(),
                    total: tape.value(transport).item(),
                },
                total: tape.value(total).item(),
            };
            if !record.total.is_finite() {
                return Err(CoreError::Numerical(format!(
                    "non-finite loss at step {step} (frame {t}): render {:?}, transport {:?}",
                    record.render, record.transport
                )));
            }
            tape.backward(total)?;
            let gz = tape.grad_or_zeros(zv);
            let gs: Vec<Tensor> = sm.leaves().iter().map(|&v| tape.grad_or_zeros(v)).collect();
            let gv: Vec<Tensor> = vel.leaves().iter().map(|&v| tape.grad_or_zeros(v)).collect();
            adam_z.step_module(&mut latents, &[gz], cfg.latent_lr)?;
            adam_s.step_module(&mut smoother, &gs, cfg.smoother_lr)?;
            adam_v.step_module(&mut field, &gv, cfg.velocity_lr)?;
            cap_rows(&mut latents, model.config.latent_cap);
            losses.push(record);
        }
    }

    let raw: Vec<Vec<f64>> = (0..n).map(|i| latents.row(i).to_vec()).collect();
    let smoothed = if n > 1 { smoother.smooth(&raw)? } else { raw.clone() };
    let mesh = propagate_sequence(model, &smoothed, &times, (n > 1).then_some(&field), cfg)?;
    Ok(MotionResult {
        raw_latents: raw,
        latents: smoothed,
        field,
        smoother,
        mesh,
        losses,
    })
}
