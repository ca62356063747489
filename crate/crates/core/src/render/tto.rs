//! Subject-specific fitting: latent code and probe transforms optimized
//! alternately against the render loss with the decoder frozen.

use cardio_autodiff::{AdamConfig, AdamState, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{render_loss_tape, PixelSampler, RenderConfig, RenderTerms, ViewSamples};
use super::probe::ProbeParams;
use crate::csdf::pretrain::cap_rows;
use crate::csdf::CsdfModel;
use super::loss::{render_binary_mask, EVAL_ALPHA};
use crate::error::{CoreError, Result};
use crate::metrics::dice_iou;
use crate::shapegen::Mask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtoConfig {
    pub steps: usize,
    pub cycle_len: usize,
    /// Leading steps of each cycle that update the latent; the rest update probes.
    pub latent_steps_per_cycle: usize,
    pub latent_lr: f64,
    pub probe_lr: f64,
    /// When false, probe steps are skipped and probes stay fixed.
    pub optimize_probes: bool,
    pub render: RenderConfig,
    pub history_every: usize,
}

impl Default for TtoConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            cycle_len: 10,
            latent_steps_per_cycle: 8,
            latent_lr: 5e-4,
            probe_lr: 5e-3,
            optimize_probes: true,
            render: RenderConfig::default(),
            history_every: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateTarget {
    Latent,
    Probes,
}

impl TtoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cycle_len == 0 || self.latent_steps_per_cycle > self.cycle_len {
            return Err(CoreError::Config(
                "latent_steps_per_cycle must not exceed a non-empty cycle".into(),
            ));
        }
        for (name, lr) in [("latent_lr", self.latent_lr), ("probe_lr", self.probe_lr)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(CoreError::Config(format!("{name} must be positive")));
            }
        }
        let r = &self.render;
        if !(r.alpha_start > 0.0 && r.alpha_end > 0.0) {
            return Err(CoreError::Config("alpha must stay positive".into()));
        }
        if r.samples_per_iter == 0 || !(0.0..=1.0).contains(&r.boundary_fraction) {
            return Err(CoreError::Config("invalid pixel sampling settings".into()));
        }
        Ok(())
    }

    pub fn target(&self, step: usize) -> UpdateTarget {
        if step % self.cycle_len < self.latent_steps_per_cycle {
            UpdateTarget::Latent
        } else {
            UpdateTarget::Probes
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub target: UpdateTarget,
    pub alpha: f64,
    #[serde(flatten)]
    pub terms: RenderTerms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DicePoint {
    pub step: usize,
    pub dice: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtoResult {
    pub z: Vec<f64>,
    pub probes: Vec<ProbeParams>,
    pub losses: Vec<LossPoint>,
    /// Hard-mask Dice per view, every `history_every` steps and at the end.
    pub history: Vec<DicePoint>,
    pub final_dice: Vec<f64>,
    pub final_iou: Vec<f64>,
    /// Set when the run stopped early on a non-finite loss; `z` and `probes`
    /// then hold the last finite state.
    pub aborted: Option<String>,
}

/// Per-view hard-mask Dice and IoU against the full-resolution targets.
pub fn mask_scores(model: &CsdfModel, z: &[f64], probes: &[ProbeParams], masks: &[&Mask]) -> (Vec<f64>, Vec<f64>) {
    probes
        .iter()
        .zip(masks)
        .map(|(p, m)| {
            let pred = render_binary_mask(model, z, p, m.height, m.width, EVAL_ALPHA);
            dice_iou(&pred, m).expect("same resolution")
        })
        .unzip()
}

/// Draw this iteration's pixels: `samples_per_iter` split over the views.
pub fn draw_samples<R: Rng + ?Sized>(samplers: &[PixelSampler], cfg: &RenderConfig, rng: &mut R) -> Vec<ViewSamples> {
    let per_view = (cfg.samples_per_iter / samplers.len()).max(1);
    samplers
        .iter()
        .map(|s| s.draw(per_view, cfg.boundary_fraction, rng))
        .collect()
}

pub fn tto_shape<R: Rng + ?Sized>(
    model: &CsdfModel,
    z_init: &[f64],
    masks: &[&Mask],
    probes: &[ProbeParams],
    cfg: &TtoConfig,
    rng: &mut R,
) -> Result<TtoResult> {
    tto_shape_observed(model, z_init, masks, probes, cfg, rng, |_, _, _| {})
}

/// [`tto_shape`] that also calls `observe(step, z, probes)` before every step
/// and once more with `step == cfg.steps` on the final state.
pub fn tto_shape_observed<R: Rng + ?Sized>(
    model: &CsdfModel,
    z_init: &[f64],
    masks: &[&Mask],
    probes: &[ProbeParams],
    cfg: &TtoConfig,
    rng: &mut R,
    mut observe: impl FnMut(usize, &[f64], &[ProbeParams]),
) -> Result<TtoResult> {
    cfg.validate()?;
    model.check_latent(z_init)?;
    if masks.is_empty() {
        return Err(CoreError::Empty("mask views"));
    }
    if masks.len() != probes.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} masks but {} probes",
            masks.len(),
            probes.len()
        )));
    }
    let samplers: Vec<PixelSampler> = masks.iter().map(|m| PixelSampler::new(m)).collect();
    let mut z = Tensor::from_vec(&[1, z_init.len()], z_init.to_vec());
    let mut probes = probes.to_vec();
    let mut adam_z = AdamState::new(AdamConfig::default());
    let mut adam_p = AdamState::new(AdamConfig::default());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut history = Vec::new();
    let mut aborted = None;

    for step in 0..cfg.steps {
        observe(step, z.data(), &probes);
        if cfg.history_every > 0 && step % cfg.history_every == 0 {
            let (dice, _) = mask_scores(model, z.data(), &probes, masks);
            history.push(DicePoint { step, dice });
        }
        let target = cfg.target(step);
        if target == UpdateTarget::Probes && !cfg.optimize_probes {
            continue;
        }
        let alpha = cfg.render.alpha(step, cfg.steps);
        let samples = draw_samples(&samplers, &cfg.render, rng);
        let mut tape = Tape::new();
        let dec = model.bind(&mut tape, false);
        let zv = tape.param(&z, target == UpdateTarget::Latent);
        let bias = dec.latent_bias(&mut tape, zv);
        let pv: Vec<_> = probes
            .iter()
            .map(|p| p.bind(&mut tape, target == UpdateTarget::Probes))
            .collect();
        let (total, bce, dice) = render_loss_tape(&mut tape, &dec, bias, &pv, &samples, alpha, &cfg.render);
        let terms = RenderTerms {
            bce: tape.value(bce).item(),
            dice: tape.value(dice).item(),
            total: tape.value(total).item(),
        };
        // ReLU swallows NaN inputs, so a bad latent can still give a finite loss.
        if !terms.total.is_finite() || z.data().iter().any(|v| !v.is_finite()) {
            aborted = Some(format!("non-finite render loss or latent at step {step}"));
            break;
        }
        tape.backward(total)?;
        match target {
            UpdateTarget::Latent => {
                let g = tape.grad_or_zeros(zv);
                let mut next = z.clone();
                if let Err(e) = adam_z.step_module(&mut next, &[g], cfg.latent_lr) {
                    aborted = Some(format!("step {step}: {e}"));
                    break;
                }
                cap_rows(&mut next, model.config.latent_cap);
                z = next;
            }
            UpdateTarget::Probes => {
                let mut tensors: Vec<Tensor> = Vec::new();
                let mut grads = Vec::new();
                for (p, v) in probes.iter().zip(&pv) {
                    tensors.push(Tensor::from_vec(&[3], p.rotation.to_vec()));
                    tensors.push(Tensor::from_vec(&[3], p.translation.to_vec()));
                    tensors.push(Tensor::from_vec(&[1], vec![p.log_scale]));
                    grads.extend(v.leaves().iter().map(|&l| tape.grad_or_zeros(l)));
                }
                let mut refs: Vec<&mut Tensor> = tensors.iter_mut().collect();
                if let Err(e) = adam_p.step(&mut refs, &grads, &[], cfg.probe_lr) {
                    aborted = Some(format!("step {step}: {e}"));
                    break;
                }
                for (p, t) in probes.iter_mut().zip(tensors.chunks(3)) {
                    if p.trainable {
                        p.set_from(&t[0], &t[1], &t[2]);
                    }
                }
            }
        }
        losses.push(LossPoint {
            step,
            target,
            alpha,
            terms,
        });
    }
    observe(cfg.steps, z.data(), &probes);
    let z = z.into_data();
    let (final_dice, final_iou) = mask_scores(model, &z, &probes, masks);
    history.push(DicePoint {
        step: cfg.steps,
        dice: final_dice.clone(),
    });
    Ok(TtoResult {
        z,
        probes,
        losses,
        history,
        final_dice,
        final_iou,
        aborted,
    })
}

