//! Soft slice rendering `M̂ = sigmoid(−α f)` and the weighted BCE + soft Dice loss.

use cardio_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::probe::{ProbeParams, ProbeVars};
use crate::csdf::{CsdfModel, CsdfVars};
use crate::shapegen::{pixel_center, Mask};

/// Probabilities are clipped to `[P_CLIP, 1 − P_CLIP]` inside logarithms.
pub const P_CLIP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// Pixels drawn per iteration, split evenly over the views.
    pub samples_per_iter: usize,
    /// Share of each view's pixels drawn from the band around the mask edge.
    pub boundary_fraction: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    /// Additive smoothing in the Dice ratio.
    pub dice_eps: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            alpha_start: 20.0,
            alpha_end: 150.0,
            samples_per_iter: 4096,
            boundary_fraction: 0.5,
            lambda_bce: 1.0,
            lambda_dice: 0.5,
            dice_eps: 1.0,
        }
    }
}

impl RenderConfig {
    /// Sharpness at `step` of a `total`-step run, linear from start to end.
    pub fn alpha(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.alpha_end;
        }
        let s = step.min(total - 1) as f64 / (total - 1) as f64;
        self.alpha_start + (self.alpha_end - self.alpha_start) * s
    }
}

/// Loss split into its two parts, each already averaged over views.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderTerms {
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

pub fn sigmoid_mask(f: f64, alpha: f64) -> f64 {
    let u = -alpha * f;
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Per-pixel probabilities for plane coordinates `pixels` seen by `probe`.
pub fn render_mask(model: &CsdfModel, z: &[f64], probe: &ProbeParams, pixels: &[[f64; 2]], alpha: f64) -> Vec<f64> {
    let pts: Vec<_> = pixels.iter().map(|&p| probe.pixel_to_3d(p)).collect();
    model
        .eval_many(z, &pts)
        .into_iter()
        .map(|f| sigmoid_mask(f, alpha))
        .collect()
}

/// Loss from probabilities: mean over views of
/// `λ_BCE · mean BCE + λ_Dice · (1 − soft Dice)`.
pub fn render_loss(pred: &[&[f64]], gt: &[&[f64]], cfg: &RenderConfig) -> RenderTerms {
    assert_eq!(pred.len(), gt.len(), "one target per prediction");
    let v = pred.len() as f64;
    let mut terms = RenderTerms::default();
    for (p, g) in pred.iter().zip(gt) {
        assert_eq!(p.len(), g.len(), "matching sample sets");
        let n = p.len() as f64;
        let mut bce = 0.0;
        let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
        for (&pi, &gi) in p.iter().zip(g.iter()) {
            let q = pi.clamp(P_CLIP, 1.0 - P_CLIP);
            bce -= gi * q.ln() + (1.0 - gi) * (1.0 - q).ln();
            inter += pi * gi;
            sp += pi;
            sg += gi;
        }
        let dice = 1.0 - (2.0 * inter + cfg.dice_eps) / (sp + sg + cfg.dice_eps);
        terms.bce += bce / n / v;
        terms.dice += dice / v;
    }
    terms.total = cfg.lambda_bce * terms.bce + cfg.lambda_dice * terms.dice;
    terms
}

/// Tape form for one view from logits `u = −α f` (shape `[N, 1]`); returns
/// `(bce, 1 − soft Dice)` scalars.
pub fn view_loss_terms(tape: &mut Tape, logits: Var, gt: &[f64], dice_eps: f64) -> (Var, Var) {
    let bce = tape.bce_with_logits(logits, gt);
    let p = tape.sigmoid(logits);
    let g = tape.constant(Tensor::from_vec(&[gt.len(), 1], gt.to_vec()));
    let pg = tape.mul(p, g);
    let inter = tape.sum(pg);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, dice_eps);
    let sp = tape.sum(p);
    let den = tape.add_scalar(sp, gt.iter().sum::<f64>() + dice_eps);
    let ratio = tape.div(num, den);
    let neg = tape.neg(ratio);
    (bce, tape.add_scalar(neg, 1.0))
}

/// Pixel samples of one view: plane coordinates and 0/1 targets.
#[derive(Clone, Debug, Default)]
pub struct ViewSamples {
    pub pixels: Vec<[f64; 2]>,
    pub targets: Vec<f64>,
}

/// Full render loss on the tape over all views. `z_bias` is the decoder's
/// latent contribution (`[1, H]`).
pub fn render_loss_tape(
    tape: &mut Tape,
    dec: &CsdfVars,
    z_bias: Var,
    probes: &[ProbeVars],
    samples: &[ViewSamples],
    alpha: f64,
    cfg: &RenderConfig,
) -> (Var, Var, Var) {
    let v = samples.len() as f64;
    let mut bces = Vec::with_capacity(samples.len());
    let mut dices = Vec::with_capacity(samples.len());
    for (probe, s) in probes.iter().zip(samples) {
        let x = probe.points(tape, &s.pixels);
        let f = dec.forward(tape, z_bias, x);
        let u = tape.scale(f, -alpha);
        let (b, d) = view_loss_terms(tape, u, &s.targets, cfg.dice_eps);
        bces.push(b);
        dices.push(d);
    }
    let mean = |tape: &mut Tape, xs: &[Var]| {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = tape.add(acc, x);
        }
        tape.scale(acc, 1.0 / v)
    };
    let bce = mean(tape, &bces);
    let dice = mean(tape, &dices);
    let wb = tape.scale(bce, cfg.lambda_bce);
    let wd = tape.scale(dice, cfg.lambda_dice);
    (tape.add(wb, wd), bce, dice)
}

/// Draws pixels of one mask: a share from the band around the foreground
/// edge (edge pixels dilated by one pixel), the rest uniformly.
#[derive(Clone, Debug)]
pub struct PixelSampler {
    mask: Mask,
    band: Vec<usize>,
}

impl PixelSampler {
    pub fn new(mask: &Mask) -> Self {
        let (h, w) = (mask.height, mask.width);
        let mut in_band = vec![false; h * w];
        for idx in mask.boundary() {
            let (r, c) = ((idx / w) as isize, (idx % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        in_band[rr as usize * w + cc as usize] = true;
                    }
                }
            }
        }
        let band = (0..h * w).filter(|&i| in_band[i]).collect();
        Self {
            mask: mask.clone(),
            band,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, n: usize, boundary_fraction: f64, rng: &mut R) -> ViewSamples {
        let (h, w) = (self.mask.height, self.mask.width);
        let n_band = if self.band.is_empty() {
            0
        } else {
            ((n as f64) * boundary_fraction).round() as usize
        };
        let mut out = ViewSamples {
            pixels: Vec::with_capacity(n),
            targets: Vec::with_capacity(n),
        };
        for i in 0..n {
            let idx = if i < n_band {
                self.band[rng.gen_range(0..self.band.len())]
            } else {
                rng.gen_range(0..h * w)
            };
            let (u, v) = pixel_center(idx / w, idx % w, h, w);
            out.pixels.push([u, v]);
            out.targets.push(self.mask.data[idx] as f64);
        }
        out
    }

    /// Every pixel once, in row-major order.
    pub fn all(&self) -> ViewSamples {
        let (h, w) = (self.mask.height, self.mask.width);
        let mut out = ViewSamples::default();
        for idx in 0..h * w {
            let (u, v) = pixel_center(idx / w, idx % w, h, w);
            out.pixels.push([u, v]);
            out.targets.push(self.mask.data[idx] as f64);
        }
        out
    }
}

/// Sharpness used when a soft render is binarized for evaluation.
pub const EVAL_ALPHA: f64 = 1e4;

/// Full-resolution render binarized at probability 0.5.
pub fn render_binary_mask(
    model: &CsdfModel,
    z: &[f64],
    probe: &ProbeParams,
    height: usize,
    width: usize,
    alpha: f64,
) -> Mask {
    let pixels: Vec<[f64; 2]> = (0..height * width)
        .map(|i| {
            let (u, v) = pixel_center(i / width, i % width, height, width);
            [u, v]
        })
        .collect();
    let probs = render_mask(model, z, probe, &pixels, alpha);
    Mask {
        height,
        width,
        data: probs.iter().map(|&p| u8::from(p > 0.5)).collect(),
    }
}
