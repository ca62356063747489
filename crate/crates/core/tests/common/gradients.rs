//! Finite-difference checks for each learned component, on small random
//! instances so the whole set runs in well under a minute.

use cardio_autodiff::gradcheck::GradCheckSummary;
use cardio_autodiff::{Module, Tape, Tensor};
use cardio_core::csdf::{points_tensor, CsdfConfig, CsdfModel, EcaConfig, EncoderConfig, MaskEncoder};
use cardio_core::motion::{SmootherConfig, TemporalSmoother, VelocityConfig, VelocityField};
use cardio_core::render::{render_loss, render_loss_tape, render_mask, ProbeParams, RenderConfig, ViewSamples};
use cardio_core::shapegen::Mask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_module, check_vector};

fn merge(into: &mut GradCheckSummary, s: GradCheckSummary) {
    into.checked += s.checked;
    into.skipped += s.skipped;
    into.max_rel_error = into.max_rel_error.max(s.max_rel_error);
}

fn small_decoder(r: &mut ChaCha8Rng) -> CsdfModel {
    let cfg = CsdfConfig {
        latent_dim: 8,
        hidden_width: 16,
        hidden_layers: 2,
        ..CsdfConfig::default()
    };
    CsdfModel::new(cfg, r).unwrap()
}

fn cube_points(n: usize, r: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
        .collect()
}

/// Decoder weights and latent code through `Σ c_i f(z, x_i)`.
pub fn decoder(seed: u64) -> GradCheckSummary {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let model = CsdfModel::new(CsdfConfig::default(), &mut r).unwrap();
    let z: Vec<f64> = (0..64).map(|_| r.gen_range(-0.3..0.3)).collect();
    let pts = cube_points(16, &mut r);
    let c: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
    let weighted = |m: &CsdfModel, z: &[f64]| -> f64 { m.eval_many(z, &pts).iter().zip(&c).map(|(f, c)| f * c).sum() };

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let zv = tape.leaf(Tensor::from_vec(&[1, 64], z.clone()));
    let bias = vars.latent_bias(&mut tape, zv);
    let x = tape.constant(points_tensor(&pts));
    let f = vars.forward(&mut tape, bias, x);
    let cv = tape.constant(Tensor::from_vec(&[16, 1], c.clone()));
    let w = tape.mul(f, cv);
    let s = tape.sum(w);
    tape.backward(s).unwrap();
    let grads: Vec<Tensor> = vars.leaves().iter().map(|&v| tape.grad_or_zeros(v)).collect();
    let gz = tape.grad_or_zeros(zv).into_data();

    let mut out = check_module(&model, &grads, 100, seed, |m| weighted(m, &z));
    merge(&mut out, check_vector(&z, &gz, 64, seed, |zz| weighted(&model, zz)));
    out
}

/// Mask encoder including the cross-view attention.
pub fn encoder(seed: u64) -> GradCheckSummary {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        channels: [2, 3, 3, 4],
        head_hidden: 5,
        resolution: 16,
        eca: EcaConfig {
            radius: Some(1),
            ..EcaConfig::default()
        },
    };
    let mut enc = MaskEncoder::new(cfg, 4, &mut r).unwrap();
    // Zero biases leave blank receptive fields exactly on ReLU kinks.
    for t in enc.params_mut() {
        if t.ndim() == 1 {
            t.data_mut().iter_mut().for_each(|b| *b = r.gen_range(-0.1..0.1));
        }
    }
    let masks: Vec<Mask> = (0..3).map(|_| Mask::from_fn(16, 16, |_, _| r.gen_bool(0.4))).collect();
    let refs: Vec<&Mask> = masks.iter().collect();
    let c = [0.7, -1.3, 0.4, 2.0];
    let objective = |e: &MaskEncoder| -> f64 { e.encode_masks(&refs).unwrap().iter().zip(&c).map(|(z, c)| z * c).sum() };
    let mut tape = Tape::new();
    let vars = enc.bind(&mut tape, true);
    let z = vars.forward(&mut tape, &refs).unwrap();
    let cv = tape.constant(Tensor::from_vec(&[1, 4], c.to_vec()));
    let w = tape.mul(z, cv);
    let s = tape.sum(w);
    tape.backward(s).unwrap();
    let grads: Vec<Tensor> = vars.leaves().iter().map(|&v| tape.grad_or_zeros(v)).collect();
    check_module(&enc, &grads, 150, seed, objective)
}

/// Splits `[z, (ω, t, log s) per view]`.
pub fn unpack(v: &[f64], views: usize) -> (Vec<f64>, Vec<ProbeParams>) {
    let l = v.len() - 7 * views;
    let probes = (0..views)
        .map(|i| {
            let o = l + 7 * i;
            ProbeParams {
                rotation: [v[o], v[o + 1], v[o + 2]],
                translation: [v[o + 3], v[o + 4], v[o + 5]],
                log_scale: v[o + 6],
                ..ProbeParams::identity(format!("v{i}"))
            }
        })
        .collect();
    (v[..l].to_vec(), probes)
}

/// Render loss through the plain scalar path, used as the FD oracle.
pub fn scalar_render_loss(model: &CsdfModel, v: &[f64], samples: &[ViewSamples], alpha: f64, cfg: &RenderConfig) -> f64 {
    let (z, probes) = unpack(v, samples.len());
    let pred: Vec<Vec<f64>> = probes
        .iter()
        .zip(samples)
        .map(|(p, s)| render_mask(model, &z, p, &s.pixels, alpha))
        .collect();
    let pr: Vec<&[f64]> = pred.iter().map(|v| v.as_slice()).collect();
    let gr: Vec<&[f64]> = samples.iter().map(|s| s.targets.as_slice()).collect();
    render_loss(&pr, &gr, cfg).total
}

/// Loss value and gradient with respect to `[z, probe params]` from the tape.
pub fn tape_render_grad(model: &CsdfModel, v: &[f64], samples: &[ViewSamples], alpha: f64, cfg: &RenderConfig) -> (f64, Vec<f64>) {
    let (z, probes) = unpack(v, samples.len());
    let mut tape = Tape::new();
    let dec = model.bind(&mut tape, false);
    let zv = tape.leaf(Tensor::from_vec(&[1, z.len()], z));
    let bias = dec.latent_bias(&mut tape, zv);
    let pv: Vec<_> = probes.iter().map(|p| p.bind(&mut tape, true)).collect();
    let (total, _, _) = render_loss_tape(&mut tape, &dec, bias, &pv, samples, alpha, cfg);
    tape.backward(total).unwrap();
    let mut g = tape.grad_or_zeros(zv).into_data();
    for p in &pv {
        for leaf in p.leaves() {
            g.extend_from_slice(tape.grad_or_zeros(leaf).data());
        }
    }
    (tape.value(total).item(), g)
}

/// Soft renderer and BCE + Dice loss with respect to the latent and every
/// probe parameter, over five random configurations of two views.
pub fn renderer(seed: u64) -> GradCheckSummary {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let cfg = RenderConfig::default();
    let mut out = GradCheckSummary::default();
    for trial in 0..5 {
        let model = small_decoder(&mut r);
        let samples: Vec<ViewSamples> = (0..2)
            .map(|_| ViewSamples {
                pixels: (0..64).map(|_| [r.gen_range(-0.9..0.9), r.gen_range(-0.9..0.9)]).collect(),
                targets: (0..64).map(|_| f64::from(r.gen_bool(0.4) as u8)).collect(),
            })
            .collect();
        let mut v: Vec<f64> = (0..8).map(|_| r.gen_range(-0.5..0.5)).collect();
        for _ in 0..2 {
            v.extend((0..3).map(|_| r.gen_range(-1.5..1.5)));
            v.extend((0..3).map(|_| r.gen_range(-0.1..0.1)));
            v.push(r.gen_range(-0.1..0.1));
        }
        let (_, grad) = tape_render_grad(&model, &v, &samples, 20.0, &cfg);
        merge(
            &mut out,
            check_vector(&v, &grad, v.len(), seed + trial, |x| scalar_render_loss(&model, x, &samples, 20.0, &cfg)),
        );
    }
    out
}

pub fn velocity(seed: u64) -> GradCheckSummary {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let cfg = VelocityConfig {
        hidden_width: 16,
        hidden_layers: 2,
        space_frequencies: 2,
        time_frequencies: 2,
        output_init_scale: 1.0,
    };
    let mut field = VelocityField::new(cfg, &mut r).unwrap();
    for layer in &mut field.mlp.layers {
        layer.bias.data_mut().iter_mut().for_each(|b| *b = r.gen_range(-0.1..0.1));
    }
    let pts = cube_points(8, &mut r);
    let c: Vec<f64> = (0..24).map(|_| r.gen_range(-1.0..1.0)).collect();
    let t = 0.35;
    let loss = |m: &VelocityField| -> f64 { m.eval_many(&pts, t).iter().flatten().zip(&c).map(|(a, b)| a * b).sum() };
    let mut tape = Tape::new();
    let vars = field.bind(&mut tape, true);
    let x = tape.constant(points_tensor(&pts));
    let v = vars.forward(&mut tape, x, t);
    let cv = tape.constant(Tensor::from_vec(&[8, 3], c.clone()));
    let prod = tape.mul(v, cv);
    let total = tape.sum(prod);
    tape.backward(total).unwrap();
    let grads: Vec<Tensor> = vars.leaves().iter().map(|&l| tape.grad_or_zeros(l)).collect();
    check_module(&field, &grads, 150, seed, loss)
}

pub fn smoother(seed: u64) -> GradCheckSummary {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut s = TemporalSmoother::new(3, &SmootherConfig { hidden: 4 }, &mut r).unwrap();
    for t in [&mut s.merge_weight, &mut s.forward.bias, &mut s.backward.bias] {
        t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
    }
    let seq: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let c: Vec<f64> = (0..15).map(|_| r.gen_range(-1.0..1.0)).collect();
    let loss = |m: &TemporalSmoother| -> f64 { m.smooth(&seq).unwrap().iter().flatten().zip(&c).map(|(a, b)| a * b).sum() };
    let mut tape = Tape::new();
    let vars = s.bind(&mut tape, true);
    let z = tape.constant(Tensor::from_vec(&[5, 3], seq.concat()));
    let out = vars.forward(&mut tape, z);
    let cv = tape.constant(Tensor::from_vec(&[5, 3], c.clone()));
    let prod = tape.mul(out, cv);
    let total = tape.sum(prod);
    tape.backward(total).unwrap();
    let grads: Vec<Tensor> = vars.leaves().iter().map(|&l| tape.grad_or_zeros(l)).collect();
    check_module(&s, &grads, 150, seed, loss)
}
