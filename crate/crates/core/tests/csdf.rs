mod common;

use cardio_autodiff::{Checkpoint, Module, Tape, Tensor};
use cardio_core::csdf::pretrain::{cap_rows, write_log_csv, DecoderTrainer, EncoderTrainer};
use cardio_core::csdf::*;
use cardio_core::geom::{dot, norm, normalize, scale};
use cardio_core::shapegen::dataset::{draw_weight_table, make_record};
use cardio_core::shapegen::sampling::random_direction;
use cardio_core::shapegen::{sample_sdf, DatasetConfig, FamilyConfig, Mask, ModeWeights, SamplingStrategy, ShapeRecord};
use cardio_core::CoreError;
use common::{check_module, check_vector, sphere, FD_TOL, SPHERE_RADIUS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_config() -> CsdfConfig {
    CsdfConfig {
        latent_dim: 8,
        hidden_width: 16,
        hidden_layers: 2,
        ..CsdfConfig::default()
    }
}

fn random_latent(l: usize, std: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..l).map(|_| r.gen_range(-std..std)).collect()
}

fn random_points(n: usize, r: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
        .collect()
}

/// Records of the default family with few samples, for quick training loops.
fn tiny_records(count: usize, samples: usize) -> Vec<ShapeRecord> {
    let cfg = DatasetConfig {
        count,
        samples_per_shape: samples,
        resolution: 16,
        ..DatasetConfig::default()
    };
    let table = draw_weight_table(cfg.family.modes, count, cfg.seed);
    table
        .into_iter()
        .enumerate()
        .map(|(i, w)| make_record(&cfg, i, w).unwrap().0)
        .collect()
}

#[test]
fn constant_network_is_flat() {
    let cfg = CsdfConfig::default();
    let model = CsdfModel::constant(cfg.clone(), 0.05, &mut rng(1)).unwrap();
    let expected = cfg.delta * (0.05 / cfg.delta).tanh();
    let mut r = rng(2);
    let z = random_latent(64, 1.0, &mut r);
    for x in random_points(50, &mut r) {
        assert!((model.eval(&z, x) - expected).abs() < 1e-15);
        assert_eq!(model.spatial_grad(&z, x), [0.0; 3]);
    }
}

#[test]
fn evaluation_is_deterministic() {
    let a = CsdfModel::new(CsdfConfig::default(), &mut rng(3)).unwrap();
    let b = CsdfModel::new(CsdfConfig::default(), &mut rng(3)).unwrap();
    assert_eq!(a, b);
    let mut r = rng(4);
    let z = random_latent(64, 0.5, &mut r);
    let pts = random_points(300, &mut r);
    let batch = a.eval_many(&z, &pts);
    assert_eq!(batch, b.eval_many(&z, &pts));
    for (p, f) in pts.iter().zip(&batch) {
        assert!((a.eval(&z, *p) - f).abs() < 1e-12);
    }
}

#[test]
fn wrong_latent_length_is_rejected() {
    let model = CsdfModel::new(small_config(), &mut rng(5)).unwrap();
    assert!(matches!(model.check_latent(&[0.0; 3]), Err(CoreError::ShapeMismatch(_))));
    assert!(CsdfModel::new(CsdfConfig { delta: 0.0, ..small_config() }, &mut rng(5)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn output_stays_within_clamp(seed in 0u64..1000, zs in 0.0f64..3.0) {
        let mut r = rng(seed);
        let model = CsdfModel::new(small_config(), &mut r).unwrap();
        let z = random_latent(8, zs, &mut r);
        let pts: Vec<[f64; 3]> = (0..64).map(|_| [r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)]).collect();
        for f in model.eval_many(&z, &pts) {
            prop_assert!(f.is_finite() && f.abs() <= model.config.delta);
        }
    }
}

#[test]
fn spatial_gradient_matches_finite_differences() {
    let mut r = rng(6);
    let model = CsdfModel::new(CsdfConfig::default(), &mut r).unwrap();
    let z = random_latent(64, 0.3, &mut r);
    let pts = random_points(40, &mut r);
    let (_, grads) = model.eval_with_grad(&z, &pts);
    let mut total = cardio_autodiff::gradcheck::GradCheckSummary::default();
    for (p, g) in pts.iter().zip(&grads) {
        let s = check_vector(p, g, 3, 0, |x| model.eval(&z, [x[0], x[1], x[2]]));
        total.checked += s.checked;
        total.skipped += s.skipped;
        total.max_rel_error = total.max_rel_error.max(s.max_rel_error);
    }
    assert!(total.passes(FD_TOL, 100), "{total:?}");
}

/// `Σ c_i f(z, x_i)`, its parameter gradients and its latent gradient.
fn decoder_objective(model: &CsdfModel, z: &[f64], pts: &[[f64; 3]], c: &[f64]) -> (f64, Vec<Tensor>, Vec<f64>) {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let zv = tape.leaf(Tensor::from_vec(&[1, z.len()], z.to_vec()));
    let bias = vars.latent_bias(&mut tape, zv);
    let x = tape.constant(points_tensor(pts));
    let f = vars.forward(&mut tape, bias, x);
    let cv = tape.constant(Tensor::from_vec(&[c.len(), 1], c.to_vec()));
    let w = tape.mul(f, cv);
    let s = tape.sum(w);
    tape.backward(s).unwrap();
    let grads = vars.leaves().iter().map(|&v| tape.grad_or_zeros(v)).collect();
    (tape.value(s).item(), grads, tape.grad_or_zeros(zv).into_data())
}

fn weighted(model: &CsdfModel, z: &[f64], pts: &[[f64; 3]], c: &[f64]) -> f64 {
    model.eval_many(z, pts).iter().zip(c).map(|(f, c)| f * c).sum()
}

#[test]
fn decoder_parameter_gradients_match_finite_differences() {
    let mut r = rng(7);
    let model = CsdfModel::new(CsdfConfig::default(), &mut r).unwrap();
    let z = random_latent(64, 0.3, &mut r);
    let pts = random_points(16, &mut r);
    let c: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
    let (value, grads, gz) = decoder_objective(&model, &z, &pts, &c);
    assert!((value - weighted(&model, &z, &pts, &c)).abs() < 1e-12);
    let s = check_module(&model, &grads, 120, 8, |m| weighted(m, &z, &pts, &c));
    assert!(s.passes(FD_TOL, 100), "{s:?}");
    let s = check_vector(&z, &gz, 64, 9, |zz| weighted(&model, zz, &pts, &c));
    assert!(s.passes(FD_TOL, 60), "{s:?}");
}

#[test]
fn overfit_sphere_is_accurate_near_the_surface() {
    let fx = sphere();
    let mut r = rng(12);
    let held_out = sample_sdf(&fx.shape, 4000, SamplingStrategy::default(), &mut r);
    let band: Vec<_> = held_out.iter().filter(|s| s.distance.abs() < 0.1).collect();
    assert!(band.len() > 1000);
    let pts: Vec<_> = band.iter().map(|s| s.point).collect();
    let f = fx.model.eval_many(&fx.z, &pts);
    let worst = f.iter().zip(&band).map(|(f, s)| (f - s.distance).abs()).fold(0.0, f64::max);
    assert!(worst < 0.05, "max band error {worst}");
}

#[test]
fn single_shape_training_reaches_low_l1() {
    let fx = sphere();
    assert!(fx.l1.len() <= 2000);
    let tail = &fx.l1[fx.l1.len() - 20..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(mean < 0.01, "final L1 {mean}");
    assert!(mean < fx.l1[0]);
}

#[test]
fn learned_sphere_normals_point_outward() {
    let fx = sphere();
    let mut r = rng(13);
    let dirs: Vec<_> = (0..400).map(|_| random_direction(&mut r)).collect();
    let pts: Vec<_> = dirs.iter().map(|&d| scale(d, SPHERE_RADIUS)).collect();
    let (_, grads) = fx.model.eval_with_grad(&fx.z, &pts);
    let good = grads
        .iter()
        .zip(&dirs)
        .filter(|(g, d)| norm(**g) > 0.0 && dot(normalize(**g), **d) > 10f64.to_radians().cos())
        .count();
    assert!(good as f64 >= 0.95 * dirs.len() as f64, "{good} / {}", dirs.len());
}

fn identity_conv(c: usize, r: &mut ChaCha8Rng) -> cardio_autodiff::Conv2dParams {
    let mut conv = cardio_autodiff::Conv2dParams::new(c, c, 1, 1, 0, r);
    conv.weight = Tensor::zeros(&[c, c, 1, 1]);
    for i in 0..c {
        conv.weight.data_mut()[i * c + i] = 1.0;
    }
    conv
}

/// Runs the attention stage on constant feature maps, returning the output data.
fn attend(proj: &EcaProjections, anchor: &Tensor, aux: &[Tensor], cfg: &EcaConfig) -> Result<Vec<f64>, CoreError> {
    let mut tape = Tape::new();
    let vars = proj.bind(&mut tape, false);
    let a = tape.constant(anchor.clone());
    let xs: Vec<_> = aux.iter().map(|t| tape.constant(t.clone())).collect();
    let out = eca_attend(&mut tape, &vars, a, &xs, cfg)?;
    Ok(tape.value(out).data().to_vec())
}

const C: usize = 3;
const H: usize = 8;
const W: usize = 5;

fn feature(r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[1, C, H, W], 1.0, r)
}

#[test]
fn constant_values_add_per_view() {
    let mut r = rng(20);
    let mut proj = EcaProjections::new(C, &mut r);
    proj.value.weight = Tensor::zeros(&[C, C, 1, 1]);
    proj.value.bias = Tensor::from_vec(&[C], vec![0.5, -1.0, 2.0]);
    let anchor = feature(&mut r);
    let aux = [feature(&mut r), feature(&mut r)];
    let out = attend(&proj, &anchor, &aux, &EcaConfig::default()).unwrap();
    for c in 0..C {
        for k in 0..H * W {
            let i = c * H * W + k;
            let expected = anchor.data()[i] + 2.0 * proj.value.bias.data()[c];
            assert!((out[i] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn flat_attention_averages_the_column_window() {
    let mut r = rng(21);
    let mut proj = EcaProjections::new(C, &mut r);
    proj.value = identity_conv(C, &mut r);
    // Small features keep the scores, and so the O(score / τ) bias, small.
    let anchor = feature(&mut r).map(|v| 0.3 * v);
    let aux = feature(&mut r).map(|v| 0.3 * v);
    let radius = 2;
    let cfg = EcaConfig {
        radius: Some(radius),
        temperature: 1e6,
        anchor: 0,
    };
    let out = attend(&proj, &anchor, &[aux.clone()], &cfg).unwrap();
    let at = |t: &Tensor, c: usize, y: usize, x: usize| t.data()[(c * H + y) * W + x];
    for c in 0..C {
        for y in 0..H {
            for x in 0..W {
                let rows = y.saturating_sub(radius)..=(y + radius).min(H - 1);
                let n = rows.clone().count() as f64;
                let mean = rows.map(|yy| at(&aux, c, yy, x)).sum::<f64>() / n;
                let got = out[(c * H + y) * W + x] - at(&anchor, c, y, x);
                assert!((got - mean).abs() < 1e-6, "{got} vs {mean}");
            }
        }
    }
}

#[test]
fn zero_radius_copies_the_same_pixel() {
    let mut r = rng(22);
    let mut proj = EcaProjections::new(C, &mut r);
    proj.value = identity_conv(C, &mut r);
    let anchor = feature(&mut r);
    let aux = feature(&mut r);
    let cfg = EcaConfig {
        radius: Some(0),
        ..EcaConfig::default()
    };
    let out = attend(&proj, &anchor, &[aux.clone()], &cfg).unwrap();
    for i in 0..out.len() {
        assert!((out[i] - anchor.data()[i] - aux.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn zero_value_projection_is_identity() {
    let mut r = rng(23);
    let mut proj = EcaProjections::new(C, &mut r);
    proj.value.weight = Tensor::zeros(&[C, C, 1, 1]);
    let anchor = feature(&mut r);
    let out = attend(&proj, &anchor, &[feature(&mut r)], &EcaConfig::default()).unwrap();
    assert_eq!(out, anchor.data());
}

#[test]
fn mismatched_features_are_rejected() {
    let mut r = rng(24);
    let proj = EcaProjections::new(C, &mut r);
    let anchor = feature(&mut r);
    let other = Tensor::randn(&[1, C, H + 1, W], 1.0, &mut r);
    assert!(matches!(
        attend(&proj, &anchor, &[other], &EcaConfig::default()),
        Err(CoreError::ShapeMismatch(_))
    ));
    let too_wide = EcaConfig {
        radius: Some(H),
        ..EcaConfig::default()
    };
    assert!(attend(&proj, &anchor, &[feature(&mut r)], &too_wide).is_err());
}

fn tiny_encoder(r: &mut ChaCha8Rng) -> MaskEncoder {
    let cfg = EncoderConfig {
        channels: [2, 3, 3, 4],
        head_hidden: 5,
        resolution: 16,
        eca: EcaConfig {
            radius: Some(1),
            ..EcaConfig::default()
        },
    };
    MaskEncoder::new(cfg, 4, r).unwrap()
}

fn random_mask(n: usize, r: &mut ChaCha8Rng) -> Mask {
    Mask::from_fn(n, n, |_, _| r.gen_bool(0.4))
}

#[test]
fn encoder_handles_empty_and_single_views() {
    let mut r = rng(30);
    let enc = MaskEncoder::new(EncoderConfig::desk(), 64, &mut r).unwrap();
    let blank = Mask::zeros(64, 64);
    let z = enc.encode_masks(&[&blank, &blank, &blank]).unwrap();
    assert_eq!(z.len(), 64);
    assert!(z.iter().all(|v| v.is_finite()));

    // With one view nothing is attended, so the attention weights are irrelevant.
    let m = random_mask(64, &mut r);
    let mut other = enc.clone();
    other.attention = EcaProjections::new(EncoderConfig::desk().channels[1], &mut r);
    assert_eq!(enc.encode_masks(&[&m]).unwrap(), other.encode_masks(&[&m]).unwrap());
    assert_ne!(enc.encode_masks(&[&m, &m]).unwrap(), other.encode_masks(&[&m, &m]).unwrap());

    assert!(matches!(enc.encode_masks(&[]), Err(CoreError::Empty(_))));
    let small = Mask::zeros(32, 32);
    assert!(matches!(enc.encode_masks(&[&small]), Err(CoreError::ShapeMismatch(_))));
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let mut r = rng(31);
    let mut enc = tiny_encoder(&mut r);
    // Zero biases put every pixel with a blank receptive field exactly on a
    // ReLU kink; move off it.
    for t in enc.params_mut() {
        if t.ndim() == 1 {
            t.data_mut().iter_mut().for_each(|b| *b = r.gen_range(-0.1..0.1));
        }
    }
    let masks = [random_mask(16, &mut r), random_mask(16, &mut r), random_mask(16, &mut r)];
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
    assert_eq!(grads.len(), enc.named_params().len());
    let summary = check_module(&enc, &grads, 150, 32, objective);
    assert!(summary.passes(FD_TOL, 100), "{summary:?}");
}

#[test]
fn loss_terms_decompose() {
    // One sample per shape makes the drawn batch deterministic.
    let records = tiny_records(4, 1);
    let refs: Vec<&ShapeRecord> = records.iter().collect();
    let cfg = PretrainConfig {
        shapes_per_batch: 4,
        points_per_shape: 1,
        latent_reg: 0.3,
        ..PretrainConfig::default()
    };
    let mut r = rng(40);
    let model = CsdfModel::new(small_config(), &mut r).unwrap();
    let mut tr = DecoderTrainer::new(model, 4, 0.2, &mut r).unwrap();
    for _ in 0..3 {
        let before = tr.clone();
        let terms = tr.train_step(&refs, &cfg, &mut r).unwrap();
        assert!((terms.total - terms.l1 - terms.reg).abs() < 1e-10);
        let reg = (0..4).map(|i| before.code(i).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() * 0.3 / 4.0;
        assert!((terms.reg - reg).abs() < 1e-10, "{} vs {reg}", terms.reg);
        let delta = before.model.config.delta;
        let l1 = records
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                let s = rec.samples[0];
                (before.model.eval(before.code(i), s.point) - s.distance.clamp(-delta, delta)).abs()
            })
            .sum::<f64>()
            / 4.0;
        assert!((terms.l1 - l1).abs() < 1e-10, "{} vs {l1}", terms.l1);
    }
}

#[test]
fn strong_latent_penalty_shrinks_codes() {
    let records = tiny_records(4, 64);
    let refs: Vec<&ShapeRecord> = records.iter().collect();
    let cfg = PretrainConfig {
        shapes_per_batch: 4,
        points_per_shape: 32,
        latent_reg: 1e3,
        ..PretrainConfig::default()
    };
    let mut r = rng(41);
    let model = CsdfModel::new(small_config(), &mut r).unwrap();
    let mut tr = DecoderTrainer::new(model, 4, 0.1, &mut r).unwrap();
    let mut last = tr.codes.norm_sq();
    for _ in 0..5 {
        for _ in 0..10 {
            tr.train_step(&refs, &cfg, &mut r).unwrap();
        }
        let now = tr.codes.norm_sq();
        assert!(now < last, "{now} >= {last}");
        last = now;
    }
}

#[test]
fn resumed_training_is_bit_identical() {
    let records = tiny_records(3, 64);
    let refs: Vec<&ShapeRecord> = records.iter().collect();
    let cfg = PretrainConfig {
        shapes_per_batch: 2,
        points_per_shape: 32,
        ..PretrainConfig::default()
    };
    let mut r = rng(42);
    let model = CsdfModel::new(small_config(), &mut r).unwrap();
    let mut a = DecoderTrainer::new(model.clone(), 3, 0.01, &mut r).unwrap();
    for _ in 0..10 {
        a.train_step(&refs, &cfg, &mut r).unwrap();
    }
    let mut ck = Checkpoint::new("resume");
    a.save_into(&mut ck);
    let mut bytes = Vec::new();
    ck.write_to(&mut bytes).unwrap();
    let restored = Checkpoint::read_from(bytes.as_slice()).unwrap();
    let mut b = DecoderTrainer::load_from(&restored, CsdfModel::new(small_config(), &mut rng(99)).unwrap()).unwrap();
    assert_eq!(b.step, 10);
    let mut rb = r.clone();
    for _ in 0..5 {
        let ta = a.train_step(&refs, &cfg, &mut r).unwrap();
        let tb = b.train_step(&refs, &cfg, &mut rb).unwrap();
        assert_eq!(ta, tb);
    }
    assert_eq!(a.codes, b.codes);
    assert_eq!(a.model, b.model);
}

#[test]
fn checkpoint_with_other_latent_size_is_rejected() {
    let mut r = rng(43);
    let tr = DecoderTrainer::new(CsdfModel::new(small_config(), &mut r).unwrap(), 2, 0.01, &mut r).unwrap();
    let mut ck = Checkpoint::new("");
    tr.save_into(&mut ck);
    let other = CsdfModel::new(CsdfConfig::default(), &mut r).unwrap();
    assert!(DecoderTrainer::load_from(&ck, other).is_err());
}

#[test]
fn distinct_shapes_get_separable_codes() {
    let make = |radius: f64| {
        let cfg = DatasetConfig {
            count: 1,
            family: FamilyConfig::sphere(radius, 1),
            samples_per_shape: 2000,
            resolution: 16,
            ..DatasetConfig::default()
        };
        make_record(&cfg, 0, ModeWeights::zeros(1)).unwrap().0
    };
    let records = [make(0.45), make(0.85)];
    let refs: Vec<&ShapeRecord> = records.iter().collect();
    let cfg = PretrainConfig {
        shapes_per_batch: 2,
        points_per_shape: 256,
        ..PretrainConfig::default()
    };
    let mut r = rng(44);
    let model = CsdfModel::new(
        CsdfConfig {
            latent_dim: 8,
            hidden_width: 32,
            ..CsdfConfig::default()
        },
        &mut r,
    )
    .unwrap();
    let mut tr = DecoderTrainer::new(model, 2, 0.01, &mut r).unwrap();
    for _ in 0..400 {
        tr.train_step(&refs, &cfg, &mut r).unwrap();
    }
    let gap: f64 = tr.code(0).iter().zip(tr.code(1)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(gap > 0.05, "codes only {gap} apart");
    let probe_pts: Vec<_> = (0..50).map(|_| scale(random_direction(&mut r), 0.65)).collect();
    let small = tr.model.eval_many(tr.code(0), &probe_pts);
    let large = tr.model.eval_many(tr.code(1), &probe_pts);
    // Between the two radii the small sphere is outside, the large one inside.
    let correct = small.iter().zip(&large).filter(|(s, l)| **s > 0.0 && **l < 0.0).count();
    assert!(correct >= 45, "{correct} / 50 probe points separated");
}

#[test]
fn encoder_training_reduces_the_loss() {
    let records = tiny_records(6, 128);
    let refs: Vec<&ShapeRecord> = records.iter().collect();
    let cfg = PretrainConfig {
        shapes_per_batch: 6,
        points_per_shape: 64,
        encoder_lr: 1e-3,
        ..PretrainConfig::default()
    };
    let mut r = rng(45);
    let decoder = CsdfModel::new(small_config(), &mut r).unwrap();
    let mut et = EncoderTrainer::new(tiny_encoder_for(&decoder, &mut r));
    let first: f64 = (0..5).map(|_| et.train_step(&decoder, &refs, &cfg, &mut r).unwrap().total).sum();
    for _ in 0..100 {
        et.train_step(&decoder, &refs, &cfg, &mut r).unwrap();
    }
    let last: f64 = (0..5).map(|_| et.train_step(&decoder, &refs, &cfg, &mut r).unwrap().total).sum();
    assert!(last < first, "{last} >= {first}");
}

fn tiny_encoder_for(decoder: &CsdfModel, r: &mut ChaCha8Rng) -> MaskEncoder {
    let mut cfg = tiny_encoder(r).config;
    cfg.channels = [4, 8, 8, 16];
    cfg.head_hidden = 16;
    MaskEncoder::new(cfg, decoder.latent_dim(), r).unwrap()
}

#[test]
fn capped_rows_stay_in_the_ball() {
    let mut t = Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 0.3, 0.4]);
    cap_rows(&mut t, 2.0);
    assert!((t.row(0)[0] - 1.2).abs() < 1e-12 && (t.row(0)[1] - 1.6).abs() < 1e-12);
    assert_eq!(t.row(1), &[0.3, 0.4]);
}

#[test]
fn training_log_has_header_and_rows() {
    let rows = [
        LossTerms {
            step: 0,
            l1: 0.1,
            reg: 0.01,
            total: 0.11,
        },
        LossTerms {
            step: 1,
            l1: 0.05,
            reg: 0.01,
            total: 0.06,
        },
    ];
    let mut out = Vec::new();
    write_log_csv(&rows, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "step,l1,reg,total");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("1,"));
}

#[test]
fn pretrain_runs_both_stages() {
    let records = tiny_records(4, 64);
    let refs: Vec<&ShapeRecord> = records.iter().collect();
    let cfg = PretrainConfig {
        decoder_steps: 5,
        encoder_steps: 3,
        shapes_per_batch: 2,
        points_per_shape: 16,
        ..PretrainConfig::default()
    };
    let mut r = rng(46);
    let model = CsdfModel::new(small_config(), &mut r).unwrap();
    let enc = tiny_encoder_for(&model, &mut r);
    let out = pretrain(model.clone(), Some(enc), &refs, &cfg, &mut r).unwrap();
    assert_eq!(out.decoder_log.len(), 5);
    assert_eq!(out.encoder_log.len(), 3);
    assert_eq!(out.codes.len(), 4);
    assert_eq!(out.mean_code().len(), 8);
    let out = pretrain(model.clone(), None, &refs, &cfg, &mut r).unwrap();
    assert!(out.encoder.is_none() && out.encoder_log.is_empty());
    assert!(matches!(pretrain(model, None, &[], &cfg, &mut r), Err(CoreError::Empty(_))));
}
