mod common;

use cardio_autodiff::{rodrigues, Tape};
use cardio_core::csdf::{CsdfConfig, CsdfModel};
use cardio_core::geom::{self, det, mat_mul, mat_vec, orthonormality_error, rot_z};
use cardio_core::metrics::projected_dice;
use cardio_core::render::*;
use cardio_core::shapegen::{slice_to_mask, AnalyticShape, Mask, ProbeView};
use common::gradients::{scalar_render_loss, tape_render_grad};
use common::{check_vector, sphere, FD_TOL};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn close3(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
    (0..3).all(|i| (a[i] - b[i]).abs() <= tol)
}

#[test]
fn sigmoid_matches_closed_form() {
    for alpha in [0.5, 20.0, 150.0, 1e4] {
        assert_eq!(sigmoid_mask(0.0, alpha), 0.5);
    }
    let oracle = |f: f64, a: f64| 1.0 / (1.0 + (a * f).exp());
    assert!((sigmoid_mask(0.1, 20.0) - 0.11920).abs() < 1e-5);
    assert!((sigmoid_mask(-0.1, 20.0) - 0.88080).abs() < 1e-5);
    assert!((sigmoid_mask(0.1, 20.0) - oracle(0.1, 20.0)).abs() < 1e-15);
    let mut r = rng(1);
    for _ in 0..1000 {
        let f = r.gen_range(-0.3..0.3);
        let a = r.gen_range(1.0..200.0);
        assert!((sigmoid_mask(f, a) + sigmoid_mask(-f, a) - 1.0).abs() < 1e-15);
        assert!((sigmoid_mask(f, a) - oracle(f, a)).abs() < 1e-12);
        assert!(sigmoid_mask(f + 1e-3, a) <= sigmoid_mask(f, a));
    }
}

#[test]
fn sharp_sigmoid_matches_the_sign() {
    let mut r = rng(2);
    let mut checked = 0;
    while checked < 10_000 {
        let f: f64 = r.gen_range(-0.2..0.2);
        if f.abs() <= 1e-3 {
            continue;
        }
        assert_eq!(sigmoid_mask(f, EVAL_ALPHA) > 0.5, f < 0.0, "f = {f}");
        checked += 1;
    }
    assert_eq!(sigmoid_mask(-1e-2, EVAL_ALPHA), 1.0);
}

#[test]
fn pixel_to_3d_examples() {
    let id = ProbeParams::identity("id");
    assert_eq!(id.pixel_to_3d([0.3, -0.5]), [0.3, -0.5, 0.0]);
    let p = ProbeParams {
        log_scale: 2f64.ln(),
        translation: [0.0, 0.0, 1.0],
        ..ProbeParams::identity("s")
    };
    assert!(close3(p.pixel_to_3d([1.0, 1.0]), [2.0, 2.0, 1.0], 1e-15));
    let rz = ProbeParams {
        rotation: [0.0, 0.0, std::f64::consts::FRAC_PI_2],
        ..ProbeParams::identity("rz")
    };
    assert!(close3(rz.pixel_to_3d([1.0, 0.0]), [0.0, 1.0, 0.0], 1e-12));
}

fn random_rotation_vector(r: &mut ChaCha8Rng) -> [f64; 3] {
    let axis = geom::normalize([r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]);
    geom::scale(axis, r.gen_range(0.0..3.0))
}

#[test]
fn composed_rotation_equals_sequential_application() {
    let mut r = rng(3);
    for _ in 0..200 {
        // Keep the composed angle well below pi, where the log map loses precision.
        let (w1, w2) = (
            geom::scale(random_rotation_vector(&mut r), 0.4),
            geom::scale(random_rotation_vector(&mut r), 0.4),
        );
        let r1 = rodrigues(w1);
        let composed = ProbeParams {
            rotation: log_map(&mat_mul(&r1, &rodrigues(w2))),
            ..ProbeParams::identity("c")
        };
        let inner = ProbeParams {
            rotation: w2,
            ..ProbeParams::identity("i")
        };
        let p = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
        let seq = mat_vec(&r1, inner.pixel_to_3d(p));
        assert!(close3(composed.pixel_to_3d(p), seq, 1e-12));
    }
}

proptest! {
    #[test]
    fn decoded_rotations_are_proper(x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
        let p = ProbeParams { rotation: [x, y, z], ..ProbeParams::identity("p") };
        let m = p.matrix();
        prop_assert!(orthonormality_error(&m) < 1e-12);
        prop_assert!((det(&m) - 1.0).abs() < 1e-12);
        prop_assert!(p.scale() > 0.0);
    }

    #[test]
    fn log_map_inverts_the_exponential(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
        let w = [x, y, z];
        prop_assume!(geom::norm(w) < 3.0);
        let back = log_map(&rodrigues(w));
        prop_assert!(close3(back, w, 1e-9));
    }
}

#[test]
fn view_round_trip_and_tape_points_agree() {
    let mut r = rng(4);
    for view in ProbeView::standard_set(&[0.0, 60.0, 90.0]) {
        let p = ProbeParams::from_view(&view).perturbed(random_rotation_vector(&mut r), [0.01, -0.02, 0.03]);
        let pixels: Vec<[f64; 2]> = (0..20).map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]).collect();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let pts = vars.points(&mut tape, &pixels);
        let got = tape.value(pts).data().to_vec();
        for (i, px) in pixels.iter().enumerate() {
            let want = p.pixel_to_3d(*px);
            assert!(close3([got[3 * i], got[3 * i + 1], got[3 * i + 2]], want, 1e-12));
            assert!(close3(p.to_view().to_3d(px[0], px[1]), want, 1e-12));
        }
    }
    let q = ProbeParams::from_view(&ProbeView::apical("a2c", 60.0));
    assert!(close3(q.pixel_to_3d([0.4, 0.2]), ProbeView::apical("a2c", 60.0).to_3d(0.4, 0.2), 1e-12));
}

/// Straight loop over the definition, kept apart from the library code.
fn scalar_loss(pred: &[Vec<f64>], gt: &[Vec<f64>], lb: f64, ld: f64, eps: f64) -> f64 {
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let mut bce = 0.0;
        for i in 0..p.len() {
            let q = p[i].max(1e-6).min(1.0 - 1e-6);
            bce += if g[i] > 0.5 { -q.ln() } else { -(1.0 - q).ln() };
        }
        bce /= p.len() as f64;
        let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        let dice = (2.0 * inter + eps) / (p.iter().sum::<f64>() + g.iter().sum::<f64>() + eps);
        total += lb * bce + ld * (1.0 - dice);
    }
    total / pred.len() as f64
}

#[test]
fn render_loss_matches_scalar_oracle() {
    let mut r = rng(5);
    let cfg = RenderConfig::default();
    let pred: Vec<Vec<f64>> = (0..3).map(|_| (0..4096).map(|_| r.gen_range(0.0..1.0)).collect()).collect();
    let gt: Vec<Vec<f64>> = (0..3).map(|_| (0..4096).map(|_| f64::from(r.gen_bool(0.3) as u8)).collect()).collect();
    let pr: Vec<&[f64]> = pred.iter().map(|v| v.as_slice()).collect();
    let gr: Vec<&[f64]> = gt.iter().map(|v| v.as_slice()).collect();
    let terms = render_loss(&pr, &gr, &cfg);
    let oracle = scalar_loss(&pred, &gt, cfg.lambda_bce, cfg.lambda_dice, cfg.dice_eps);
    assert!((terms.total - oracle).abs() < 1e-10, "{} vs {oracle}", terms.total);
    assert!((terms.total - cfg.lambda_bce * terms.bce - cfg.lambda_dice * terms.dice).abs() < 1e-12);
}

#[test]
fn render_loss_extremes() {
    let cfg = RenderConfig::default();
    let gt: Vec<f64> = (0..1000).map(|i| f64::from(i % 2 == 0)).collect();
    let perfect = render_loss(&[&gt], &[&gt], &cfg);
    assert!(perfect.total < 1e-4, "{perfect:?}");
    let half = vec![0.5; 1000];
    let t = render_loss(&[&half], &[&gt], &cfg);
    assert!((t.bce - std::f64::consts::LN_2).abs() < 1e-9);
}

fn small_model(r: &mut ChaCha8Rng) -> CsdfModel {
    let cfg = CsdfConfig {
        latent_dim: 8,
        hidden_width: 16,
        hidden_layers: 2,
        ..CsdfConfig::default()
    };
    CsdfModel::new(cfg, r).unwrap()
}

fn random_samples(n: usize, r: &mut ChaCha8Rng) -> ViewSamples {
    ViewSamples {
        pixels: (0..n).map(|_| [r.gen_range(-0.9..0.9), r.gen_range(-0.9..0.9)]).collect(),
        targets: (0..n).map(|_| f64::from(r.gen_bool(0.4) as u8)).collect(),
    }
}

#[test]
fn renderer_gradients_match_finite_differences() {
    let mut r = rng(6);
    let cfg = RenderConfig::default();
    let mut summary = cardio_autodiff::gradcheck::GradCheckSummary::default();
    for trial in 0..5 {
        let model = small_model(&mut r);
        let samples: Vec<_> = (0..2).map(|_| random_samples(64, &mut r)).collect();
        let mut v: Vec<f64> = (0..8).map(|_| r.gen_range(-0.5..0.5)).collect();
        for _ in 0..2 {
            v.extend(random_rotation_vector(&mut r));
            v.extend([r.gen_range(-0.1..0.1), r.gen_range(-0.1..0.1), r.gen_range(-0.1..0.1)]);
            v.push(r.gen_range(-0.1..0.1));
        }
        let alpha = 20.0;
        let (value, grad) = tape_render_grad(&model, &v, &samples, alpha, &cfg);
        assert!((value - scalar_render_loss(&model, &v, &samples, alpha, &cfg)).abs() < 1e-10);
        let s = check_vector(&v, &grad, v.len(), trial, |x| scalar_render_loss(&model, x, &samples, alpha, &cfg));
        summary.checked += s.checked;
        summary.skipped += s.skipped;
        summary.max_rel_error = summary.max_rel_error.max(s.max_rel_error);
    }
    assert!(summary.passes(FD_TOL, 100), "{summary:?}");
}

#[test]
fn mismatch_gives_gradient_to_shape_and_pose() {
    let fx = sphere();
    let view = ProbeView::apical("a4c", 0.0);
    let target = slice_to_mask(&AnalyticShape::sphere(0.6), &view, 64, 64).unwrap();
    let samples = PixelSampler::new(&target).all();
    let probe = ProbeParams::from_view(&view).perturbed([0.0, 0.05, 0.0], [0.05, 0.0, 0.0]);
    let mut v = fx.z.clone();
    v.extend(probe.rotation);
    v.extend(probe.translation);
    v.push(probe.log_scale);
    let (_, g) = tape_render_grad(&fx.model, &v, &[samples], 20.0, &RenderConfig::default());
    let l = fx.z.len();
    let norm = |s: &[f64]| s.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm(&g[..l]) > 1e-6, "latent gradient vanished");
    assert!(norm(&g[l..l + 3]) > 1e-6 && norm(&g[l + 3..l + 6]) > 1e-6 && g[l + 6].abs() > 1e-6);
}

#[test]
fn every_ten_steps_hold_eight_latent_and_two_probe_updates() {
    let cfg = TtoConfig::default();
    for start in 0..200 {
        let latent = (start..start + 10).filter(|&s| cfg.target(s) == UpdateTarget::Latent).count();
        assert_eq!(latent, 8, "window at {start}");
    }
    let mut r = rng(7);
    let model = small_model(&mut r);
    let mask = Mask::from_fn(16, 16, |i, j| (i as i64 - 8).pow(2) + (j as i64 - 8).pow(2) < 25);
    let tcfg = TtoConfig {
        steps: 40,
        history_every: 0,
        render: RenderConfig {
            samples_per_iter: 64,
            ..RenderConfig::default()
        },
        ..TtoConfig::default()
    };
    let probes = [ProbeParams::identity("a")];
    let mut seen = Vec::new();
    let res = tto_shape_observed(&model, &[0.0; 8], &[&mask], &probes, &tcfg, &mut r, |s, _, _| seen.push(s)).unwrap();
    let latent = res.losses.iter().filter(|p| p.target == UpdateTarget::Latent).count();
    assert_eq!((latent, res.losses.len() - latent), (32, 8));
    assert_eq!(seen, (0..=40).collect::<Vec<_>>());
    assert!(res.aborted.is_none());
    assert_eq!(res.history.len(), 1);

    let frozen = TtoConfig {
        optimize_probes: false,
        ..tcfg
    };
    let res = tto_shape(&model, &[0.0; 8], &[&mask], &probes, &frozen, &mut r).unwrap();
    assert!(res.losses.iter().all(|p| p.target == UpdateTarget::Latent));
    assert_eq!(res.probes[0], probes[0]);
}

#[test]
fn alpha_schedule_is_linear() {
    let cfg = RenderConfig::default();
    assert_eq!(cfg.alpha(0, 1500), 20.0);
    assert_eq!(cfg.alpha(1499, 1500), 150.0);
    assert!((cfg.alpha(749, 1499) - 85.0).abs() < 1e-9);
}

#[test]
fn fitting_its_own_render_stays_put() {
    let fx = sphere();
    let probes: Vec<ProbeParams> = ProbeView::standard_set(&[0.0, 60.0, 90.0]).iter().map(ProbeParams::from_view).collect();
    let masks: Vec<Mask> = probes.iter().map(|p| render_binary_mask(&fx.model, &fx.z, p, 64, 64, EVAL_ALPHA)).collect();
    let refs: Vec<&Mask> = masks.iter().collect();
    let cfg = TtoConfig {
        steps: 200,
        ..TtoConfig::default()
    };
    let res = tto_shape(&fx.model, &fx.z, &refs, &probes, &cfg, &mut rng(8)).unwrap();
    let head: f64 = res.losses[..10].iter().map(|p| p.terms.total).sum();
    let tail: f64 = res.losses[res.losses.len() - 10..].iter().map(|p| p.terms.total).sum();
    assert!(tail <= head, "{tail} > {head}");
    assert!(res.final_dice.iter().all(|&d| d >= 0.99), "{:?}", res.final_dice);
    assert_eq!(res.history.first().unwrap().step, 0);
    assert_eq!(res.history.last().unwrap().step, 200);
}

#[test]
fn single_view_fit_settles() {
    let fx = sphere();
    let view = ProbeView::apical("a4c", 0.0);
    let target = slice_to_mask(&AnalyticShape::sphere(0.7), &view, 64, 64).unwrap();
    let cfg = TtoConfig {
        steps: 600,
        history_every: 0,
        ..TtoConfig::default()
    };
    let res = tto_shape(&fx.model, &fx.z, &[&target], &[ProbeParams::from_view(&view)], &cfg, &mut rng(9)).unwrap();
    let trailing: Vec<f64> = res.losses.iter().rev().take(200).map(|p| p.terms.total).collect();
    let (late, early) = trailing.split_at(100);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    assert!(mean(late) <= 1.05 * mean(early), "{} vs {}", mean(late), mean(early));
    assert!(res.final_dice[0] > 0.95, "{:?}", res.final_dice);
}

#[test]
fn non_finite_loss_keeps_the_last_good_state() {
    let fx = sphere();
    let mut z = fx.z.clone();
    z[0] = f64::NAN;
    let view = ProbeView::apical("a4c", 0.0);
    let mask = slice_to_mask(&AnalyticShape::sphere(0.7), &view, 32, 32).unwrap();
    let probe = ProbeParams::from_view(&view);
    let res = tto_shape(&fx.model, &z, &[&mask], &[probe.clone()], &TtoConfig::default(), &mut rng(10)).unwrap();
    assert!(res.aborted.is_some());
    assert!(res.z[0].is_nan() && res.z[1..] == z[1..]);
    assert_eq!(res.probes[0], probe);
    assert!(res.losses.is_empty());
}

#[test]
fn bad_inputs_are_rejected() {
    let fx = sphere();
    let mask = Mask::zeros(16, 16);
    let p = ProbeParams::identity("a");
    let cfg = TtoConfig::default();
    assert!(tto_shape(&fx.model, &fx.z, &[], &[], &cfg, &mut rng(11)).is_err());
    assert!(tto_shape(&fx.model, &fx.z, &[&mask], &[p.clone(), p.clone()], &cfg, &mut rng(11)).is_err());
    assert!(tto_shape(&fx.model, &[0.0; 3], &[&mask], &[p.clone()], &cfg, &mut rng(11)).is_err());
    let bad = TtoConfig {
        latent_steps_per_cycle: 11,
        ..cfg
    };
    assert!(tto_shape(&fx.model, &fx.z, &[&mask], &[p], &bad, &mut rng(11)).is_err());
}

#[test]
fn sampler_covers_band_and_image() {
    let mask = Mask::from_fn(32, 32, |i, j| (8..24).contains(&i) && (8..24).contains(&j));
    let s = PixelSampler::new(&mask);
    let all = s.all();
    assert_eq!(all.pixels.len(), 32 * 32);
    assert_eq!(all.targets.iter().sum::<f64>() as usize, mask.count());
    let drawn = s.draw(1000, 0.5, &mut rng(12));
    assert_eq!(drawn.pixels.len(), 1000);
    // Band pixels lie within one pixel of the square's edge, |u| or |v| near 0.5.
    let near_edge = |p: &[f64; 2]| {
        let m = p[0].abs().max(p[1].abs());
        (m - 0.5).abs() < 3.5 / 32.0
    };
    assert!(drawn.pixels[..500].iter().all(near_edge));
}

#[test]
fn shifted_probe_lowers_projected_dice() {
    let fx = sphere();
    let view = ProbeView::apical("a4c", 0.0);
    let gt = slice_to_mask(&AnalyticShape::sphere(0.8), &view, 64, 64).unwrap();
    let p = ProbeParams::from_view(&view);
    let (aligned, _) = projected_dice(&fx.model, &fx.z, &p, &gt, EVAL_ALPHA).unwrap();
    let shifted = ProbeParams {
        translation: geom::add(p.translation, mat_vec(&rot_z(0.0), [1.0, 0.0, 0.0])),
        ..p
    };
    let (moved, _) = projected_dice(&fx.model, &fx.z, &shifted, &gt, EVAL_ALPHA).unwrap();
    assert!(aligned > 0.97, "{aligned}");
    assert!(moved < aligned);
}
