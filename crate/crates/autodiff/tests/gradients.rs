use cardio_autodiff::gradcheck::{probe, GradCheckSummary};
use cardio_autodiff::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 2.0, rng)
}

/// Finite-difference check of `build` w.r.t. every entry of every input.
/// `build` maps leaf handles to a scalar loss on the given tape.
fn check_op(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) -> GradCheckSummary {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let mut summary = GradCheckSummary::default();
    for (i, &v) in vars.iter().enumerate() {
        let g = tape.grad_or_zeros(v);
        for j in 0..inputs[i].len() {
            let p = probe(
                |d| {
                    let mut shifted = inputs.clone();
                    shifted[i].data_mut()[j] += d;
                    eval(&shifted)
                },
                g.data()[j],
                H,
            );
            summary.record(p);
        }
    }
    summary
}

fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    // Random projection so every output entry matters with a distinct weight.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, tape.value(x).shape());
    let w = tape.constant(w);
    let p = tape.mul(x, w);
    tape.sum(p)
}

fn assert_pass(name: &str, s: GradCheckSummary) {
    assert!(s.checked > 0 && s.max_rel_error < TOL, "{name}: {s:?}");
    assert!(s.skipped * 10 <= s.checked + s.skipped, "{name}: too many kinks {s:?}");
}

#[test]
fn quadratic_gradient() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::from_vec(&[2], vec![1.0, -2.0]));
    let sq = tape.mul(w, w);
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap().data(), &[2.0, -4.0]);
}

#[test]
fn unrelated_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
    let u = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
    let loss = tape.sum(w);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad_or_zeros(u), Tensor::zeros(&[3]));
}

#[test]
fn backward_accumulates_until_reset() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::from_vec(&[2], vec![1.0, -2.0]));
    let sq = tape.square(w);
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap().data(), &[4.0, -8.0]);
    tape.zero_grad();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap().data(), &[2.0, -4.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::zeros(&[3]));
    assert!(matches!(tape.backward(w), Err(AutodiffError::NonScalarLoss(_))));
}

#[test]
fn elementwise_and_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[4, 3]);
    let b = rand_tensor(&mut rng, &[4, 3]);
    let pos = a.map(|v| v.abs() + 0.5);

    assert_pass("add/sub/mul", check_op(vec![a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1]);
        let d = t.sub(s, v[1]);
        let m = t.mul(d, v[1]);
        weighted_sum(t, m, 7)
    }));
    assert_pass("div", check_op(vec![a.clone(), pos.clone()], |t, v| {
        let d = t.div(v[0], v[1]);
        weighted_sum(t, d, 8)
    }));
    for op in [
        Unary::Tanh,
        Unary::Sigmoid,
        Unary::Exp,
        Unary::Sin,
        Unary::Cos,
        Unary::Softplus,
        Unary::Square,
        Unary::Relu,
        Unary::Abs,
    ] {
        assert_pass(&format!("{op:?}"), check_op(vec![a.clone()], move |t, v| {
            let y = t.unary(v[0], op);
            weighted_sum(t, y, 9)
        }));
    }
    assert_pass("sqrt", check_op(vec![pos.clone()], |t, v| {
        let y = t.sqrt(v[0]);
        weighted_sum(t, y, 10)
    }));
    assert_pass("scale/add_scalar/mean", check_op(vec![a.clone()], |t, v| {
        let y = t.scale(v[0], -1.7);
        let y = t.add_scalar(y, 0.3);
        let y = t.square(y);
        t.mean(y)
    }));
    assert_pass("concat/slice cols", check_op(vec![a.clone(), b.clone()], |t, v| {
        let c = t.concat_cols(&[v[0], v[1]]);
        let s = t.slice_cols(c, 2, 3);
        weighted_sum(t, s, 11)
    }));
    assert_pass("concat/slice rows", check_op(vec![a.clone(), b.clone()], |t, v| {
        let c = t.concat_rows(&[v[0], v[1]]);
        let s = t.slice_rows(c, 3, 4);
        weighted_sum(t, s, 12)
    }));
    assert_pass("gather rows", check_op(vec![a.clone()], |t, v| {
        let g = t.gather_rows(v[0], &[3, 0, 0, 2, 3]);
        weighted_sum(t, g, 13)
    }));
    assert_pass("transpose/reshape", check_op(vec![a.clone()], |t, v| {
        let tr = t.transpose(v[0]);
        let r = t.reshape(tr, &[2, 6]);
        weighted_sum(t, r, 14)
    }));
    assert_pass("mul_scalar", check_op(vec![a.clone(), Tensor::from_vec(&[1], vec![0.7])], |t, v| {
        let y = t.mul_scalar(v[0], v[1]);
        weighted_sum(t, y, 15)
    }));
}

#[test]
fn linear_algebra_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[5, 4]);
    let b = rand_tensor(&mut rng, &[4, 3]);
    let bias = rand_tensor(&mut rng, &[3]);
    assert_pass("matmul/add_row", check_op(vec![a, b, bias], |t, v| {
        let m = t.matmul(v[0], v[1]);
        let m = t.add_row(m, v[2]);
        weighted_sum(t, m, 21)
    }));
}

#[test]
fn rodrigues_gradient_including_small_angles() {
    for w in [vec![0.3, -0.8, 1.1], vec![1e-6, -2e-6, 5e-7], vec![0.0, 0.0, 0.0], vec![2.5, 0.1, -0.4]] {
        let s = check_op(vec![Tensor::from_vec(&[3], w.clone())], |t, v| {
            let r = t.rodrigues(v[0]);
            weighted_sum(t, r, 31)
        });
        assert_pass(&format!("rodrigues {w:?}"), s);
    }
}

#[test]
fn rodrigues_is_a_rotation() {
    let r = rodrigues([0.4, -1.3, 0.8]);
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k * 3 + i] * r[k * 3 + j]).sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((dot - expect).abs() < 1e-12);
        }
    }
    let det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) + r[2] * (r[3] * r[7] - r[4] * r[6]);
    assert!((det - 1.0).abs() < 1e-12);
    // Quarter turn about z maps x to y.
    let q = rodrigues([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
    assert!((q[0]).abs() < 1e-12 && (q[3] - 1.0).abs() < 1e-12);
}

#[test]
fn posenc_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[4, 3]);
    for cfg in [PosEncConfig::new(4, true), PosEncConfig::new(3, false)] {
        assert_pass("posenc", check_op(vec![x.clone()], move |t, v| {
            let e = t.posenc(v[0], cfg);
            weighted_sum(t, e, 41)
        }));
    }
}

#[test]
fn posenc_matches_direct_evaluation() {
    let cfg = PosEncConfig::new(4, true);
    let out = positional_encode(&[0.3], cfg);
    assert_eq!(out[0], 0.3);
    for i in 0..4 {
        let arg = 2f64.powi(i) * std::f64::consts::PI * 0.3;
        assert!((out[1 + 2 * i as usize] - arg.sin()).abs() < 1e-12);
        assert!((out[2 + 2 * i as usize] - arg.cos()).abs() < 1e-12);
    }
}

#[test]
fn conv_attention_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 2, 6, 5]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        assert_pass("conv2d", check_op(vec![x.clone(), w.clone(), b.clone()], move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, pad);
            weighted_sum(t, y, 51)
        }));
    }
    let q = rand_tensor(&mut rng, &[2, 3, 5, 4]);
    let k = rand_tensor(&mut rng, &[2, 3, 5, 4]);
    let vv = rand_tensor(&mut rng, &[2, 3, 5, 4]);
    for radius in [0, 1, 2, 7] {
        assert_pass("window_attention", check_op(vec![q.clone(), k.clone(), vv.clone()], move |t, v| {
            let y = t.window_attention(v[0], v[1], v[2], radius, 0.8);
            weighted_sum(t, y, 52)
        }));
    }
    // Self-attention with aliased inputs.
    assert_pass("window_attention aliased", check_op(vec![q.clone()], |t, v| {
        let y = t.window_attention(v[0], v[0], v[0], 1, 1.3);
        weighted_sum(t, y, 53)
    }));
    assert_pass("spatial_mean", check_op(vec![q], |t, v| {
        let y = t.spatial_mean(v[0]);
        weighted_sum(t, y, 54)
    }));
}

#[test]
fn bce_with_logits_gradient_and_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u = rand_tensor(&mut rng, &[16]);
    let targets: Vec<f64> = (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let tg = targets.clone();
    assert_pass("bce", check_op(vec![u.clone()], move |t, v| t.bce_with_logits(v[0], &tg)));

    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[4]));
    let l = tape.bce_with_logits(z, &[1.0, 0.0, 1.0, 0.0]);
    assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    // Large logits stay finite.
    let big = tape.constant(Tensor::from_vec(&[2], vec![800.0, -800.0]));
    let l = tape.bce_with_logits(big, &[0.0, 1.0]);
    assert!((tape.value(l).item() - 800.0).abs() < 1e-9);
}

/// Independent forward pass with compensated summation.
fn scalar_mlp(mlp: &MlpParams, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let last = mlp.layers.len() - 1;
    for (li, layer) in mlp.layers.iter().enumerate() {
        let (din, dout) = (layer.input_dim(), layer.output_dim());
        let mut next = vec![0.0; dout];
        for (o, slot) in next.iter_mut().enumerate() {
            // Neumaier summation.
            let mut sum = layer.bias.data()[o];
            let mut comp = 0.0;
            for i in 0..din {
                let term = h[i] * layer.weight.data()[i * dout + o];
                let t = sum + term;
                if sum.abs() >= term.abs() {
                    comp += (sum - t) + term;
                } else {
                    comp += (term - t) + sum;
                }
                sum = t;
            }
            let v = sum + comp;
            *slot = if li == last { v } else { v.max(0.0) };
        }
        h = next;
    }
    h
}

#[test]
fn mlp_forward_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mlp = MlpParams::new(&[5, 16, 3], Activation::Relu, &mut rng);
    let x = rand_tensor(&mut rng, &[8, 5]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = mlp_forward(&mut tape, &mlp, xv).unwrap();
    for r in 0..8 {
        let oracle = scalar_mlp(&mlp, x.row(r));
        for (a, b) in tape.value(y).row(r).iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn mlp_parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mlp = MlpParams::new(&[4, 12, 12, 2], Activation::Tanh, &mut rng);
    let x = rand_tensor(&mut rng, &[6, 4]);
    let loss_of = |m: &MlpParams| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = mlp_forward(&mut tape, m, xv).unwrap();
        let y2 = tape.square(y);
        let l = tape.mean(y2);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let vars = mlp.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let y = vars.forward(&mut tape, xv).unwrap();
    let y2 = tape.square(y);
    let l = tape.mean(y2);
    tape.backward(l).unwrap();
    let grads: Vec<Tensor> = vars.leaves().iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut summary = GradCheckSummary::default();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..120 {
        let p = probe_rng.gen_range(0..grads.len());
        let j = probe_rng.gen_range(0..grads[p].len());
        summary.record(probe(
            |d| {
                let mut m = mlp.clone();
                m.params_mut()[p].data_mut()[j] += d;
                loss_of(&m)
            },
            grads[p].data()[j],
            H,
        ));
    }
    assert!(summary.passes(TOL, 100), "{summary:?}");
}

#[test]
fn tape_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mlp = MlpParams::new(&[3, 32, 32, 1], Activation::Relu, &mut rng);
        let x = rand_tensor(&mut rng, &[64, 3]);
        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape, true);
        let xv = tape.constant(x);
        let y = vars.forward(&mut tape, xv).unwrap();
        let y = tape.abs(y);
        let l = tape.mean(y);
        tape.backward(l).unwrap();
        vars.leaves().iter().map(|&v| tape.grad_or_zeros(v)).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

/// Textbook scalar Adam, kept separate from the library implementation.
fn scalar_adam(p0: f64, grads: &[f64], lr: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        p -= lr * mh / (vh.sqrt() + eps);
    }
    p
}

#[test]
fn adam_matches_scalar_oracle() {
    let mut p = Tensor::scalar(0.0);
    let mut adam = AdamState::new(AdamConfig::default());
    for _ in 0..2 {
        adam.step_module(&mut p, &[Tensor::scalar(1.0)], 1e-3).unwrap();
    }
    assert!((p.item() - scalar_adam(0.0, &[1.0, 1.0], 1e-3)).abs() < 1e-10);
    assert_eq!(adam.steps(), 2);
}

proptest! {
    #[test]
    fn posenc_pairs_lie_on_unit_circle(x in -3.0f64..3.0, k in 1usize..8) {
        let out = positional_encode(&[x], PosEncConfig::new(k, false));
        for pair in out.chunks(2) {
            prop_assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..40), meta in "[a-z{}:\" ]{0,20}") {
        let mut ck = Checkpoint::new(meta);
        let n = values.len();
        ck.push("a.weight", Tensor::from_vec(&[n], values.clone()));
        ck.push("b", Tensor::from_vec(&[1, n], values));
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        prop_assert_eq!(Checkpoint::read_from(&bytes[..]).unwrap(), ck);
    }
}
