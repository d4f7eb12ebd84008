use super::gradcheck::grad_check;
use super::nn::{self, BatchNormStats, LstmWeights, Mode};
use super::suite::primitive_checks;
use super::*;
use crate::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Direct summation over an explicitly zero-padded input.
fn conv_oracle(x: &Tensor, w: &Tensor, bias: &[f64], groups: usize) -> Tensor {
    let (b, c_in, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, cig, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let pad = (k - 1) / 2;
    let cog = c_out / groups;
    let mut padded = vec![0.0; b * c_in * (len + 2 * pad)];
    for bi in 0..b {
        for c in 0..c_in {
            for ti in 0..len {
                padded[(bi * c_in + c) * (len + 2 * pad) + ti + pad] = x.at(&[bi, c, ti]);
            }
        }
    }
    let mut out = vec![0.0; b * c_out * len];
    for bi in 0..b {
        for oc in 0..c_out {
            let g = oc / cog;
            for ti in 0..len {
                let mut s = bias[oc];
                for j in 0..cig {
                    for kk in 0..k {
                        s += w.at(&[oc, j, kk]) * padded[(bi * c_in + g * cig + j) * (len + 2 * pad) + ti + kk];
                    }
                }
                out[(bi * c_out + oc) * len + ti] = s;
            }
        }
    }
    t(&[b, c_out, len], &out)
}

#[test]
fn matmul_by_hand() {
    let tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let b = tape.constant(t(&[2, 1], &[1., 1.]));
    let c = a.matmul(b).unwrap();
    assert_eq!(c.shape(), vec![2, 1]);
    assert_eq!(c.value().data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match a.matmul(b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn broadcast_only_over_leading_axes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(a.add(tape.constant(Tensor::zeros(&[3]))).is_ok());
    assert!(a.add(tape.constant(Tensor::zeros(&[2]))).is_err());
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let tape = Tape::new();
    let s = tape.constant(t(&[2], &[0., 0.])).softmax().unwrap();
    assert_eq!(s.value().data(), &[0.5, 0.5]);
}

#[test]
fn masked_softmax_zeroes_masked_and_rejects_empty_rows() {
    let tape = Tape::new();
    let x = tape.constant(t(&[1, 3], &[5., 1., 2.]));
    let s = x.masked_softmax(Some(&[1., 0., 1.])).unwrap();
    assert_eq!(s.value().data()[1], 0.0);
    assert!((s.value().data().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert!(x.masked_softmax(Some(&[0., 0., 0.])).is_err());
}

#[test]
fn cross_entropy_uniform_logits_is_ln_classes() {
    for s in [2usize, 5, 13] {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::full(&[3, s], 0.7));
        let loss = tape.cross_entropy_with_logits(logits, &[0, s - 1, s / 2], &[1.0; 3]).unwrap();
        assert!((loss.item() - (s as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn log_and_exp_domain_errors() {
    let tape = Tape::new();
    assert!(matches!(
        tape.constant(t(&[2], &[1.0, 0.0])).log(),
        Err(Error::Domain { op: "log", .. })
    ));
    assert!(matches!(
        tape.constant(t(&[1], &[1000.0])).exp(),
        Err(Error::Domain { op: "exp", .. })
    ));
    let p = tape.constant(t(&[1], &[0.0]));
    assert!(tape.binary_cross_entropy(p, &[1.0]).is_err());
}

#[test]
fn conv1d_hand_example() {
    let tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 3], &[1., 2., 3.]));
    let w = tape.constant(t(&[1, 1, 3], &[1., 0., -1.]));
    let b = tape.constant(t(&[1], &[0.]));
    let y = tape.conv1d(x, w, Some(b), 1).unwrap();
    let oracle = conv_oracle(&x.value(), &w.value(), &[0.0], 1);
    assert_eq!(oracle.data(), &[-2., -2., 2.]);
    assert_eq!(y.value().data(), oracle.data());
}

#[test]
fn conv1d_matches_oracle_and_independent_groups() {
    let mut rng = SeededRng::new(3);
    for _ in 0..20 {
        let groups = rng.inclusive(1, 4);
        let (cig, cog, k, len) = (rng.inclusive(1, 3), rng.inclusive(1, 3), [1, 3, 5, 7][rng.below(4)], rng.inclusive(1, 9));
        let x = Tensor::randn(&[2, groups * cig, len], 1.0, &mut rng);
        let w = Tensor::randn(&[groups * cog, cig, k], 1.0, &mut rng);
        let bias: Vec<f64> = (0..groups * cog).map(|_| rng.normal()).collect();
        let tape = Tape::new();
        let y = tape
            .conv1d(tape.constant(x.clone()), tape.constant(w.clone()), Some(tape.constant(Tensor::vector(bias.clone()))), groups)
            .unwrap();
        assert!(y.value().max_abs_diff(&conv_oracle(&x, &w, &bias, groups)) < 1e-12);

        // Sequential execution: one groups=1 convolution per channel block.
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let bv = tape.constant(Tensor::vector(bias.clone()));
        let parts: Vec<_> = (0..groups)
            .map(|g| {
                let xg = xv.slice(1, g * cig, cig).unwrap();
                let wg = wv.slice(0, g * cog, cog).unwrap();
                let bg = bv.slice(0, g * cog, cog).unwrap();
                tape.conv1d(xg, wg, Some(bg), 1).unwrap()
            })
            .collect();
        let seq = tape.concat(&parts, 1).unwrap();
        assert!(y.value().max_abs_diff(&seq.value()) <= 1e-12);
    }
}

#[test]
fn conv1d_block_diagonal_dense_equals_grouped() {
    let mut rng = SeededRng::new(5);
    let (groups, cig, cog, k) = (3, 2, 2, 3);
    let x = Tensor::randn(&[1, groups * cig, 6], 1.0, &mut rng);
    let w = Tensor::randn(&[groups * cog, cig, k], 1.0, &mut rng);
    let mut dense = Tensor::zeros(&[groups * cog, groups * cig, k]);
    for oc in 0..groups * cog {
        let g = oc / cog;
        for j in 0..cig {
            for kk in 0..k {
                let idx = (oc * groups * cig + g * cig + j) * k + kk;
                dense.data_mut()[idx] = w.at(&[oc, j, kk]);
            }
        }
    }
    let tape = Tape::new();
    let a = tape.conv1d(tape.constant(x.clone()), tape.constant(w), None, groups).unwrap();
    let b = tape.conv1d(tape.constant(x), tape.constant(dense), None, 1).unwrap();
    assert!(a.value().max_abs_diff(&b.value()) < 1e-12);
}

#[test]
fn conv1d_configuration_errors() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 4]));
    let w = tape.constant(Tensor::zeros(&[2, 1, 3]));
    assert!(matches!(tape.conv1d(x, w, None, 2), Err(Error::Config(_))));
    let x = tape.constant(Tensor::zeros(&[1, 2, 4]));
    let w = tape.constant(Tensor::zeros(&[2, 2, 2]));
    assert!(matches!(tape.conv1d(x, w, None, 1), Err(Error::Config(_))));
}

fn moments(data: &[f64]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[test]
fn batch_norm_constant_channel_is_zero() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 1, 3], 4.2));
    let (g, b) = (tape.constant(Tensor::full(&[1], 1.0)), tape.constant(Tensor::zeros(&[1])));
    let mut stats = BatchNormStats::new(1);
    let y = nn::batch_norm_1d(x, g, b, None, &mut stats, Mode::Train).unwrap();
    assert!(y.value().data().iter().all(|v| *v == 0.0));
}

#[test]
fn batch_norm_standardizes_then_applies_affine() {
    let mut rng = SeededRng::new(11);
    let (b, c, len) = (3, 2, 7);
    let mut x = Tensor::randn(&[b, c, len], 2.5, &mut rng);
    x.data_mut().iter_mut().for_each(|v| *v += 4.0);
    for (gamma, beta) in [(1.0, 0.0), (2.0, 3.0)] {
        let tape = Tape::new();
        let mut stats = BatchNormStats::new(c);
        let y = nn::batch_norm_1d(
            tape.constant(x.clone()),
            tape.constant(Tensor::full(&[c], gamma)),
            tape.constant(Tensor::full(&[c], beta)),
            None,
            &mut stats,
            Mode::Train,
        )
        .unwrap();
        for ci in 0..c {
            let chan: Vec<f64> = (0..b)
                .flat_map(|bi| (0..len).map(move |ti| (bi, ti)))
                .map(|(bi, ti)| y.value().at(&[bi, ci, ti]))
                .collect();
            let (m, s) = moments(&chan);
            assert!((m - beta).abs() < 1e-6, "mean {m}");
            // ε = 1e-5 shrinks the std by a relative ~ε/(2σ²).
            assert!((s - gamma).abs() < 1e-6 * gamma.max(1.0), "std {s}");
        }
    }
}

#[test]
fn batch_norm_eval_requires_stats_and_updates_with_momentum() {
    let tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 2], &[0.0, 2.0]));
    let (g, b) = (tape.constant(Tensor::full(&[1], 1.0)), tape.constant(Tensor::zeros(&[1])));
    let mut stats = BatchNormStats::new(1);
    assert!(matches!(
        nn::batch_norm_1d(x, g, b, None, &mut stats, Mode::Eval),
        Err(Error::UninitializedStats)
    ));
    nn::batch_norm_1d(x, g, b, None, &mut stats, Mode::Train).unwrap();
    assert_eq!((stats.mean[0], stats.var[0]), (1.0, 1.0));
    let x2 = tape.constant(t(&[1, 1, 2], &[4.0, 4.0]));
    nn::batch_norm_1d(x2, g, b, None, &mut stats, Mode::Train).unwrap();
    assert!((stats.mean[0] - 1.3).abs() < 1e-12);
    assert!((stats.var[0] - 0.9).abs() < 1e-12);
    let y = nn::batch_norm_1d(x2, g, b, None, &mut stats, Mode::Eval).unwrap();
    let expected = (4.0 - 1.3) / (0.9f64 + 1e-5).sqrt();
    assert!((y.value().data()[0] - expected).abs() < 1e-12);
}

#[test]
fn dropout_modes() {
    let tape = Tape::new();
    let mut rng = SeededRng::new(1);
    let x = tape.constant(Tensor::full(&[100_000], 1.0));
    let same = nn::dropout(x, 0.0, &mut rng, Mode::Train).unwrap();
    assert_eq!(same.value().data(), x.value().data());
    let eval = nn::dropout(x, 0.7, &mut rng, Mode::Eval).unwrap();
    assert_eq!(eval.value().data(), x.value().data());
    let half = nn::dropout(x, 0.5, &mut rng, Mode::Train).unwrap();
    let mean = half.value().data().iter().sum::<f64>() / 100_000.0;
    assert!((0.98..=1.02).contains(&mean), "mean {mean}");
    assert!(half.value().data().iter().all(|v| *v == 0.0 || *v == 2.0));
    assert!(matches!(nn::dropout(x, 1.0, &mut rng, Mode::Train), Err(Error::Config(_))));
}

fn lstm_weights(tape: &Tape, input: usize, hidden: usize, w: Tensor, b: Tensor) -> LstmWeights<'_> {
    assert_eq!(w.shape(), [input + hidden, 4 * hidden]);
    LstmWeights {
        w: tape.constant(w),
        b: tape.constant(b),
    }
}

#[test]
fn lstm_zero_fixed_point() {
    let tape = Tape::new();
    let (i, h) = (3, 4);
    let weights = lstm_weights(&tape, i, h, Tensor::zeros(&[i + h, 4 * h]), Tensor::zeros(&[4 * h]));
    let z = tape.constant(Tensor::zeros(&[2, h]));
    let x = tape.constant(Tensor::zeros(&[2, i]));
    let (h1, c1) = nn::lstm_cell(x, z, z, weights).unwrap();
    assert!(h1.value().data().iter().all(|v| *v == 0.0));
    assert!(c1.value().data().iter().all(|v| *v == 0.0));
}

#[test]
fn lstm_saturated_forget_gate_keeps_cell() {
    let mut rng = SeededRng::new(2);
    let (i, h) = (3, 4);
    let w = Tensor::randn(&[i + h, 4 * h], 0.5, &mut rng);
    let mut b = Tensor::randn(&[4 * h], 0.5, &mut rng);
    for j in h..2 * h {
        b.data_mut()[j] = 10.0;
    }
    let x = Tensor::randn(&[2, i], 1.0, &mut rng);
    let h0 = Tensor::uniform(&[2, h], 1.0, &mut rng);
    let c0 = Tensor::uniform(&[2, h], 1.0, &mut rng);

    // Independent evaluation of i ⊙ g from the gate pre-activations.
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut expected = c0.data().to_vec();
    for r in 0..2 {
        for j in 0..h {
            let pre = |gate: usize| {
                let col = gate * h + j;
                let mut s = b.data()[col];
                for p in 0..i {
                    s += x.at(&[r, p]) * w.at(&[p, col]);
                }
                for p in 0..h {
                    s += h0.at(&[r, p]) * w.at(&[i + p, col]);
                }
                s
            };
            expected[r * h + j] += sig(pre(0)) * pre(2).tanh();
        }
    }
    let tape = Tape::new();
    let weights = lstm_weights(&tape, i, h, w, b);
    let (h1, c1) = nn::lstm_cell(tape.constant(x), tape.constant(h0), tape.constant(c0), weights).unwrap();
    for (a, e) in c1.value().data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-4);
    }
    assert!(h1.value().data().iter().all(|v| v.abs() < 1.0));
}

#[test]
fn lstm_hidden_state_bounded() {
    let mut rng = SeededRng::new(8);
    for _ in 0..20 {
        let tape = Tape::new();
        let (i, h) = (2, 3);
        let weights = lstm_weights(
            &tape,
            i,
            h,
            Tensor::randn(&[i + h, 4 * h], 5.0, &mut rng),
            Tensor::randn(&[4 * h], 5.0, &mut rng),
        );
        let x = tape.constant(Tensor::randn(&[4, i], 10.0, &mut rng));
        let hs = tape.constant(Tensor::randn(&[4, h], 1.0, &mut rng));
        let cs = tape.constant(Tensor::randn(&[4, h], 3.0, &mut rng));
        let (h1, _) = nn::lstm_cell(x, hs, cs, weights).unwrap();
        assert!(h1.value().data().iter().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn gradient_reverse_forward_and_backward() {
    let tape = Tape::new();
    let x = tape.param(t(&[2], &[0.2, -0.4]));
    let y = nn::gradient_reverse(x, 1.0).unwrap();
    assert_eq!(y.value().data(), &[0.2, -0.4]);
    // Upstream gradient [0.2, -0.4] via loss = Σ upstream ⊙ y.
    tape.backward(y.mul_const(&[0.2, -0.4]).unwrap().sum()).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[-0.2, 0.4]);

    let tape = Tape::new();
    let x = tape.param(t(&[2], &[0.2, -0.4]));
    let y = nn::gradient_reverse(x, 0.0).unwrap();
    tape.backward(y.mul_const(&[0.2, -0.4]).unwrap().sum()).unwrap();
    assert!(x.grad().unwrap().data().iter().all(|v| *v == 0.0));
    assert!(nn::gradient_reverse(x, -1.0).is_err());
}

#[test]
fn backward_polynomial_and_reverse_composition() {
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    tape.backward(x.mul(x).unwrap()).unwrap();
    assert_eq!(x.grad().unwrap().item(), 6.0);

    let tape = Tape::new();
    let x = tape.param(Tensor::full(&[4], 1.5));
    tape.backward(x.gradient_reverse(2.0).sum()).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[-2.0; 4]);
}

#[test]
fn backward_accumulates_and_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = x.mul(x).unwrap();
    tape.backward(y).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(x.grad().unwrap().item(), 12.0);
    tape.zero_grad();
    assert!(x.grad().is_none());
    let v = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
}

#[test]
fn conv_mse_gradient_matches_finite_differences() {
    let mut rng = SeededRng::new(21);
    let x = Tensor::randn(&[2, 4, 6], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 2, 3], 0.5, &mut rng);
    let y = Tensor::randn(&[2, 4, 6], 1.0, &mut rng);
    let report = grad_check(
        |tape, v| {
            let out = tape.conv1d(v[0], v[1], None, 2)?;
            tape.mse_loss(out, tape.constant(y.clone()))
        },
        &[x, w],
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn grad_check_sigmoid_passes_tight_tolerance() {
    let mut rng = SeededRng::new(4);
    let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let report = grad_check(|_, v| Ok(v[0].sigmoid().sum()), &[x], 1e-5).unwrap();
    assert!(report.passed, "{report:?}");
}

struct WrongSquare;

impl CustomBackward for WrongSquare {
    fn name(&self) -> &str {
        "wrong_square"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        // Correct rule is 2x; this one drops the factor 2.
        vec![inputs[0].data().iter().zip(grad).map(|(x, g)| x * g).collect()]
    }
}

#[test]
fn grad_check_catches_corrupted_backward() {
    let x = t(&[3], &[0.5, -1.0, 2.0]);
    let report = grad_check(
        |tape, v| {
            let val = v[0].value();
            let sq = Tensor::new(val.shape().to_vec(), val.data().iter().map(|a| a * a).collect())?;
            Ok(tape.custom(&[v[0]], sq, Box::new(WrongSquare)).sum())
        },
        &[x],
        1e-4,
    )
    .unwrap();
    assert!(!report.passed);
}

#[test]
fn grad_check_reports_non_finite_probe() {
    // log near 0: the minus probe leaves the domain and errors rather than crashing.
    let x = t(&[1], &[1e-6]);
    let result = grad_check(|_, v| Ok(v[0].log()?.sum()), &[x], 1e-4);
    assert!(result.is_err() || !result.unwrap().passed);
}

#[test]
fn every_primitive_passes_over_twenty_seeds() {
    for seed in 0..20 {
        for (name, report) in primitive_checks(seed).unwrap() {
            assert!(report.passed, "seed {seed} {name}: {report:?}");
        }
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = SeededRng::new(6);
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 2], 1.0, &mut rng);
    let grads = |a: f64, b: f64| {
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let wv = tape.param(w.clone());
        let h = xv.matmul(wv).unwrap().tanh();
        let l1 = h.mul(h).unwrap().sum();
        let l2 = h.sigmoid().mean();
        let loss = l1.scale(a).add(l2.scale(b)).unwrap();
        tape.backward(loss).unwrap();
        (xv.grad().unwrap(), wv.grad().unwrap())
    };
    let (a, b) = (0.7, -1.3);
    let (gx1, gw1) = grads(1.0, 0.0);
    let (gx2, gw2) = grads(0.0, 1.0);
    let (gx, gw) = grads(a, b);
    for (got, (g1, g2)) in gx.data().iter().zip(gx1.data().iter().zip(gx2.data())) {
        assert!((got - (a * g1 + b * g2)).abs() < 1e-10);
    }
    for (got, (g1, g2)) in gw.data().iter().zip(gw1.data().iter().zip(gw2.data())) {
        assert!((got - (a * g1 + b * g2)).abs() < 1e-10);
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut rng = SeededRng::new(99);
        let tape = Tape::new();
        let x = tape.param(Tensor::randn(&[4, 6], 1.0, &mut rng));
        let d = nn::dropout(x, 0.3, &mut rng, Mode::Train).unwrap();
        let loss = d.tanh().sum();
        tape.backward(loss).unwrap();
        (loss.item().to_bits(), x.grad().unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
