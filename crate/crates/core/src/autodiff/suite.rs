//! Finite-difference checks of every primitive on randomized shapes.

use crate::autodiff::gradcheck::{grad_check, GradCheckReport};
use crate::autodiff::nn::{self, BatchNormStats, LstmWeights, Mode};
use crate::autodiff::rng::SeededRng;
use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::Result;

pub const PRIMITIVE_TOL: f64 = 1e-4;

/// Contracts the output with fixed random weights so every output element matters.
fn project<'t>(out: Var<'t>, weights: &[f64]) -> Result<Var<'t>> {
    Ok(out.mul_const(&weights[..out.value().len()])?.sum())
}

fn dims(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    rng.inclusive(lo, hi)
}

/// Runs every primitive's check for one seed. Names are stable across seeds.
pub fn primitive_checks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = SeededRng::with_stream(seed, 77);
    let w: Vec<f64> = (0..4096).map(|_| rng.normal()).collect();
    let (m, k, n) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 5), dims(&mut rng, 1, 4));
    let a = Tensor::randn(&[m, k], 1.0, &mut rng);
    let b = Tensor::randn(&[k, n], 1.0, &mut rng);
    let same = Tensor::randn(&[m, k], 1.0, &mut rng);
    let row = Tensor::randn(&[k], 1.0, &mut rng);
    let pos = Tensor::new(
        vec![m, k],
        (0..m * k).map(|_| 0.2 + rng.uniform() * 2.0).collect(),
    )?;
    let probs = Tensor::new(
        vec![m, k],
        (0..m * k).map(|_| 0.05 + rng.uniform() * 0.9).collect(),
    )?;
    let targets01: Vec<f64> = (0..m * k).map(|_| (rng.uniform() < 0.5) as u8 as f64).collect();
    let bw: Vec<f64> = (0..m * k).map(|_| (rng.uniform() < 0.8) as u8 as f64).collect();
    let labels: Vec<usize> = (0..m).map(|_| rng.below(k)).collect();
    let ce_w: Vec<f64> = (0..m).map(|_| 0.5 + rng.uniform()).collect();
    let mask: Vec<f64> = (0..m * k)
        .map(|i| if i % k == 0 || rng.uniform() < 0.7 { 1.0 } else { 0.0 })
        .collect();
    let bs = dims(&mut rng, 1, 3);
    let a3 = Tensor::randn(&[bs, m, k], 1.0, &mut rng);
    let b3 = Tensor::randn(&[bs, k, n], 1.0, &mut rng);
    let vocab = dims(&mut rng, 2, 6);
    let table = Tensor::randn(&[vocab, k], 1.0, &mut rng);
    let ids: Vec<usize> = (0..m * 2).map(|_| rng.below(vocab)).collect();

    // Convolution shapes.
    let groups = dims(&mut rng, 1, 3);
    let (cig, cog) = (dims(&mut rng, 1, 3), dims(&mut rng, 1, 3));
    let kernel = [1, 3, 5][rng.below(3)];
    let t = dims(&mut rng, 2, 7);
    let cx = Tensor::randn(&[bs, groups * cig, t], 1.0, &mut rng);
    let cw = Tensor::randn(&[groups * cog, cig, kernel], 0.5, &mut rng);
    let cb = Tensor::randn(&[groups * cog], 0.5, &mut rng);

    // Batch norm shapes: at least 2 unmasked positions per channel.
    let bn_c = dims(&mut rng, 1, 3);
    let bn_x = Tensor::randn(&[bs, bn_c, t], 1.0, &mut rng);
    let gamma = Tensor::randn(&[bn_c], 1.0, &mut rng);
    let beta = Tensor::randn(&[bn_c], 1.0, &mut rng);
    let bn_mask: Vec<f64> = (0..bs * t)
        .map(|i| if i % t < 2 || rng.uniform() < 0.7 { 1.0 } else { 0.0 })
        .collect();
    let bn_full_mask: Vec<f64> = (0..bs * bn_c * t)
        .map(|i| if i % t < 2 || rng.uniform() < 0.7 { 1.0 } else { 0.0 })
        .collect();
    let run_mean: Vec<f64> = (0..bn_c).map(|_| rng.normal()).collect();
    let run_var: Vec<f64> = (0..bn_c).map(|_| 0.5 + rng.uniform()).collect();

    // LSTM shapes.
    let (li, lh) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 4));
    let lx = Tensor::randn(&[m, li], 1.0, &mut rng);
    let lh0 = Tensor::randn(&[m, lh], 0.5, &mut rng);
    let lc0 = Tensor::randn(&[m, lh], 0.5, &mut rng);
    let lw = Tensor::randn(&[li + lh, 4 * lh], 0.5, &mut rng);
    let lb = Tensor::randn(&[4 * lh], 0.5, &mut rng);

    let tol = PRIMITIVE_TOL;
    let mut out: Vec<(&'static str, GradCheckReport)> = Vec::new();
    macro_rules! check {
        ($name:expr, [$($input:expr),*], |$tape:ident, $v:ident| $body:expr) => {{
            let report = grad_check(|$tape, $v| { let _ = &$tape; $body }, &[$($input.clone()),*], tol)?;
            out.push(($name, report));
        }};
    }

    check!("add", [a, same], |tape, v| project(v[0].add(v[1])?, &w));
    check!("add_broadcast", [a, row], |tape, v| project(v[0].add(v[1])?, &w));
    check!("sub", [a, row], |tape, v| project(v[0].sub(v[1])?, &w));
    check!("mul", [a, same], |tape, v| project(v[0].mul(v[1])?, &w));
    check!("mul_broadcast", [a, row], |tape, v| project(v[0].mul(v[1])?, &w));
    check!("matmul", [a, b], |tape, v| project(v[0].matmul(v[1])?, &w));
    check!("bmm", [a3, b3], |tape, v| project(v[0].bmm(v[1])?, &w));
    check!("concat", [a, same], |tape, v| project(tape.concat(&[v[0], v[1]], 1)?, &w));
    check!("slice", [a3], |tape, v| project(v[0].slice(2, k / 2, k - k / 2)?, &w));
    check!("transpose", [a3], |tape, v| project(v[0].transpose()?.reshape(&[bs * k * m])?, &w));
    check!("expand", [a], |tape, v| project(v[0].expand(3)?, &w));
    check!("sigmoid", [a], |tape, v| project(v[0].sigmoid(), &w));
    check!("tanh", [a], |tape, v| project(v[0].tanh(), &w));
    check!("relu", [a], |tape, v| project(v[0].relu(), &w));
    check!("exp", [a], |tape, v| project(v[0].exp()?, &w));
    check!("log", [pos], |tape, v| project(v[0].log()?, &w));
    check!("softmax", [a], |tape, v| project(v[0].softmax()?, &w));
    check!("masked_softmax", [a], |tape, v| project(v[0].masked_softmax(Some(&mask))?, &w));
    check!("embedding_lookup", [table], |tape, v| project(tape.embedding(v[0], &ids, &[m, 2])?, &w));
    check!("sum", [a], |tape, v| Ok(v[0].mul(v[0])?.sum()));
    check!("mean", [a], |tape, v| Ok(v[0].mul(v[0])?.mean()));
    check!("mse_loss", [a, same], |tape, v| tape.mse_loss(v[0], v[1]));
    check!("binary_cross_entropy", [probs], |tape, v| tape.binary_cross_entropy(v[0], &targets01));
    check!("binary_cross_entropy_with_logits", [a], |tape, v| {
        tape.binary_cross_entropy_with_logits(v[0], &targets01, &bw, 5.0)
    });
    check!("cross_entropy_with_logits", [a], |tape, v| tape.cross_entropy_with_logits(v[0], &labels, &ce_w));
    check!("conv1d_grouped", [cx, cw, cb], |tape, v| project(tape.conv1d(v[0], v[1], Some(v[2]), groups)?, &w));
    check!("batch_norm_train", [bn_x, gamma, beta], |tape, v| {
        let mut stats = BatchNormStats::new(bn_c);
        let y = nn::batch_norm_1d(v[0], v[1], v[2], Some(&bn_mask), &mut stats, Mode::Train)?;
        project(y, &w)
    });
    check!("batch_norm_channel_mask", [bn_x, gamma, beta], |tape, v| {
        let mut stats = BatchNormStats::new(bn_c);
        let y = nn::batch_norm_1d(v[0], v[1], v[2], Some(&bn_full_mask), &mut stats, Mode::Train)?;
        project(y, &w)
    });
    check!("batch_norm_eval", [bn_x, gamma, beta], |tape, v| {
        let mut stats = BatchNormStats {
            mean: run_mean.clone(),
            var: run_var.clone(),
            initialized: true,
        };
        let y = nn::batch_norm_1d(v[0], v[1], v[2], None, &mut stats, Mode::Eval)?;
        project(y, &w)
    });
    check!("lstm_cell", [lx, lh0, lc0, lw, lb], |tape, v| {
        let (h, c) = nn::lstm_cell(v[0], v[1], v[2], LstmWeights { w: v[3], b: v[4] })?;
        project(h, &w)?.add(project(c, &w[7..])?)
    });

    // The reversal and clamp layers deliberately disagree with finite
    // differences; they are checked against their defining rule instead.
    let lambda = 0.5 + rng.uniform();
    out.push(("gradient_reverse", rule_check(&a, &w, |x| x.gradient_reverse(lambda), |g| -lambda * g)));
    let bound = 0.3;
    out.push(("grad_clamp", rule_check(&a, &w, |x| x.grad_clamp(bound), |g| g.clamp(-bound, bound))));
    Ok(out)
}

/// Gradient of `Σ w ⊙ layer(x)` against `rule(w)` elementwise.
fn rule_check(
    x: &Tensor,
    w: &[f64],
    layer: impl for<'t> Fn(Var<'t>) -> Var<'t>,
    rule: impl Fn(f64) -> f64,
) -> GradCheckReport {
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let y = layer(v);
    let loss = y.mul_const(&w[..x.len()]).expect("shape").sum();
    tape.backward(loss).expect("scalar");
    let g = v.grad().expect("leaf grad");
    let mut max = 0.0f64;
    for (gv, wv) in g.data().iter().zip(w) {
        max = max.max(super::gradcheck::relative_error(*gv, rule(*wv)));
    }
    GradCheckReport {
        max_rel_error: max,
        worst: None,
        non_finite: false,
        tol: PRIMITIVE_TOL,
        passed: max <= PRIMITIVE_TOL,
    }
}
