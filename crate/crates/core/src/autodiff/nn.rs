//! Layer-level operations composed from tape primitives.

use crate::autodiff::rng::SeededRng;
use crate::autodiff::tape::Var;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean and (population) variance per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Folds one batch's moments in; the first update copies them.
    pub fn update(&mut self, mean: &[f64], var: &[f64]) {
        if !self.initialized {
            self.mean.copy_from_slice(mean);
            self.var.copy_from_slice(var);
            self.initialized = true;
            return;
        }
        for (r, b) in self.mean.iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in self.var.iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// Batch normalization of `[B, C, T]`.
///
/// Train mode normalizes with moments over the unmasked positions and
/// folds them into `stats` (the first update copies them in). Eval mode
/// normalizes with `stats`.
pub fn batch_norm_1d<'t>(
    input: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    mask: Option<&[f64]>,
    stats: &mut BatchNormStats,
    mode: Mode,
) -> Result<Var<'t>> {
    let tape = input.tape();
    match mode {
        Mode::Train => {
            let (out, mean, var) = tape.batch_norm(input, gamma, beta, mask, None, BN_EPS)?;
            stats.update(&mean, &var);
            Ok(out)
        }
        Mode::Eval => {
            if !stats.initialized {
                return Err(Error::UninitializedStats);
            }
            let (out, _, _) = tape.batch_norm(input, gamma, beta, mask, Some((&stats.mean, &stats.var)), BN_EPS)?;
            Ok(out)
        }
    }
}

/// Inverted dropout: survivors are scaled by `1/(1-rate)` so eval mode is the identity.
pub fn dropout<'t>(input: Var<'t>, rate: f64, rng: &mut SeededRng, mode: Mode) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(input);
    }
    let n = input.value().len();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect();
    input.mul_const(&mask)
}

/// Dense layer `x[.., I] · w[I, O] + b[O]`; leading axes are flattened.
pub fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
    let shape = x.shape();
    let i = *shape.last().ok_or_else(|| Error::shape("linear", &shape, &w.shape()))?;
    let rows = shape.iter().product::<usize>() / i.max(1);
    let flat = if shape.len() == 2 { x } else { x.reshape(&[rows, i])? };
    let mut y = flat.matmul(w)?;
    if let Some(b) = b {
        y = y.add(b)?;
    }
    if shape.len() == 2 {
        Ok(y)
    } else {
        let mut out = shape[..shape.len() - 1].to_vec();
        out.push(w.shape()[1]);
        y.reshape(&out)
    }
}

/// LSTM cell weights. Gate blocks along the output axis are ordered (i, f, g, o).
#[derive(Clone, Copy)]
pub struct LstmWeights<'t> {
    /// `[I + H, 4H]`, input rows first.
    pub w: Var<'t>,
    /// `[4H]`
    pub b: Var<'t>,
}

/// One LSTM step: returns `(h', c')`.
///
/// `i, f, o = σ(·)`, `g = tanh(·)`, `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_cell<'t>(x: Var<'t>, h: Var<'t>, c: Var<'t>, weights: LstmWeights<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let tape = x.tape();
    let (xs, hs, cs, ws) = (x.shape(), h.shape(), c.shape(), weights.w.shape());
    if xs.len() != 2 || hs.len() != 2 || hs != cs || xs[0] != hs[0] {
        return Err(Error::shape("lstm_cell", &xs, &hs));
    }
    let hidden = hs[1];
    if ws != [xs[1] + hidden, 4 * hidden] || weights.b.shape() != [4 * hidden] {
        return Err(Error::shape("lstm_cell", &ws, &[xs[1] + hidden, 4 * hidden]));
    }
    let xh = tape.concat(&[x, h], 1)?;
    let gates = xh.matmul(weights.w)?.add(weights.b)?;
    let i = gates.slice(1, 0, hidden)?.sigmoid();
    let f = gates.slice(1, hidden, hidden)?.sigmoid();
    let g = gates.slice(1, 2 * hidden, hidden)?.tanh();
    let o = gates.slice(1, 3 * hidden, hidden)?.sigmoid();
    let c_next = f.mul(c)?.add(i.mul(g)?)?;
    let h_next = o.mul(c_next.tanh())?;
    Ok((h_next, c_next))
}

/// Grouped same-padded convolution; `weight` is `[C_out, C_in/groups, k]`.
pub fn conv1d_grouped<'t>(input: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>, groups: usize) -> Result<Var<'t>> {
    input.tape().conv1d(input, weight, bias, groups)
}

/// Identity forward, gradient scaled by `-lambda` backward.
pub fn gradient_reverse<'t>(x: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Config(format!("gradient reversal lambda {lambda} must be finite and >= 0")));
    }
    Ok(x.gradient_reverse(lambda))
}
