use std::collections::BTreeMap;

use super::decoder::DecoderOutput;
use super::encoder::feature_mask;
use super::{Ctx, Model};
use crate::autodiff::nn;
use crate::autodiff::tape::Var;
use crate::batching::Batch;
use crate::error::{Error, Result};

/// Penalty weight of attending input position `t` at output step `n`.
pub fn guided_attention_weight(n: usize, t: usize, n_len: usize, t_len: usize, g: f64) -> f64 {
    let d = n as f64 / n_len as f64 - t as f64 / t_len as f64;
    1.0 - (-d * d / (2.0 * g * g)).exp()
}

/// Mean of `A[n, t]·W[n, t]` over each example's real `(n, t)` block of `alignments [B, N, T]`.
pub fn guided_attention_loss<'t>(alignments: Var<'t>, frame_lens: &[usize], token_lens: &[usize], g: f64) -> Result<Var<'t>> {
    if !(g > 0.0) || !g.is_finite() {
        return Err(Error::Config(format!("guided attention tolerance {g} must be positive and finite")));
    }
    let s = alignments.shape();
    if s.len() != 3 || frame_lens.len() != s[0] || token_lens.len() != s[0] {
        return Err(Error::shape("guided_attention_loss", &s, &[frame_lens.len(), token_lens.len()]));
    }
    let (b, n_max, t_max) = (s[0], s[1], s[2]);
    let mut w = vec![0.0; b * n_max * t_max];
    let mut count = 0usize;
    for bi in 0..b {
        let (nl, tl) = (frame_lens[bi], token_lens[bi]);
        if nl > n_max || tl > t_max || nl == 0 || tl == 0 {
            return Err(Error::Contract(format!("example {bi} lengths ({nl}, {tl}) outside [1, {n_max}]x[1, {t_max}]")));
        }
        for n in 0..nl {
            for t in 0..tl {
                w[(bi * n_max + n) * t_max + t] = guided_attention_weight(n, t, nl, tl, g);
            }
        }
        count += nl * tl;
    }
    Ok(alignments.mul_const(&w)?.sum().scale(1.0 / count as f64))
}

/// Weights of the optional loss terms at one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub guided: f64,
    pub tolerance: f64,
    /// Weight of the speaker classifier term; `None` leaves the classifier out.
    pub classifier: Option<f64>,
}

/// Unweighted value of every loss term plus the weighted total.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub components: BTreeMap<&'static str, f64>,
    pub total: f64,
}

/// Intermediate values of one teacher-forced forward pass.
pub struct Forward<'t> {
    pub encoded: Var<'t>,
    pub output: DecoderOutput<'t>,
}

impl Model {
    /// Encoder, memory and teacher-forced decoder over one batch.
    pub fn forward<'t>(&self, p: &[Var<'t>], batch: &Batch, ctx: &mut Ctx) -> Result<Forward<'t>> {
        let encoded = self.encode(p, &batch.tokens, &batch.token_mask, &batch.languages, batch.slots, ctx)?;
        let memory = self.memory(p, encoded, &batch.speakers, &batch.languages)?;
        let mem = self.attention_memory(p, memory, &batch.token_mask)?;
        let output = self.decode_teacher_forced(p, &mem, &batch.targets, ctx)?;
        Ok(Forward { encoded, output })
    }

    /// Mean speaker cross-entropy over real encoder positions.
    ///
    /// The encoder output passes a gradient clamp and then the reversal layer
    /// with `reversal = Some(λ)`; `None` substitutes the identity for the
    /// reversal (the clamp stays).
    pub fn speaker_classifier_loss<'t>(
        &self,
        p: &[Var<'t>],
        encoded: Var<'t>,
        speakers: &[usize],
        mask: &[f64],
        reversal: Option<f64>,
    ) -> Result<Var<'t>> {
        let layers = self
            .ids
            .classifier
            .ok_or_else(|| Error::Config(format!("this {} model has no speaker classifier", self.variant())))?;
        let s = encoded.shape();
        let (b, t) = (s[0], s[1]);
        if speakers.len() != b || mask.len() != b * t {
            return Err(Error::shape("speaker_classifier_loss", &s, &[speakers.len(), mask.len()]));
        }
        if let Some(&bad) = speakers.iter().find(|&&x| x >= self.config.speakers) {
            return Err(Error::Lookup(format!("speaker {bad} unknown to a classifier of {} speakers", self.config.speakers)));
        }
        let mut x = encoded.grad_clamp(self.config.classifier_grad_clip);
        if let Some(lambda) = reversal {
            x = nn::gradient_reverse(x, lambda)?;
        }
        let hidden = nn::linear(x, p[layers[0].w], Some(p[layers[0].b]))?.relu();
        let logits = nn::linear(hidden, p[layers[1].w], Some(p[layers[1].b]))?.reshape(&[b * t, self.config.speakers])?;
        let labels: Vec<usize> = (0..b * t).map(|i| speakers[i / t]).collect();
        p[0].tape().cross_entropy_with_logits(logits, &labels, mask)
    }

    /// Full training objective of one batch and its per-term values.
    pub fn total_loss<'t>(
        &self,
        p: &[Var<'t>],
        batch: &Batch,
        weights: LossWeights,
        ctx: &mut Ctx,
    ) -> Result<(Var<'t>, LossBreakdown)> {
        let tape = p[0].tape();
        let fwd = self.forward(p, batch, ctx)?;
        let out = &fwd.output;
        let f = self.config.frame_dim;
        let real_frames: f64 = batch.frame_mask.iter().sum();
        let diff = out.frames.sub(tape.constant(batch.targets.clone()))?;
        let frame = diff
            .mul(diff)?
            .mul_const(&feature_mask(&batch.frame_mask, f))?
            .sum()
            .scale(1.0 / (real_frames * f as f64));
        let stop = tape.binary_cross_entropy_with_logits(
            out.stop_logits,
            &batch.stop_targets,
            &batch.frame_mask,
            self.config.stop_pos_weight,
        )?;
        let guided = guided_attention_loss(out.alignments, &batch.frame_lens, &batch.token_lens, weights.tolerance)?;

        let mut terms: Vec<(&'static str, Var<'t>, f64)> =
            vec![("frame", frame, 1.0), ("stop", stop, 1.0), ("guided", guided, weights.guided)];
        if let (Some(w), true) = (weights.classifier, self.config.has_classifier()) {
            let cls = self.speaker_classifier_loss(
                p,
                fwd.encoded,
                &batch.speakers,
                &batch.token_mask,
                Some(self.config.reversal_lambda),
            )?;
            terms.push(("classifier", cls, w));
        }
        let mut breakdown = LossBreakdown::default();
        let mut total: Option<Var<'t>> = None;
        for (name, v, w) in terms {
            let value = v.item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("{name} loss")));
            }
            breakdown.components.insert(name, value);
            let weighted = if w == 1.0 { v } else { v.scale(w) };
            total = Some(match total {
                None => weighted,
                Some(acc) => acc.add(weighted)?,
            });
        }
        let total = total.expect("at least one term");
        breakdown.total = total.item();
        Ok((total, breakdown))
    }
}
