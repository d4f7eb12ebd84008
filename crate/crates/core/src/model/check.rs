//! Finite-difference check of the whole model on a tiny configuration.

use super::{Ctx, LossWeights, Model, ModelConfig, Variant};
use crate::autodiff::gradcheck::{grad_check, GradCheckReport};
use crate::autodiff::nn::Mode;
use crate::autodiff::rng::SeededRng;
use crate::autodiff::tensor::Tensor;
use crate::batching::Batch;
use crate::data::{Split, Utterance};
use crate::error::Result;

/// Tolerance of the end-to-end check.
pub const END_TO_END_TOL: f64 = 1e-3;

/// A model small enough to finite-difference every parameter: vocabulary 5,
/// every width at most 8, no dropout.
pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        languages: if variant == Variant::Sgl { 1 } else { 2 },
        speakers: 3,
        vocab_size: 5,
        frame_dim: 3,
        embedding_dim: 4,
        encoder_channels: 5,
        encoder_layers: 3,
        kernel_size: 3,
        encoder_dropout: 0.0,
        language_dim: 3,
        generator_dim: 2,
        shared_language_dim: 2,
        speaker_dim: 2,
        prenet_dim: 4,
        prenet_dropout: 0.0,
        attention_rnn_dim: 4,
        decoder_rnn_dim: 4,
        attention_dim: 4,
        location_filters: 2,
        location_kernel: 3,
        classifier: variant.supports_classifier(),
        classifier_hidden: 4,
        classifier_grad_clip: f64::MAX,
        ..ModelConfig::default()
    }
}

/// Two examples of at most 4 tokens and 3 frames, one per language slot.
pub fn tiny_batch(cfg: &ModelConfig, seed: u64) -> Result<Batch> {
    let mut rng = SeededRng::new(seed);
    let slots = cfg.languages.min(2);
    let texts = ["abdc", "cab"];
    let frames = [3, 2];
    let utts: Vec<Utterance> = (0..2)
        .map(|i| Utterance {
            id: format!("tiny{i}"),
            language: i % slots,
            speaker: (i + seed as usize) % cfg.speakers,
            text: texts[i].to_string(),
            frames: Tensor::randn(&[frames[i], cfg.frame_dim], 0.5, &mut rng),
            split: Split::Train,
        })
        .collect();
    let refs: Vec<&Utterance> = utts.iter().collect();
    Batch::assemble(&refs, slots)
}

/// Sets every batch-norm running statistic to seeded values so eval mode is usable.
pub fn randomize_bn_stats(model: &mut Model, seed: u64) {
    let mut rng = SeededRng::new(seed ^ 0x5eed);
    for site in &mut model.bn {
        for st in site.iter_mut() {
            let c = st.channels();
            let mean: Vec<f64> = (0..c).map(|_| 0.3 * rng.normal()).collect();
            let var: Vec<f64> = (0..c).map(|_| 0.5 + rng.uniform()).collect();
            st.update(&mean, &var);
        }
    }
}

/// Checks d(loss)/d(every parameter) of a tiny `variant` model against central
/// differences. The loss is the full objective in eval mode; models with a
/// speaker classifier add its loss with the reversal replaced by the identity,
/// since a reversed gradient is deliberately not the true derivative.
pub fn end_to_end_gradient_check(variant: Variant, seed: u64) -> Result<GradCheckReport> {
    let cfg = tiny_config(variant);
    let mut model = Model::new(cfg, seed)?;
    randomize_bn_stats(&mut model, seed);
    // Zero-initialised biases put ReLU inputs exactly on the kink at the first
    // decoder step (zero frame in), where finite differences see half a slope.
    let mut rng = SeededRng::new(seed ^ 0x1177);
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    let batch = tiny_batch(&model.config, seed)?;
    let weights = LossWeights {
        guided: 0.7,
        tolerance: 0.3,
        classifier: None,
    };
    let inputs = model.params.tensors().to_vec();
    grad_check(
        |_, p| {
            let mut rng = SeededRng::new(seed);
            let mut ctx = Ctx::new(Mode::Eval, &mut rng);
            let (loss, _) = model.total_loss(p, &batch, weights, &mut ctx)?;
            if !model.config.has_classifier() {
                return Ok(loss);
            }
            let encoded = model.encode(p, &batch.tokens, &batch.token_mask, &batch.languages, batch.slots, &mut ctx)?;
            let cls = model.speaker_classifier_loss(p, encoded, &batch.speakers, &batch.token_mask, None)?;
            loss.add(cls.scale(0.5))
        },
        &inputs,
        END_TO_END_TOL,
    )
}
