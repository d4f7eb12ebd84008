//! Optimization: Adam with global clipping, the stepped learning-rate and
//! guided-attention tolerance schedules, early stopping and resumable loops.

mod adam;
mod log;
mod trainer;

pub use adam::{adam_step, AdamConfig, OptimizerState, StepStats};
pub use log::{EvalRecord, StepRecord, TrainLog, TIMING_HEADER, TRAIN_LOG_HEADER};
pub use trainer::{LoopState, Status, TrainOutcome, Trainer, Validator};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Variant;

/// Every knob of one training run. Defaults are the full-scale settings;
/// [`TrainConfig::desk`] scales the step budget down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr0: f64,
    /// Initial learning rate of the separate-encoder model.
    pub sep_lr0: f64,
    pub lr_halving_interval: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Speaker-classifier loss weight; unset means the variant default.
    pub classifier_weight: Option<f64>,
    pub guided_weight: f64,
    pub tolerance_start: f64,
    /// Per-step growth factor; unset means doubling every fifth of `steps`.
    pub tolerance_growth: Option<f64>,
    pub tolerance_cap: f64,
    pub validate_every: u64,
    pub early_stop_patience: usize,
    /// Global gradient-norm bound applied before every update.
    pub grad_clip: f64,
    pub bucket_by_length: bool,
    pub divergence_threshold: f64,
    /// Also decode the validation split at every validation (slow).
    pub validation_cer: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 50_000,
            lr0: 1e-3,
            sep_lr0: 1e-4,
            lr_halving_interval: 10_000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-6,
            weight_decay: 1e-6,
            batch_size: 60,
            classifier_weight: None,
            guided_weight: 1.0,
            tolerance_start: 0.2,
            tolerance_growth: None,
            tolerance_cap: 0.6,
            validate_every: 100,
            early_stop_patience: 3,
            grad_clip: 1.0,
            bucket_by_length: true,
            divergence_threshold: 1e6,
            validation_cer: false,
            seed: 0,
        }
    }
}

/// Classifier weight used when the config leaves it unset.
pub fn default_classifier_weight(variant: Variant) -> f64 {
    match variant {
        Variant::Gen => 0.125,
        _ => 0.5,
    }
}

impl TrainConfig {
    /// Desk-scale run: 3000 steps of batch 4 with a faster start and halving,
    /// and a stronger pull toward the diagonal alignment.
    pub fn desk() -> Self {
        TrainConfig {
            steps: 3000,
            lr0: 3e-3,
            sep_lr0: 3e-4,
            lr_halving_interval: 1000,
            batch_size: 4,
            guided_weight: 10.0,
            grad_clip: 1.0,
            ..TrainConfig::default()
        }
    }

    /// Applies the variant's learning rate (the separate model starts lower).
    pub fn for_variant(mut self, variant: Variant) -> Self {
        if variant == Variant::Sep {
            self.lr0 = self.sep_lr0;
        }
        self
    }

    pub fn classifier_weight_for(&self, variant: Variant) -> f64 {
        self.classifier_weight.unwrap_or_else(|| default_classifier_weight(variant))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            clip: Some(self.grad_clip),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("sep_lr0", self.sep_lr0),
            ("adam_eps", self.adam_eps),
            ("tolerance_start", self.tolerance_start),
            ("tolerance_cap", self.tolerance_cap),
            ("grad_clip", self.grad_clip),
            ("divergence_threshold", self.divergence_threshold),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("train.{name} must be positive and finite, got {v}")));
            }
        }
        if self.steps == 0 || self.lr_halving_interval == 0 || self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::Config(
                "train.steps, lr_halving_interval, batch_size and validate_every must be positive".into(),
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1)")));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.guided_weight >= 0.0) {
            return Err(Error::Config("train.weight_decay and guided_weight must be non-negative".into()));
        }
        if let Some(w) = self.classifier_weight {
            if !(w >= 0.0) {
                return Err(Error::Config("train.classifier_weight must be non-negative".into()));
            }
        }
        if let Some(g) = self.tolerance_growth {
            if !(g >= 1.0) || !g.is_finite() {
                return Err(Error::Config("train.tolerance_growth must be >= 1".into()));
            }
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("train.early_stop_patience must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step`: `lr0` halved once per completed interval.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let halvings = step / cfg.lr_halving_interval;
    cfg.lr0 * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
}

/// Guided-attention tolerance at `step`: exponential growth from the start value, capped.
pub fn tolerance_at(step: u64, cfg: &TrainConfig) -> f64 {
    let growth = cfg
        .tolerance_growth
        .unwrap_or_else(|| 2f64.powf(1.0 / (0.2 * cfg.steps as f64)));
    (cfg.tolerance_start * growth.powf(step as f64)).min(cfg.tolerance_cap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-3);
        assert_eq!(lr_at(9_999, &cfg), 1e-3);
        assert_eq!(lr_at(10_000, &cfg), 5e-4);
        assert_eq!(lr_at(25_000, &cfg), 2.5e-4);
        assert_eq!(TrainConfig::default().for_variant(Variant::Sep).lr0, 1e-4);
    }

    #[test]
    fn tolerance_examples() {
        let cfg = TrainConfig::desk();
        assert_eq!(tolerance_at(0, &cfg), 0.2);
        assert!((tolerance_at(600, &cfg) - 0.4).abs() < 1e-12);
        assert_eq!(tolerance_at(1200, &cfg), 0.6);
        assert_eq!(tolerance_at(3000, &cfg), 0.6);
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), cfg);
        assert!(toml::from_str::<TrainConfig>("stepz = 3").is_err());
        assert!(TrainConfig { lr0: 0.0, ..cfg }.validate().is_err());
    }
}
