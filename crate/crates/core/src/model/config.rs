use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::language::{FRAME_DIM, VOCAB_SIZE};
use crate::error::{Error, Result};

/// Which model of the family to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Per-language encoders whose weights come from a generator network.
    Gen,
    /// One encoder for all languages; language embedding joins the decoder memory.
    Sha,
    /// Independent per-language encoders.
    Sep,
    /// One language only.
    Sgl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Gen, Variant::Sha, Variant::Sep, Variant::Sgl];

    pub fn uses_generator(self) -> bool {
        self == Variant::Gen
    }

    pub fn encoders_per_language(self) -> bool {
        matches!(self, Variant::Gen | Variant::Sep)
    }

    pub fn uses_language_embedding_concat(self) -> bool {
        self == Variant::Sha
    }

    /// Whether the adversarial speaker classifier may be attached.
    pub fn supports_classifier(self) -> bool {
        matches!(self, Variant::Gen | Variant::Sha)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gen => "gen",
            Variant::Sha => "sha",
            Variant::Sep => "sep",
            Variant::Sgl => "sgl",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gen" => Ok(Variant::Gen),
            "sha" => Ok(Variant::Sha),
            "sep" => Ok(Variant::Sep),
            "sgl" => Ok(Variant::Sgl),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// One convolutional encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SiteSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub batchnorm: bool,
}

impl SiteSpec {
    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.c_out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    pub sites: Vec<SiteSpec>,
    pub embedding_dim: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        let mut c = self.embedding_dim;
        for (i, s) in self.sites.iter().enumerate() {
            if s.c_in != c {
                return Err(Error::Config(format!("encoder site {i} expects {} channels, gets {c}", s.c_in)));
            }
            if s.kernel % 2 == 0 {
                return Err(Error::Config(format!("encoder site {i} has even kernel {}", s.kernel)));
            }
            c = s.c_out;
        }
        if c != self.embedding_dim {
            return Err(Error::Config(format!(
                "last encoder site outputs {c} channels, embedding dim is {}",
                self.embedding_dim
            )));
        }
        Ok(())
    }

    /// Parameters of one complete per-language encoder (all sites).
    pub fn per_language_params(&self) -> usize {
        self.sites.iter().map(SiteSpec::param_count).sum()
    }
}

/// Every size and switch of a model. Defaults follow the reference design; desk
/// runs shrink the recurrent and convolutional widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub languages: usize,
    pub speakers: usize,
    pub vocab_size: usize,
    pub frame_dim: usize,
    pub embedding_dim: usize,
    pub encoder_channels: usize,
    pub encoder_layers: usize,
    pub kernel_size: usize,
    pub encoder_dropout: f64,
    /// Language embedding feeding the generators.
    pub language_dim: usize,
    pub generator_dim: usize,
    /// Language embedding appended to the decoder memory by the shared model.
    pub shared_language_dim: usize,
    pub speaker_dim: usize,
    pub prenet_dim: usize,
    pub prenet_dropout: f64,
    pub attention_rnn_dim: usize,
    pub decoder_rnn_dim: usize,
    pub attention_dim: usize,
    pub location_filters: usize,
    pub location_kernel: usize,
    pub stop_pos_weight: f64,
    pub classifier: bool,
    pub classifier_hidden: usize,
    pub reversal_lambda: f64,
    /// Elementwise bound on the gradient sent from the classifier into the encoder.
    pub classifier_grad_clip: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Gen,
            languages: 4,
            speakers: 8,
            vocab_size: VOCAB_SIZE,
            frame_dim: FRAME_DIM,
            embedding_dim: 64,
            encoder_channels: 64,
            encoder_layers: 5,
            kernel_size: 5,
            encoder_dropout: 0.05,
            language_dim: 10,
            generator_dim: 8,
            shared_language_dim: 4,
            speaker_dim: 32,
            prenet_dim: 64,
            prenet_dropout: 0.25,
            attention_rnn_dim: 128,
            decoder_rnn_dim: 128,
            attention_dim: 128,
            location_filters: 8,
            location_kernel: 15,
            stop_pos_weight: 5.0,
            classifier: false,
            classifier_hidden: 256,
            reversal_lambda: 1.0,
            classifier_grad_clip: 0.25,
        }
    }
}

impl ModelConfig {
    /// Small enough to train a few thousand steps on one CPU core: a
    /// three-layer, width-3 encoder and 32-unit recurrent cells.
    pub fn desk() -> Self {
        ModelConfig {
            embedding_dim: 32,
            encoder_channels: 32,
            encoder_layers: 3,
            kernel_size: 3,
            speaker_dim: 8,
            prenet_dim: 16,
            attention_rnn_dim: 32,
            decoder_rnn_dim: 32,
            attention_dim: 16,
            classifier_hidden: 64,
            ..ModelConfig::default()
        }
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        let n = self.encoder_layers;
        let sites = (0..n)
            .map(|i| SiteSpec {
                c_in: if i == 0 { self.embedding_dim } else { self.encoder_channels },
                c_out: if i + 1 == n { self.embedding_dim } else { self.encoder_channels },
                kernel: self.kernel_size,
                batchnorm: true,
            })
            .collect();
        EncoderSpec {
            sites,
            embedding_dim: self.embedding_dim,
            vocab_size: self.vocab_size,
            dropout: self.encoder_dropout,
        }
    }

    /// Encoder parameter sets: one per language for per-language variants, else one.
    pub fn parameter_sets(&self) -> usize {
        if self.variant.encoders_per_language() {
            self.languages
        } else {
            1
        }
    }

    pub fn set_of(&self, language: usize) -> usize {
        if self.variant.encoders_per_language() {
            language
        } else {
            0
        }
    }

    pub fn memory_dim(&self) -> usize {
        self.embedding_dim
            + self.speaker_dim
            + if self.variant.uses_language_embedding_concat() {
                self.shared_language_dim
            } else {
                0
            }
    }

    pub fn has_classifier(&self) -> bool {
        self.classifier && self.variant.supports_classifier()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("languages", self.languages),
            ("speakers", self.speakers),
            ("vocab_size", self.vocab_size),
            ("frame_dim", self.frame_dim),
            ("embedding_dim", self.embedding_dim),
            ("encoder_channels", self.encoder_channels),
            ("encoder_layers", self.encoder_layers),
            ("speaker_dim", self.speaker_dim),
            ("prenet_dim", self.prenet_dim),
            ("attention_rnn_dim", self.attention_rnn_dim),
            ("decoder_rnn_dim", self.decoder_rnn_dim),
            ("attention_dim", self.attention_dim),
            ("location_filters", self.location_filters),
            ("location_kernel", self.location_kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.variant == Variant::Sgl && self.languages != 1 {
            return Err(Error::Config("the single-language model needs languages = 1".into()));
        }
        if self.variant.uses_generator() && (self.language_dim == 0 || self.generator_dim == 0) {
            return Err(Error::Config("generator sizes must be positive".into()));
        }
        if self.variant.uses_language_embedding_concat() && self.shared_language_dim == 0 {
            return Err(Error::Config("model.shared_language_dim must be positive".into()));
        }
        if self.location_kernel.is_multiple_of(2) {
            return Err(Error::Config("model.location_kernel must be odd".into()));
        }
        for (name, rate) in [("encoder_dropout", self.encoder_dropout), ("prenet_dropout", self.prenet_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("model.{name} must lie in [0, 1)")));
            }
        }
        if self.classifier && !self.variant.supports_classifier() {
            return Err(Error::Config(format!("the {} model has no speaker classifier", self.variant)));
        }
        if self.classifier && self.classifier_hidden == 0 {
            return Err(Error::Config("model.classifier_hidden must be positive".into()));
        }
        if !(self.reversal_lambda >= 0.0) || !(self.classifier_grad_clip > 0.0) {
            return Err(Error::Config("reversal lambda must be >= 0 and the clip bound > 0".into()));
        }
        if !(self.stop_pos_weight > 0.0) {
            return Err(Error::Config("model.stop_pos_weight must be positive".into()));
        }
        self.encoder_spec().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_site_count() {
        let cfg = ModelConfig::default();
        let spec = cfg.encoder_spec();
        assert_eq!(spec.sites.len(), 5);
        assert_eq!(spec.sites[1].param_count(), 64 * 64 * 5 + 64);
        assert_eq!(spec.sites[1].param_count(), 20544);
        spec.validate().unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn switches() {
        assert!(Variant::Gen.uses_generator() && Variant::Gen.encoders_per_language());
        assert!(!Variant::Sep.uses_generator() && Variant::Sep.encoders_per_language());
        assert!(Variant::Sha.uses_language_embedding_concat());
        assert!(!Variant::Sep.supports_classifier() && !Variant::Sgl.supports_classifier());
        let bad = ModelConfig {
            variant: Variant::Sep,
            classifier: true,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
