//! The model family: generated, shared, separate and single-language encoders in
//! front of one attention decoder, plus the adversarial speaker classifier.
//!
//! Encoders are convolution stacks. Per-language variants keep one parameter row
//! per language and site (owned, or produced by a small generator network from a
//! language embedding) and run all languages of an interleaved batch as a single
//! grouped convolution.

pub mod check;
pub mod checkpoint;
pub mod config;
mod decoder;
mod encoder;
mod loss;
pub mod params;

pub use config::{EncoderSpec, ModelConfig, SiteSpec, Variant};
pub use decoder::{AttentionMemory, DecoderOutput, Inference};
pub use encoder::{flatten, unflatten};
pub use loss::{guided_attention_loss, guided_attention_weight, Forward, LossBreakdown, LossWeights};
pub use params::ParamStore;

use std::collections::HashMap;

use crate::autodiff::nn::{BatchNormStats, Mode};
use crate::autodiff::rng::{streams, SeededRng};
use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
enum SiteKind {
    Generated { w1: usize, b1: usize, w2: usize, b2: usize },
    /// `[sets, param_count]`.
    Owned { theta: usize },
}

#[derive(Clone, Copy, Debug)]
struct SiteIds {
    kind: SiteKind,
    /// `[sets, c_out]`.
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct ParamIds {
    embedding: usize,
    language: Option<usize>,
    speaker: usize,
    sites: Vec<SiteIds>,
    proj: Dense,
    prenet: Vec<Dense>,
    attention_rnn: Dense,
    query: usize,
    memory: usize,
    location_conv: usize,
    location: usize,
    energy: usize,
    decoder_rnn: Dense,
    frame: Dense,
    stop: Dense,
    classifier: Option<[Dense; 2]>,
}

/// How a freshly built parameter is filled.
enum Init {
    Normal(f64),
    Zeros,
    Fill(f64),
    /// Rows of conv weights with He scaling followed by zero biases.
    ConvRows { rows: usize, site: SiteSpec },
    /// LSTM bias with the forget-gate block at 1.
    LstmBias,
}

fn init_tensor(shape: &[usize], init: Init, rng: &mut SeededRng) -> Tensor {
    match init {
        Init::Normal(std) => Tensor::randn(shape, std, rng),
        Init::Zeros => Tensor::zeros(shape),
        Init::Fill(v) => Tensor::full(shape, v),
        Init::ConvRows { rows, site } => {
            let he = (2.0 / (site.c_in * site.kernel) as f64).sqrt();
            let mut data = Vec::with_capacity(rows * site.param_count());
            for _ in 0..rows {
                data.extend((0..site.weight_len()).map(|_| rng.normal() * he));
                data.extend(std::iter::repeat_n(0.0, site.c_out));
            }
            Tensor::new(shape.to_vec(), data).expect("conv row shape")
        }
        Init::LstmBias => {
            let h = shape[0] / 4;
            let data = (0..4 * h).map(|i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }).collect();
            Tensor::new(shape.to_vec(), data).expect("lstm bias shape")
        }
    }
}

/// Registers every parameter of `cfg` in a fixed order, taking values from `source`.
fn build(
    cfg: &ModelConfig,
    source: &mut dyn FnMut(&str, &[usize], Init) -> Result<Tensor>,
) -> Result<(ParamStore, ParamIds)> {
    let mut store = ParamStore::new();
    let mut add = |name: &str, shape: &[usize], init: Init| -> Result<usize> {
        let t = source(name, shape, init)?;
        Ok(store.add(name, t))
    };
    let spec = cfg.encoder_spec();
    let e = cfg.embedding_dim;
    let sets = cfg.parameter_sets();
    let lin = |i: usize| Init::Normal((1.0 / i as f64).sqrt());

    let embedding = add("embedding", &[cfg.vocab_size, e], Init::Normal(0.5))?;
    let language = match cfg.variant {
        Variant::Gen => Some(add("language_embedding", &[cfg.languages, cfg.language_dim], Init::Normal(1.0))?),
        Variant::Sha => Some(add(
            "language_embedding",
            &[cfg.languages, cfg.shared_language_dim],
            Init::Normal(0.5),
        )?),
        Variant::Sep | Variant::Sgl => None,
    };
    let speaker = add("speaker_embedding", &[cfg.speakers, cfg.speaker_dim], Init::Normal(0.5))?;

    let mut sites = Vec::with_capacity(spec.sites.len());
    for (s, site) in spec.sites.iter().enumerate() {
        let pc = site.param_count();
        let kind = if cfg.variant.uses_generator() {
            let g = cfg.generator_dim;
            let he = (2.0 / (site.c_in * site.kernel) as f64).sqrt();
            // The generated deviation from the shared base row starts at half the He scale.
            let dev = 0.5 * he / (0.394 * g as f64).sqrt();
            SiteKind::Generated {
                w1: add(&format!("encoder.{s}.generator.w1"), &[cfg.language_dim, g], lin(cfg.language_dim))?,
                b1: add(&format!("encoder.{s}.generator.b1"), &[g], Init::Zeros)?,
                w2: add(&format!("encoder.{s}.generator.w2"), &[g, pc], Init::Normal(dev))?,
                b2: add(&format!("encoder.{s}.generator.b2"), &[pc], Init::ConvRows { rows: 1, site: *site })?,
            }
        } else {
            SiteKind::Owned {
                theta: add(&format!("encoder.{s}.theta"), &[sets, pc], Init::ConvRows { rows: sets, site: *site })?,
            }
        };
        sites.push(SiteIds {
            kind,
            gamma: add(&format!("encoder.{s}.bn_gamma"), &[sets, site.c_out], Init::Fill(1.0))?,
            beta: add(&format!("encoder.{s}.bn_beta"), &[sets, site.c_out], Init::Zeros)?,
        });
    }
    let proj = Dense {
        w: add("encoder.proj.w", &[e, e], lin(e))?,
        b: add("encoder.proj.b", &[e], Init::Zeros)?,
    };

    let d = cfg.memory_dim();
    let (pd, h1, h2, a) = (cfg.prenet_dim, cfg.attention_rnn_dim, cfg.decoder_rnn_dim, cfg.attention_dim);
    let relu_init = |i: usize| Init::Normal((2.0 / i as f64).sqrt());
    let prenet = vec![
        Dense {
            w: add("decoder.prenet.0.w", &[cfg.frame_dim, pd], relu_init(cfg.frame_dim))?,
            b: add("decoder.prenet.0.b", &[pd], Init::Zeros)?,
        },
        Dense {
            w: add("decoder.prenet.1.w", &[pd, pd], relu_init(pd))?,
            b: add("decoder.prenet.1.b", &[pd], Init::Zeros)?,
        },
    ];
    let att_in = pd + d + h1;
    let attention_rnn = Dense {
        w: add("decoder.attention_rnn.w", &[att_in, 4 * h1], lin(att_in))?,
        b: add("decoder.attention_rnn.b", &[4 * h1], Init::LstmBias)?,
    };
    let query = add("decoder.attention.query", &[h1, a], lin(h1))?;
    let memory = add("decoder.attention.memory", &[d, a], lin(d))?;
    let k = cfg.location_kernel;
    let location_conv = add(
        "decoder.attention.location_conv",
        &[cfg.location_filters, 2, k],
        lin(2 * k),
    )?;
    let location = add(
        "decoder.attention.location",
        &[cfg.location_filters, a],
        lin(cfg.location_filters),
    )?;
    let energy = add("decoder.attention.energy", &[a, 1], lin(a))?;
    let dec_in = h1 + d + h2;
    let decoder_rnn = Dense {
        w: add("decoder.decoder_rnn.w", &[dec_in, 4 * h2], lin(dec_in))?,
        b: add("decoder.decoder_rnn.b", &[4 * h2], Init::LstmBias)?,
    };
    let head_in = h2 + d;
    let frame = Dense {
        w: add("decoder.frame.w", &[head_in, cfg.frame_dim], lin(head_in))?,
        b: add("decoder.frame.b", &[cfg.frame_dim], Init::Zeros)?,
    };
    let stop = Dense {
        w: add("decoder.stop.w", &[head_in, 1], Init::Normal(0.1 / (head_in as f64).sqrt()))?,
        b: add("decoder.stop.b", &[1], Init::Fill(-3.0))?,
    };
    let classifier = if cfg.has_classifier() {
        let hid = cfg.classifier_hidden;
        Some([
            Dense {
                w: add("classifier.hidden.w", &[e, hid], relu_init(e))?,
                b: add("classifier.hidden.b", &[hid], Init::Zeros)?,
            },
            Dense {
                w: add("classifier.output.w", &[hid, cfg.speakers], Init::Normal(0.01))?,
                b: add("classifier.output.b", &[cfg.speakers], Init::Zeros)?,
            },
        ])
    } else {
        None
    };
    let ids = ParamIds {
        embedding,
        language,
        speaker,
        sites,
        proj,
        prenet,
        attention_rnn,
        query,
        memory,
        location_conv,
        location,
        energy,
        decoder_rnn,
        frame,
        stop,
        classifier,
    };
    Ok((store, ids))
}

/// Running statistics update collected during a train-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub site: usize,
    pub set: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-call state of a forward pass: mode, randomness and collected statistics.
pub struct Ctx<'a> {
    pub mode: Mode,
    pub rng: &'a mut SeededRng,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(mode: Mode, rng: &'a mut SeededRng) -> Self {
        Ctx {
            mode,
            rng,
            bn_updates: Vec::new(),
        }
    }
}

/// Model parameters, batch-norm statistics and the configuration they follow.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// `bn[site][set]`.
    pub bn: Vec<Vec<BatchNormStats>>,
    ids: ParamIds,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params && self.bn == other.bn
    }
}

impl Model {
    /// Fresh model with weights drawn from the seed's init stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = SeededRng::with_stream(seed, streams::INIT);
        let (params, ids) = build(&config, &mut |_, shape, init| Ok(init_tensor(shape, init, &mut rng)))?;
        let bn = Self::fresh_bn(&config);
        Ok(Model {
            config,
            params,
            bn,
            ids,
        })
    }

    /// Rebuilds a model from named tensors; every expected name must be present with its shape.
    pub fn from_tensors(
        config: ModelConfig,
        mut tensors: HashMap<String, Tensor>,
        bn: Vec<Vec<BatchNormStats>>,
    ) -> Result<Model> {
        config.validate()?;
        let (params, ids) = build(&config, &mut |name, shape, _| {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::Lookup(format!("missing parameter `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::shape("load parameter", t.shape(), shape));
            }
            Ok(t)
        })?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Lookup(format!("unexpected parameter `{extra}`")));
        }
        let expected = Self::fresh_bn(&config);
        let shapes_match = bn.len() == expected.len()
            && bn
                .iter()
                .zip(&expected)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.channels() == y.channels()));
        if !shapes_match {
            return Err(Error::Contract("batch-norm statistics do not match the encoder layout".into()));
        }
        Ok(Model {
            config,
            params,
            bn,
            ids,
        })
    }

    fn fresh_bn(cfg: &ModelConfig) -> Vec<Vec<BatchNormStats>> {
        cfg.encoder_spec()
            .sites
            .iter()
            .map(|s| vec![BatchNormStats::new(s.c_out); cfg.parameter_sets()])
            .collect()
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params.bind(tape, trainable)
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            self.bn[u.site][u.set].update(&u.mean, &u.var);
        }
    }

    /// Ids of the parameters that belong to the speaker classifier.
    pub fn classifier_params(&self) -> Vec<usize> {
        self.ids
            .classifier
            .iter()
            .flat_map(|layers| layers.iter().flat_map(|d| [d.w, d.b]))
            .collect()
    }

    /// Ids of the encoder parameters (embedding, conv sites, generators, projection).
    pub fn encoder_params(&self) -> Vec<usize> {
        let mut ids = vec![self.ids.embedding];
        if self.variant() == Variant::Gen {
            ids.extend(self.ids.language);
        }
        for s in &self.ids.sites {
            match s.kind {
                SiteKind::Generated { w1, b1, w2, b2 } => ids.extend([w1, b1, w2, b2]),
                SiteKind::Owned { theta } => ids.push(theta),
            }
            ids.extend([s.gamma, s.beta]);
        }
        ids.extend([self.ids.proj.w, self.ids.proj.b]);
        ids
    }

    /// Shapes of the generator's two dense maps for one site: `([d_lang, g], [g, P])`.
    pub fn generator_shapes(&self, site: usize) -> Option<(Vec<usize>, Vec<usize>)> {
        match self.ids.sites.get(site)?.kind {
            SiteKind::Generated { w1, w2, .. } => Some((
                self.params.get(w1).shape().to_vec(),
                self.params.get(w2).shape().to_vec(),
            )),
            SiteKind::Owned { .. } => None,
        }
    }

    /// Number of encoder conv parameters belonging to one language (generated or owned).
    pub fn per_language_encoder_params(&self) -> usize {
        self.config.encoder_spec().per_language_params()
    }
}
