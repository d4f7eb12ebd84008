use super::{Ctx, Model, Variant};
use crate::autodiff::nn::{self, LstmWeights};
use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Decoder memory and its attention projection, computed once per utterance batch.
#[derive(Clone, Copy)]
pub struct AttentionMemory<'t, 'm> {
    /// `[B, T, D]`.
    pub memory: Var<'t>,
    /// `[B, T, A]`.
    pub processed: Var<'t>,
    /// `[B, T]` real-position mask.
    pub mask: &'m [f64],
}

impl<'t, 'm> AttentionMemory<'t, 'm> {
    pub fn batch(&self) -> usize {
        self.memory.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.memory.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct State<'t> {
    h1: Var<'t>,
    c1: Var<'t>,
    h2: Var<'t>,
    c2: Var<'t>,
    context: Var<'t>,
    cumulative: Var<'t>,
    previous: Var<'t>,
}

pub struct DecoderOutput<'t> {
    /// `[B, N, F]`.
    pub frames: Var<'t>,
    /// `[B, N]`.
    pub stop_logits: Var<'t>,
    /// `[B, N, T]`.
    pub alignments: Var<'t>,
}

/// Free-running synthesis result for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// `[n, F]`.
    pub frames: Tensor,
    /// `[n, T]` over the utterance's real input positions.
    pub alignments: Tensor,
    /// The stop head fired before the step limit.
    pub stopped: bool,
}

impl Model {
    /// Decoder memory: encoder output with the speaker embedding (and, for the
    /// shared model, the language embedding) appended to every position.
    pub fn memory<'t>(
        &self,
        p: &[Var<'t>],
        encoded: Var<'t>,
        speakers: &[usize],
        languages: &[usize],
    ) -> Result<Var<'t>> {
        let tape = p[0].tape();
        let s = encoded.shape();
        let (b, t) = (s[0], s[1]);
        if speakers.len() != b || languages.len() != b {
            return Err(Error::shape("memory", &s, &[speakers.len(), languages.len()]));
        }
        if let Some(&bad) = speakers.iter().find(|&&x| x >= self.config.speakers) {
            return Err(Error::Lookup(format!("speaker {bad} unknown to a model of {} speakers", self.config.speakers)));
        }
        let mut parts = vec![encoded, tape.embedding(p[self.ids.speaker], speakers, &[b])?.expand(t)?];
        if self.variant() == Variant::Sha {
            let table = p[self.ids.language.expect("shared model has language embeddings")];
            parts.push(tape.embedding(table, languages, &[b])?.expand(t)?);
        }
        tape.concat(&parts, 2)
    }

    pub fn attention_memory<'t, 'm>(&self, p: &[Var<'t>], memory: Var<'t>, mask: &'m [f64]) -> Result<AttentionMemory<'t, 'm>> {
        let s = memory.shape();
        if s.len() != 3 || s[2] != self.config.memory_dim() || mask.len() != s[0] * s[1] {
            return Err(Error::shape("attention_memory", &s, &[mask.len(), self.config.memory_dim()]));
        }
        for (bi, row) in mask.chunks(s[1]).enumerate() {
            if row.iter().all(|&m| m == 0.0) {
                return Err(Error::Contract(format!("memory row {bi} has no real position")));
            }
        }
        let processed = nn::linear(memory, p[self.ids.memory], None)?;
        Ok(AttentionMemory { memory, processed, mask })
    }

    /// One location-sensitive attention step.
    ///
    /// Energies are `v·tanh(W_q q + W_m m_t + W_f f_t)` with `f` the location
    /// convolution over the cumulative and previous alignments. Returns
    /// `(context [B, D], alignment [B, T])`.
    pub fn attention_step<'t>(
        &self,
        p: &[Var<'t>],
        mem: &AttentionMemory<'t, '_>,
        query: Var<'t>,
        cumulative: Var<'t>,
        previous: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let tape = p[0].tape();
        let (b, t) = (mem.batch(), mem.len());
        let q = query.matmul(p[self.ids.query])?.expand(t)?;
        let loc_in = tape.concat(&[cumulative.reshape(&[b, 1, t])?, previous.reshape(&[b, 1, t])?], 1)?;
        let loc = tape.conv1d(loc_in, p[self.ids.location_conv], None, 1)?.transpose()?;
        let loc = nn::linear(loc, p[self.ids.location], None)?;
        let energies = q.add(mem.processed)?.add(loc)?.tanh();
        let energies = nn::linear(energies, p[self.ids.energy], None)?.reshape(&[b, t])?;
        let alignment = energies.masked_softmax(Some(mem.mask))?;
        let context = alignment
            .reshape(&[b, 1, t])?
            .bmm(mem.memory)?
            .reshape(&[b, self.config.memory_dim()])?;
        Ok((context, alignment))
    }

    fn initial_state<'t>(&self, tape: &'t Tape, b: usize, t: usize) -> State<'t> {
        let zeros = |d: usize| tape.constant(Tensor::zeros(&[b, d]));
        State {
            h1: zeros(self.config.attention_rnn_dim),
            c1: zeros(self.config.attention_rnn_dim),
            h2: zeros(self.config.decoder_rnn_dim),
            c2: zeros(self.config.decoder_rnn_dim),
            context: zeros(self.config.memory_dim()),
            cumulative: zeros(t),
            previous: zeros(t),
        }
    }

    fn prenet<'t>(&self, p: &[Var<'t>], x: Var<'t>, ctx: &mut Ctx) -> Result<Var<'t>> {
        let mut h = x;
        for layer in &self.ids.prenet {
            h = nn::linear(h, p[layer.w], Some(p[layer.b]))?.relu();
            // Active in every mode: synthesis keeps the prenet stochastic.
            if self.config.prenet_dropout > 0.0 {
                h = nn::dropout(h, self.config.prenet_dropout, ctx.rng, nn::Mode::Train)?;
            }
        }
        Ok(h)
    }

    /// One decoder step from a prenet output; returns the head input `[B, H2 + D]` and the alignment.
    fn step<'t>(
        &self,
        p: &[Var<'t>],
        mem: &AttentionMemory<'t, '_>,
        prenet_out: Var<'t>,
        st: &mut State<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let tape = p[0].tape();
        let att_in = tape.concat(&[prenet_out, st.context], 1)?;
        let rnn = |d: super::Dense| LstmWeights { w: p[d.w], b: p[d.b] };
        let (h1, c1) = nn::lstm_cell(att_in, st.h1, st.c1, rnn(self.ids.attention_rnn))?;
        let (context, alignment) = self.attention_step(p, mem, h1, st.cumulative, st.previous)?;
        let dec_in = tape.concat(&[h1, context], 1)?;
        let (h2, c2) = nn::lstm_cell(dec_in, st.h2, st.c2, rnn(self.ids.decoder_rnn))?;
        let head_in = tape.concat(&[h2, context], 1)?;
        st.cumulative = st.cumulative.add(alignment)?;
        st.previous = alignment;
        st.h1 = h1;
        st.c1 = c1;
        st.h2 = h2;
        st.c2 = c2;
        st.context = context;
        Ok((head_in, alignment))
    }

    /// Decodes with the ground-truth previous frame as input at every step.
    pub fn decode_teacher_forced<'t>(
        &self,
        p: &[Var<'t>],
        mem: &AttentionMemory<'t, '_>,
        targets: &Tensor,
        ctx: &mut Ctx,
    ) -> Result<DecoderOutput<'t>> {
        let tape = p[0].tape();
        let (b, t) = (mem.batch(), mem.len());
        let s = targets.shape();
        if s.len() != 3 || s[0] != b || s[2] != self.config.frame_dim {
            return Err(Error::Contract(format!(
                "targets of shape {s:?} do not match batch {b} with frame dim {}",
                self.config.frame_dim
            )));
        }
        let (n, f) = (s[1], s[2]);
        if n == 0 {
            return Err(Error::Contract("zero-length target".into()));
        }
        // Frame n - 1 feeds step n; step 0 sees zeros.
        let mut shifted = vec![0.0; b * n * f];
        for bi in 0..b {
            let src = &targets.data()[bi * n * f..(bi * n + n - 1) * f];
            shifted[(bi * n + 1) * f..(bi + 1) * n * f].copy_from_slice(src);
        }
        let pre = self.prenet(p, tape.constant(Tensor::new(vec![b, n, f], shifted)?), ctx)?;
        let pd = self.config.prenet_dim;
        let mut st = self.initial_state(tape, b, t);
        let mut heads = Vec::with_capacity(n);
        let mut aligns = Vec::with_capacity(n);
        for step in 0..n {
            let x = pre.slice(1, step, 1)?.reshape(&[b, pd])?;
            let (head_in, alignment) = self.step(p, mem, x, &mut st)?;
            heads.push(head_in.reshape(&[b, 1, head_in.shape()[1]])?);
            aligns.push(alignment.reshape(&[b, 1, t])?);
        }
        let heads = tape.concat(&heads, 1)?;
        let frames = nn::linear(heads, p[self.ids.frame.w], Some(p[self.ids.frame.b]))?;
        let stop_logits = nn::linear(heads, p[self.ids.stop.w], Some(p[self.ids.stop.b]))?.reshape(&[b, n])?;
        Ok(DecoderOutput {
            frames,
            stop_logits,
            alignments: tape.concat(&aligns, 1)?,
        })
    }

    /// Free-running decoding: each predicted frame feeds the next step. An
    /// utterance ends at the first step whose stop probability exceeds 0.5, or
    /// after `max_steps` frames.
    pub fn infer<'t>(
        &self,
        p: &[Var<'t>],
        mem: &AttentionMemory<'t, '_>,
        max_steps: usize,
        ctx: &mut Ctx,
    ) -> Result<Vec<Inference>> {
        if max_steps == 0 {
            return Err(Error::Contract("max_steps must be positive".into()));
        }
        let tape = p[0].tape();
        let (b, t) = (mem.batch(), mem.len());
        let f = self.config.frame_dim;
        let mut st = self.initial_state(tape, b, t);
        let mut prev = Tensor::zeros(&[b, f]);
        let mut frames: Vec<Vec<f64>> = vec![Vec::new(); b];
        let mut aligns: Vec<Vec<f64>> = vec![Vec::new(); b];
        let mut done: Vec<Option<bool>> = vec![None; b];
        for step in 0..max_steps {
            let x = self.prenet(p, tape.constant(prev), ctx)?;
            let (head_in, alignment) = self.step(p, mem, x, &mut st)?;
            let out = nn::linear(head_in, p[self.ids.frame.w], Some(p[self.ids.frame.b]))?.value();
            let stop = nn::linear(head_in, p[self.ids.stop.w], Some(p[self.ids.stop.b]))?.value();
            let av = alignment.value();
            for bi in 0..b {
                if done[bi].is_some() {
                    continue;
                }
                frames[bi].extend_from_slice(&out.data()[bi * f..(bi + 1) * f]);
                aligns[bi].extend_from_slice(&av.data()[bi * t..(bi + 1) * t]);
                // sigmoid(x) > 0.5 exactly when x > 0.
                if stop.data()[bi] > 0.0 {
                    done[bi] = Some(true);
                } else if step + 1 == max_steps {
                    done[bi] = Some(false);
                }
            }
            if done.iter().all(Option::is_some) {
                break;
            }
            prev = (*out).clone();
        }
        let mut results = Vec::with_capacity(b);
        for bi in 0..b {
            let real = mem.mask[bi * t..(bi + 1) * t].iter().filter(|&&m| m != 0.0).count();
            let n = frames[bi].len() / f;
            let mut a = Vec::with_capacity(n * real);
            for row in aligns[bi].chunks(t) {
                a.extend_from_slice(&row[..real]);
            }
            results.push(Inference {
                frames: Tensor::new(vec![n, f], std::mem::take(&mut frames[bi]))?,
                alignments: Tensor::new(vec![n, real], a)?,
                stopped: done[bi] == Some(true),
            });
        }
        Ok(results)
    }
}
