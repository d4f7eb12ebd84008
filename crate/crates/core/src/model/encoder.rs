use super::{BnUpdate, Ctx, Model, SiteKind, SiteSpec, Variant};
use crate::autodiff::nn::{self, Mode, BN_EPS};
use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::batching::verify_interleave;
use crate::error::{Error, Result};

/// Repeats a `[B, T]` mask over `c` channels in `[B, c, T]` layout.
fn channel_mask(mask: &[f64], b: usize, c: usize, t: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(b * c * t);
    for bi in 0..b {
        let row = &mask[bi * t..(bi + 1) * t];
        for _ in 0..c {
            out.extend_from_slice(row);
        }
    }
    out
}

/// Repeats each entry of a `[B, T]` mask `d` times for a `[B, T, d]` tensor.
pub(crate) fn feature_mask(mask: &[f64], d: usize) -> Vec<f64> {
    mask.iter().flat_map(|&m| std::iter::repeat_n(m, d)).collect()
}

/// Splits a flat site row into `([c_out, c_in, k] weight, [c_out] bias)`.
pub fn unflatten(site: &SiteSpec, flat: &Tensor) -> Result<(Tensor, Tensor)> {
    if flat.len() != site.param_count() {
        return Err(Error::shape("unflatten", flat.shape(), &[site.param_count()]));
    }
    let w = flat.data()[..site.weight_len()].to_vec();
    let b = flat.data()[site.weight_len()..].to_vec();
    Ok((
        Tensor::new(vec![site.c_out, site.c_in, site.kernel], w)?,
        Tensor::vector(b),
    ))
}

pub fn flatten(weight: &Tensor, bias: &Tensor) -> Tensor {
    Tensor::vector(weight.data().iter().chain(bias.data()).copied().collect())
}

impl Model {
    /// Flat parameter rows `[G, param_count]` of one site for the given parameter sets.
    fn site_rows<'t>(&self, p: &[Var<'t>], site: usize, sets: &[usize]) -> Result<Var<'t>> {
        let tape = p[0].tape();
        let g = sets.len();
        match self.ids.sites[site].kind {
            SiteKind::Generated { w1, b1, w2, b2 } => {
                let table = p[self.ids.language.expect("generator has language embeddings")];
                let langs = tape.embedding(table, sets, &[g])?;
                let hidden = nn::linear(langs, p[w1], Some(p[b1]))?.tanh();
                nn::linear(hidden, p[w2], Some(p[b2]))
            }
            SiteKind::Owned { theta } => tape.embedding(p[theta], sets, &[g]),
        }
    }

    /// Per-language flat parameter vectors, `[language][site]`.
    ///
    /// For the generated model these are the generator outputs; for the separate
    /// model the owned rows.
    pub fn generate_params(&self, languages: &[usize]) -> Result<Vec<Vec<Tensor>>> {
        if !self.variant().encoders_per_language() {
            return Err(Error::Config(format!("the {} model has no per-language encoders", self.variant())));
        }
        for &l in languages {
            if l >= self.config.languages {
                return Err(Error::Lookup(format!(
                    "language {l} unknown to a model of {} languages",
                    self.config.languages
                )));
            }
        }
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let n_sites = self.ids.sites.len();
        let mut per_site = Vec::with_capacity(n_sites);
        for s in 0..n_sites {
            per_site.push(self.site_rows(&p, s, languages)?.value());
        }
        Ok((0..languages.len())
            .map(|li| {
                per_site
                    .iter()
                    .map(|rows| {
                        let pc = rows.shape()[1];
                        Tensor::vector(rows.data()[li * pc..(li + 1) * pc].to_vec())
                    })
                    .collect()
            })
            .collect())
    }

    fn check_tokens(&self, tokens: &[usize], mask: &[f64], b: usize) -> Result<usize> {
        if b == 0 || !tokens.len().is_multiple_of(b) || tokens.len() != mask.len() {
            return Err(Error::shape("encode", &[tokens.len()], &[b, mask.len()]));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Lookup(format!("token id {bad} out of range for vocabulary {}", self.config.vocab_size)));
        }
        Ok(tokens.len() / b)
    }

    /// Encodes a padded `[B, T]` token batch into `[B, T, E]`.
    ///
    /// Per-language variants need the batch interleaved over `slots` languages;
    /// it is then processed as `B/slots` rows of `slots` channel groups.
    pub fn encode<'t>(
        &self,
        p: &[Var<'t>],
        tokens: &[usize],
        mask: &[f64],
        languages: &[usize],
        slots: usize,
        ctx: &mut Ctx,
    ) -> Result<Var<'t>> {
        let tape = p[0].tape();
        let b = languages.len();
        let t = self.check_tokens(tokens, mask, b)?;
        if let Some(&bad) = languages.iter().find(|&&l| l >= self.config.languages) {
            return Err(Error::Lookup(format!(
                "language {bad} unknown to a model of {} languages",
                self.config.languages
            )));
        }
        let (groups, sets) = if self.variant().encoders_per_language() {
            if !verify_interleave(languages, slots) {
                return Err(Error::Contract(format!(
                    "batch languages {languages:?} cannot be regrouped into rows of {slots}; \
                     the sampler must place language slot l at positions l + i*{slots}"
                )));
            }
            (slots, languages[..slots].iter().map(|&l| self.config.set_of(l)).collect::<Vec<_>>())
        } else {
            (1, vec![0])
        };
        let rows = b / groups;
        let e = self.config.embedding_dim;
        let emask = feature_mask(mask, e);

        let x = tape.embedding(p[self.ids.embedding], tokens, &[b, t])?.mul_const(&emask)?;
        let mut h = x.transpose()?.reshape(&[rows, groups * e, t])?;
        let spec = self.config.encoder_spec();
        for (s, site) in spec.sites.iter().enumerate() {
            let theta = self.site_rows(p, s, &sets)?;
            let w = theta
                .slice(1, 0, site.weight_len())?
                .reshape(&[groups * site.c_out, site.c_in, site.kernel])?;
            let bias = theta.slice(1, site.weight_len(), site.c_out)?.reshape(&[groups * site.c_out])?;
            h = tape.conv1d(h, w, Some(bias), groups)?;

            let ids = &self.ids.sites[s];
            let gamma = tape.embedding(p[ids.gamma], &sets, &[groups])?.reshape(&[groups * site.c_out])?;
            let beta = tape.embedding(p[ids.beta], &sets, &[groups])?.reshape(&[groups * site.c_out])?;
            let m = channel_mask(mask, b, site.c_out, t);
            h = match ctx.mode {
                Mode::Train => {
                    let (y, mean, var) = tape.batch_norm(h, gamma, beta, Some(&m), None, BN_EPS)?;
                    for (g, &set) in sets.iter().enumerate() {
                        let r = g * site.c_out..(g + 1) * site.c_out;
                        ctx.bn_updates.push(BnUpdate {
                            site: s,
                            set,
                            mean: mean[r.clone()].to_vec(),
                            var: var[r].to_vec(),
                        });
                    }
                    y
                }
                Mode::Eval => {
                    let mut mean = Vec::with_capacity(groups * site.c_out);
                    let mut var = Vec::with_capacity(groups * site.c_out);
                    for &set in &sets {
                        let st = &self.bn[s][set];
                        if !st.initialized {
                            return Err(Error::UninitializedStats);
                        }
                        mean.extend_from_slice(&st.mean);
                        var.extend_from_slice(&st.var);
                    }
                    tape.batch_norm(h, gamma, beta, Some(&m), Some((&mean, &var)), BN_EPS)?.0
                }
            };
            h = nn::dropout(h.relu(), spec.dropout, ctx.rng, ctx.mode)?.mul_const(&m)?;
        }
        let out = h.reshape(&[b, e, t])?.transpose()?;
        nn::linear(out, p[self.ids.proj.w], Some(p[self.ids.proj.b]))?.mul_const(&emask)
    }

    /// Encodes the whole batch once per language with non-zero weight and
    /// returns the per-token convex combination of those encodings.
    ///
    /// `weights` is `[B, T, L]` for `batch` rows; rows at padding positions are ignored.
    pub fn encode_mixed<'t>(
        &self,
        p: &[Var<'t>],
        tokens: &[usize],
        mask: &[f64],
        batch: usize,
        weights: &[f64],
        ctx: &mut Ctx,
    ) -> Result<Var<'t>> {
        if !matches!(self.variant(), Variant::Gen | Variant::Sep) {
            return Err(Error::Config(format!("the {} model cannot mix encoders", self.variant())));
        }
        let l = self.config.languages;
        if weights.len() != tokens.len() * l {
            return Err(Error::shape("encode_mixed", &[weights.len()], &[tokens.len(), l]));
        }
        for (i, row) in weights.chunks(l).enumerate() {
            if mask[i] == 0.0 {
                continue;
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("token {i} language weights {row:?} are not a convex combination")));
            }
        }
        self.check_tokens(tokens, mask, batch)?;
        let t_total = tokens.len();
        let e = self.config.embedding_dim;
        let mut mixed: Option<Var<'t>> = None;
        for lang in 0..l {
            let w: Vec<f64> = (0..t_total).map(|i| weights[i * l + lang] * mask[i]).collect();
            if w.iter().all(|&x| x == 0.0) {
                continue;
            }
            let enc = self.encode(p, tokens, mask, &vec![lang; batch], 1, ctx)?;
            let term = enc.mul_const(&feature_mask(&w, e))?;
            mixed = Some(match mixed {
                None => term,
                Some(acc) => acc.add(term)?,
            });
        }
        match mixed {
            Some(v) => Ok(v),
            None => Err(Error::Contract("encode_mixed needs at least one real token".into())),
        }
    }
}
