//! Language-interleaved batches.
//!
//! A batch of size `B` over `L` languages puts language slot `l` at positions
//! `l, l + L, l + 2L, ...`, so the encoder can view `[B, ...]` as `[B/L, L, ...]`
//! and run one grouped convolution per site.

use crate::autodiff::rng::SeededRng;
use crate::autodiff::tensor::Tensor;
use crate::data::corpus::Utterance;
use crate::data::language::PAD_TOKEN;
use crate::error::{Error, Result};

/// Batches of one epoch as indices into the example list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    pub batches: Vec<Vec<usize>>,
    /// Language id held by each slot.
    pub slot_languages: Vec<usize>,
    /// Examples left out this epoch, per slot.
    pub dropped: Vec<usize>,
}

/// Plans one epoch over examples with the given languages and lengths.
///
/// Every batch holds `batch_size / L` examples of each of the `L` languages
/// present, slot `l` at positions `l + iL`. Per language the examples are
/// shuffled, trimmed to the count the smallest language allows, and (with
/// `bucket`) sorted by length so a batch pairs similarly long examples across
/// languages. Batch order is shuffled last.
pub fn plan_epoch(
    languages: &[usize],
    lengths: &[usize],
    batch_size: usize,
    bucket: bool,
    rng: &mut SeededRng,
) -> Result<EpochPlan> {
    if languages.len() != lengths.len() {
        return Err(Error::shape("plan_epoch", &[languages.len()], &[lengths.len()]));
    }
    let mut slot_languages: Vec<usize> = languages.to_vec();
    slot_languages.sort_unstable();
    slot_languages.dedup();
    let slots = slot_languages.len();
    if slots == 0 {
        return Err(Error::Contract("plan_epoch needs at least one example".into()));
    }
    if batch_size == 0 || !batch_size.is_multiple_of(slots) {
        return Err(Error::Config(format!(
            "batch size {batch_size} is not a positive multiple of the {slots} languages present"
        )));
    }
    let per_slot = batch_size / slots;
    let mut queues: Vec<Vec<usize>> = slot_languages
        .iter()
        .map(|&lang| (0..languages.len()).filter(|&i| languages[i] == lang).collect())
        .collect();
    let batches_n = queues.iter().map(|q| q.len() / per_slot).min().unwrap_or(0);
    if batches_n == 0 {
        return Err(Error::Contract(format!(
            "some language has fewer than {per_slot} examples, so no balanced batch exists"
        )));
    }
    let mut dropped = Vec::with_capacity(slots);
    for q in &mut queues {
        rng.shuffle(q);
        dropped.push(q.len() - batches_n * per_slot);
        q.truncate(batches_n * per_slot);
        if bucket {
            // Stable, so equal lengths keep their shuffled order.
            q.sort_by_key(|&i| lengths[i]);
        }
    }
    let mut batches: Vec<Vec<usize>> = (0..batches_n)
        .map(|b| {
            let mut batch = Vec::with_capacity(batch_size);
            for i in 0..per_slot {
                for q in &queues {
                    batch.push(q[b * per_slot + i]);
                }
            }
            batch
        })
        .collect();
    rng.shuffle(&mut batches);
    Ok(EpochPlan {
        batches,
        slot_languages,
        dropped,
    })
}

/// True iff `B` is a multiple of `slots` and positions `l, l + slots, ...` share a language.
pub fn verify_interleave(languages: &[usize], slots: usize) -> bool {
    slots > 0
        && languages.len().is_multiple_of(slots)
        && languages.iter().enumerate().all(|(i, &lang)| lang == languages[i % slots])
}

/// Views a flat batch as `[B / slots][slots]`.
pub fn regroup<T: Clone>(items: &[T], slots: usize) -> Result<Vec<Vec<T>>> {
    if slots == 0 || !items.len().is_multiple_of(slots) {
        return Err(Error::Contract(format!(
            "cannot regroup {} items into rows of {slots}",
            items.len()
        )));
    }
    Ok(items.chunks(slots).map(|c| c.to_vec()).collect())
}

/// Padded tensors for one batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub languages: Vec<usize>,
    pub speakers: Vec<usize>,
    /// Number of language slots of the interleave.
    pub slots: usize,
    /// `[B, T]` token ids, padded with [`PAD_TOKEN`].
    pub tokens: Vec<usize>,
    pub token_mask: Vec<f64>,
    pub token_lens: Vec<usize>,
    pub max_tokens: usize,
    /// `[B, N, F]` target frames, zero padded.
    pub targets: Tensor,
    pub frame_mask: Vec<f64>,
    /// 1 on each example's last real frame.
    pub stop_targets: Vec<f64>,
    pub frame_lens: Vec<usize>,
    pub max_frames: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.languages.len()
    }

    /// Pads the given utterances, which must already be interleaved over `slots`.
    pub fn assemble(utts: &[&Utterance], slots: usize) -> Result<Batch> {
        if utts.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let languages: Vec<usize> = utts.iter().map(|u| u.language).collect();
        if !verify_interleave(&languages, slots) {
            return Err(Error::Contract(format!(
                "batch languages {languages:?} are not interleaved over {slots} slots"
            )));
        }
        let b = utts.len();
        let tokens_each: Vec<Vec<usize>> = utts.iter().map(|u| u.tokens()).collect();
        let token_lens: Vec<usize> = tokens_each.iter().map(|t| t.len()).collect();
        let max_tokens = *token_lens.iter().max().expect("non-empty");
        let frame_lens: Vec<usize> = utts.iter().map(|u| u.duration()).collect();
        let max_frames = *frame_lens.iter().max().expect("non-empty");
        if max_tokens == 0 || frame_lens.contains(&0) {
            return Err(Error::Contract("batch contains an empty example".into()));
        }
        let f = utts[0].frames.shape()[1];
        let mut tokens = vec![PAD_TOKEN; b * max_tokens];
        let mut token_mask = vec![0.0; b * max_tokens];
        let mut targets = vec![0.0; b * max_frames * f];
        let mut frame_mask = vec![0.0; b * max_frames];
        let mut stop_targets = vec![0.0; b * max_frames];
        for (i, u) in utts.iter().enumerate() {
            for (t, &tok) in tokens_each[i].iter().enumerate() {
                tokens[i * max_tokens + t] = tok;
                token_mask[i * max_tokens + t] = 1.0;
            }
            if u.frames.shape()[1] != f {
                return Err(Error::shape("Batch::assemble", u.frames.shape(), &[frame_lens[i], f]));
            }
            let n = frame_lens[i];
            targets[i * max_frames * f..(i * max_frames + n) * f].copy_from_slice(u.frames.data());
            frame_mask[i * max_frames..i * max_frames + n].fill(1.0);
            stop_targets[i * max_frames + n - 1] = 1.0;
        }
        Ok(Batch {
            ids: utts.iter().map(|u| u.id.clone()).collect(),
            languages,
            speakers: utts.iter().map(|u| u.speaker).collect(),
            slots,
            tokens,
            token_mask,
            token_lens,
            max_tokens,
            targets: Tensor::new(vec![b, max_frames, f], targets)?,
            frame_mask,
            stop_targets,
            frame_lens,
            max_frames,
        })
    }
}
