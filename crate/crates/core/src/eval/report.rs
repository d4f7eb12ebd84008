use std::fmt::Write as _;

use crate::autodiff::nn::Mode;
use crate::autodiff::rng::{streams, SeededRng};
use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::batching::Batch;
use crate::data::{Corpus, PhonemeBank, Utterance};
use crate::error::{Error, Result};
use crate::eval::metrics::{cer, frames_to_symbols};
use crate::model::{Ctx, Inference, Model};

/// Utterances decoded together in one free-running pass.
pub const SYNTH_BATCH: usize = 16;

/// Decoding budget for an utterance of `graphemes` symbols: twice the natural length plus slack.
pub fn max_steps_for(graphemes: usize, frames_per_phoneme: usize) -> usize {
    2 * frames_per_phoneme * graphemes + 20
}

/// Free-running synthesis for each utterance, in input order. Utterances are
/// grouped by language so per-language encoders see single-slot batches.
pub fn synthesize(model: &Model, utts: &[&Utterance], frames_per_phoneme: usize) -> Result<Vec<Inference>> {
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.sort_by_key(|&i| (utts[i].language, i));
    let mut out: Vec<Option<Inference>> = (0..utts.len()).map(|_| None).collect();
    let mut start = 0;
    while start < order.len() {
        let lang = utts[order[start]].language;
        let mut end = start;
        while end < order.len() && end - start < SYNTH_BATCH && utts[order[end]].language == lang {
            end += 1;
        }
        let chunk: Vec<&Utterance> = order[start..end].iter().map(|&i| utts[i]).collect();
        let batch = Batch::assemble(&chunk, 1)?;
        let longest = batch.token_lens.iter().copied().max().unwrap_or(0);
        let results = infer_batch(model, &batch, max_steps_for(longest, frames_per_phoneme))?;
        for (&i, r) in order[start..end].iter().zip(results) {
            out[i] = Some(r);
        }
        start = end;
    }
    Ok(out.into_iter().map(|r| r.expect("every utterance decoded")).collect())
}

fn infer_batch(model: &Model, batch: &Batch, max_steps: usize) -> Result<Vec<Inference>> {
    let tape = Tape::new();
    let p = model.bind(&tape, false);
    let mut rng = SeededRng::with_stream(0, streams::EVAL);
    let mut ctx = Ctx::new(Mode::Eval, &mut rng);
    let encoded = model.encode(&p, &batch.tokens, &batch.token_mask, &batch.languages, batch.slots, &mut ctx)?;
    let conditioning = Conditioning {
        speakers: &batch.speakers,
        languages: &batch.languages,
        token_mask: &batch.token_mask,
    };
    decode_from(model, &p, encoded, &conditioning, max_steps, &mut ctx)
}

/// Per-row inputs the decoder needs besides the encoded sequence.
pub(crate) struct Conditioning<'a> {
    pub speakers: &'a [usize],
    pub languages: &'a [usize],
    pub token_mask: &'a [f64],
}

pub(crate) fn decode_from<'t>(
    model: &Model,
    p: &[Var<'t>],
    encoded: Var<'t>,
    cond: &Conditioning,
    max_steps: usize,
    ctx: &mut Ctx,
) -> Result<Vec<Inference>> {
    let mem = model.memory(p, encoded, cond.speakers, cond.languages)?;
    let att = model.attention_memory(p, mem, cond.token_mask)?;
    model.infer(p, &att, max_steps, ctx)
}

/// Score of one synthesized utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceScore {
    pub id: String,
    pub language: usize,
    pub cer: f64,
    pub frames: usize,
    pub stopped: bool,
    /// Did not stop on its own, or its length is off by more than `r` frames.
    pub skipped: bool,
}

/// Scores decoded frames against a reference phoneme sequence. The natural
/// length is `r` frames per phoneme plus `r` of trailing silence.
pub fn score_frames(
    id: &str,
    language: usize,
    frames: &Tensor,
    stopped: bool,
    reference: &[usize],
    bank: &PhonemeBank,
) -> Result<UtteranceScore> {
    let r = bank.frames_per_phoneme;
    let n = if frames.is_empty() { 0 } else { frames.shape()[0] };
    let expected = r * (reference.len() + 1);
    let hypothesis = frames_to_symbols(frames, bank);
    Ok(UtteranceScore {
        id: id.to_string(),
        language,
        cer: cer(reference, &hypothesis)?,
        frames: n,
        stopped,
        skipped: !stopped || n.abs_diff(expected) > r,
    })
}

/// Synthesizes and scores utterances of `corpus` with `model`.
pub fn evaluate_model(model: &Model, corpus: &Corpus, utts: &[&Utterance]) -> Result<Vec<UtteranceScore>> {
    if utts.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let inferred = synthesize(model, utts, corpus.bank.frames_per_phoneme)?;
    utts.iter()
        .zip(&inferred)
        .map(|(u, inf)| {
            score_frames(&u.id, u.language, &inf.frames, inf.stopped, &corpus.reference_phonemes(u), &corpus.bank)
        })
        .collect()
}

/// Scores the recorded frames themselves, bypassing the model.
pub fn evaluate_ground_truth(corpus: &Corpus, utts: &[&Utterance]) -> Result<Vec<UtteranceScore>> {
    utts.iter()
        .map(|u| score_frames(&u.id, u.language, &u.frames, true, &corpus.reference_phonemes(u), &corpus.bank))
        .collect()
}

/// Aggregate of one (system, language) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub system: String,
    pub language: String,
    pub mean_cer: f64,
    /// Population standard deviation.
    pub std_cer: f64,
    pub n: usize,
    pub skips: usize,
    /// Set when the run behind this cell failed; the numbers are then NaN.
    pub failure: Option<String>,
}

impl EvalRow {
    pub fn from_scores(system: &str, language: &str, scores: &[&UtteranceScore]) -> EvalRow {
        let n = scores.len();
        let mean = scores.iter().map(|s| s.cer).sum::<f64>() / n as f64;
        let var = scores.iter().map(|s| (s.cer - mean).powi(2)).sum::<f64>() / n as f64;
        EvalRow {
            system: system.to_string(),
            language: language.to_string(),
            mean_cer: mean,
            std_cer: var.sqrt(),
            n,
            skips: scores.iter().filter(|s| s.skipped).count(),
            failure: None,
        }
    }

    pub fn failed(system: &str, language: &str, reason: String) -> EvalRow {
        EvalRow {
            system: system.to_string(),
            language: language.to_string(),
            mean_cer: f64::NAN,
            std_cer: f64::NAN,
            n: 0,
            skips: 0,
            failure: Some(reason),
        }
    }
}

/// Rows grouped per language in first-seen order, plus free-form metadata lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// `key = value` lines echoed at the top of the text form.
    pub metadata: Vec<(String, String)>,
}

pub const REPORT_HEADER: &str = "system,language,mean_cer,std_cer,n,skips,status";

impl EvalReport {
    /// One row per language present in `scores`, in ascending language order.
    pub fn add_scores(&mut self, system: &str, language_names: &[String], scores: &[UtteranceScore]) {
        let mut langs: Vec<usize> = scores.iter().map(|s| s.language).collect();
        langs.sort_unstable();
        langs.dedup();
        for l in langs {
            let sel: Vec<&UtteranceScore> = scores.iter().filter(|s| s.language == l).collect();
            let name = language_names.get(l).cloned().unwrap_or_else(|| l.to_string());
            self.rows.push(EvalRow::from_scores(system, &name, &sel));
        }
    }

    pub fn row(&self, system: &str, language: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.system == system && r.language == language)
    }

    pub fn systems(&self) -> Vec<String> {
        unique(self.rows.iter().map(|r| r.system.clone()))
    }

    pub fn languages(&self) -> Vec<String> {
        unique(self.rows.iter().map(|r| r.language.clone()))
    }

    /// Mean over languages of a system's per-language mean CER, if every cell succeeded.
    pub fn system_mean(&self, system: &str) -> Option<f64> {
        let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.system == system).collect();
        if rows.is_empty() || rows.iter().any(|r| r.failure.is_some()) {
            return None;
        }
        Some(rows.iter().map(|r| r.mean_cer).sum::<f64>() / rows.len() as f64)
    }

    pub fn system_skips(&self, system: &str) -> usize {
        self.rows.iter().filter(|r| r.system == system).map(|r| r.skips).sum()
    }

    /// Long format: one line per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let status = match &r.failure {
                None => "ok".to_string(),
                Some(reason) => format!("failed: {}", reason.replace([',', '\n'], ";")),
            };
            writeln!(
                out,
                "{},{},{:.6},{:.6},{},{},{}",
                r.system, r.language, r.mean_cer, r.std_cer, r.n, r.skips, status
            )
            .expect("string write");
        }
        out
    }

    /// Wide format: languages as rows, systems as columns, `mean±std` cells.
    pub fn to_table_csv(&self) -> String {
        let systems = self.systems();
        let mut out = String::from("language");
        for s in &systems {
            write!(out, ",{s}").expect("string write");
        }
        out.push('\n');
        for lang in self.languages() {
            out.push_str(&lang);
            for s in &systems {
                out.push(',');
                out.push_str(&self.cell(s, &lang));
            }
            out.push('\n');
        }
        out
    }

    fn cell(&self, system: &str, language: &str) -> String {
        match self.row(system, language) {
            None => String::new(),
            Some(EvalRow { failure: Some(_), .. }) => "FAILED".into(),
            Some(r) => format!("{:.4}±{:.4}", r.mean_cer, r.std_cer),
        }
    }

    /// The wide table as aligned plain text, preceded by the metadata and
    /// followed by a skip-count line.
    pub fn to_text(&self) -> String {
        let systems = self.systems();
        let mut grid: Vec<Vec<String>> = vec![std::iter::once("language".to_string()).chain(systems.iter().cloned()).collect()];
        for lang in self.languages() {
            let mut line = vec![lang.clone()];
            line.extend(systems.iter().map(|s| self.cell(s, &lang)));
            grid.push(line);
        }
        let mut skips = vec!["skips".to_string()];
        skips.extend(systems.iter().map(|s| self.system_skips(s).to_string()));
        grid.push(skips);
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|c| grid.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (k, v) in &self.metadata {
            writeln!(out, "# {k} = {v}").expect("string write");
        }
        for row in grid {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell:<width$}", width = w))
                .collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).expect("string write");
        }
        out
    }
}

fn unique(items: impl Iterator<Item = String>) -> Vec<String> {
    let mut seen = Vec::new();
    for s in items {
        if !seen.contains(&s) {
            seen.push(s);
        }
    }
    seen
}
