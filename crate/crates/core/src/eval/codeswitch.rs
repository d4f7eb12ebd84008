use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use crate::autodiff::nn::Mode;
use crate::autodiff::rng::{streams, SeededRng};
use crate::autodiff::tape::Tape;
use crate::data::language::{char_grapheme, grapheme_char, parse_text, PAD_TOKEN};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::eval::metrics::{cer, frames_to_symbols, span_error_rate};
use crate::eval::report::{decode_from, max_steps_for, Conditioning, EvalRow, SYNTH_BATCH};
use crate::model::{Ctx, Model, Variant};

/// Words per generated sentence.
pub const SENTENCE_WORDS: usize = 12;
/// Contiguous foreign words inserted into each sentence.
pub const FOREIGN_WORDS: usize = 3;

/// One word of a mixed-language sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwitchWord {
    pub graphemes: Vec<usize>,
    pub language: usize,
}

/// A sentence in a base language with some words read in other languages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwitchSentence {
    pub base: usize,
    pub words: Vec<SwitchWord>,
}

impl SwitchSentence {
    pub fn graphemes(&self) -> Vec<usize> {
        self.words.iter().flat_map(|w| w.graphemes.iter().copied()).collect()
    }

    /// Language of every grapheme.
    pub fn grapheme_languages(&self) -> Vec<usize> {
        self.words
            .iter()
            .flat_map(|w| std::iter::repeat_n(w.language, w.graphemes.len()))
            .collect()
    }

    /// Grapheme positions covered by words not in the base language, from the
    /// first such word to the last.
    pub fn foreign_span(&self) -> Option<Range<usize>> {
        let langs = self.grapheme_languages();
        let first = langs.iter().position(|&l| l != self.base)?;
        let last = langs.iter().rposition(|&l| l != self.base)?;
        Some(first..last + 1)
    }

    /// Phonemes of a correct reading, each word in its own language.
    pub fn reference(&self, corpus: &Corpus) -> Vec<usize> {
        self.words
            .iter()
            .flat_map(|w| corpus.languages[w.language].pronounce(&w.graphemes))
            .collect()
    }
}

/// `per_language` sentences for every base language: [`SENTENCE_WORDS`] words
/// of one or two graphemes, with [`FOREIGN_WORDS`] consecutive words read in
/// one other language at a random position.
pub fn generate_switch_sentences(languages: usize, per_language: usize, seed: u64) -> Result<Vec<SwitchSentence>> {
    if languages < 2 {
        return Err(Error::Config("code-switching needs at least two languages".into()));
    }
    let alphabet = crate::data::language::ALPHABET;
    let mut rng = SeededRng::with_stream(seed, streams::CODE_SWITCH);
    let mut out = Vec::with_capacity(languages * per_language);
    for base in 0..languages {
        for _ in 0..per_language {
            let foreign = (base + 1 + rng.below(languages - 1)) % languages;
            let start = rng.below(SENTENCE_WORDS - FOREIGN_WORDS + 1);
            let words = (0..SENTENCE_WORDS)
                .map(|i| {
                    let len = rng.inclusive(1, 2);
                    SwitchWord {
                        graphemes: (0..len).map(|_| rng.below(alphabet)).collect(),
                        language: if (start..start + FOREIGN_WORDS).contains(&i) { foreign } else { base },
                    }
                })
                .collect();
            out.push(SwitchSentence { base, words });
        }
    }
    Ok(out)
}

/// Sentence file: one `word<TAB>language-name` line per word, a blank line after each sentence.
pub fn format_sentences(sentences: &[SwitchSentence], language_names: &[String]) -> String {
    let mut out = String::new();
    for s in sentences {
        for w in &s.words {
            let text: String = w.graphemes.iter().map(|&g| grapheme_char(g)).collect();
            writeln!(out, "{text}\t{}", language_names[w.language]).expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Parses a sentence file. The base language of a sentence is the one most of
/// its graphemes use (ties go to the earlier language id).
pub fn parse_sentences(text: &str, language_names: &[String]) -> Result<Vec<SwitchSentence>> {
    let mut sentences = Vec::new();
    let mut words: Vec<SwitchWord> = Vec::new();
    let finish = |words: &mut Vec<SwitchWord>, out: &mut Vec<SwitchSentence>| {
        if words.is_empty() {
            return;
        }
        let mut counts = vec![0usize; language_names.len()];
        for w in words.iter() {
            counts[w.language] += w.graphemes.len();
        }
        let base = (0..counts.len()).fold(0, |best, l| if counts[l] > counts[best] { l } else { best });
        out.push(SwitchSentence {
            base,
            words: std::mem::take(words),
        });
    };
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            finish(&mut words, &mut sentences);
            continue;
        }
        let bad = |msg: String| Error::Contract(format!("sentence file line {}: {msg}", lineno + 1));
        let (word, lang) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected `word<TAB>language`".into()))?;
        let graphemes = parse_text(word)
            .filter(|g| !g.is_empty())
            .ok_or_else(|| bad(format!("`{word}` is not a word of the toy alphabet")))?;
        let language = language_names
            .iter()
            .position(|n| n == lang.trim())
            .ok_or_else(|| Error::Lookup(format!("line {}: unknown language `{}`", lineno + 1, lang.trim())))?;
        words.push(SwitchWord { graphemes, language });
    }
    finish(&mut words, &mut sentences);
    debug_assert!(sentences.iter().all(|s| s.graphemes().iter().all(|&g| char_grapheme(grapheme_char(g)) == Some(g))));
    Ok(sentences)
}

pub fn write_sentences(path: &Path, sentences: &[SwitchSentence], language_names: &[String]) -> Result<()> {
    std::fs::write(path, format_sentences(sentences, language_names)).map_err(|e| Error::file(path, e))
}

pub fn read_sentences(path: &Path, language_names: &[String]) -> Result<Vec<SwitchSentence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_sentences(&text, language_names)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwitchScore {
    pub base: usize,
    /// CER over the whole sentence.
    pub cer: f64,
    /// Error rate over the foreign words only; `None` for monolingual sentences.
    pub foreign_cer: Option<f64>,
    pub frames: usize,
    pub stopped: bool,
    pub skipped: bool,
}

/// Synthesizes mixed-language sentences with the base language's first speaker.
///
/// The generated and separate models encode every word with its own
/// language's encoder and splice the outputs; the shared model reads the whole
/// sentence with the base-language embedding.
pub fn code_switch_eval(model: &Model, corpus: &Corpus, sentences: &[SwitchSentence]) -> Result<Vec<SwitchScore>> {
    let variant = model.variant();
    if variant == Variant::Sgl {
        return Err(Error::Config("the single-language model cannot switch languages".into()));
    }
    let langs = model.config.languages;
    if let Some(bad) = sentences.iter().flat_map(|s| s.words.iter()).find(|w| w.language >= langs) {
        return Err(Error::Lookup(format!("language {} unknown to a model of {langs} languages", bad.language)));
    }
    if sentences.iter().any(|s| s.words.iter().all(|w| w.graphemes.is_empty())) {
        return Err(Error::Contract("empty sentence".into()));
    }
    let speakers_per_language = corpus.speakers / corpus.num_languages();
    let r = corpus.bank.frames_per_phoneme;
    let mut scores = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(SYNTH_BATCH) {
        let b = chunk.len();
        let lens: Vec<usize> = chunk.iter().map(|s| s.graphemes().len()).collect();
        let t = *lens.iter().max().expect("non-empty chunk");
        let mut tokens = vec![PAD_TOKEN; b * t];
        let mut mask = vec![0.0; b * t];
        let mut weights = vec![0.0; b * t * langs];
        for (bi, s) in chunk.iter().enumerate() {
            for (i, (g, l)) in s.graphemes().into_iter().zip(s.grapheme_languages()).enumerate() {
                tokens[bi * t + i] = g + 1;
                mask[bi * t + i] = 1.0;
                weights[(bi * t + i) * langs + l] = 1.0;
            }
            // Padding rows still need a valid distribution.
            for i in lens[bi]..t {
                weights[(bi * t + i) * langs + s.base] = 1.0;
            }
        }
        let bases: Vec<usize> = chunk.iter().map(|s| s.base).collect();
        let speakers: Vec<usize> = bases.iter().map(|&l| l * speakers_per_language).collect();
        let tape = Tape::new();
        let p = model.bind(&tape, false);
        let mut rng = SeededRng::with_stream(0, streams::EVAL);
        let mut ctx = Ctx::new(Mode::Eval, &mut rng);
        let encoded = match variant {
            Variant::Gen | Variant::Sep => model.encode_mixed(&p, &tokens, &mask, b, &weights, &mut ctx)?,
            _ => model.encode(&p, &tokens, &mask, &bases, 1, &mut ctx)?,
        };
        let cond = Conditioning {
            speakers: &speakers,
            languages: &bases,
            token_mask: &mask,
        };
        let inferred = decode_from(model, &p, encoded, &cond, max_steps_for(t, r), &mut ctx)?;
        for (s, inf) in chunk.iter().zip(inferred) {
            let reference = s.reference(corpus);
            let hypothesis = frames_to_symbols(&inf.frames, &corpus.bank);
            let n = inf.frames.shape()[0];
            scores.push(SwitchScore {
                base: s.base,
                cer: cer(&reference, &hypothesis)?,
                foreign_cer: s.foreign_span().map(|span| span_error_rate(&reference, &hypothesis, span)).transpose()?,
                frames: n,
                stopped: inf.stopped,
                skipped: !inf.stopped || n.abs_diff(r * (reference.len() + 1)) > r,
            });
        }
    }
    Ok(scores)
}

/// Per-base-language rows: `system` carries whole-sentence CER,
/// `system:foreign` the foreign-span error rate. Skips are counted on both.
pub fn switch_rows(system: &str, language_names: &[String], scores: &[SwitchScore]) -> Vec<EvalRow> {
    let mut bases: Vec<usize> = scores.iter().map(|s| s.base).collect();
    bases.sort_unstable();
    bases.dedup();
    let mut rows = Vec::new();
    for base in bases {
        let sel: Vec<&SwitchScore> = scores.iter().filter(|s| s.base == base).collect();
        let name = &language_names[base];
        let stats = |xs: &[f64]| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            (mean, (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
        };
        let skips = sel.iter().filter(|s| s.skipped).count();
        let whole: Vec<f64> = sel.iter().map(|s| s.cer).collect();
        let foreign: Vec<f64> = sel.iter().filter_map(|s| s.foreign_cer).collect();
        for (label, xs) in [(system.to_string(), whole), (format!("{system}:foreign"), foreign)] {
            if xs.is_empty() {
                continue;
            }
            let (mean_cer, std_cer) = stats(&xs);
            rows.push(EvalRow {
                system: label,
                language: name.clone(),
                mean_cer,
                std_cer,
                n: xs.len(),
                skips,
                failure: None,
            });
        }
    }
    rows
}
