use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::rng::{streams, SeededRng};
use crate::data::{subset_per_language, Corpus, Split, Utterance};
use crate::error::{Error, Result};
use crate::eval::codeswitch::{code_switch_eval, switch_rows, SwitchScore, SwitchSentence};
use crate::eval::report::{evaluate_ground_truth, evaluate_model, EvalReport, EvalRow, UtteranceScore};
use crate::model::{Model, ModelConfig, Variant};
use crate::training::{Status, TrainConfig, TrainLog, Trainer};

/// Training-set size of a comparison run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// The whole training split.
    Full,
    StressSmall,
    StressTiny,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Full, Regime::StressSmall, Regime::StressTiny];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Full => "full",
            Regime::StressSmall => "stress_small",
            Regime::StressTiny => "stress_tiny",
        }
    }

    /// Factor applied to the learning-rate halving interval: smaller sets
    /// decay sooner.
    pub fn halving_scale(self) -> f64 {
        match self {
            Regime::Full => 1.0,
            Regime::StressSmall => 0.75,
            Regime::StressTiny => 0.5,
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What to train and compare.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub variants: Vec<Variant>,
    pub regimes: Vec<Regime>,
    pub seeds: Vec<u64>,
    pub stress_small_per_language: usize,
    pub stress_tiny_per_language: usize,
    /// Also train classifier-equipped models and score them on mixed-language sentences.
    pub code_switch: bool,
    pub code_switch_variants: Vec<Variant>,
    /// Generated sentences per base language.
    pub code_switch_per_language: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            variants: vec![Variant::Gen, Variant::Sha, Variant::Sep],
            regimes: vec![Regime::Full, Regime::StressTiny],
            seeds: vec![1, 2, 3],
            stress_small_per_language: 90,
            stress_tiny_per_language: 60,
            code_switch: true,
            code_switch_variants: vec![Variant::Gen, Variant::Sha],
            code_switch_per_language: 10,
        }
    }
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.regimes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("compare needs at least one variant, regime and seed".into()));
        }
        if self.stress_small_per_language == 0 || self.stress_tiny_per_language == 0 {
            return Err(Error::Config("stress subset sizes must be positive".into()));
        }
        if self.code_switch {
            if self.code_switch_per_language == 0 {
                return Err(Error::Config("compare.code_switch_per_language must be positive".into()));
            }
            if let Some(v) = self.code_switch_variants.iter().find(|v| **v == Variant::Sgl) {
                return Err(Error::Config(format!("the {v} model cannot be code-switched")));
            }
        }
        Ok(())
    }

    fn per_language(&self, regime: Regime) -> Option<usize> {
        match regime {
            Regime::Full => None,
            Regime::StressSmall => Some(self.stress_small_per_language),
            Regime::StressTiny => Some(self.stress_tiny_per_language),
        }
    }
}

/// Uppercase label used as the report column.
pub fn system_name(variant: Variant) -> String {
    variant.name().to_uppercase()
}

/// Training settings of one run: the separate model starts at a tenth of the
/// learning rate, and the halving interval follows the regime.
pub fn run_train_config(template: &TrainConfig, variant: Variant, regime: Regime, seed: u64) -> TrainConfig {
    let mut tc = template.clone().for_variant(variant);
    let scaled = (template.lr_halving_interval as f64 * regime.halving_scale()).round() as u64;
    tc.lr_halving_interval = scaled.max(1);
    tc.seed = seed;
    tc
}

/// Result of one (variant, regime, seed) run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub variant: Variant,
    pub regime: Regime,
    pub seed: u64,
    pub train_config: TrainConfig,
    /// One log per trained model (the single-language variant trains one per language).
    pub logs: Vec<TrainLog>,
    pub scores: Vec<UtteranceScore>,
    pub failure: Option<String>,
}

/// Everything a comparison produced.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub runs: Vec<RunResult>,
    /// One Table-2-shaped report per regime.
    pub reports: Vec<(Regime, EvalReport)>,
}

impl Comparison {
    pub fn report(&self, regime: Regime) -> Option<&EvalReport> {
        self.reports.iter().find(|(r, _)| *r == regime).map(|(_, rep)| rep)
    }

    /// Writes `report_<regime>.csv` (long), `table_<regime>.csv` (wide),
    /// `report.txt` and per-run logs under `runs/`. Returns paths relative to `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<String>> {
        let mut written = Vec::new();
        let mut text = String::new();
        let mut put = |name: String, body: &str| -> Result<()> {
            let path = dir.join(&name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
            }
            std::fs::write(&path, body).map_err(|e| Error::file(&path, e))?;
            written.push(name);
            Ok(())
        };
        for (regime, rep) in &self.reports {
            put(format!("report_{regime}.csv"), &rep.to_csv())?;
            put(format!("table_{regime}.csv"), &rep.to_table_csv())?;
            text.push_str(&format!("== {regime}\n{}\n", rep.to_text()));
        }
        put("report.txt".into(), &text)?;
        for run in &self.runs {
            let stem = format!("runs/{}_{}_s{}", run.variant.name(), run.regime, run.seed);
            for (i, log) in run.logs.iter().enumerate() {
                let suffix = if run.logs.len() > 1 { format!("_lang{i}") } else { String::new() };
                put(format!("{stem}/train_log{suffix}.csv"), &log.to_csv())?;
                put(format!("{stem}/timing{suffix}.tsv"), &log.timing_tsv())?;
            }
            if let Some(reason) = &run.failure {
                put(format!("{stem}/FAILED"), reason)?;
            }
        }
        Ok(written)
    }
}

/// Trains every variant in every regime for every seed, then evaluates on the
/// test split. A failing run marks its cells failed; the others still run.
/// `on_run` sees each run as it finishes.
pub fn run_comparison(
    corpus: &Corpus,
    model_template: &ModelConfig,
    train_template: &TrainConfig,
    cfg: &CompareConfig,
    on_run: &mut dyn FnMut(&RunResult),
) -> Result<Comparison> {
    cfg.validate()?;
    train_template.validate()?;
    let langs = corpus.num_languages();
    let names: Vec<String> = corpus.languages.iter().map(|l| l.name.clone()).collect();
    let test = corpus.split(Split::Test);
    let val = corpus.split(Split::Val);
    if test.is_empty() {
        return Err(Error::Contract("the corpus has no test split".into()));
    }
    let ground_truth = evaluate_ground_truth(corpus, &test)?;
    let mut runs = Vec::new();
    for &regime in &cfg.regimes {
        for &seed in &cfg.seeds {
            let train = training_subset(corpus, cfg.per_language(regime), seed)?;
            for &variant in &cfg.variants {
                let tc = run_train_config(train_template, variant, regime, seed);
                let run = match train_and_score(corpus, model_template, &tc, variant, &train, &val, &test) {
                    Ok((logs, scores, failure)) => RunResult {
                        variant,
                        regime,
                        seed,
                        train_config: tc,
                        logs,
                        scores,
                        failure,
                    },
                    Err(e) => RunResult {
                        variant,
                        regime,
                        seed,
                        train_config: tc,
                        logs: Vec::new(),
                        scores: Vec::new(),
                        failure: Some(e.to_string()),
                    },
                };
                on_run(&run);
                runs.push(run);
            }
        }
    }
    let mut reports = Vec::new();
    for &regime in &cfg.regimes {
        let mut rep = EvalReport::default();
        rep.add_scores("GT", &names, &ground_truth);
        for &variant in &cfg.variants {
            let sys = system_name(variant);
            let cell_runs: Vec<&RunResult> = runs.iter().filter(|r| r.regime == regime && r.variant == variant).collect();
            if let Some(failed) = cell_runs.iter().find(|r| r.failure.is_some()) {
                let reason = format!("seed {}: {}", failed.seed, failed.failure.as_deref().unwrap_or_default());
                for name in &names {
                    rep.rows.push(EvalRow::failed(&sys, name, reason.clone()));
                }
                continue;
            }
            let pooled: Vec<UtteranceScore> = cell_runs.iter().flat_map(|r| r.scores.iter().cloned()).collect();
            rep.add_scores(&sys, &names, &pooled);
        }
        rep.metadata = metadata(corpus, model_template, train_template, cfg, regime, langs)?;
        reports.push((regime, rep));
    }
    Ok(Comparison { runs, reports })
}

fn metadata(
    corpus: &Corpus,
    model_template: &ModelConfig,
    train_template: &TrainConfig,
    cfg: &CompareConfig,
    regime: Regime,
    langs: usize,
) -> Result<Vec<(String, String)>> {
    let per_lang = match cfg.per_language(regime) {
        Some(n) => n.to_string(),
        None => format!("all ({})", corpus.split(Split::Train).len() / langs.max(1)),
    };
    let encoder_params = |variant| -> Result<usize> {
        let m = Model::new(variant_config(model_template, variant, langs, corpus.speakers)?, 0)?;
        Ok(m.per_language_encoder_params())
    };
    let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
    Ok(vec![
        ("regime".into(), regime.name().into()),
        ("train examples per language".into(), per_lang),
        ("seeds".into(), seeds.join(" ")),
        ("steps".into(), train_template.steps.to_string()),
        (
            "lr halving interval".into(),
            run_train_config(train_template, Variant::Gen, regime, 0).lr_halving_interval.to_string(),
        ),
        ("GEN encoder params per language".into(), encoder_params(Variant::Gen)?.to_string()),
        ("SEP encoder params per language".into(), encoder_params(Variant::Sep)?.to_string()),
    ])
}

/// Model configuration of `variant` for a corpus of `languages` languages and
/// `speakers` speakers. The single-language model sees one language and its
/// speakers only.
pub fn variant_config(template: &ModelConfig, variant: Variant, languages: usize, speakers: usize) -> Result<ModelConfig> {
    let mut cfg = template.clone();
    cfg.variant = variant;
    cfg.classifier = template.classifier && variant.supports_classifier();
    if variant == Variant::Sgl {
        if !speakers.is_multiple_of(languages) {
            return Err(Error::Config("speakers are not evenly split over languages".into()));
        }
        cfg.languages = 1;
        cfg.speakers = speakers / languages;
    } else {
        cfg.languages = languages;
        cfg.speakers = speakers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn training_subset(corpus: &Corpus, per_language: Option<usize>, seed: u64) -> Result<Vec<Utterance>> {
    let train: Vec<Utterance> = corpus.split(Split::Train).into_iter().cloned().collect();
    match per_language {
        None => Ok(train),
        Some(n) => {
            let mut rng = SeededRng::with_stream(seed, streams::SUBSET);
            subset_per_language(train, n, corpus.num_languages(), &mut rng)
        }
    }
}

/// One code-switching run.
#[derive(Clone, Debug)]
pub struct SwitchRun {
    pub variant: Variant,
    pub seed: u64,
    pub log: Option<TrainLog>,
    pub scores: Vec<SwitchScore>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SwitchComparison {
    pub runs: Vec<SwitchRun>,
    /// Rows `SYS` (whole sentence) and `SYS:foreign` (foreign words) per base language.
    pub report: EvalReport,
}

impl SwitchComparison {
    /// Mean foreign-span error rate over every sentence and seed of `variant`.
    pub fn foreign_mean(&self, variant: Variant) -> Option<f64> {
        let xs: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant)
            .flat_map(|r| r.scores.iter().filter_map(|s| s.foreign_cer))
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    /// Word-skip analog count summed over seeds.
    pub fn skips(&self, variant: Variant) -> usize {
        self.runs
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.scores.iter().filter(|s| s.skipped).count())
            .sum()
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<String>> {
        let mut written = Vec::new();
        let mut put = |name: String, body: &str| -> Result<()> {
            let path = dir.join(&name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
            }
            std::fs::write(&path, body).map_err(|e| Error::file(&path, e))?;
            written.push(name);
            Ok(())
        };
        put("code_switch.csv".into(), &self.report.to_csv())?;
        put("code_switch_table.csv".into(), &self.report.to_table_csv())?;
        put("code_switch.txt".into(), &self.report.to_text())?;
        for run in &self.runs {
            let stem = format!("runs/{}_code_switch_s{}", run.variant.name(), run.seed);
            if let Some(log) = &run.log {
                put(format!("{stem}/train_log.csv"), &log.to_csv())?;
                put(format!("{stem}/timing.tsv"), &log.timing_tsv())?;
            }
            if let Some(reason) = &run.failure {
                put(format!("{stem}/FAILED"), reason)?;
            }
        }
        Ok(written)
    }
}

/// Trains each code-switching variant with its speaker classifier on the full
/// training split, once per seed, and scores the mixed-language `sentences`.
pub fn run_code_switch_comparison(
    corpus: &Corpus,
    model_template: &ModelConfig,
    train_template: &TrainConfig,
    cfg: &CompareConfig,
    sentences: &[SwitchSentence],
    on_run: &mut dyn FnMut(&SwitchRun),
) -> Result<SwitchComparison> {
    cfg.validate()?;
    let names: Vec<String> = corpus.languages.iter().map(|l| l.name.clone()).collect();
    let train = corpus.split(Split::Train);
    let val = corpus.split(Split::Val);
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for &variant in &cfg.code_switch_variants {
            let tc = run_train_config(train_template, variant, Regime::Full, seed);
            let attempt = || -> Result<(TrainLog, Vec<SwitchScore>, Option<String>)> {
                let mut mcfg = variant_config(model_template, variant, corpus.num_languages(), corpus.speakers)?;
                mcfg.classifier = variant.supports_classifier();
                let (log, model, failure) = train_one(mcfg, &tc, train.clone(), val.clone())?;
                let scores = code_switch_eval(&model, corpus, sentences)?;
                Ok((log, scores, failure))
            };
            let run = match attempt() {
                Ok((log, scores, failure)) => SwitchRun {
                    variant,
                    seed,
                    log: Some(log),
                    scores,
                    failure,
                },
                Err(e) => SwitchRun {
                    variant,
                    seed,
                    log: None,
                    scores: Vec::new(),
                    failure: Some(e.to_string()),
                },
            };
            on_run(&run);
            runs.push(run);
        }
    }
    let mut report = EvalReport::default();
    for &variant in &cfg.code_switch_variants {
        let sys = system_name(variant);
        let mine: Vec<&SwitchRun> = runs.iter().filter(|r| r.variant == variant).collect();
        if let Some(failed) = mine.iter().find(|r| r.failure.is_some()) {
            let reason = format!("seed {}: {}", failed.seed, failed.failure.as_deref().unwrap_or_default());
            for name in &names {
                report.rows.push(EvalRow::failed(&sys, name, reason.clone()));
            }
            continue;
        }
        let pooled: Vec<SwitchScore> = mine.iter().flat_map(|r| r.scores.iter().cloned()).collect();
        report.rows.extend(switch_rows(&sys, &names, &pooled));
    }
    let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
    report.metadata = vec![
        ("sentences".into(), sentences.len().to_string()),
        ("seeds".into(), seeds.join(" ")),
        ("steps".into(), train_template.steps.to_string()),
    ];
    Ok(SwitchComparison { runs, report })
}

type Trained = (Vec<TrainLog>, Vec<UtteranceScore>, Option<String>);

fn train_and_score(
    corpus: &Corpus,
    template: &ModelConfig,
    tc: &TrainConfig,
    variant: Variant,
    train: &[Utterance],
    val: &[&Utterance],
    test: &[&Utterance],
) -> Result<Trained> {
    let langs = corpus.num_languages();
    let mcfg = variant_config(template, variant, langs, corpus.speakers)?;
    if variant != Variant::Sgl {
        let (log, model, failure) = train_one(mcfg, tc, train.iter().collect(), val.to_vec())?;
        let scores = evaluate_model(&model, corpus, test)?;
        return Ok((vec![log], scores, failure));
    }
    let mut logs = Vec::new();
    let mut scores = Vec::new();
    let mut failure = None;
    for lang in 0..langs {
        let view = |utts: Vec<Utterance>| single_language_view(&corpus.with_utterances(utts), lang);
        let train_l = view(train.to_vec())?;
        let val_l = view(val.iter().map(|u| (*u).clone()).collect())?;
        let test_l = view(test.iter().map(|u| (*u).clone()).collect())?;
        let (log, model, fail) = train_one(
            mcfg.clone(),
            tc,
            train_l.utterances.iter().collect(),
            val_l.utterances.iter().collect(),
        )?;
        logs.push(log);
        if failure.is_none() {
            failure = fail.map(|f| format!("language {lang}: {f}"));
        }
        let test_refs: Vec<&Utterance> = test_l.utterances.iter().collect();
        scores.extend(evaluate_model(&model, &test_l, &test_refs)?.into_iter().map(|mut s| {
            s.language = lang;
            s
        }));
    }
    Ok((logs, scores, failure))
}

/// The corpus as a single-language model sees it: language `lang` renumbered
/// to 0, its speakers renumbered from 0, other languages dropped.
pub fn single_language_view(corpus: &Corpus, lang: usize) -> Result<Corpus> {
    let langs = corpus.num_languages();
    if lang >= langs {
        return Err(Error::Lookup(format!("language {lang} not in a corpus of {langs}")));
    }
    if !corpus.speakers.is_multiple_of(langs) {
        return Err(Error::Config("speakers are not evenly split over languages".into()));
    }
    let per = corpus.speakers / langs;
    let mut language = corpus.languages[lang].clone();
    language.id = 0;
    let utterances = corpus
        .utterances
        .iter()
        .filter(|u| u.language == lang)
        .map(|u| Utterance {
            language: 0,
            speaker: u.speaker - lang * per,
            ..u.clone()
        })
        .collect();
    Ok(Corpus {
        languages: vec![language],
        bank: corpus.bank.clone(),
        speakers: per,
        utterances,
    })
}

fn train_one(cfg: ModelConfig, tc: &TrainConfig, train: Vec<&Utterance>, val: Vec<&Utterance>) -> Result<(TrainLog, Model, Option<String>)> {
    let model = Model::new(cfg, tc.seed)?;
    let mut trainer = Trainer::new(model, tc.clone(), train, val)?;
    let outcome = trainer.run(None)?;
    let failure = match outcome.status {
        Status::Diverged { step, reason } => Some(format!("diverged at step {step}: {reason}")),
        _ => None,
    };
    Ok((trainer.log.clone(), outcome.model, failure))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_corpus, CorpusConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            embedding_dim: 6,
            encoder_channels: 6,
            encoder_layers: 2,
            kernel_size: 3,
            attention_rnn_dim: 6,
            decoder_rnn_dim: 6,
            attention_dim: 6,
            prenet_dim: 6,
            speaker_dim: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn regime_plumbing() {
        let t = TrainConfig::default();
        assert_eq!(run_train_config(&t, Variant::Gen, Regime::Full, 1).lr_halving_interval, 10_000);
        assert_eq!(run_train_config(&t, Variant::Gen, Regime::StressSmall, 1).lr_halving_interval, 7_500);
        assert_eq!(run_train_config(&t, Variant::Sha, Regime::StressTiny, 1).lr_halving_interval, 5_000);
        assert_eq!(run_train_config(&t, Variant::Sep, Regime::Full, 1).lr0, 1e-4);
        let sgl = variant_config(&ModelConfig::default(), Variant::Sgl, 4, 8).unwrap();
        assert_eq!((sgl.languages, sgl.speakers), (1, 2));
    }

    #[test]
    fn failed_runs_mark_cells_and_others_survive() {
        let corpus = generate_toy_corpus(
            &CorpusConfig {
                languages: 2,
                train_per_language: 6,
                val_per_language: 2,
                test_per_language: 2,
                max_chars: 6,
                ..CorpusConfig::default()
            },
            1,
        )
        .unwrap();
        let tc = TrainConfig {
            steps: 3,
            batch_size: 2,
            validate_every: 2,
            // Every step diverges.
            divergence_threshold: 1e-9,
            ..TrainConfig::default()
        };
        let cfg = CompareConfig {
            variants: vec![Variant::Gen, Variant::Sgl],
            regimes: vec![Regime::StressTiny],
            seeds: vec![5],
            stress_small_per_language: 4,
            stress_tiny_per_language: 4,
            code_switch: false,
            ..CompareConfig::default()
        };
        let mut seen = 0;
        let cmp = run_comparison(&corpus, &tiny_model(), &tc, &cfg, &mut |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        let rep = cmp.report(Regime::StressTiny).unwrap();
        assert_eq!(rep.systems(), vec!["GT", "GEN", "SGL"]);
        assert_eq!(rep.rows.len(), 3 * 2);
        assert!(rep.rows.iter().filter(|r| r.system != "GT").all(|r| r.failure.is_some()));
        assert!(rep.to_table_csv().contains("FAILED"));

        let ok = TrainConfig { divergence_threshold: 1e6, ..tc };
        let cmp = run_comparison(&corpus, &tiny_model(), &ok, &cfg, &mut |_| {}).unwrap();
        let rep = cmp.report(Regime::StressTiny).unwrap();
        assert!(rep.rows.iter().all(|r| r.failure.is_none() && r.n == 2), "{rep:?}");
        let gen = rep.metadata.iter().find(|(k, _)| k.starts_with("GEN encoder")).unwrap();
        let sep = rep.metadata.iter().find(|(k, _)| k.starts_with("SEP encoder")).unwrap();
        assert_eq!(gen.1, sep.1);
        let dir = tempfile::tempdir().unwrap();
        let files = cmp.write(dir.path()).unwrap();
        assert!(files.contains(&"table_stress_tiny.csv".to_string()));
        assert!(files.contains(&"runs/sgl_stress_tiny_s5/train_log_lang1.csv".to_string()));
        // Identical inputs reproduce the report exactly.
        let again = run_comparison(&corpus, &tiny_model(), &ok, &cfg, &mut |_| {}).unwrap();
        assert_eq!(again.report(Regime::StressTiny).unwrap().to_csv(), rep.to_csv());
    }
}
