//! The `cpgtts` command line.
//!
//! Every command that writes files takes `--out DIR` and leaves there, besides
//! its own outputs, `config.toml` (the fully resolved configuration),
//! `seed.txt`, `version.txt` and `manifest.txt` listing every file written.
//! Configuration problems are reported before anything is created.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autodiff::suite::primitive_checks;
use crate::autodiff::tensor::Tensor;
use crate::config::RunConfig;
use crate::data::corpus::write_features;
use crate::data::{clean_corpus, generate_toy_corpus, language, Corpus, Split, Utterance};
use crate::error::{Error, Result};
use crate::eval::codeswitch::{code_switch_eval, generate_switch_sentences, read_sentences, switch_rows, write_sentences};
use crate::eval::compare::{run_code_switch_comparison, run_comparison, single_language_view, system_name, variant_config};
use crate::eval::metrics::{cer, frames_to_symbols};
use crate::eval::report::{evaluate_ground_truth, evaluate_model, synthesize, EvalReport};
use crate::model::check::end_to_end_gradient_check;
use crate::model::checkpoint::Checkpoint;
use crate::model::{Model, Variant};
use crate::training::{Trainer, Validator};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MODEL_FILE: &str = "model.bin";

#[derive(Debug, Parser)]
#[command(name = "cpgtts", version, about = "Multilingual synthesis with generated encoder parameters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; omitted keys keep the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct Output {
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the toy multilingual corpus.
    Datagen {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
    },
    /// Drop utterances outside the length windows or the duration band.
    Clean {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train one model and score it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
        /// Corpus directory; generated from the configuration when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// A previous `train` output directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Language trained by the single-language variant.
        #[arg(long)]
        language: Option<String>,
    },
    /// Synthesize frames for one text.
    Synth {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Letters `a`..`t`.
        #[arg(long)]
        text: String,
        /// Language name or index.
        #[arg(long)]
        language: String,
        /// Speaker index; the language's first speaker by default.
        #[arg(long)]
        speaker: Option<usize>,
    },
    /// Score a trained model on the test split and on code-switched sentences.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Code-switched sentences; generated when omitted.
        #[arg(long)]
        sentences: Option<PathBuf>,
        /// Language of a single-language model.
        #[arg(long)]
        language: Option<String>,
    },
    /// Train every variant in every regime and seed and tabulate test CER.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and of the tiny models.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Errors split by exit code.
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

/// Runs one command. `args` includes the program name.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_FAILURE
        }
    }
}

fn resolve(common: &Common) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Failure::Usage(format!("config file {} not found", path.display())));
            }
            RunConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(cfg)
}

/// Collects the files a command writes under its output directory.
struct RunDir {
    root: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    fn create(root: &Path, cfg: &RunConfig) -> Result<RunDir> {
        std::fs::create_dir_all(root).map_err(|e| Error::file(root, e))?;
        let mut dir = RunDir {
            root: root.to_path_buf(),
            files: Vec::new(),
        };
        dir.put("config.toml", &cfg.to_toml())?;
        dir.put("seed.txt", &format!("{}\n", cfg.seed))?;
        dir.put("version.txt", &format!("cpgtts {}\n", env!("CARGO_PKG_VERSION")))?;
        Ok(dir)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn put(&mut self, rel: &str, body: &str) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
        }
        std::fs::write(&path, body).map_err(|e| Error::file(&path, e))?;
        self.record(rel);
        Ok(())
    }

    fn record(&mut self, rel: impl Into<String>) {
        let rel = rel.into();
        if !self.files.contains(&rel) {
            self.files.push(rel);
        }
    }

    fn finish(mut self) -> Result<()> {
        self.files.sort();
        let mut body = self.files.join("\n");
        body.push('\n');
        let path = self.path("manifest.txt");
        std::fs::write(&path, body).map_err(|e| Error::file(&path, e))
    }
}

fn corpus_for(cfg: &RunConfig, dir: Option<&Path>) -> Result<Corpus> {
    match dir {
        Some(dir) => Corpus::load(dir),
        None => generate_toy_corpus(&cfg.corpus, cfg.seed),
    }
}

fn language_index(corpus: &Corpus, key: &str) -> Result<usize> {
    corpus
        .languages
        .iter()
        .position(|l| l.name == key)
        .or_else(|| key.parse::<usize>().ok().filter(|&i| i < corpus.num_languages()))
        .ok_or_else(|| Error::Lookup(format!("unknown language `{key}`")))
}

fn language_names(corpus: &Corpus) -> Vec<String> {
    corpus.languages.iter().map(|l| l.name.clone()).collect()
}

/// The corpus a model with `variant` sees: the single-language model gets the
/// chosen language renumbered to 0.
fn corpus_for_variant(corpus: &Corpus, variant: Variant, language: Option<&str>) -> Result<(Corpus, Option<usize>)> {
    if variant != Variant::Sgl {
        return Ok((corpus.clone(), None));
    }
    let key = language.ok_or_else(|| Error::Config("the single-language model needs --language".into()))?;
    let lang = language_index(corpus, key)?;
    Ok((single_language_view(corpus, lang)?, Some(lang)))
}

fn dispatch(command: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> std::result::Result<i32, Failure> {
    match command {
        Command::Datagen { common, output } => {
            let cfg = resolve(&common)?;
            let corpus = generate_toy_corpus(&cfg.corpus, cfg.seed)?;
            let mut dir = RunDir::create(&output.out, &cfg)?;
            for p in corpus.write(&output.out)? {
                dir.record(p.display().to_string());
            }
            dir.finish()?;
            let _ = writeln!(
                stdout,
                "wrote {} utterances in {} languages to {}",
                corpus.utterances.len(),
                corpus.num_languages(),
                output.out.display()
            );
            Ok(EXIT_OK)
        }
        Command::Clean { common, output, corpus } => {
            let cfg = resolve(&common)?;
            let corpus = Corpus::load(&corpus)?;
            let (kept, report) = clean_corpus(corpus.utterances.clone(), &cfg.clean, corpus.num_languages());
            let cleaned = corpus.with_utterances(kept);
            let mut dir = RunDir::create(&output.out, &cfg)?;
            for p in cleaned.write(&output.out)? {
                dir.record(p.display().to_string());
            }
            let mut csv = String::from("language,before,window_dropped,outlier_dropped,kept\n");
            for s in &report.languages {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    corpus.languages[s.language].name, s.before, s.window_dropped, s.outlier_dropped, s.kept
                ));
            }
            dir.put("clean_report.csv", &csv)?;
            for w in &report.warnings {
                let _ = writeln!(stderr, "warning: {w}");
            }
            dir.finish()?;
            let _ = write!(stdout, "{csv}");
            Ok(EXIT_OK)
        }
        Command::Train {
            common,
            output,
            corpus,
            resume,
            language,
        } => {
            let cfg = resolve(&common)?;
            let full = corpus_for(&cfg, corpus.as_deref())?;
            train(&cfg, &full, &output.out, resume.as_deref(), language.as_deref(), stdout, stderr)?;
            Ok(EXIT_OK)
        }
        Command::Synth {
            common,
            output,
            checkpoint,
            corpus,
            text,
            language,
            speaker,
        } => {
            let cfg = resolve(&common)?;
            let full = corpus_for(&cfg, corpus.as_deref())?;
            let model = Checkpoint::load(&checkpoint)?.model;
            let lang = language_index(&full, &language)?;
            let (view, single) = corpus_for_variant(&full, model.variant(), Some(&language))?;
            let per_language = full.speakers / full.num_languages();
            let speaker = speaker.unwrap_or(lang * per_language);
            if speaker >= full.speakers {
                return Err(Error::Lookup(format!("speaker {speaker} out of range 0..{}", full.speakers)).into());
            }
            if language::parse_text(&text).is_none() || text.is_empty() {
                return Err(Error::Contract(format!("text `{text}` must be non-empty letters a..t")).into());
            }
            let r = full.bank.frames_per_phoneme;
            let utt = Utterance {
                id: "synth".into(),
                language: single.map_or(lang, |_| 0),
                speaker: if single.is_some() { speaker - lang * per_language } else { speaker },
                text: text.clone(),
                frames: Tensor::zeros(&[r, full.bank.dim()]),
                split: Split::Test,
            };
            let out = synthesize(&model, &[&utt], r)?.remove(0);
            let reference = full.languages[lang].pronounce(&language::parse_text(&text).expect("checked"));
            let decoded = frames_to_symbols(&out.frames, &view.bank);
            let score = cer(&reference, &decoded)?;
            let mut dir = RunDir::create(&output.out, &cfg)?;
            write_features(&dir.path("frames.f64"), &out.frames)?;
            dir.record("frames.f64");
            let join = |xs: &[usize]| xs.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
            let summary = format!(
                "text\t{text}\nlanguage\t{}\nspeaker\t{speaker}\nframes\t{}\nstopped\t{}\nreference\t{}\ndecoded\t{}\ncer\t{score:.6}\n",
                full.languages[lang].name,
                out.frames.shape()[0],
                out.stopped,
                join(&reference),
                join(&decoded),
            );
            dir.put("synth.tsv", &summary)?;
            dir.finish()?;
            let _ = write!(stdout, "{summary}");
            Ok(EXIT_OK)
        }
        Command::Eval {
            common,
            output,
            checkpoint,
            corpus,
            sentences,
            language,
        } => {
            let cfg = resolve(&common)?;
            let full = corpus_for(&cfg, corpus.as_deref())?;
            let model = Checkpoint::load(&checkpoint)?.model;
            let variant = model.variant();
            let (view, single) = corpus_for_variant(&full, variant, language.as_deref())?;
            let test = view.split(Split::Test);
            let names = match single {
                Some(l) => vec![full.languages[l].name.clone()],
                None => language_names(&full),
            };
            let mut report = EvalReport::default();
            report.add_scores(&system_name(variant), &names, &evaluate_model(&model, &view, &test)?);
            report.add_scores("GT", &names, &evaluate_ground_truth(&view, &test)?);
            let mut dir = RunDir::create(&output.out, &cfg)?;
            dir.put("report.csv", &report.to_csv())?;
            dir.put("report.txt", &report.to_text())?;
            let _ = write!(stdout, "{}", report.to_text());
            if single.is_none() && full.num_languages() >= 2 {
                let names = language_names(&full);
                let sents = match &sentences {
                    Some(path) => read_sentences(path, &names)?,
                    None => generate_switch_sentences(full.num_languages(), cfg.eval.code_switch_per_language, cfg.seed)?,
                };
                write_sentences(&dir.path("sentences.txt"), &sents, &names)?;
                dir.record("sentences.txt");
                let scores = code_switch_eval(&model, &full, &sents)?;
                let mut cs = EvalReport::default();
                cs.rows = switch_rows(&system_name(variant), &names, &scores);
                dir.put("code_switch.csv", &cs.to_csv())?;
                let _ = write!(stdout, "\ncode-switching\n{}", cs.to_text());
            }
            dir.finish()?;
            Ok(EXIT_OK)
        }
        Command::Compare { common, output, corpus } => {
            let cfg = resolve(&common)?;
            let corpus = corpus_for(&cfg, corpus.as_deref())?;
            let comparison = run_comparison(&corpus, &cfg.model, &cfg.train, &cfg.compare, &mut |r| {
                let status = r.failure.as_deref().unwrap_or("ok");
                let _ = writeln!(stderr, "{} {} seed {}: {status}", r.variant, r.regime, r.seed);
            })?;
            let switching = if cfg.compare.code_switch {
                let sents = generate_switch_sentences(
                    corpus.num_languages(),
                    cfg.compare.code_switch_per_language,
                    cfg.seed,
                )?;
                let result = run_code_switch_comparison(&corpus, &cfg.model, &cfg.train, &cfg.compare, &sents, &mut |r| {
                    let status = r.failure.as_deref().unwrap_or("ok");
                    let _ = writeln!(stderr, "{} code-switch seed {}: {status}", r.variant, r.seed);
                })?;
                Some((sents, result))
            } else {
                None
            };
            let mut dir = RunDir::create(&output.out, &cfg)?;
            for f in comparison.write(&output.out)? {
                dir.record(f);
            }
            for (_, report) in &comparison.reports {
                let _ = writeln!(stdout, "{}", report.to_text());
            }
            if let Some((sents, result)) = switching {
                write_sentences(&dir.path("sentences.txt"), &sents, &language_names(&corpus))?;
                dir.record("sentences.txt");
                for f in result.write(&output.out)? {
                    dir.record(f);
                }
                let _ = writeln!(stdout, "code-switching\n{}", result.report.to_text());
            }
            dir.finish()?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck { common, out } => {
            let cfg = resolve(&common)?;
            let mut rows = Vec::new();
            for (name, r) in primitive_checks(cfg.seed)? {
                rows.push((name.to_string(), r));
            }
            for variant in Variant::ALL {
                let r = end_to_end_gradient_check(variant, cfg.seed)?;
                rows.push((format!("model_{}", variant.name()), r));
            }
            let mut csv = String::from("op,max_rel_error,tol,non_finite,passed\n");
            let mut all = true;
            for (name, r) in &rows {
                all &= r.passed;
                let verdict = if r.passed { "pass" } else { "FAIL" };
                let _ = writeln!(stdout, "{name:<24} {:>10.3e}  tol {:.0e}  {verdict}", r.max_rel_error, r.tol);
                csv.push_str(&format!("{name},{:e},{:e},{},{}\n", r.max_rel_error, r.tol, r.non_finite, r.passed));
            }
            if let Some(out) = out {
                let mut dir = RunDir::create(&out, &cfg)?;
                dir.put("gradcheck.csv", &csv)?;
                dir.finish()?;
            }
            Ok(if all { EXIT_OK } else { EXIT_FAILURE })
        }
    }
}

/// Trains, checkpointing after every validation, then scores the best model.
fn train(
    cfg: &RunConfig,
    full: &Corpus,
    out: &Path,
    resume: Option<&Path>,
    language: Option<&str>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<()> {
    let variant = cfg.model.variant;
    let (view, single) = corpus_for_variant(full, variant, language)?;
    let train = view.split(Split::Train);
    let val = view.split(Split::Val);
    let test = view.split(Split::Test);
    let mut trainer = match resume {
        Some(prev) => {
            let ck = Checkpoint::load(&prev.join(CHECKPOINT_FILE))?;
            let best_path = prev.join(MODEL_FILE);
            let best = if best_path.is_file() {
                Some(Checkpoint::load(&best_path)?.model)
            } else {
                None
            };
            let mut trainer = Trainer::resume(ck, best, train, val.clone())?;
            // The step budget comes from the current configuration so a finished
            // run can be extended; every other setting is the checkpoint's.
            if trainer.config.steps != cfg.train.steps {
                if trainer.config.tolerance_growth.is_none() {
                    let _ = writeln!(stderr, "warning: changing steps also changes the derived tolerance schedule");
                }
                trainer.config.steps = cfg.train.steps;
            }
            trainer
        }
        None => {
            let mcfg = variant_config(&cfg.model, variant, full.num_languages(), full.speakers)?;
            let tc = cfg.train.clone().for_variant(variant);
            Trainer::new(Model::new(mcfg, cfg.seed)?, tc, train, val.clone())?
        }
    };
    let names = match single {
        Some(l) => vec![full.languages[l].name.clone()],
        None => language_names(full),
    };
    let validator = |m: &Model| -> Result<f64> {
        let scores = evaluate_model(m, &view, &val)?;
        Ok(scores.iter().map(|s| s.cer).sum::<f64>() / scores.len() as f64)
    };
    let cer_check: Option<&Validator> = if trainer.config.validation_cer && !val.is_empty() {
        Some(&validator)
    } else {
        None
    };

    let mut dir = RunDir::create(out, cfg)?;
    let total = trainer.config.steps;
    let chunk = trainer.config.validate_every.max(1);
    let outcome = loop {
        let limit = ((trainer.state.step / chunk) + 1) * chunk;
        let outcome = trainer.run_until(limit.min(total), cer_check, &mut |_| {})?;
        trainer.checkpoint().save(&dir.path(CHECKPOINT_FILE))?;
        if let Some(best) = trainer.best_model() {
            Checkpoint::new(best.clone()).save(&dir.path(MODEL_FILE))?;
        }
        let _ = writeln!(stderr, "step {} of {total}", outcome.steps);
        if outcome.steps >= total || outcome.status != crate::training::Status::Finished {
            break outcome;
        }
    };
    // Without validation the last model stands in for the best one.
    Checkpoint::new(outcome.model.clone()).save(&dir.path(MODEL_FILE))?;
    dir.record(CHECKPOINT_FILE);
    dir.record(MODEL_FILE);
    // A resumed run's log continues the previous run's file.
    let mut log = trainer.log.to_csv();
    if let Some(prev) = resume {
        let path = prev.join("train_log.csv");
        let head = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        let tail = log.split_once('\n').map_or("", |(_, rest)| rest);
        log = head + tail;
    }
    dir.put("train_log.csv", &log)?;
    dir.put("timing.tsv", &trainer.log.timing_tsv())?;

    let mut report = EvalReport::default();
    report.metadata = vec![
        ("status".into(), format!("{:?}", outcome.status)),
        ("steps".into(), outcome.steps.to_string()),
        (
            "best_step".into(),
            outcome.best_step.map_or_else(|| "-".to_string(), |s| s.to_string()),
        ),
    ];
    if !test.is_empty() {
        report.add_scores(&system_name(variant), &names, &evaluate_model(&outcome.model, &view, &test)?);
        report.add_scores("GT", &names, &evaluate_ground_truth(&view, &test)?);
    }
    dir.put("report.csv", &report.to_csv())?;
    dir.put("report.txt", &report.to_text())?;
    dir.finish()?;
    let _ = write!(stdout, "{}", report.to_text());
    Ok(())
}
