use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "seed = 4\n[corpus]\nlanguages = 2\ntrain_per_language = 12\nval_per_language = 2\ntest_per_language = 3\nmax_chars = 8\n\
                     [train]\nsteps = 30\nvalidate_every = 10\ntolerance_growth = 1.01\n[eval]\ncode_switch_per_language = 2\n";

fn cpgtts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpgtts")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("manifest.txt")).unwrap().lines().map(String::from).collect()
}

fn small_config(dir: &Path) -> String {
    let cfg = dir.join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_two_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let r = cpgtts(&["datagen", "--config", "/nonexistent/cfg.toml", "--out", path(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("not found"));
    assert!(!out.exists());

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nstepz = 3\n").unwrap();
    let r = cpgtts(&["datagen", "--config", path(&bad), "--out", path(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());

    assert_eq!(cpgtts(&["datagen", "--bogus"]).status.code(), Some(2));
    assert_eq!(cpgtts(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(cpgtts(&["datagen", "--seed", "18446744073709551615", "--out", path(&out)]).status.code(), Some(2));
    assert!(!out.exists());
    assert_eq!(cpgtts(&["--help"]).status.code(), Some(0));
}

#[test]
fn datagen_records_its_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("corpus");
    let r = cpgtts(&["datagen", "--config", &cfg, "--seed", "9", "--out", path(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(fs::read_to_string(out.join("seed.txt")).unwrap(), "9\n");
    assert!(fs::read_to_string(out.join("version.txt")).unwrap().starts_with("cpgtts "));
    assert!(fs::read_to_string(out.join("config.toml")).unwrap().contains("seed = 9"));
    let files = manifest(&out);
    let mut sorted = files.clone();
    sorted.sort();
    assert_eq!(files, sorted);
    for f in &files {
        assert!(out.join(f).is_file(), "manifest lists missing {f}");
    }
    for f in ["config.toml", "seed.txt", "version.txt"] {
        assert!(files.iter().any(|x| x == f));
    }
}

#[test]
fn train_eval_synth_and_clean_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let corpus = dir.path().join("corpus");
    assert!(cpgtts(&["datagen", "--config", &cfg, "--out", path(&corpus)]).status.success());

    let cleaned = dir.path().join("clean");
    let r = cpgtts(&["clean", "--config", &cfg, "--corpus", path(&corpus), "--out", path(&cleaned)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(manifest(&cleaned).contains(&"clean_report.csv".to_string()));

    let run = dir.path().join("run");
    let r = cpgtts(&["train", "--config", &cfg, "--corpus", path(&cleaned), "--out", path(&run)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let files = manifest(&run);
    for f in ["checkpoint.bin", "model.bin", "train_log.csv", "timing.tsv", "report.csv", "report.txt"] {
        assert!(files.iter().any(|x| x == f), "train did not write {f}");
    }
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 34);

    let model = run.join("model.bin");
    let ev = dir.path().join("eval");
    let r = cpgtts(&["eval", "--config", &cfg, "--corpus", path(&cleaned), "--checkpoint", path(&model), "--out", path(&ev)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["report.csv", "sentences.txt", "code_switch.csv"] {
        assert!(ev.join(f).is_file(), "eval did not write {f}");
    }
    assert_eq!(fs::read(ev.join("report.csv")).unwrap(), fs::read(run.join("report.csv")).unwrap());

    let syn = dir.path().join("synth");
    let r = cpgtts(&[
        "synth", "--config", &cfg, "--corpus", path(&cleaned), "--checkpoint", path(&model), "--text", "bad", "--language", "0",
        "--out", path(&syn),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let tsv = fs::read_to_string(syn.join("synth.tsv")).unwrap();
    let frames: usize = tsv.lines().find_map(|l| l.strip_prefix("frames\t")).unwrap().parse().unwrap();
    let features = cpgtts::data::corpus::read_features(&syn.join("frames.f64")).unwrap();
    assert_eq!(features.shape(), &[frames, 8]);

    let r = cpgtts(&[
        "synth", "--config", &cfg, "--corpus", path(&cleaned), "--checkpoint", path(&model), "--text", "xyz", "--language", "0",
        "--out", path(&dir.path().join("bad")),
    ]);
    assert_eq!(r.status.code(), Some(1));

    let missing = cpgtts(&["eval", "--config", &cfg, "--checkpoint", "/nonexistent/model.bin", "--out", path(&dir.path().join("e2"))]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn repeated_training_and_resume_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--config", cfg.as_str(), "--out", path(&out)];
        args.extend_from_slice(extra);
        let r = cpgtts(&args);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        out
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    for f in ["train_log.csv", "report.csv", "model.bin", "checkpoint.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs between runs");
    }

    // Stop after 20 steps, then resume to the configured 30.
    let short = dir.path().join("short.toml");
    fs::write(&short, SMALL.replace("steps = 30", "steps = 20")).unwrap();
    let head = dir.path().join("head");
    assert!(cpgtts(&["train", "--config", path(&short), "--out", path(&head)]).status.success());
    let resumed = run("resumed", &["--resume", path(&head)]);
    for f in ["train_log.csv", "model.bin", "checkpoint.bin"] {
        assert_eq!(fs::read(resumed.join(f)).unwrap(), fs::read(a.join(f)).unwrap(), "{f} differs after resume");
    }
}

#[test]
fn gradcheck_passes_and_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("g");
    let r = cpgtts(&["gradcheck", "--out", path(&csv)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8(r.stdout).unwrap();
    assert!(stdout.lines().any(|l| l.starts_with("conv1d")));
    assert!(!stdout.contains("FAIL"));
    assert!(csv.join("gradcheck.csv").is_file());
}
