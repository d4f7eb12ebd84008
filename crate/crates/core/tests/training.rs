use cpgtts::autodiff::rng::SeededRng;
use cpgtts::autodiff::tensor::Tensor;
use cpgtts::data::{generate_toy_corpus, Corpus, CorpusConfig, Split};
use cpgtts::model::checkpoint::Checkpoint;
use cpgtts::model::{Model, ModelConfig, Variant};
use cpgtts::training::{Status, TrainConfig, Trainer};

fn corpus(train_per_language: usize) -> Corpus {
    let cfg = CorpusConfig {
        languages: 2,
        train_per_language,
        val_per_language: 4,
        test_per_language: 2,
        max_chars: 10,
        ..CorpusConfig::default()
    };
    generate_toy_corpus(&cfg, 21).unwrap()
}

fn model(variant: Variant, classifier: bool) -> Model {
    let cfg = ModelConfig {
        variant,
        languages: 2,
        speakers: 4,
        classifier,
        ..ModelConfig::desk()
    };
    Model::new(cfg, 3).unwrap()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn loss_halves_within_five_hundred_steps() {
    let corpus = corpus(20);
    let tc = TrainConfig {
        steps: 500,
        validate_every: 100,
        early_stop_patience: 10,
        ..TrainConfig::desk()
    };
    let mut trainer = Trainer::new(model(Variant::Gen, false), tc, corpus.split(Split::Train), corpus.split(Split::Val)).unwrap();
    let outcome = trainer.run(None).unwrap();
    assert_eq!(outcome.status, Status::Finished);
    let steps = &trainer.log.steps;
    assert_eq!(steps.len(), 500);
    let first = mean(steps[..20].iter().map(|r| r.total));
    let last = mean(steps[480..].iter().map(|r| r.total));
    assert!(last <= 0.5 * first, "loss went from {first} to {last}");
}

#[test]
fn classifier_variants_train_and_log_the_adversarial_term() {
    let corpus = corpus(8);
    let tc = TrainConfig {
        steps: 12,
        validate_every: 6,
        ..TrainConfig::desk()
    };
    for variant in [Variant::Gen, Variant::Sha] {
        let mut trainer =
            Trainer::new(model(variant, true), tc.clone(), corpus.split(Split::Train), corpus.split(Split::Val)).unwrap();
        trainer.run(None).unwrap();
        assert!(trainer.log.steps.iter().all(|r| r.classifier.is_some_and(f64::is_finite)));
    }
}

#[test]
fn resume_from_a_saved_checkpoint_is_bit_exact() {
    let corpus = corpus(10);
    let tc = TrainConfig {
        steps: 40,
        validate_every: 10,
        early_stop_patience: 10,
        ..TrainConfig::desk()
    };
    let train = || corpus.split(Split::Train);
    let val = || corpus.split(Split::Val);

    let mut straight = Trainer::new(model(Variant::Gen, true), tc.clone(), train(), val()).unwrap();
    straight.run(None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(model(Variant::Gen, true), tc, train(), val()).unwrap();
    first.run_until(23, None, &mut |_| {}).unwrap();
    first.checkpoint().save(&dir.path().join("ck.bin")).unwrap();
    let best = first.best_model().cloned();
    if let Some(b) = &best {
        Checkpoint::new(b.clone()).save(&dir.path().join("best.bin")).unwrap();
    }
    let head = first.log.clone();
    drop(first);

    let ck = Checkpoint::load(&dir.path().join("ck.bin")).unwrap();
    let best = best.map(|_| Checkpoint::load(&dir.path().join("best.bin")).unwrap().model);
    let mut resumed = Trainer::resume(ck, best, train(), val()).unwrap();
    assert_eq!(resumed.state.step, 23);
    let outcome = resumed.run(None).unwrap();

    assert_eq!(resumed.model, straight.model);
    assert_eq!(resumed.optimizer.m, straight.optimizer.m);
    assert_eq!(resumed.optimizer.v, straight.optimizer.v);
    assert_eq!(resumed.state, straight.state);
    assert_eq!(Some(&outcome.model), straight.best_model());
    let mut steps = head.steps.clone();
    steps.extend(resumed.log.steps.iter().cloned());
    assert_eq!(steps, straight.log.steps);
}

/// Adds noise to every parameter, so the next validation gets worse.
fn perturb(model: &mut Model, seed: u64, scale: f64) {
    let mut rng = SeededRng::new(seed);
    for t in model.params.tensors_mut() {
        let noise = Tensor::randn(t.shape(), scale, &mut rng);
        for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    }
}

#[test]
fn early_stopping_counts_consecutive_increases_and_keeps_the_best() {
    let corpus = corpus(10);
    let tc = TrainConfig {
        steps: 100,
        early_stop_patience: 2,
        ..TrainConfig::desk()
    };
    let mut trainer = Trainer::new(model(Variant::Sep, false), tc, corpus.split(Split::Train), corpus.split(Split::Val)).unwrap();
    for _ in 0..5 {
        trainer.step().unwrap();
    }
    assert!(!trainer.validate(None).unwrap());
    let best = trainer.model.clone();
    let best_loss = trainer.validation_loss(&best).unwrap();

    perturb(&mut trainer.model, 1, 0.5);
    trainer.step().unwrap();
    assert!(!trainer.validate(None).unwrap(), "one increase is within patience");
    perturb(&mut trainer.model, 2, 0.5);
    trainer.step().unwrap();
    assert!(trainer.validate(None).unwrap(), "two consecutive increases exhaust patience 2");

    assert_eq!(trainer.best_model(), Some(&best));
    assert_eq!(trainer.state.best_val, Some(best_loss));
    let evals = &trainer.log.evals;
    assert!(evals.iter().all(|e| e.val_loss >= best_loss));
}

#[test]
fn returned_model_is_never_worse_than_a_validated_one() {
    let corpus = corpus(12);
    let tc = TrainConfig {
        steps: 120,
        validate_every: 10,
        early_stop_patience: 3,
        ..TrainConfig::desk()
    };
    let mut trainer = Trainer::new(model(Variant::Sha, false), tc, corpus.split(Split::Train), corpus.split(Split::Val)).unwrap();
    let outcome = trainer.run(None).unwrap();
    let best = trainer.log.evals.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(outcome.best_val, Some(best));
    assert_eq!(trainer.validation_loss(&outcome.model).unwrap(), best);
}

#[test]
fn divergence_stops_without_applying_the_bad_update() {
    let corpus = corpus(8);
    let tc = TrainConfig {
        steps: 10,
        divergence_threshold: 1e-9,
        ..TrainConfig::desk()
    };
    let initial = model(Variant::Gen, false);
    let mut trainer = Trainer::new(initial.clone(), tc, corpus.split(Split::Train), corpus.split(Split::Val)).unwrap();
    let outcome = trainer.run(None).unwrap();
    assert!(matches!(outcome.status, Status::Diverged { step: 0, .. }), "{:?}", outcome.status);
    assert_eq!(outcome.steps, 0);
    assert_eq!(trainer.model, initial);
    assert!(trainer.log.steps.is_empty());
}

#[test]
fn configuration_errors_surface_before_training() {
    let corpus = corpus(8);
    let bad = TrainConfig {
        batch_size: 3,
        ..TrainConfig::desk()
    };
    let mut trainer = Trainer::new(model(Variant::Gen, false), bad, corpus.split(Split::Train), vec![]).unwrap();
    assert!(matches!(trainer.step(), Err(cpgtts::Error::Config(_))));
    assert!(Trainer::new(model(Variant::Gen, false), TrainConfig::desk(), vec![], vec![]).is_err());
}
