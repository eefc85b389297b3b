use ddseq_core::checkpoint::{load_classifier, load_denoiser, save_classifier, save_denoiser, MANIFEST, WEIGHTS};
use ddseq_core::data::{GrammarConfig, SyntheticGrammar};
use ddseq_core::denoiser::{AdapterConfig, Denoiser, DenoiserConfig, Mode};
use ddseq_core::guidance::{ClassifierConfig, SspClassifier};
use ddseq_core::training::{Stage, TrainConfig, Trainer};
use ddseq_core::{NoiseSchedule, ScheduleSpec, Stationary, TokenSequence, Vocab};

fn small() -> DenoiserConfig {
    DenoiserConfig { num_layers: 1, num_heads: 2, embed_dim: 16, ffn_dim: 32, max_len: 40, ..Default::default() }
}

fn files(dir: &std::path::Path) -> (Vec<u8>, Vec<u8>) {
    (std::fs::read(dir.join(MANIFEST)).unwrap(), std::fs::read(dir.join(WEIGHTS)).unwrap())
}

fn train_config(steps: usize) -> TrainConfig {
    TrainConfig {
        stage: Stage::TwoStage,
        mlm_steps: steps / 2,
        diffusion_steps: steps - steps / 2,
        batch_size: 4,
        eval_interval: 1000,
        ..Default::default()
    }
}

fn corpus(vocab: &Vocab) -> Vec<TokenSequence> {
    let g = SyntheticGrammar::new(GrammarConfig::default(), vocab).unwrap();
    g.generate_corpus(32, 1).unwrap().into_iter().map(|p| p.0).collect()
}

#[test]
fn zero_step_checkpoint_is_the_initialization() {
    let vocab = Vocab::amino_acids();
    let schedule = NoiseSchedule::linear(50, Stationary::Absorbing, &vocab).unwrap();
    let init = Denoiser::new(small(), &vocab, 4).unwrap();
    let mut model = init.clone();
    let mut trainer = Trainer::new(train_config(0), &model).unwrap();
    trainer.train(&mut model, &corpus(&vocab), &[], &schedule, &vocab, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_denoiser(dir.path(), &model, &vocab, schedule.spec(), Some(&trainer.optimizer), 0).unwrap();
    let loaded = load_denoiser(dir.path()).unwrap();
    for (a, b) in loaded.model.params().entries().iter().zip(init.params().entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn reload_is_bit_exact_and_resave_is_byte_identical() {
    let vocab = Vocab::amino_acids();
    let schedule = NoiseSchedule::linear(50, Stationary::Absorbing, &vocab).unwrap();
    let mut model = Denoiser::new(small(), &vocab, 4).unwrap();
    let mut trainer = Trainer::new(train_config(4), &model).unwrap();
    trainer.train(&mut model, &corpus(&vocab), &[], &schedule, &vocab, |_| Ok(())).unwrap();
    model.attach_adapter(AdapterConfig::new(8, 16), 3).unwrap();

    let dir = tempfile::tempdir().unwrap();
    save_denoiser(dir.path(), &model, &vocab, schedule.spec(), None, 4).unwrap();
    let first = files(dir.path());
    let loaded = load_denoiser(dir.path()).unwrap();
    assert_eq!(loaded.step, 4);
    assert_eq!(loaded.schedule, schedule.spec());
    assert!(loaded.optimizer.is_none());
    assert!(loaded.model.has_adapter());
    for (a, b) in loaded.model.params().entries().iter().zip(model.params().entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.trainable, b.trainable);
        // on-disk precision is f32
        assert!(a.value.iter().zip(b.value.iter()).all(|(x, y)| *x == *y as f32 as f64), "{}", a.name);
    }
    save_denoiser(dir.path(), &loaded.model, &loaded.vocab, loaded.schedule, None, loaded.step).unwrap();
    assert_eq!(first, files(dir.path()));

    let x = TokenSequence::from_str("MKVLA", &vocab).unwrap();
    let again = load_denoiser(dir.path()).unwrap();
    assert_eq!(
        loaded.model.forward(x.ids(), 1, None, Mode::Eval).unwrap(),
        again.model.forward(x.ids(), 1, None, Mode::Eval).unwrap()
    );
}

#[test]
fn resume_restores_step_and_optimizer() {
    let vocab = Vocab::amino_acids();
    let schedule = NoiseSchedule::linear(50, Stationary::Absorbing, &vocab).unwrap();
    let data = corpus(&vocab);
    let mut model = Denoiser::new(small(), &vocab, 4).unwrap();
    let mut trainer = Trainer::new(train_config(6), &model).unwrap();
    trainer.config.diffusion_steps = 0;
    trainer.config.mlm_steps = 3;
    trainer.train(&mut model, &data, &[], &schedule, &vocab, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_denoiser(dir.path(), &model, &vocab, schedule.spec(), Some(&trainer.optimizer), trainer.step as u64).unwrap();

    let loaded = load_denoiser(dir.path()).unwrap();
    let opt = loaded.optimizer.unwrap();
    assert_eq!(loaded.step, 3);
    assert_eq!(opt.step, trainer.optimizer.step);
    let mut resumed = Trainer { config: train_config(6), optimizer: opt, step: loaded.step as usize };
    let mut model = loaded.model;
    let mut steps = Vec::new();
    resumed
        .train(&mut model, &data, &[], &schedule, &vocab, |r| {
            steps.push((r.step, r.stage));
            Ok(())
        })
        .unwrap();
    assert_eq!(steps, vec![(4, Stage::Diffusion), (5, Stage::Diffusion), (6, Stage::Diffusion)]);
}

#[test]
fn classifier_round_trip() {
    let vocab = Vocab::amino_acids();
    let classifier = SspClassifier::new(ClassifierConfig::default(), vocab.size());
    let dir = tempfile::tempdir().unwrap();
    save_classifier(dir.path(), &classifier, &vocab).unwrap();
    let first = files(dir.path());
    let (back, v2) = load_classifier(dir.path()).unwrap();
    assert_eq!(v2, vocab);
    let ids = TokenSequence::from_str("ACDEFGHIK", &vocab).unwrap();
    assert_eq!(back.logits_from_ids(ids.ids()).unwrap(), classifier.logits_from_ids(ids.ids()).unwrap());
    save_classifier(dir.path(), &back, &vocab).unwrap();
    assert_eq!(first, files(dir.path()));
    // the wrong kind is refused
    assert!(load_denoiser(dir.path()).is_err());
}

#[test]
fn corrupted_manifests_are_rejected() {
    let vocab = Vocab::amino_acids();
    let model = Denoiser::new(small(), &vocab, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_denoiser(dir.path(), &model, &vocab, ScheduleSpec::default(), None, 0).unwrap();
    let text = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
    std::fs::write(dir.path().join(MANIFEST), text.replace("\"format_version\": 1", "\"format_version\": 9")).unwrap();
    let e = load_denoiser(dir.path()).err().unwrap();
    assert!(e.to_string().contains("format_version"), "{e}");
    std::fs::write(dir.path().join(MANIFEST), text.replace("\"step\": 0", "\"step\": 0, \"extra\": 1")).unwrap();
    assert!(load_denoiser(dir.path()).is_err());
    std::fs::write(dir.path().join(MANIFEST), &text).unwrap();
    let mut w = std::fs::read(dir.path().join(WEIGHTS)).unwrap();
    w.truncate(w.len() - 4);
    std::fs::write(dir.path().join(WEIGHTS), w).unwrap();
    assert!(load_denoiser(dir.path()).is_err());
}
