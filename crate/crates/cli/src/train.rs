//! `train`, `train-classifier` and `train-adapter`.
//!
//! Every training command writes the resolved config to `config.json`, one
//! JSON metrics record per step to `metrics.jsonl`, and its final weights to
//! `checkpoint/`.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use ddseq_core::checkpoint::{save_classifier, save_denoiser};
use ddseq_core::data::corrupt_draft;
use ddseq_core::denoiser::{AdapterConfig, Denoiser};
use ddseq_core::guidance::train_ssp_classifier;
use ddseq_core::training::{ConditionalPair, MetricsRecord, Stage, TrainConfig, Trainer};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{create_dir, load_corpus, load_model, resolved, Model};

struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    fn open(path: &Path, append: bool) -> CliResult<Self> {
        let file = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path)?;
        Ok(Self { out: BufWriter::new(file) })
    }

    fn write(&mut self, record: &MetricsRecord) -> ddseq_core::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    fn finish(mut self) -> CliResult<()> {
        self.out.flush()?;
        self.out.get_ref().sync_all()?;
        Ok(())
    }
}

/// Splits a total step count across the stages of `config`, masked LM first.
fn with_total_steps(mut config: TrainConfig, total: usize) -> TrainConfig {
    match config.stage {
        Stage::Mlm => config.mlm_steps = total,
        Stage::Diffusion => config.diffusion_steps = total,
        Stage::TwoStage => {
            config.mlm_steps = config.mlm_steps.min(total);
            config.diffusion_steps = total - config.mlm_steps;
        }
    }
    config
}

pub fn train(
    config: &RunConfig,
    out: &Path,
    steps: Option<usize>,
    resume: Option<&Path>,
    checkpoint_every: usize,
) -> CliResult<()> {
    let mut config = config.clone();
    if let Some(total) = steps {
        config.train = with_total_steps(config.train, total);
    }
    let (mut model, vocab, mut trainer) = match resume {
        Some(dir) => {
            let Model { loaded, .. } = load_model(dir)?;
            if loaded.vocab.symbols() != config.vocab.build()?.symbols() || loaded.schedule != config.schedule {
                return Err(CliError::usage(format!(
                    "{}: vocabulary or schedule differs from the config",
                    dir.display()
                )));
            }
            let mut trainer = Trainer::new(config.train.clone(), &loaded.model)?;
            if let Some(optimizer) = loaded.optimizer {
                trainer.optimizer = optimizer;
            }
            trainer.step = loaded.step as usize;
            config.model = loaded.model.config().clone();
            (loaded.model, loaded.vocab, trainer)
        }
        None => {
            let vocab = config.vocab.build()?;
            let model = Denoiser::new(config.model.clone(), &vocab, config.seed)?;
            let trainer = Trainer::new(config.train.clone(), &model)?;
            (model, vocab, trainer)
        }
    };
    let schedule = config.schedule.build(&vocab)?;
    let corpus = load_corpus(&config, &vocab)?;
    create_dir(out)?;
    crate::io::write_json(&out.join("config.json"), &config)?;
    let mut log = MetricsLog::open(&out.join("metrics.jsonl"), resume.is_some())?;
    let spec = config.schedule;
    trainer.train_observed(&mut model, &corpus.sequences(), &corpus.heldout, &schedule, &vocab, |record, model, trainer| {
        log.write(record)?;
        if checkpoint_every > 0 && trainer.step % checkpoint_every == 0 && !trainer.is_done() {
            let dir = out.join("checkpoints").join(format!("step-{:07}", trainer.step));
            save_denoiser(&dir, model, &vocab, spec, Some(&trainer.optimizer), trainer.step as u64)?;
        }
        Ok(())
    })?;
    log.finish()?;
    save_denoiser(&out.join("checkpoint"), &model, &vocab, spec, Some(&trainer.optimizer), trainer.step as u64)?;
    Ok(())
}

pub fn train_classifier(config: &RunConfig, out: &Path) -> CliResult<()> {
    let vocab = config.vocab.build()?;
    let schedule = config.schedule.build(&vocab)?;
    let pairs = load_corpus(config, &vocab)?.annotated()?;
    let classifier = train_ssp_classifier(&pairs, &config.guidance.classifier, &schedule, &vocab)?;
    create_dir(out)?;
    crate::io::write_json(&out.join("config.json"), config)?;
    save_classifier(&out.join("checkpoint"), &classifier, &vocab)?;
    Ok(())
}

pub fn train_adapter(config: &RunConfig, checkpoint: &Path, draft_error: Option<f64>, out: &Path) -> CliResult<()> {
    let backbone = load_model(checkpoint)?;
    let mut config = resolved(config, &backbone);
    if draft_error.is_some() {
        config.guidance.adapter.draft_error = draft_error;
        config.validate()?;
    }
    let Model { loaded, schedule } = backbone;
    let (mut model, vocab) = (loaded.model, loaded.vocab);
    if model.has_adapter() {
        return Err(CliError::usage(format!("{}: checkpoint already carries an adapter", checkpoint.display())));
    }
    let section = &config.guidance.adapter;
    let conditioner = section.conditioner;
    let bottleneck_dim = section.bottleneck_dim.unwrap_or(AdapterConfig::new(0, config.model.embed_dim).bottleneck_dim);
    model.attach_adapter(AdapterConfig { cond_dim: conditioner.cond_dim(), bottleneck_dim }, config.seed)?;
    let pairs = load_corpus(&config, &vocab)?
        .annotated()?
        .into_iter()
        .enumerate()
        .map(|(i, (x, a))| {
            let draft = match section.draft_error {
                Some(rate) => Some(corrupt_draft(&x, rate, &vocab, section.draft_seed, i as u64)?),
                None => None,
            };
            Ok(ConditionalPair { cond: conditioner.encode(&a)?, x0: x, draft })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let train_config = TrainConfig {
        stage: Stage::Diffusion,
        mlm_steps: 0,
        diffusion_steps: section.steps,
        batch_size: section.batch_size,
        learning_rate: section.learning_rate,
        ..config.train.clone()
    };
    let mut trainer = Trainer::new(train_config, &model)?;
    create_dir(out)?;
    crate::io::write_json(&out.join("config.json"), &config)?;
    let mut log = MetricsLog::open(&out.join("metrics.jsonl"), false)?;
    trainer.train_conditional(&mut model, &pairs, &schedule, &vocab, |record| log.write(record))?;
    log.finish()?;
    save_denoiser(&out.join("checkpoint"), &model, &vocab, config.schedule, Some(&trainer.optimizer), trainer.step as u64)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_steps_fill_the_masked_stage_first() {
        let base = TrainConfig { stage: Stage::TwoStage, mlm_steps: 100, diffusion_steps: 900, ..Default::default() };
        let c = with_total_steps(base.clone(), 40);
        assert_eq!((c.mlm_steps, c.diffusion_steps), (40, 0));
        let c = with_total_steps(base.clone(), 250);
        assert_eq!((c.mlm_steps, c.diffusion_steps), (100, 150));
        assert_eq!(with_total_steps(base, 0).total_steps(), 0);
    }
}
