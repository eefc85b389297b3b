//! Inputs and outputs shared by the subcommands.

use std::path::{Path, PathBuf};

use ddseq_core::checkpoint::{load_denoiser, LoadedDenoiser, MANIFEST};
use ddseq_core::data::{read_fasta, write_atomic, FastaRecord, SyntheticGrammar};
use ddseq_core::guidance::Annotation;
use ddseq_core::{NoiseSchedule, TokenSequence, Vocab};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Training data as (sequence, annotation) pairs.
pub struct Corpus {
    pub train: Vec<(TokenSequence, Option<Annotation>)>,
    pub heldout: Vec<TokenSequence>,
}

impl Corpus {
    pub fn sequences(&self) -> Vec<TokenSequence> {
        self.train.iter().map(|p| p.0.clone()).collect()
    }

    /// Pairs for the annotation-driven commands; every record must be labelled.
    pub fn annotated(&self) -> CliResult<Vec<(TokenSequence, Annotation)>> {
        self.train
            .iter()
            .enumerate()
            .map(|(i, (x, a))| match a {
                Some(a) => Ok((x.clone(), a.clone())),
                None => Err(CliError::usage(format!("corpus record {} has no annotation line", i + 1))),
            })
            .collect()
    }
}

pub fn grammar(config: &RunConfig, vocab: &Vocab) -> CliResult<SyntheticGrammar> {
    Ok(SyntheticGrammar::new(config.data.grammar.clone(), vocab)?)
}

/// Reads `data.corpus` or generates the grammar corpus. A FASTA corpus gives
/// up its last `heldout_sequences` records (at most a quarter of it).
pub fn load_corpus(config: &RunConfig, vocab: &Vocab) -> CliResult<Corpus> {
    let data = &config.data;
    match &data.corpus {
        Some(path) => {
            let records = read_fasta(path, vocab, config.vocab.unknown_policy)?;
            let mut pairs = records
                .iter()
                .map(|r| Ok((r.to_sequence(vocab)?, r.annotation.clone())))
                .collect::<CliResult<Vec<_>>>()?;
            if pairs.is_empty() {
                return Err(CliError::usage(format!("{}: no records", path.display())));
            }
            let n_heldout = data.heldout_sequences.min(pairs.len() / 4);
            let heldout = pairs.split_off(pairs.len() - n_heldout).into_iter().map(|p| p.0).collect();
            Ok(Corpus { train: pairs, heldout })
        }
        None => {
            let g = grammar(config, vocab)?;
            let train = g
                .generate_corpus(data.num_sequences, data.corpus_seed)?
                .into_iter()
                .map(|(x, a)| (x, Some(a)))
                .collect();
            let heldout = g.generate_corpus(data.heldout_sequences, data.heldout_seed)?.into_iter().map(|p| p.0).collect();
            Ok(Corpus { train, heldout })
        }
    }
}

/// A denoiser checkpoint with its schedule rebuilt.
pub struct Model {
    pub loaded: LoadedDenoiser,
    pub schedule: NoiseSchedule,
}

/// Accepts a checkpoint directory or a training run directory holding one.
pub fn checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join("checkpoint");
    if !path.join(MANIFEST).exists() && nested.join(MANIFEST).exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

pub fn load_model(dir: &Path) -> CliResult<Model> {
    let loaded = load_denoiser(&checkpoint_dir(dir))?;
    let schedule = loaded.schedule.build(&loaded.vocab)?;
    Ok(Model { loaded, schedule })
}

/// The run config with its model sections replaced by the checkpoint's.
pub fn resolved(config: &RunConfig, model: &Model) -> RunConfig {
    let mut config = config.clone();
    config.vocab.alphabet = model.loaded.vocab.symbols().to_vec();
    config.schedule = model.loaded.schedule;
    config.model = model.loaded.model.config().clone();
    config
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    Ok(write_atomic(path, text.as_bytes())?)
}

/// `samples.fasta` -> `samples.fasta.json`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn write_records(records: &[FastaRecord], out: &Path, vocab: &Vocab) -> CliResult<()> {
    Ok(ddseq_core::data::write_fasta(records, out, vocab)?)
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))
}
