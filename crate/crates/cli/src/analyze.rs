//! `repr`, `eval` and `gen-corpus`.

use std::path::{Path, PathBuf};

use ddseq_core::checkpoint::Checkpoint;
use ddseq_core::data::{evaluate, read_fasta, FastaRecord};
use ddseq_core::sampling::{Guidance, Sampler};
use ddseq_core::TokenSequence;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::generate::sampler_config;
use crate::io::{grammar, load_model, resolved, write_json, write_records};
use crate::SampleArgs;

/// Checkpoint kind tag of exported representations.
pub const EMBEDDINGS_KIND: &str = "embeddings";

#[derive(Serialize)]
struct EmbeddingIndex<'a> {
    checkpoint: &'a Path,
    input: &'a Path,
    /// Record ids in file order; tensors are named by these.
    records: Vec<String>,
    embed_dim: usize,
}

/// Writes one `L x d` float32 matrix per record in the checkpoint layout
/// (`manifest.json` + `weights.bin`), so it reloads with the same reader.
pub fn repr(config: &RunConfig, checkpoint: &Path, input: &Path, out: &Path) -> CliResult<()> {
    let model = load_model(checkpoint)?;
    let vocab = &model.loaded.vocab;
    let records = read_fasta(input, vocab, config.vocab.unknown_policy)?;
    if records.is_empty() {
        return Err(CliError::usage(format!("{}: no records", input.display())));
    }
    let mut seen = std::collections::HashSet::new();
    let mut tensors = Vec::with_capacity(records.len());
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(CliError::usage(format!("duplicate record id {}", r.id)));
        }
        if r.ids.contains(&vocab.mask_id()) {
            return Err(CliError::usage(format!("record {} contains the mask character", r.id)));
        }
        let x = r.to_sequence(vocab)?;
        tensors.push((r.id.clone(), model.loaded.model.embed(&x)?));
    }
    let index = EmbeddingIndex {
        checkpoint,
        input,
        records: records.iter().map(|r| r.id.clone()).collect(),
        embed_dim: model.loaded.model.config().embed_dim,
    };
    Checkpoint { kind: EMBEDDINGS_KIND.into(), config: serde_json::to_value(&index)?, step: 0, tensors }.save(out)?;
    Ok(())
}

pub enum EvalSource {
    Fasta(PathBuf),
    SelfSample { num: usize, length: usize },
}

pub fn eval(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    source: &EvalSource,
    args: &SampleArgs,
    out: Option<&Path>,
) -> CliResult<()> {
    let model = checkpoint.map(load_model).transpose()?;
    let config = match &model {
        Some(m) => resolved(config, m),
        None => config.clone(),
    };
    let vocab = match &model {
        Some(m) => m.loaded.vocab.clone(),
        None => config.vocab.build()?,
    };
    let samples: Vec<TokenSequence> = match source {
        EvalSource::Fasta(path) => read_fasta(path, &vocab, config.vocab.unknown_policy)?
            .iter()
            .map(|r| r.to_sequence(&vocab))
            .collect::<ddseq_core::Result<_>>()?,
        EvalSource::SelfSample { num, length } => {
            let m = model.as_ref().ok_or_else(|| CliError::usage("--self-sample needs --checkpoint"))?;
            let sample_config = sampler_config(&config.sample, args)?;
            let sampler = Sampler::new(&m.loaded.model, &vocab, &m.schedule)?;
            (0..*num)
                .map(|i| {
                    let c = ddseq_core::sampling::SamplerConfig {
                        seed: ddseq_core::rng::derive_seed(sample_config.seed, i as u64),
                        ..sample_config.clone()
                    };
                    Ok(sampler.sample(*length, &c, None, Guidance::None)?.sequence)
                })
                .collect::<CliResult<_>>()?
        }
    };
    if samples.is_empty() {
        return Err(CliError::usage("nothing to evaluate"));
    }
    let g = grammar(&config, &vocab).ok();
    let report = evaluate(&samples, g.as_ref(), model.as_ref().map(|m| &m.loaded.model), &vocab)?;
    match out {
        Some(path) => write_json(path, &report),
        None => {
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

pub fn gen_corpus(config: &RunConfig, num: Option<usize>, seed: Option<u64>, out: &Path) -> CliResult<()> {
    let vocab = config.vocab.build()?;
    let g = grammar(config, &vocab)?;
    let pairs = g.generate_corpus(num.unwrap_or(config.data.num_sequences), seed.unwrap_or(config.data.corpus_seed))?;
    let records: Vec<FastaRecord> = pairs
        .iter()
        .enumerate()
        .map(|(i, (x, a))| FastaRecord::new(format!("seq_{i}"), x).with_annotation(a.clone()))
        .collect();
    write_records(&records, out, &vocab)
}
