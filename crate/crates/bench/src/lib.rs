//! Shared fixtures for the benchmarks: an untrained denoiser at the size the
//! acceptance runs use, and a grammar corpus to feed it.

use ddseq_core::data::{GrammarConfig, SyntheticGrammar};
use ddseq_core::denoiser::{Denoiser, DenoiserConfig};
use ddseq_core::vocab::AMINO_ACIDS;
use ddseq_core::{NoiseSchedule, ScheduleSpec, Stationary, TokenSequence, Vocab};

pub struct Fixture {
    pub vocab: Vocab,
    pub schedule: NoiseSchedule,
    pub model: Denoiser,
    pub corpus: Vec<TokenSequence>,
}

/// Weights are random; timings do not depend on training.
pub fn fixture(len: usize) -> Fixture {
    let vocab = Vocab::new(&AMINO_ACIDS).expect("vocab");
    let schedule = ScheduleSpec { steps: 500, stationary: Stationary::Absorbing, ..Default::default() }
        .build(&vocab)
        .expect("schedule");
    let config = DenoiserConfig { num_layers: 2, num_heads: 4, embed_dim: 64, ffn_dim: 128, max_len: len.max(128), ..Default::default() };
    let model = Denoiser::new(config, &vocab, 0).expect("model");
    let grammar = SyntheticGrammar::new(GrammarConfig { min_len: len, max_len: len, ..Default::default() }, &vocab).expect("grammar");
    let corpus = grammar.generate_corpus(64, 1).expect("corpus").into_iter().map(|p| p.0).collect();
    Fixture { vocab, schedule, model, corpus }
}
