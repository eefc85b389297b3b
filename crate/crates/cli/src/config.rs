//! The run configuration: one JSON document, every section optional, unknown
//! keys rejected with their full path.

use std::path::{Path, PathBuf};

use ddseq_core::data::{GrammarConfig, SyntheticConditioner};
use ddseq_core::denoiser::DenoiserConfig;
use ddseq_core::guidance::{ClassifierConfig, GuidanceConfig, GuidanceMode};
use ddseq_core::sampling::SamplerConfig;
use ddseq_core::training::TrainConfig;
use ddseq_core::vocab::AMINO_ACIDS;
use ddseq_core::{ScheduleSpec, UnknownPolicy, Vocab};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub vocab: VocabConfig,
    pub schedule: ScheduleSpec,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub sample: SamplerConfig,
    pub guidance: GuidanceSection,
    pub data: DataConfig,
    /// Seeds parameter initialization.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    /// Data symbols; the specials are appended.
    pub alphabet: Vec<String>,
    pub unknown_policy: UnknownPolicy,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            alphabet: AMINO_ACIDS.iter().map(|s| s.to_string()).collect(),
            unknown_policy: UnknownPolicy::Reject,
        }
    }
}

impl VocabConfig {
    pub fn build(&self) -> CliResult<Vocab> {
        Ok(Vocab::new(&self.alphabet)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub mode: GuidanceMode,
    pub eta: f64,
    pub cfg_eta: f64,
    pub classifier: ClassifierConfig,
    pub adapter: AdapterSection,
}

impl GuidanceSection {
    pub fn core(&self) -> GuidanceConfig {
        GuidanceConfig {
            mode: self.mode,
            eta: self.eta,
            cfg_eta: self.cfg_eta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    /// Defaults to a quarter of the embedding width.
    pub bottleneck_dim: Option<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// When set, train on drafts with this per-token replacement rate.
    pub draft_error: Option<f64>,
    pub draft_seed: u64,
    pub conditioner: SyntheticConditioner,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self {
            bottleneck_dim: None,
            steps: 3000,
            batch_size: 32,
            learning_rate: 1e-3,
            draft_error: None,
            draft_seed: 77,
            conditioner: SyntheticConditioner::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training FASTA; the synthetic grammar corpus is generated when absent.
    pub corpus: Option<PathBuf>,
    pub grammar: GrammarConfig,
    pub num_sequences: usize,
    pub corpus_seed: u64,
    pub heldout_sequences: usize,
    pub heldout_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            grammar: GrammarConfig::default(),
            num_sequences: 4000,
            corpus_seed: 1,
            heldout_sequences: 200,
            heldout_seed: 2,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, source: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::usage(format!("{source}: config key {path}: {}", e.into_inner()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
                Self::parse(&text, &path.display().to_string())
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let vocab = self.vocab.build()?;
        self.schedule.build(&vocab)?;
        self.model.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        self.guidance.core().validate()?;
        self.guidance.adapter.conditioner.validate()?;
        if let Some(rate) = self.guidance.adapter.draft_error {
            if !(0.0..=1.0).contains(&rate) {
                return Err(CliError::usage(format!("guidance.adapter.draft_error {rate} outside [0, 1]")));
            }
        }
        Ok(())
    }
}
