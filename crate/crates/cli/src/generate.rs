//! `sample`, `infill` and `guide`. Each writes FASTA plus a JSON sidecar
//! holding the resolved config; sample `i` draws with seed
//! `derive_seed(seed, i)`, so a run is byte-reproducible.

use std::path::{Path, PathBuf};

use ddseq_core::checkpoint::load_classifier;
use ddseq_core::data::metrics::annotation_match;
use ddseq_core::data::{read_fasta, FastaRecord, SyntheticConditioner};
use ddseq_core::guidance::{Annotation, GuidanceMode, LABELS};
use ddseq_core::rng::derive_seed;
use ddseq_core::sampling::{Guidance, InfillTemplate, Sampler, SamplerConfig, Strategy};
use ddseq_core::TokenSequence;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{checkpoint_dir, grammar, load_model, resolved, sidecar_path, write_json, write_records};
use crate::SampleArgs;

pub fn sampler_config(base: &SamplerConfig, args: &SampleArgs) -> CliResult<SamplerConfig> {
    let mut config = base.clone();
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    if let Some(t) = args.temperature {
        config.temperature = t;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.no_gumbel {
        config.gumbel_perturb = false;
    }
    if args.greedy {
        config.strategy = Strategy::Greedy;
        config.gumbel_perturb = false;
    }
    config.validate()?;
    Ok(config)
}

fn nth(config: &SamplerConfig, i: usize) -> SamplerConfig {
    SamplerConfig {
        seed: derive_seed(config.seed, i as u64),
        ..config.clone()
    }
}

#[derive(Serialize)]
struct Sidecar<'a, R: Serialize> {
    command: &'a str,
    checkpoint: &'a Path,
    config: &'a RunConfig,
    #[serde(flatten)]
    report: R,
}

#[derive(Serialize)]
struct SampleReport {
    length: usize,
    num: usize,
}

pub fn sample(config: &RunConfig, checkpoint: &Path, length: usize, num: usize, args: &SampleArgs, out: &Path) -> CliResult<()> {
    if num == 0 {
        return Err(CliError::usage("--num must be positive"));
    }
    let model = load_model(checkpoint)?;
    let mut config = resolved(config, &model);
    config.sample = sampler_config(&config.sample, args)?;
    let vocab = &model.loaded.vocab;
    let sampler = Sampler::new(&model.loaded.model, vocab, &model.schedule)?;
    let records = (0..num)
        .map(|i| {
            let s = sampler.sample(length, &nth(&config.sample, i), None, Guidance::None)?;
            Ok(FastaRecord::new(format!("sample_{i}"), &s.sequence))
        })
        .collect::<CliResult<Vec<_>>>()?;
    write_records(&records, out, vocab)?;
    let report = SampleReport { length, num };
    write_json(&sidecar_path(out), &Sidecar { command: "sample", checkpoint, config: &config, report })
}

#[derive(Serialize)]
struct InfillReport {
    templates: usize,
    num_per_template: usize,
}

pub fn infill(config: &RunConfig, checkpoint: &Path, template: &Path, num: usize, args: &SampleArgs, out: &Path) -> CliResult<()> {
    if num == 0 {
        return Err(CliError::usage("--num must be positive"));
    }
    let model = load_model(checkpoint)?;
    let mut config = resolved(config, &model);
    config.sample = sampler_config(&config.sample, args)?;
    let vocab = &model.loaded.vocab;
    let templates = read_fasta(template, vocab, config.vocab.unknown_policy)?;
    if templates.is_empty() {
        return Err(CliError::usage(format!("{}: no templates", template.display())));
    }
    let sampler = Sampler::new(&model.loaded.model, vocab, &model.schedule)?;
    let mut records = Vec::new();
    for (t, record) in templates.iter().enumerate() {
        // a template without free positions is rejected here
        let parsed = InfillTemplate::new(record.ids.clone(), vocab)?;
        for k in 0..num {
            let out = sampler.infill(&parsed, &nth(&config.sample, t * num + k), None, Guidance::None)?;
            records.push(FastaRecord::new(format!("{}_{k}", record.id), &out.sequence));
        }
    }
    write_records(&records, out, vocab)?;
    let report = InfillReport { templates: templates.len(), num_per_template: num };
    write_json(&sidecar_path(out), &Sidecar { command: "infill", checkpoint, config: &config, report })
}

pub struct GuideRequest {
    pub labels: String,
    pub length: Option<usize>,
    pub classifier: Option<PathBuf>,
    pub eta: Option<f64>,
    pub cfg_eta: Option<f64>,
    pub num: usize,
}

#[derive(Serialize)]
struct GuideReport {
    labels: String,
    num: usize,
    /// Samples annotated by the grammar, compared with the requested labels.
    match_rate: Option<f64>,
    /// The guiding classifier's own reading of the samples.
    classifier_match_rate: Option<f64>,
}

pub fn guide(config: &RunConfig, checkpoint: &Path, request: &GuideRequest, args: &SampleArgs, out: &Path) -> CliResult<()> {
    if request.num == 0 {
        return Err(CliError::usage("--num must be positive"));
    }
    let target = Annotation::parse(&request.labels)?;
    if let Some(length) = request.length {
        if length != target.len() {
            return Err(CliError::usage(format!("--length {length} but {} labels", target.len())));
        }
    }
    let model = load_model(checkpoint)?;
    let mut config = resolved(config, &model);
    config.sample = sampler_config(&config.sample, args)?;
    let vocab = &model.loaded.vocab;
    let classifier = match &request.classifier {
        Some(dir) => {
            let (classifier, classifier_vocab) = load_classifier(&checkpoint_dir(dir))?;
            if classifier_vocab != *vocab {
                return Err(CliError::usage("classifier and denoiser vocabularies differ"));
            }
            Some(classifier)
        }
        None => None,
    };
    // the adapter's width fixes the conditioner layout
    let cond = match model.loaded.model.adapter_config() {
        Some(adapter) => {
            let position_features = adapter.cond_dim.checked_sub(LABELS.len() + 1).ok_or_else(|| {
                CliError::usage(format!("adapter condition width {} is too small", adapter.cond_dim))
            })?;
            Some(SyntheticConditioner { position_features }.encode(&target)?)
        }
        None => None,
    };
    let guidance = match (&classifier, request.eta, request.cfg_eta) {
        (_, Some(_), Some(_)) => return Err(CliError::usage("--eta and --cfg-eta are exclusive")),
        (Some(model), Some(eta), None) => {
            config.guidance.mode = GuidanceMode::Classifier;
            config.guidance.eta = eta;
            Guidance::Classifier { model, target: &target, eta }
        }
        (None, Some(_), None) => return Err(CliError::usage("--eta needs --classifier")),
        (_, None, Some(w)) => {
            if cond.is_none() {
                return Err(CliError::usage("--cfg-eta needs a checkpoint with an adapter"));
            }
            config.guidance.mode = GuidanceMode::ClassifierFree;
            config.guidance.cfg_eta = w;
            Guidance::ClassifierFree { eta: w }
        }
        (_, None, None) => Guidance::None,
    };
    config.guidance.core().validate()?;
    let sampler = Sampler::new(&model.loaded.model, vocab, &model.schedule)?;
    let samples = (0..request.num)
        .map(|i| Ok(sampler.sample(target.len(), &nth(&config.sample, i), cond.as_ref(), guidance)?.sequence))
        .collect::<CliResult<Vec<TokenSequence>>>()?;
    let targets = vec![target.clone(); samples.len()];
    let match_rate = match grammar(&config, vocab) {
        Ok(g) => Some(annotation_match(&samples, &targets, &g)?),
        Err(_) => None,
    };
    let classifier_match_rate = match &classifier {
        Some(c) => {
            let total = samples.iter().map(|s| Ok(c.predict(s.ids())?.match_rate(&target))).sum::<CliResult<f64>>()?;
            Some(total / samples.len() as f64)
        }
        None => None,
    };
    let records: Vec<FastaRecord> = samples.iter().enumerate().map(|(i, s)| FastaRecord::new(format!("guided_{i}"), s)).collect();
    write_records(&records, out, vocab)?;
    let report = GuideReport { labels: request.labels.clone(), num: request.num, match_rate, classifier_match_rate };
    write_json(&sidecar_path(out), &Sidecar { command: "guide", checkpoint, config: &config, report })
}
