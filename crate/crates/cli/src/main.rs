//! `ddseq`: train, sample, infill, guide, embed and evaluate discrete
//! diffusion sequence models.

mod analyze;
mod config;
mod error;
mod generate;
mod io;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ddseq", version, about = "Discrete diffusion models over token sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (JSON); defaults apply to missing sections.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Sampler overrides; unset flags keep the config's `sample` section.
#[derive(Args, Clone, Default)]
pub struct SampleArgs {
    /// Number of denoising steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Argmax decoding, no sampling and no Gumbel noise.
    #[arg(long)]
    greedy: bool,
    #[arg(long)]
    no_gumbel: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser (masked LM, diffusion or both in sequence).
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory: config.json, metrics.jsonl, checkpoint/, checkpoints/.
        #[arg(long)]
        out: PathBuf,
        /// Total optimisation steps, overriding the config.
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Steps between periodic checkpoints; 0 disables them.
        #[arg(long, default_value_t = 1000)]
        checkpoint_every: usize,
    },
    /// Generate sequences of a fixed length.
    Sample {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 1)]
        num: usize,
        #[command(flatten)]
        sample: SampleArgs,
        /// FASTA output; a `.json` sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill the `X` positions of FASTA templates.
    Infill {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        template: PathBuf,
        /// Completions per template.
        #[arg(long, default_value_t = 1)]
        num: usize,
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample towards a per-position label string.
    Guide {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Label string over H, E and C, one label per position.
        #[arg(long)]
        labels: String,
        /// Must equal the label count when given.
        #[arg(long)]
        length: Option<usize>,
        /// Classifier checkpoint for classifier guidance.
        #[arg(long, requires = "eta")]
        classifier: Option<PathBuf>,
        /// Classifier guidance strength.
        #[arg(long, conflicts_with = "cfg_eta")]
        eta: Option<f64>,
        /// Classifier-free weight; needs a checkpoint with an adapter.
        #[arg(long)]
        cfg_eta: Option<f64>,
        #[arg(long, default_value_t = 1)]
        num: usize,
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export clean-input hidden states, one matrix per record.
    Repr {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output directory: manifest.json and weights.bin.
        #[arg(long)]
        out: PathBuf,
    },
    /// Report validity, diversity and pseudo-perplexity.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Enables pseudo-perplexity and self-sampling.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "self_sample")]
        samples: Option<PathBuf>,
        /// Draw this many samples from the checkpoint instead.
        #[arg(long, requires = "checkpoint")]
        self_sample: Option<usize>,
        /// Length of self-drawn samples.
        #[arg(long, default_value_t = 32)]
        length: usize,
        #[command(flatten)]
        sample: SampleArgs,
        /// JSON report; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic grammar corpus, with annotations, as FASTA.
    GenCorpus {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        num: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the per-position label classifier used for guidance.
    TrainClassifier {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a conditioning adapter on a frozen denoiser.
    TrainAdapter {
        #[command(flatten)]
        config: ConfigArg,
        /// Backbone checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Train on drafts with this token replacement rate.
        #[arg(long)]
        draft_error: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> error::CliResult<()> {
    use config::RunConfig;
    let load = |c: &ConfigArg| RunConfig::load(c.config.as_deref());
    match cli.command {
        Command::Train { config, out, steps, resume, checkpoint_every } => {
            train::train(&load(&config)?, &out, steps, resume.as_deref(), checkpoint_every)
        }
        Command::Sample { config, checkpoint, length, num, sample, out } => {
            generate::sample(&load(&config)?, &checkpoint, length, num, &sample, &out)
        }
        Command::Infill { config, checkpoint, template, num, sample, out } => {
            generate::infill(&load(&config)?, &checkpoint, &template, num, &sample, &out)
        }
        Command::Guide { config, checkpoint, labels, length, classifier, eta, cfg_eta, num, sample, out } => {
            let request = generate::GuideRequest { labels, length, classifier, eta, cfg_eta, num };
            generate::guide(&load(&config)?, &checkpoint, &request, &sample, &out)
        }
        Command::Repr { config, checkpoint, input, out } => analyze::repr(&load(&config)?, &checkpoint, &input, &out),
        Command::Eval { config, checkpoint, samples, self_sample, length, sample, out } => {
            let source = match (samples, self_sample) {
                (Some(path), _) => analyze::EvalSource::Fasta(path),
                (None, Some(n)) => analyze::EvalSource::SelfSample { num: n, length },
                (None, None) => return Err(error::CliError::usage("eval needs --samples or --self-sample")),
            };
            analyze::eval(&load(&config)?, checkpoint.as_deref(), &source, &sample, out.as_deref())
        }
        Command::GenCorpus { config, num, seed, out } => analyze::gen_corpus(&load(&config)?, num, seed, &out),
        Command::TrainClassifier { config, out } => train::train_classifier(&load(&config)?, &out),
        Command::TrainAdapter { config, checkpoint, draft_error, out } => {
            train::train_adapter(&load(&config)?, &checkpoint, draft_error, &out)
        }
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
