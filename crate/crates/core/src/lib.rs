//! Discrete-diffusion sequence modeling over protein-like token alphabets.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod oracle;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod training;
pub mod vocab;

pub use diffusion::{corrupt, NoisedSequence, RngKey, TokenSequence};
pub use error::{Error, Result};
pub use schedule::{MixtureConstants, NoiseSchedule, ScheduleSpec, Stationary};
pub use vocab::{UnknownPolicy, Vocab};
