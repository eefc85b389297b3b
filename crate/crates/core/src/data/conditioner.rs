//! Synthetic stand-in for a structure encoder.
//!
//! The conditioner turns a per-position annotation into condition states that
//! the adapter reads through cross-attention. Each state carries the one-hot
//! label, a constant channel and sinusoidal position features, so that a
//! position can find its own label among the others.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::ConditionEmbedding;
use crate::diffusion::TokenSequence;
use crate::error::{Error, Result};
use crate::guidance::{Annotation, LABELS};
use crate::rng::{self, Domain};
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConditioner {
    /// Number of sinusoidal position channels; must be even.
    pub position_features: usize,
}

impl Default for SyntheticConditioner {
    fn default() -> Self {
        Self { position_features: 8 }
    }
}

impl SyntheticConditioner {
    pub fn validate(&self) -> Result<()> {
        if !self.position_features.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "position_features {} must be even",
                self.position_features
            )));
        }
        Ok(())
    }

    /// Width of each condition state.
    pub fn cond_dim(&self) -> usize {
        LABELS.len() + 1 + self.position_features
    }

    pub fn encode(&self, annotation: &Annotation) -> Result<ConditionEmbedding> {
        self.validate()?;
        let labels = annotation.labels();
        let base = LABELS.len() + 1;
        let states = Array2::from_shape_fn((labels.len(), self.cond_dim()), |(i, j)| {
            if j < LABELS.len() {
                f64::from(u8::from(labels[i] == j))
            } else if j == LABELS.len() {
                1.0
            } else {
                let k = (j - base) / 2;
                let angle = i as f64 / 10f64.powf(k as f64 * 0.5);
                if (j - base).is_multiple_of(2) {
                    angle.sin()
                } else {
                    angle.cos()
                }
            }
        });
        ConditionEmbedding::new(states)
    }
}

/// Replaces each position of `x0` with probability `error_rate` by a uniformly
/// drawn data token (possibly the same one), giving a draft whose expected
/// accuracy is `1 - error_rate * (K - 1) / K`.
pub fn corrupt_draft(x0: &TokenSequence, error_rate: f64, vocab: &Vocab, seed: u64, index: u64) -> Result<TokenSequence> {
    if !(0.0..=1.0).contains(&error_rate) {
        return Err(Error::InvalidInput(format!("draft error rate {error_rate} outside [0, 1]")));
    }
    let data = vocab.data_ids();
    let mut rng = rng::stream(seed, Domain::Draft, index, 0, 0);
    let ids = x0
        .ids()
        .iter()
        .map(|&t| {
            if vocab.is_special(t) || rng.random::<f64>() >= error_rate {
                t
            } else {
                data[rng.random_range(0..data.len())]
            }
        })
        .collect();
    TokenSequence::new(ids, vocab)
}
