//! Forward corruption (kernel and closed-form marginal) and the stochastic
//! mixture form of the backward transition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::schedule::{MixtureConstants, NoiseSchedule};
use crate::vocab::Vocab;

/// A clean token sequence `x_0`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    /// Validates that every id is in range and none is the mask.
    pub fn new(ids: Vec<usize>, vocab: &Vocab) -> Result<Self> {
        if let Some(pos) = ids.iter().position(|&id| id >= vocab.size()) {
            return Err(Error::InvalidInput(format!(
                "token id {} at position {pos} out of range",
                ids[pos]
            )));
        }
        if let Some(pos) = ids.iter().position(|&id| id == vocab.mask_id()) {
            return Err(Error::InvalidInput(format!(
                "mask token at position {pos} in a clean sequence"
            )));
        }
        Ok(Self { ids })
    }

    /// For ids already known to be in range and mask-free.
    pub(crate) fn from_valid(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn from_str(text: &str, vocab: &Vocab) -> Result<Self> {
        Self::new(vocab.encode(text, Default::default())?, vocab)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn into_ids(self) -> Vec<usize> {
        self.ids
    }
}

/// A corrupted sequence `x_t` with its noise indicators `b_i(t)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoisedSequence {
    pub ids: Vec<usize>,
    pub t: usize,
    /// `b_i(t) = 1{x_t,i != x_0,i}`.
    pub noised: Vec<bool>,
}

impl NoisedSequence {
    /// The `t = 0` state of a clean sequence.
    pub fn clean(x0: &TokenSequence) -> Self {
        Self {
            ids: x0.ids.clone(),
            t: 0,
            noised: vec![false; x0.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_noised(&self) -> usize {
        self.noised.iter().filter(|&&b| b).count()
    }
}

/// Seed plus the index of the sequence within its batch or corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RngKey {
    pub seed: u64,
    pub sequence: u64,
}

impl RngKey {
    pub fn new(seed: u64, sequence: u64) -> Self {
        Self { seed, sequence }
    }
}

impl From<u64> for RngKey {
    fn from(seed: u64) -> Self {
        Self { seed, sequence: 0 }
    }
}

/// Samples `x_t ~ q(x_t | x_0)`: each non-special position keeps its token with
/// probability `alpha_t`, otherwise draws from `q_noise`.
pub fn corrupt(
    x0: &TokenSequence,
    t: usize,
    schedule: &NoiseSchedule,
    vocab: &Vocab,
    key: impl Into<RngKey>,
) -> Result<NoisedSequence> {
    schedule.check_timestep(t)?;
    Ok(corrupt_with_keep(
        x0.ids(),
        schedule.alpha(t),
        t as u64,
        schedule.q_noise(),
        vocab,
        key.into(),
        t,
    ))
}

/// Corruption with an explicit keep probability. `stream` selects the random
/// stream, so two calls with equal keys and keep probabilities agree exactly.
pub(crate) fn corrupt_with_keep(
    x0: &[usize],
    keep: f64,
    stream: u64,
    q_noise: &[f64],
    vocab: &Vocab,
    key: RngKey,
    t: usize,
) -> NoisedSequence {
    let mut ids = Vec::with_capacity(x0.len());
    let mut noised = Vec::with_capacity(x0.len());
    for (pos, &tok) in x0.iter().enumerate() {
        if vocab.is_special(tok) {
            ids.push(tok);
            noised.push(false);
            continue;
        }
        let u = rng::uniform(key.seed, Domain::Corrupt, key.sequence, pos as u64, stream);
        let out = if u < keep {
            tok
        } else {
            let v = rng::uniform(key.seed, Domain::CorruptNoise, key.sequence, pos as u64, stream);
            rng::categorical(q_noise, v)
        };
        ids.push(out);
        noised.push(out != tok);
    }
    NoisedSequence { ids, t, noised }
}

fn check_diffusable(token: usize, vocab: &Vocab) -> Result<()> {
    if !vocab.is_data(token) {
        return Err(Error::InvalidInput(format!(
            "token {} is not a diffusable data token",
            vocab.symbols().get(token).map(String::as_str).unwrap_or("?")
        )));
    }
    Ok(())
}

/// `q(x_t | x_0 = token) = alpha_t * onehot(token) + (1 - alpha_t) * q_noise`.
pub fn marginal(token: usize, t: usize, schedule: &NoiseSchedule, vocab: &Vocab) -> Result<Vec<f64>> {
    schedule.check_timestep(t)?;
    check_diffusable(token, vocab)?;
    Ok(mix_onehot(token, schedule.alpha(t), schedule.q_noise()))
}

/// `q(x_t | x_{t-1} = prev) = beta_t * onehot(prev) + (1 - beta_t) * q_noise`.
pub fn forward_kernel(prev: usize, t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::InvalidInput("forward kernel needs t >= 1".into()));
    }
    schedule.check_timestep(t)?;
    if prev >= schedule.vocab_size() {
        return Err(Error::InvalidInput(format!("token id {prev} out of range")));
    }
    Ok(mix_onehot(prev, schedule.beta(t), schedule.q_noise()))
}

fn mix_onehot(token: usize, weight: f64, q_noise: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = q_noise.iter().map(|&q| (1.0 - weight) * q).collect();
    p[token] += weight;
    p
}

/// The mixture form of `q(x_{t-1} | x_t = cur, x_0 = target)` for one
/// position, as a probability vector over the vocabulary.
pub fn posterior_mixture(
    cur: usize,
    target: usize,
    t: usize,
    schedule: &NoiseSchedule,
    constants: &MixtureConstants,
    vocab: &Vocab,
) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::InvalidInput("posterior needs t >= 1".into()));
    }
    schedule.check_timestep(t)?;
    check_diffusable(target, vocab)?;
    let q_noise = schedule.q_noise();
    Ok(if cur == target {
        mix_onehot(cur, constants.lambda1(t), q_noise)
    } else {
        let rest = mix_onehot(cur, schedule.beta(t), q_noise);
        let lambda2 = constants.lambda2(t);
        let mut p: Vec<f64> = rest.iter().map(|&r| (1.0 - lambda2) * r).collect();
        p[target] += lambda2;
        p
    })
}

/// One draw from the mixture form of `q(x_{t-1} | x_t, x_0 = x0hat)`.
///
/// Where `x_t` agrees with `x0hat` the token is kept with probability
/// `lambda1`, otherwise redrawn from `q_noise`; elsewhere `x0hat` is revealed
/// with probability `lambda2`, otherwise the token is drawn from
/// `beta_t * x_t + (1 - beta_t) * q_noise`.
///
/// As a commitment update this is `b' = (b ∧ v1) ∨ (¬b ∧ v2)`: the reveal
/// draw is gated on `¬b`. Neither literal grouping of `b ∧ v1 ∨ v2` matches
/// the Bayes posterior; `(b ∧ v1) ∨ v2` lets a reveal rescue a renoised
/// position and `b ∧ (v1 ∨ v2)` never reveals.
pub fn posterior_step(
    xt: &NoisedSequence,
    x0hat: &TokenSequence,
    schedule: &NoiseSchedule,
    constants: &MixtureConstants,
    vocab: &Vocab,
    key: impl Into<RngKey>,
) -> Result<NoisedSequence> {
    let t = xt.t;
    if t == 0 {
        return Err(Error::InvalidInput("posterior step needs t >= 1".into()));
    }
    schedule.check_timestep(t)?;
    if xt.len() != x0hat.len() {
        return Err(Error::ShapeMismatch(format!(
            "x_t has length {} but x0hat has {}",
            xt.len(),
            x0hat.len()
        )));
    }
    let key = key.into();
    let beta = schedule.beta(t);
    let q_noise = schedule.q_noise();
    let mut ids = Vec::with_capacity(xt.len());
    let mut noised = Vec::with_capacity(xt.len());
    for (pos, (&cur, &target)) in xt.ids.iter().zip(x0hat.ids()).enumerate() {
        if vocab.is_special(cur) {
            ids.push(cur);
            noised.push(false);
            continue;
        }
        check_diffusable(target, vocab)?;
        let mut rng = rng::stream(key.seed, Domain::Posterior, key.sequence, pos as u64, t as u64);
        let v: f64 = rng.random();
        let u: f64 = rng.random();
        let out = if cur == target {
            if v < constants.lambda1(t) {
                cur
            } else {
                rng::categorical(q_noise, u)
            }
        } else if v < constants.lambda2(t) {
            target
        } else {
            rng::categorical(&mix_onehot(cur, beta, q_noise), u)
        };
        ids.push(out);
        noised.push(out != target);
    }
    Ok(NoisedSequence {
        ids,
        t: t - 1,
        noised,
    })
}
