//! Reverse generation by iterative mask-predict: every step predicts the
//! masked positions, ranks all free positions by score, keeps the top `k_t`
//! and re-masks the rest.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::log_softmax_masked;
use crate::denoiser::{ConditionEmbedding, Denoiser, Mode};
use crate::diffusion::{corrupt_with_keep, RngKey, TokenSequence};
use crate::error::{Error, Result};
use crate::guidance::{cfg_combine, guided_step_logits, one_hot, Annotation, GuidanceModel};
use crate::rng::{self, Domain};
use crate::schedule::{NoiseSchedule, Stationary};
use crate::training::argmax;
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Stochastic,
    Greedy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnmaskSchedule {
    #[default]
    Linear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub temperature: f64,
    pub strategy: Strategy,
    pub gumbel_perturb: bool,
    pub unmask_schedule: UnmaskSchedule,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            temperature: 1.0,
            strategy: Strategy::Stochastic,
            gumbel_perturb: true,
            unmask_schedule: UnmaskSchedule::Linear,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self {
            strategy: Strategy::Greedy,
            gumbel_perturb: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidInput("sampler needs at least one step".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Cumulative number of committed positions after each of `steps` steps.
pub fn unmask_counts(free: usize, steps: usize, kind: UnmaskSchedule) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::InvalidInput("unmask schedule needs at least one step".into()));
    }
    if free == 0 {
        return Err(Error::InvalidInput("unmask schedule needs a free position".into()));
    }
    let counts = (1..=steps)
        .map(|s| {
            let frac = s as f64 / steps as f64;
            let c = match kind {
                UnmaskSchedule::Linear => ((free * s) as f64 / steps as f64).ceil(),
                UnmaskSchedule::Cosine => (free as f64 * (1.0 - (std::f64::consts::FRAC_PI_2 * frac).cos())).ceil(),
            };
            (c as usize).min(free)
        })
        .collect::<Vec<_>>();
    let mut counts = counts;
    *counts.last_mut().expect("steps >= 1") = free;
    Ok(counts)
}

/// `g_i + log p_i` with `g_i = -log(-log U_i)`, `U_i` uniform on `(0, 1]`.
pub fn gumbel_perturb(log_probs: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    log_probs
        .iter()
        .map(|&lp| {
            let u = rng::uniform_open0(rng);
            lp - (-u.ln()).ln()
        })
        .collect()
}

/// `log p~_k` where `p~ ∝ exp(g + log p)`. The raw maximum `g_k + log p_k` is
/// Gumbel(0) distributed whatever `p` is, so it carries no confidence; the
/// normalized form still prefers peaked predictions.
pub fn perturbed_score(perturbed: &[f64], k: usize) -> f64 {
    let m = perturbed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = perturbed.iter().map(|&v| (v - m).exp()).sum();
    perturbed[k] - m - z.ln()
}

/// Observed tokens plus free (masked) positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InfillTemplate {
    ids: Vec<usize>,
    observed: Vec<bool>,
}

impl InfillTemplate {
    /// Positions holding the mask token are free; all others are observed.
    pub fn new(ids: Vec<usize>, vocab: &Vocab) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab.size()) {
            return Err(Error::InvalidInput(format!("token id {bad} out of range")));
        }
        if let Some(pos) = ids.iter().position(|&id| vocab.is_special(id)) {
            return Err(Error::InvalidInput(format!("special token at template position {pos}")));
        }
        let observed: Vec<bool> = ids.iter().map(|&id| id != vocab.mask_id()).collect();
        if observed.iter().all(|&o| o) {
            return Err(Error::InvalidInput("template has no free positions".into()));
        }
        Ok(Self { ids, observed })
    }

    pub fn parse(text: &str, vocab: &Vocab) -> Result<Self> {
        Self::new(vocab.encode(text, Default::default())?, vocab)
    }

    pub fn all_free(len: usize, vocab: &Vocab) -> Result<Self> {
        Self::new(vec![vocab.mask_id(); len], vocab)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_free(&self) -> usize {
        self.observed.iter().filter(|&&o| !o).count()
    }
}

/// Logit modification applied at every step.
#[derive(Clone, Copy)]
pub enum Guidance<'a> {
    None,
    /// Adds `eta * grad_x log p(y | x_t)` evaluated at the current one-hot.
    Classifier {
        model: &'a dyn GuidanceModel,
        target: &'a Annotation,
        eta: f64,
    },
    /// `eta * logits(cond) + (1 - eta) * logits(no cond)`.
    ClassifierFree { eta: f64 },
}

/// What happened during one sampling run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub committed_counts: Vec<usize>,
    /// Positions dropped from the committed set after having been committed.
    pub remask_events: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub sequence: TokenSequence,
    pub trace: SampleTrace,
}

/// Borrowed model state shared by sampling calls.
pub struct Sampler<'a> {
    pub model: &'a Denoiser,
    pub vocab: &'a Vocab,
    pub schedule: &'a NoiseSchedule,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a Denoiser, vocab: &'a Vocab, schedule: &'a NoiseSchedule) -> Result<Self> {
        if schedule.stationary() != Stationary::Absorbing {
            return Err(Error::InvalidInput(
                "mask-predict sampling needs an absorbing schedule".into(),
            ));
        }
        Ok(Self {
            model,
            vocab,
            schedule,
        })
    }

    /// Unconditional (or adapter-conditioned) generation of length `len`.
    pub fn sample(
        &self,
        len: usize,
        config: &SamplerConfig,
        cond: Option<&ConditionEmbedding>,
        guidance: Guidance<'_>,
    ) -> Result<SampleOutput> {
        if len == 0 {
            return Err(Error::InvalidInput("sample length must be at least 1".into()));
        }
        let template = InfillTemplate::all_free(len, self.vocab)?;
        self.infill(&template, config, cond, guidance)
    }

    /// Argmax decoding; independent of the seed.
    pub fn greedy_decode(
        &self,
        template: &InfillTemplate,
        steps: usize,
        cond: Option<&ConditionEmbedding>,
    ) -> Result<SampleOutput> {
        let config = SamplerConfig {
            steps,
            ..SamplerConfig::greedy()
        };
        self.infill(template, &config, cond, Guidance::None)
    }

    /// Step logits: model output at the time matching the masked fraction,
    /// temperature, then guidance.
    fn step_logits(
        &self,
        ids: &[usize],
        masked_frac: f64,
        config: &SamplerConfig,
        cond: Option<&ConditionEmbedding>,
        guidance: Guidance<'_>,
    ) -> Result<Array2<f64>> {
        let t = ((masked_frac * self.schedule.steps() as f64).round() as usize).clamp(1, self.schedule.steps());
        let mut logits = match guidance {
            Guidance::ClassifierFree { eta } => {
                let c = self.model.forward(ids, t, cond, Mode::Eval)?;
                let u = self.model.forward(ids, t, None, Mode::Eval)?;
                cfg_combine(&c, &u, eta)?
            }
            _ => self.model.forward(ids, t, cond, Mode::Eval)?,
        };
        if config.temperature != 1.0 {
            logits.mapv_inplace(|v| v / config.temperature);
        }
        if let Guidance::Classifier { model, target, eta } = guidance {
            if eta != 0.0 {
                let x = one_hot(ids, self.vocab.size());
                let (_, g) = model.value_and_grad(&x, target)?;
                logits = guided_step_logits(&logits, &g, eta)?;
            }
        }
        Ok(logits)
    }

    /// Fills the free positions of `template`; observed positions are never
    /// touched.
    pub fn infill(
        &self,
        template: &InfillTemplate,
        config: &SamplerConfig,
        cond: Option<&ConditionEmbedding>,
        guidance: Guidance<'_>,
    ) -> Result<SampleOutput> {
        config.validate()?;
        if let Guidance::Classifier { target, eta, .. } = guidance {
            if target.len() != template.len() {
                return Err(Error::ShapeMismatch(format!(
                    "annotation has {} labels for length {}",
                    target.len(),
                    template.len()
                )));
            }
            if !(eta >= 0.0) {
                return Err(Error::InvalidInput(format!("eta {eta} must be non-negative")));
            }
        }
        let free: Vec<usize> = (0..template.len()).filter(|&i| !template.observed[i]).collect();
        let counts = unmask_counts(free.len(), config.steps, config.unmask_schedule)?;
        let support = self.vocab.data_support();
        let mask = self.vocab.mask_id();
        let greedy = config.strategy == Strategy::Greedy;
        let gumbel = config.gumbel_perturb && !greedy;

        let mut ids = template.ids.clone();
        // score of each committed free position; None while masked
        let mut scores: Vec<Option<f64>> = vec![None; template.len()];
        let mut remask_events = 0;
        for (step, &keep) in counts.iter().enumerate() {
            let masked = free.iter().filter(|&&i| scores[i].is_none()).count();
            let logits = self.step_logits(&ids, masked as f64 / free.len() as f64, config, cond, guidance)?;
            let mut candidates: Vec<(usize, usize, f64)> = Vec::with_capacity(free.len());
            for &i in &free {
                if let Some(score) = scores[i] {
                    candidates.push((i, ids[i], score));
                    continue;
                }
                let lp = log_softmax_masked(logits.row(i).as_slice().expect("contiguous"), &support);
                let (token, score) = if greedy {
                    let k = argmax(&lp);
                    (k, lp[k])
                } else {
                    let domain = if gumbel { Domain::Gumbel } else { Domain::Sampler };
                    let mut rng = rng::stream(config.seed, domain, i as u64, step as u64, 0);
                    if gumbel {
                        let perturbed = gumbel_perturb(&lp, &mut rng);
                        let k = argmax(&perturbed);
                        (k, perturbed_score(&perturbed, k))
                    } else {
                        let probs: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
                        let k = rng::categorical(&probs, rng.random());
                        (k, lp[k])
                    }
                };
                candidates.push((i, token, score));
            }
            // highest score first; ties by position
            candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            for (rank, &(i, token, score)) in candidates.iter().enumerate() {
                if rank < keep {
                    ids[i] = token;
                    scores[i] = Some(score);
                } else {
                    if scores[i].is_some() {
                        remask_events += 1;
                    }
                    ids[i] = mask;
                    scores[i] = None;
                }
            }
        }
        debug_assert!(ids.iter().all(|&id| id != mask));
        Ok(SampleOutput {
            sequence: TokenSequence::new(ids, self.vocab)?,
            trace: SampleTrace {
                committed_counts: counts,
                remask_events,
            },
        })
    }

    /// Draft refinement: `rounds` times, corrupt the current sequence at a
    /// decreasing noise level and greedily re-predict the masked positions.
    pub fn refine_from_draft(
        &self,
        draft: &TokenSequence,
        rounds: usize,
        cond: Option<&ConditionEmbedding>,
        seed: u64,
    ) -> Result<TokenSequence> {
        if rounds == 0 {
            return Err(Error::InvalidInput("refinement needs at least one round".into()));
        }
        let support = self.vocab.data_support();
        let mut ids = draft.ids().to_vec();
        let steps = self.schedule.steps();
        for r in 1..=rounds {
            let t = (steps * (rounds - r + 1)).div_ceil(rounds + 1).clamp(1, steps);
            let xt = corrupt_with_keep(
                &ids,
                self.schedule.alpha(t),
                t as u64,
                self.schedule.q_noise(),
                self.vocab,
                RngKey::new(seed, r as u64),
                t,
            );
            if xt.num_noised() == 0 {
                continue;
            }
            let logits = self.model.forward(&xt.ids, t, cond, Mode::Eval)?;
            for (i, &noised) in xt.noised.iter().enumerate() {
                if noised {
                    let lp = log_softmax_masked(logits.row(i).as_slice().expect("contiguous"), &support);
                    ids[i] = argmax(&lp);
                }
            }
        }
        TokenSequence::new(ids, self.vocab)
    }
}
