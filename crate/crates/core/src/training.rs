//! Training objectives (masked LM, reweighted diffusion cross-entropy,
//! draft-conditioned cross-entropy) and the two-stage optimisation loop.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_masked, ParamStore, Tape};
use crate::denoiser::{ConditionEmbedding, Denoiser, Mode};
use crate::diffusion::{corrupt_with_keep, NoisedSequence, RngKey, TokenSequence};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::schedule::{MixtureConstants, NoiseSchedule};
use crate::vocab::Vocab;

/// One corrupted training instance: the model reads `input` and is scored by
/// `weight * sum_i noised_i * -log p(target_i | input)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub noised: Vec<bool>,
    pub weight: f64,
    pub t: usize,
    pub cond: Option<ConditionEmbedding>,
    /// Keys dropout masks.
    pub id: u64,
}

impl Example {
    pub fn num_noised(&self) -> usize {
        self.noised.iter().filter(|&&b| b).count()
    }

    pub fn with_cond(mut self, cond: ConditionEmbedding) -> Self {
        self.cond = Some(cond);
        self
    }
}

/// Loss statistics of one example or an aggregated batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// `sum weight * CE / num_noised` (0 when nothing is noised).
    pub loss: f64,
    /// Timestep of a single example; 0 for aggregates and masked LM.
    pub t: usize,
    /// Loss weight `lambda_t` of a single example.
    pub weight: f64,
    /// Unweighted cross-entropy summed over noised positions.
    pub ce_sum: f64,
    /// Weighted cross-entropy summed over noised positions.
    pub weighted_ce_sum: f64,
    pub num_noised: usize,
    pub num_correct: usize,
    /// Global gradient norm before clipping, when gradients were taken.
    pub grad_norm: Option<f64>,
}

impl LossReport {
    pub fn accuracy(&self) -> f64 {
        if self.num_noised == 0 {
            0.0
        } else {
            self.num_correct as f64 / self.num_noised as f64
        }
    }

    /// Pools reports, renormalizing by the total noised count.
    pub fn merge(reports: &[LossReport]) -> LossReport {
        let mut out = LossReport::default();
        for r in reports {
            out.ce_sum += r.ce_sum;
            out.weighted_ce_sum += r.weighted_ce_sum;
            out.num_noised += r.num_noised;
            out.num_correct += r.num_correct;
        }
        out.loss = out.weighted_ce_sum / out.num_noised.max(1) as f64;
        out
    }
}

fn check_trainable(x0: &[usize], vocab: &Vocab) -> Result<()> {
    if !x0.iter().any(|&id| vocab.is_data(id)) {
        return Err(Error::InvalidInput(
            "sequence has no diffusable positions".into(),
        ));
    }
    Ok(())
}

/// Draws `t` uniformly from `1..=T` and corrupts `source`; if nothing was
/// noised the draw is repeated once with a fresh stream.
fn corrupt_random_t(
    source: &[usize],
    schedule: &NoiseSchedule,
    vocab: &Vocab,
    key: RngKey,
) -> NoisedSequence {
    let steps = schedule.steps();
    let mut xt = None;
    for attempt in 0..2u64 {
        let u = rng::uniform(key.seed, Domain::Timestep, key.sequence, attempt, 0);
        let t = 1 + ((u * steps as f64) as usize).min(steps - 1);
        let stream = t as u64 + attempt * (steps as u64 + 1);
        let draw = corrupt_with_keep(source, schedule.alpha(t), stream, schedule.q_noise(), vocab, key, t);
        let done = draw.num_noised() > 0;
        xt = Some(draw);
        if done {
            break;
        }
    }
    xt.expect("at least one attempt")
}

/// A diffusion training example at a random `t`, weighted by `lambda_t`.
pub fn diffusion_example(
    x0: &TokenSequence,
    schedule: &NoiseSchedule,
    constants: &MixtureConstants,
    vocab: &Vocab,
    key: impl Into<RngKey>,
) -> Result<Example> {
    check_trainable(x0.ids(), vocab)?;
    let key = key.into();
    let xt = corrupt_random_t(x0.ids(), schedule, vocab, key);
    Ok(Example {
        input: xt.ids,
        target: x0.ids().to_vec(),
        noised: xt.noised,
        weight: constants.loss_weight(xt.t),
        t: xt.t,
        cond: None,
        id: key.sequence,
    })
}

/// A diffusion example at a fixed `t` with an explicit weight.
pub fn diffusion_example_at(
    x0: &TokenSequence,
    t: usize,
    weight: f64,
    schedule: &NoiseSchedule,
    vocab: &Vocab,
    key: impl Into<RngKey>,
) -> Result<Example> {
    check_trainable(x0.ids(), vocab)?;
    schedule.check_timestep(t)?;
    let key = key.into();
    let xt = crate::diffusion::corrupt(x0, t, schedule, vocab, key)?;
    Ok(Example {
        input: xt.ids,
        target: x0.ids().to_vec(),
        noised: xt.noised,
        weight,
        t,
        cond: None,
        id: key.sequence,
    })
}

/// The timestep whose masked fraction `1 - alpha_t` is closest to `ratio`.
pub fn timestep_for_ratio(schedule: &NoiseSchedule, ratio: f64) -> usize {
    (1..=schedule.steps())
        .min_by(|&a, &b| {
            let da = (1.0 - schedule.alpha(a) - ratio).abs();
            let db = (1.0 - schedule.alpha(b) - ratio).abs();
            da.total_cmp(&db)
        })
        .expect("schedule has at least one step")
}

const MLM_STREAM: u64 = u64::MAX - 8;

/// A masked-LM example: each diffusable position is replaced by the mask with
/// probability `mask_ratio`; weight 1. If nothing is masked the draw is
/// repeated once, then one position is forced.
pub fn mlm_example(
    x0: &TokenSequence,
    mask_ratio: f64,
    t: usize,
    vocab: &Vocab,
    key: impl Into<RngKey>,
) -> Result<Example> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::InvalidInput(format!("mask ratio {mask_ratio} outside (0, 1)")));
    }
    check_trainable(x0.ids(), vocab)?;
    let key = key.into();
    let mut q_mask = vec![0.0; vocab.size()];
    q_mask[vocab.mask_id()] = 1.0;
    let mut xt = corrupt_with_keep(x0.ids(), 1.0 - mask_ratio, MLM_STREAM, &q_mask, vocab, key, t);
    if xt.num_noised() == 0 {
        xt = corrupt_with_keep(x0.ids(), 1.0 - mask_ratio, MLM_STREAM + 1, &q_mask, vocab, key, t);
    }
    if xt.num_noised() == 0 {
        let candidates: Vec<usize> = (0..x0.len()).filter(|&i| vocab.is_data(x0.ids()[i])).collect();
        let u = rng::uniform(key.seed, Domain::Mlm, key.sequence, 0, 0);
        let pos = candidates[((u * candidates.len() as f64) as usize).min(candidates.len() - 1)];
        xt.ids[pos] = vocab.mask_id();
        xt.noised[pos] = true;
    }
    Ok(Example {
        input: xt.ids,
        target: x0.ids().to_vec(),
        noised: xt.noised,
        weight: 1.0,
        t,
        cond: None,
        id: key.sequence,
    })
}

/// A draft-conditioned example: the draft is corrupted, and noised positions
/// (relative to the draft) are scored against the true `x0`.
pub fn draft_example(
    x0: &TokenSequence,
    draft: &TokenSequence,
    schedule: &NoiseSchedule,
    constants: &MixtureConstants,
    vocab: &Vocab,
    key: impl Into<RngKey>,
) -> Result<Example> {
    if draft.len() != x0.len() {
        return Err(Error::ShapeMismatch(format!(
            "draft has length {} but x0 has {}",
            draft.len(),
            x0.len()
        )));
    }
    check_trainable(draft.ids(), vocab)?;
    let key = key.into();
    let xt = corrupt_random_t(draft.ids(), schedule, vocab, key);
    Ok(Example {
        input: xt.ids,
        target: x0.ids().to_vec(),
        noised: xt.noised,
        weight: constants.loss_weight(xt.t),
        t: xt.t,
        cond: None,
        id: key.sequence,
    })
}

fn report_from_logits(ex: &Example, logits: &Array2<f64>, support: &[bool]) -> LossReport {
    let mut report = LossReport {
        t: ex.t,
        weight: ex.weight,
        ..Default::default()
    };
    for (i, row) in logits.rows().into_iter().enumerate() {
        if !ex.noised[i] {
            continue;
        }
        let lp = log_softmax_masked(row.as_slice().expect("contiguous"), support);
        let target = ex.target[i];
        report.ce_sum -= lp[target];
        report.num_noised += 1;
        if argmax(&lp) == target {
            report.num_correct += 1;
        }
    }
    report.weighted_ce_sum = ex.weight * report.ce_sum;
    report.loss = report.weighted_ce_sum / report.num_noised.max(1) as f64;
    report
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_example(ex: &Example) -> Result<()> {
    if ex.input.len() != ex.target.len() || ex.input.len() != ex.noised.len() {
        return Err(Error::ShapeMismatch("example fields differ in length".into()));
    }
    Ok(())
}

/// Loss of one example, normalized by its noised count.
pub fn evaluate_example(model: &Denoiser, ex: &Example, vocab: &Vocab) -> Result<LossReport> {
    check_example(ex)?;
    let logits = model.forward(&ex.input, ex.t, ex.cond.as_ref(), Mode::Eval)?;
    Ok(report_from_logits(ex, &logits, &vocab.data_support()))
}

/// Parameter gradients indexed by parameter id; `None` for frozen or unused
/// parameters.
pub type Gradients = Vec<Option<Array2<f64>>>;

/// Unnormalized loss statistics and gradients of
/// `weight * sum_i noised_i * CE_i` for one example.
pub fn example_gradients(
    model: &Denoiser,
    ex: &Example,
    vocab: &Vocab,
    mode: Mode,
) -> Result<(LossReport, Gradients)> {
    check_example(ex)?;
    let support = vocab.data_support();
    let mut tape = Tape::new(model.params());
    let out = model.build(&mut tape, &ex.input, ex.t, ex.cond.as_ref(), mode)?;
    let weights: Vec<f64> = ex.noised.iter().map(|&b| if b { ex.weight } else { 0.0 }).collect();
    let ce = tape.cross_entropy(out.logits, &ex.target, &weights, &support);
    let report = report_from_logits(ex, tape.value(out.logits), &support);
    let mut grads = vec![None; model.params().len()];
    if report.num_noised > 0 && ex.weight != 0.0 {
        tape.backward(ce).accumulate_params(&tape, &mut grads);
    }
    Ok((report, grads))
}

/// Reweighted diffusion cross-entropy of `x0` at a random timestep.
pub fn diffusion_loss(
    x0: &TokenSequence,
    model: &Denoiser,
    schedule: &NoiseSchedule,
    constants: &MixtureConstants,
    vocab: &Vocab,
    key: impl Into<RngKey>,
) -> Result<LossReport> {
    let ex = diffusion_example(x0, schedule, constants, vocab, key)?;
    evaluate_example(model, &ex, vocab)
}

/// Masked-LM cross-entropy of `x0`.
pub fn mlm_loss(
    x0: &TokenSequence,
    model: &Denoiser,
    mask_ratio: f64,
    schedule: &NoiseSchedule,
    vocab: &Vocab,
    key: impl Into<RngKey>,
) -> Result<LossReport> {
    let t = timestep_for_ratio(schedule, mask_ratio);
    let ex = mlm_example(x0, mask_ratio, t, vocab, key)?;
    evaluate_example(model, &ex, vocab)
}

/// Draft-conditioned cross-entropy; `model` must carry an adapter.
#[allow(clippy::too_many_arguments)]
pub fn draft_conditioned_loss(
    x0: &TokenSequence,
    draft: &TokenSequence,
    model: &Denoiser,
    cond: &ConditionEmbedding,
    schedule: &NoiseSchedule,
    constants: &MixtureConstants,
    vocab: &Vocab,
    key: impl Into<RngKey>,
) -> Result<LossReport> {
    if !model.has_adapter() {
        return Err(Error::InvalidInput("draft-conditioned loss needs an adapter".into()));
    }
    let ex = draft_example(x0, draft, schedule, constants, vocab, key)?.with_cond(cond.clone());
    evaluate_example(model, &ex, vocab)
}

/// `exp(mean_i -log p(x_i | x with position i masked))`, one forward pass per
/// position.
pub fn pseudo_perplexity(x: &TokenSequence, model: &Denoiser, vocab: &Vocab) -> Result<f64> {
    let positions: Vec<usize> = (0..x.len()).filter(|&i| vocab.is_data(x.ids()[i])).collect();
    if positions.is_empty() {
        return Err(Error::InvalidInput("pseudo-perplexity needs a data position".into()));
    }
    let support = vocab.data_support();
    let nll: Vec<f64> = positions
        .par_iter()
        .map(|&i| {
            let mut ids = x.ids().to_vec();
            ids[i] = vocab.mask_id();
            let logits = model.forward(&ids, 1, None, Mode::Eval)?;
            let lp = log_softmax_masked(logits.row(i).as_slice().expect("contiguous"), &support);
            Ok(-lp[x.ids()[i]])
        })
        .collect::<Result<_>>()?;
    Ok((nll.iter().sum::<f64>() / nll.len() as f64).exp())
}

/// Argmax accuracy on positions masked at `mask_ratio`, pooled over `seqs`.
pub fn masked_token_accuracy(
    seqs: &[TokenSequence],
    model: &Denoiser,
    mask_ratio: f64,
    schedule: &NoiseSchedule,
    vocab: &Vocab,
    seed: u64,
) -> Result<LossReport> {
    let t = timestep_for_ratio(schedule, mask_ratio);
    let reports: Vec<LossReport> = seqs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let ex = mlm_example(x, mask_ratio, t, vocab, RngKey::new(seed, i as u64))?;
            evaluate_example(model, &ex, vocab)
        })
        .collect::<Result<_>>()?;
    Ok(LossReport::merge(&reports))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_fraction: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices only, not to
/// biases and layer-norm vectors.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = params
            .entries()
            .iter()
            .map(|e| Array2::zeros(e.value.raw_dim()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, entry) in params.entries_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if !entry.trainable {
                continue;
            }
            let decay = if entry.value.nrows() > 1 { c.weight_decay } else { 0.0 };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut entry.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bias1;
                    let vhat = *v / bias2;
                    *w -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * *w);
                });
        }
    }
}

/// Sums per-example gradients in iteration order.
pub fn sum_gradients<'a>(parts: impl Iterator<Item = &'a Gradients>, num_params: usize) -> Gradients {
    let mut total: Gradients = vec![None; num_params];
    for part in parts {
        for (acc, g) in total.iter_mut().zip(part) {
            if let Some(g) = g {
                match acc {
                    Some(a) => *a += g,
                    None => *acc = Some(g.clone()),
                }
            }
        }
    }
    total
}

pub fn global_norm(grads: &Gradients) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Mlm,
    Diffusion,
    TwoStage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub mlm_steps: usize,
    pub diffusion_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub mlm_mask_ratio: f64,
    pub seed: u64,
    pub eval_interval: usize,
    /// Held-out sequences used for periodic pseudo-perplexity.
    pub eval_sequences: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::TwoStage,
            mlm_steps: 2000,
            diffusion_steps: 8000,
            batch_size: 32,
            learning_rate: 1e-3,
            grad_clip_norm: 1.0,
            mlm_mask_ratio: 0.15,
            seed: 0,
            eval_interval: 500,
            eval_sequences: 8,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!("grad_clip_norm {} must be positive", self.grad_clip_norm));
        }
        if !(self.mlm_mask_ratio > 0.0 && self.mlm_mask_ratio < 1.0) {
            return bad(format!("mlm_mask_ratio {} outside (0, 1)", self.mlm_mask_ratio));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive".into());
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        match self.stage {
            Stage::Mlm => self.mlm_steps,
            Stage::Diffusion => self.diffusion_steps,
            Stage::TwoStage => self.mlm_steps + self.diffusion_steps,
        }
    }

    /// Objective used at a global step.
    pub fn stage_at(&self, step: usize) -> Stage {
        match self.stage {
            Stage::TwoStage if step < self.mlm_steps => Stage::Mlm,
            Stage::TwoStage => Stage::Diffusion,
            other => other,
        }
    }

    /// Linear warmup over the first `warmup_fraction` of steps, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = (self.optimizer.warmup_fraction * self.total_steps() as f64).ceil().max(1.0);
        self.learning_rate * ((step + 1) as f64 / warmup).min(1.0)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub acc: f64,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
    pub lr: f64,
    pub pppl: Option<f64>,
    pub heldout_acc: Option<f64>,
    /// Present on the first record only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub optimizer: Option<OptimizerConfig>,
}

/// Per-step outcome of [`Trainer::apply`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub report: LossReport,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
    pub lr: f64,
}

/// Optimizer state plus the global step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &Denoiser) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(config.optimizer.clone(), model.params());
        Ok(Self {
            config,
            optimizer,
            step: 0,
        })
    }

    /// One optimisation step on a batch. The loss is normalized by the number
    /// of noised positions in the whole batch.
    pub fn apply(&mut self, model: &mut Denoiser, examples: &[Example], vocab: &Vocab) -> Result<StepReport> {
        let step_seed = rng::derive_seed(self.config.seed, self.step as u64);
        let results: Vec<(LossReport, Gradients)> = {
            let model = &*model;
            examples
                .par_iter()
                .map(|ex| {
                    let mode = Mode::Train {
                        seed: step_seed,
                        sequence: ex.id,
                        step: self.step as u64,
                    };
                    example_gradients(model, ex, vocab, mode)
                })
                .collect::<Result<_>>()?
        };
        let reports: Vec<LossReport> = results.iter().map(|(r, _)| r.clone()).collect();
        let report = LossReport::merge(&reports);
        if !report.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss in batch {}", self.step)));
        }
        let mut grads = sum_gradients(results.iter().map(|(_, g)| g), model.params().len());
        let scale = 1.0 / report.num_noised.max(1) as f64;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * scale);
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient in batch {}", self.step)));
        }
        let clipped_grad_norm = global_norm(&grads);
        let lr = self.config.lr_at(self.step);
        self.optimizer.update(model.params_mut(), &grads, lr);
        self.step += 1;
        Ok(StepReport {
            report: LossReport {
                grad_norm: Some(grad_norm),
                ..report
            },
            grad_norm,
            clipped_grad_norm,
            lr,
        })
    }

    /// Corpus indices of the batch at the current step, drawn without
    /// replacement.
    pub fn batch_indices(&self, corpus_len: usize) -> Vec<usize> {
        let mut rng = rng::stream(self.config.seed, Domain::Batch, self.step as u64, 0, 0);
        let n = self.config.batch_size.min(corpus_len);
        rand::seq::index::sample(&mut rng, corpus_len, n).into_vec()
    }

    /// Builds the examples for the current step.
    pub fn batch(
        &self,
        corpus: &[TokenSequence],
        schedule: &NoiseSchedule,
        constants: &MixtureConstants,
        vocab: &Vocab,
    ) -> Result<Vec<Example>> {
        let step_seed = rng::derive_seed(self.config.seed, self.step as u64);
        let stage = self.config.stage_at(self.step);
        let mlm_t = timestep_for_ratio(schedule, self.config.mlm_mask_ratio);
        self.batch_indices(corpus.len())
            .into_iter()
            .map(|i| {
                let key = RngKey::new(step_seed, i as u64);
                match stage {
                    Stage::Mlm => mlm_example(&corpus[i], self.config.mlm_mask_ratio, mlm_t, vocab, key),
                    _ => diffusion_example(&corpus[i], schedule, constants, vocab, key),
                }
            })
            .collect()
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps()
    }

    /// Runs until the configured step count, calling `sink` once per step.
    pub fn train(
        &mut self,
        model: &mut Denoiser,
        corpus: &[TokenSequence],
        heldout: &[TokenSequence],
        schedule: &NoiseSchedule,
        vocab: &Vocab,
        mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<()> {
        self.train_observed(model, corpus, heldout, schedule, vocab, |record, _, _| sink(record))
    }

    /// As [`Trainer::train`], but the sink also sees the model and trainer
    /// after each step, e.g. to write periodic checkpoints.
    pub fn train_observed(
        &mut self,
        model: &mut Denoiser,
        corpus: &[TokenSequence],
        heldout: &[TokenSequence],
        schedule: &NoiseSchedule,
        vocab: &Vocab,
        mut sink: impl FnMut(&MetricsRecord, &Denoiser, &Trainer) -> Result<()>,
    ) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::InvalidInput("empty training corpus".into()));
        }
        let constants = schedule.mixture_constants()?;
        let eval_set = &heldout[..heldout.len().min(self.config.eval_sequences)];
        while !self.is_done() {
            let stage = self.config.stage_at(self.step);
            let first = self.step == 0;
            let examples = self.batch(corpus, schedule, &constants, vocab)?;
            let out = self.apply(model, &examples, vocab)?;
            let evaluate = self.step.is_multiple_of(self.config.eval_interval) || self.is_done();
            let (pppl, heldout_acc) = if evaluate && !eval_set.is_empty() {
                let pppl = eval_set
                    .iter()
                    .map(|x| pseudo_perplexity(x, model, vocab).map(f64::ln))
                    .sum::<Result<f64>>()?
                    / eval_set.len() as f64;
                let acc = masked_token_accuracy(eval_set, model, self.config.mlm_mask_ratio, schedule, vocab, self.config.seed)?;
                (Some(pppl.exp()), Some(acc.accuracy()))
            } else {
                (None, None)
            };
            let record = MetricsRecord {
                step: self.step,
                stage,
                loss: out.report.loss,
                acc: out.report.accuracy(),
                grad_norm: out.grad_norm,
                clipped_grad_norm: out.clipped_grad_norm,
                lr: out.lr,
                pppl,
                heldout_acc,
                optimizer: first.then(|| self.config.optimizer.clone()),
            };
            sink(&record, model, self)?;
        }
        Ok(())
    }

    /// Builds the conditional examples for the current step. Pairs carrying a
    /// draft use the draft-conditioned objective.
    pub fn conditional_batch(
        &self,
        pairs: &[ConditionalPair],
        schedule: &NoiseSchedule,
        constants: &MixtureConstants,
        vocab: &Vocab,
    ) -> Result<Vec<Example>> {
        let step_seed = rng::derive_seed(self.config.seed, self.step as u64);
        self.batch_indices(pairs.len())
            .into_iter()
            .map(|i| {
                let pair = &pairs[i];
                let key = RngKey::new(step_seed, i as u64);
                let ex = match &pair.draft {
                    Some(draft) => draft_example(&pair.x0, draft, schedule, constants, vocab, key)?,
                    None => diffusion_example(&pair.x0, schedule, constants, vocab, key)?,
                };
                Ok(ex.with_cond(pair.cond.clone()))
            })
            .collect()
    }

    /// Adapter training: the diffusion objective on conditioned pairs for
    /// `diffusion_steps` steps. Only trainable parameters move, so a frozen
    /// backbone stays bit-identical.
    pub fn train_conditional(
        &mut self,
        model: &mut Denoiser,
        pairs: &[ConditionalPair],
        schedule: &NoiseSchedule,
        vocab: &Vocab,
        mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<()> {
        if pairs.is_empty() {
            return Err(Error::InvalidInput("empty conditional training set".into()));
        }
        if !model.has_adapter() {
            return Err(Error::InvalidInput("conditional training needs an attached adapter".into()));
        }
        if self.config.stage != Stage::Diffusion {
            return Err(Error::InvalidInput("conditional training uses the diffusion stage".into()));
        }
        let constants = schedule.mixture_constants()?;
        while !self.is_done() {
            let first = self.step == 0;
            let examples = self.conditional_batch(pairs, schedule, &constants, vocab)?;
            let out = self.apply(model, &examples, vocab)?;
            sink(&MetricsRecord {
                step: self.step,
                stage: Stage::Diffusion,
                loss: out.report.loss,
                acc: out.report.accuracy(),
                grad_norm: out.grad_norm,
                clipped_grad_norm: out.clipped_grad_norm,
                lr: out.lr,
                pppl: None,
                heldout_acc: None,
                optimizer: first.then(|| self.config.optimizer.clone()),
            })?;
        }
        Ok(())
    }
}

/// A clean sequence with its condition and, for draft-conditioned training,
/// a draft of the same length.
#[derive(Clone, Debug)]
pub struct ConditionalPair {
    pub x0: TokenSequence,
    pub cond: ConditionEmbedding,
    pub draft: Option<TokenSequence>,
}
