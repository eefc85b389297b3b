//! Sampling-time conditioning: discrete classifier guidance through the input
//! gradient of a discriminator, and classifier-free guidance by log-space
//! interpolation of conditional and unconditional logits.

use std::fmt;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::diffusion::{corrupt, RngKey, TokenSequence};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::schedule::NoiseSchedule;
use crate::training::{clip_global_norm, sum_gradients, AdamW, Gradients, OptimizerConfig};
use crate::vocab::Vocab;

/// Three-state secondary-structure alphabet.
pub const LABELS: [char; 3] = ['H', 'E', 'C'];

/// Per-position class labels, stored as indices into [`LABELS`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Annotation {
    labels: Vec<usize>,
}

impl Annotation {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= LABELS.len()) {
            return Err(Error::InvalidInput(format!("label index {bad} out of range")));
        }
        Ok(Self { labels })
    }

    pub fn parse(text: &str) -> Result<Self> {
        text.trim()
            .chars()
            .map(|c| {
                LABELS
                    .iter()
                    .position(|&l| l == c.to_ascii_uppercase())
                    .ok_or_else(|| Error::InvalidInput(format!("unknown label {c:?}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(|labels| Self { labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fraction of positions where `other` agrees.
    pub fn match_rate(&self, other: &Annotation) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let same = self.labels.iter().zip(&other.labels).filter(|(a, b)| a == b).count();
        same as f64 / self.len() as f64
    }
}

impl fmt::Display for Annotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &l in &self.labels {
            write!(f, "{}", LABELS[l])?;
        }
        Ok(())
    }
}

/// A differentiable `log p(y | x)` over relaxed one-hot inputs (`L x |V|`).
pub trait GuidanceModel: Sync {
    fn value_and_grad(&self, x: &Array2<f64>, y: &Annotation) -> Result<(f64, Array2<f64>)>;
}

/// One-hot rows for token ids; mask rows are the one-hot of the mask token.
pub fn one_hot(ids: &[usize], vocab_size: usize) -> Array2<f64> {
    let mut x = Array2::zeros((ids.len(), vocab_size));
    for (i, &id) in ids.iter().enumerate() {
        x[[i, id]] = 1.0;
    }
    x
}

/// Adds `eta * g` to the logits.
pub fn guided_step_logits(base: &Array2<f64>, g: &Array2<f64>, eta: f64) -> Result<Array2<f64>> {
    if base.dim() != g.dim() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} but guidance gradient {:?}",
            base.dim(),
            g.dim()
        )));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("guidance gradient".into()));
    }
    if !eta.is_finite() {
        return Err(Error::NonFinite(format!("guidance strength {eta}")));
    }
    if eta == 0.0 {
        return Ok(base.clone());
    }
    Ok(base + &(g * eta))
}

/// `w * cond + (1 - w) * uncond`, per entry.
pub fn cfg_combine(cond: &Array2<f64>, uncond: &Array2<f64>, w: f64) -> Result<Array2<f64>> {
    if cond.dim() != uncond.dim() {
        return Err(Error::ShapeMismatch(format!(
            "conditional logits {:?} but unconditional {:?}",
            cond.dim(),
            uncond.dim()
        )));
    }
    if !w.is_finite() {
        return Err(Error::NonFinite(format!("cfg weight {w}")));
    }
    if w == 1.0 {
        return Ok(cond.clone());
    }
    if w == 0.0 {
        return Ok(uncond.clone());
    }
    Ok(cond * w + &(uncond * (1.0 - w)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    #[default]
    None,
    Classifier,
    ClassifierFree,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Classifier guidance strength.
    pub eta: f64,
    /// Classifier-free mixing weight.
    pub cfg_eta: f64,
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.eta.is_finite() || !self.cfg_eta.is_finite() {
            return Err(Error::InvalidInput("guidance strengths must be finite".into()));
        }
        if self.mode == GuidanceMode::Classifier && self.eta < 0.0 {
            return Err(Error::InvalidInput(format!("eta {} must be non-negative", self.eta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Context positions on each side.
    pub window: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub noise_aware: bool,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden_dim: 32,
            window: 2,
            steps: 300,
            batch_size: 32,
            learning_rate: 3e-3,
            noise_aware: true,
            seed: 0,
        }
    }
}

/// Windowed per-position labeler: relaxed one-hot rows are embedded by a
/// matrix product, neighbours within `window` are concatenated, and a GELU
/// MLP emits label logits.
#[derive(Clone, Debug)]
pub struct SspClassifier {
    config: ClassifierConfig,
    vocab_size: usize,
    params: ParamStore,
    emb: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl SspClassifier {
    pub fn new(config: ClassifierConfig, vocab_size: usize) -> Self {
        let mut params = ParamStore::new();
        let mut rng = rng::stream(config.seed, Domain::Init, u64::MAX, 0, 0);
        let mut normal = |rows, cols, std: f64| {
            use rand_distr::{Distribution, Normal};
            let n = Normal::new(0.0, std).expect("valid std");
            Array2::from_shape_simple_fn((rows, cols), || n.sample(&mut rng) as f32 as f64)
        };
        let width = (2 * config.window + 1) * config.embed_dim;
        let emb = params.add("emb", normal(vocab_size, config.embed_dim, 0.5));
        let w1 = params.add("w1", normal(width, config.hidden_dim, (1.0 / width as f64).sqrt()));
        let b1 = params.add("b1", Array2::zeros((1, config.hidden_dim)));
        let w2 = params.add("w2", normal(config.hidden_dim, LABELS.len(), (1.0 / config.hidden_dim as f64).sqrt()));
        let b2 = params.add("b2", Array2::zeros((1, LABELS.len())));
        Self {
            config,
            vocab_size,
            params,
            emb,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn head(&self, tape: &mut Tape<'_>, h: Var) -> Var {
        let len = tape.value(h).nrows();
        let w = self.config.window as isize;
        let parts: Vec<Var> = (-w..=w)
            .map(|offset| {
                if offset == 0 {
                    return h;
                }
                let shift = Array2::from_shape_fn((len, len), |(i, j)| {
                    if j as isize == i as isize + offset {
                        1.0
                    } else {
                        0.0
                    }
                });
                let s = tape.constant(shift);
                tape.matmul(s, h)
            })
            .collect();
        let ctx = tape.concat_cols(&parts);
        let (w1, b1) = (tape.param(self.w1), tape.param(self.b1));
        let z = tape.linear(ctx, w1, b1);
        let z = tape.gelu(z);
        let (w2, b2) = (tape.param(self.w2), tape.param(self.b2));
        tape.linear(z, w2, b2)
    }

    fn relaxed(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let emb = tape.param(self.emb);
        let h = tape.matmul(x, emb);
        self.head(tape, h)
    }

    /// Label logits for a relaxed one-hot input.
    pub fn logits(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_width(x)?;
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(x.clone());
        let out = self.relaxed(&mut tape, x);
        Ok(tape.value(out).clone())
    }

    /// Label logits for token ids, via an embedding lookup.
    pub fn logits_from_ids(&self, ids: &[usize]) -> Result<Array2<f64>> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::InvalidInput(format!("token id {bad} out of range")));
        }
        let mut tape = Tape::new(&self.params);
        let emb = tape.param(self.emb);
        let h = tape.gather(emb, ids);
        let out = self.head(&mut tape, h);
        Ok(tape.value(out).clone())
    }

    /// Most likely label per position.
    pub fn predict(&self, ids: &[usize]) -> Result<Annotation> {
        let logits = self.logits_from_ids(ids)?;
        let labels = logits
            .rows()
            .into_iter()
            .map(|r| crate::training::argmax(r.as_slice().expect("contiguous")))
            .collect();
        Annotation::new(labels)
    }

    fn check_width(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.vocab_size {
            return Err(Error::ShapeMismatch(format!(
                "input width {} but vocabulary has {}",
                x.ncols(),
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Summed label cross-entropy and its parameter gradients.
    fn loss_and_grads(&self, ids: &[usize], y: &Annotation) -> (f64, Gradients) {
        let mut tape = Tape::new(&self.params);
        let emb = tape.param(self.emb);
        let h = tape.gather(emb, ids);
        let logits = self.head(&mut tape, h);
        let ce = tape.cross_entropy(logits, y.labels(), &vec![1.0; ids.len()], &[true; 3]);
        let mut grads = vec![None; self.params.len()];
        tape.backward(ce).accumulate_params(&tape, &mut grads);
        (tape.value(ce)[[0, 0]], grads)
    }
}

impl GuidanceModel for SspClassifier {
    fn value_and_grad(&self, x: &Array2<f64>, y: &Annotation) -> Result<(f64, Array2<f64>)> {
        self.check_width(x)?;
        if x.nrows() != y.len() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} positions but annotation has {}",
                x.nrows(),
                y.len()
            )));
        }
        let mut tape = Tape::new(&self.params);
        let input = tape.input(x.clone());
        let logits = self.relaxed(&mut tape, input);
        let ce = tape.cross_entropy(logits, y.labels(), &vec![1.0; y.len()], &[true; 3]);
        let value = -tape.value(ce)[[0, 0]];
        let grads = tape.backward(ce);
        let g = grads.wrt(input).map(|g| -g).unwrap_or_else(|| Array2::zeros(x.raw_dim()));
        Ok((value, g))
    }
}

/// Fits an [`SspClassifier`] on labeled sequences. A noise-aware classifier
/// sees inputs corrupted at a uniformly drawn timestep.
pub fn train_ssp_classifier(
    corpus: &[(TokenSequence, Annotation)],
    config: &ClassifierConfig,
    schedule: &NoiseSchedule,
    vocab: &Vocab,
) -> Result<SspClassifier> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty classifier corpus".into()));
    }
    if let Some((x, y)) = corpus.iter().find(|(x, y)| x.len() != y.len()) {
        return Err(Error::ShapeMismatch(format!(
            "sequence of length {} with {} labels",
            x.len(),
            y.len()
        )));
    }
    let mut model = SspClassifier::new(config.clone(), vocab.size());
    let mut optimizer = AdamW::new(
        OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        },
        &model.params,
    );
    for step in 0..config.steps {
        let mut rng = rng::stream(config.seed, Domain::Batch, step as u64, 1, 0);
        let n = config.batch_size.min(corpus.len());
        let batch = rand::seq::index::sample(&mut rng, corpus.len(), n).into_vec();
        let step_seed = rng::derive_seed(config.seed, step as u64);
        let results: Vec<(f64, Gradients, usize)> = batch
            .par_iter()
            .map(|&i| {
                let (x, y) = &corpus[i];
                let ids = if config.noise_aware {
                    let u = rng::uniform(step_seed, Domain::Timestep, i as u64, 0, 0);
                    let t = (u * (schedule.steps() + 1) as f64) as usize;
                    corrupt(x, t.min(schedule.steps()), schedule, vocab, RngKey::new(step_seed, i as u64))?.ids
                } else {
                    x.ids().to_vec()
                };
                let (loss, grads) = model.loss_and_grads(&ids, y);
                Ok((loss, grads, ids.len()))
            })
            .collect::<Result<_>>()?;
        let tokens: usize = results.iter().map(|r| r.2).sum();
        let loss: f64 = results.iter().map(|r| r.0).sum::<f64>() / tokens.max(1) as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("classifier loss in batch {step}")));
        }
        let mut grads = sum_gradients(results.iter().map(|r| &r.1), model.params.len());
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v / tokens.max(1) as f64);
        }
        clip_global_norm(&mut grads, 1.0);
        optimizer.update(&mut model.params, &grads, config.learning_rate);
    }
    Ok(model)
}
