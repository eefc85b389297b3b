//! Bidirectional pre-LN transformer `p_theta(x_0 | x_t)` with tied input and
//! output embeddings, an optional timestep embedding, and an optional
//! cross-attention adapter read after the last layer.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{rotary_tables, ParamId, ParamStore, Tape, Var};
use crate::diffusion::TokenSequence;
use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalScheme {
    Rotary,
    LearnedAbsolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub positional_scheme: PositionalScheme,
    pub time_conditioning: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            embed_dim: 128,
            ffn_dim: 512,
            max_len: 256,
            dropout_rate: 0.0,
            positional_scheme: PositionalScheme::Rotary,
            time_conditioning: false,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.num_layers == 0 || self.num_heads == 0 || self.embed_dim == 0 || self.ffn_dim == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        let head_dim = self.embed_dim / self.num_heads;
        if self.positional_scheme == PositionalScheme::Rotary && !head_dim.is_multiple_of(2) {
            return bad(format!("rotary embeddings need an even head dim, got {head_dim}"));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Shape of the conditioning adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub cond_dim: usize,
    pub bottleneck_dim: usize,
}

impl AdapterConfig {
    pub fn new(cond_dim: usize, embed_dim: usize) -> Self {
        Self {
            cond_dim,
            bottleneck_dim: (embed_dim / 4).max(1),
        }
    }
}

/// Conditioner states `E(c)` (`L_c x d_c`) and which rows are valid.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding {
    pub states: Array2<f64>,
    pub valid: Vec<bool>,
}

impl ConditionEmbedding {
    pub fn new(states: Array2<f64>) -> Result<Self> {
        let valid = vec![true; states.nrows()];
        Self::with_mask(states, valid)
    }

    pub fn with_mask(states: Array2<f64>, valid: Vec<bool>) -> Result<Self> {
        if states.nrows() == 0 {
            return Err(Error::InvalidInput("condition needs at least one row".into()));
        }
        if valid.len() != states.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} condition rows but {} validity flags",
                states.nrows(),
                valid.len()
            )));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::InvalidInput("condition has no valid rows".into()));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("condition states".into()));
        }
        Ok(Self { states, valid })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }
}

/// Dropout is active only in training mode; its masks are keyed so a
/// training step is reproducible.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64, sequence: u64, step: u64 },
}

#[derive(Clone, Debug)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    attn: AttnIds,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct AdapterIds {
    config: AdapterConfig,
    ln_attn: (ParamId, ParamId),
    attn: AttnIds,
    ln_ffn: (ParamId, ParamId),
    w_down: ParamId,
    b_down: ParamId,
    w_up: ParamId,
    b_up: ParamId,
}

/// Variables produced by one forward pass on a tape.
pub struct ForwardVars {
    /// Post-final-LN hidden states, `L x d`.
    pub hidden: Var,
    /// `L x |V|` logits.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    vocab_size: usize,
    params: ParamStore,
    tok_emb: ParamId,
    pos_emb: Option<ParamId>,
    time: Option<(ParamId, ParamId)>,
    layers: Vec<LayerIds>,
    final_ln: (ParamId, ParamId),
    out_bias: ParamId,
    adapter: Option<AdapterIds>,
}

const INIT_STD: f64 = 0.02;

struct Init<'a> {
    params: &'a mut ParamStore,
    seed: u64,
}

impl Init<'_> {
    /// `N(0, 0.02)` rounded to `f32`, so a saved checkpoint reproduces it.
    fn normal(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let mut rng = rng::stream(self.seed, Domain::Init, self.params.len() as u64, 0, 0);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let value = Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng) as f32 as f64);
        self.params.add(name, value)
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.params.add(name, Array2::zeros((rows, cols)))
    }

    fn layer_norm(&mut self, prefix: &str, dim: usize) -> (ParamId, ParamId) {
        let g = self.params.add(format!("{prefix}.g"), Array2::ones((1, dim)));
        let b = self.zeros(format!("{prefix}.b"), 1, dim);
        (g, b)
    }

    fn attention(&mut self, prefix: &str, dim: usize, kv_dim: usize, zero_out: bool) -> AttnIds {
        let wq = self.normal(format!("{prefix}.wq"), dim, dim);
        let bq = self.zeros(format!("{prefix}.bq"), 1, dim);
        let wk = self.normal(format!("{prefix}.wk"), kv_dim, dim);
        let bk = self.zeros(format!("{prefix}.bk"), 1, dim);
        let wv = self.normal(format!("{prefix}.wv"), kv_dim, dim);
        let bv = self.zeros(format!("{prefix}.bv"), 1, dim);
        let wo = if zero_out {
            self.zeros(format!("{prefix}.wo"), dim, dim)
        } else {
            self.normal(format!("{prefix}.wo"), dim, dim)
        };
        let bo = self.zeros(format!("{prefix}.bo"), 1, dim);
        AttnIds {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, vocab: &Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut params = ParamStore::new();
        let mut init = Init {
            params: &mut params,
            seed,
        };
        let tok_emb = init.normal("tok_emb".into(), vocab.size(), d);
        let pos_emb = (config.positional_scheme == PositionalScheme::LearnedAbsolute)
            .then(|| init.normal("pos_emb".into(), config.max_len, d));
        let time = config
            .time_conditioning
            .then(|| (init.normal("time.w".into(), d, d), init.zeros("time.b".into(), 1, d)));
        let layers = (0..config.num_layers)
            .map(|i| {
                let p = format!("layers.{i}");
                LayerIds {
                    ln1: init.layer_norm(&format!("{p}.ln1"), d),
                    attn: init.attention(&format!("{p}.attn"), d, d, false),
                    ln2: init.layer_norm(&format!("{p}.ln2"), d),
                    w1: init.normal(format!("{p}.ffn.w1"), d, config.ffn_dim),
                    b1: init.zeros(format!("{p}.ffn.b1"), 1, config.ffn_dim),
                    w2: init.normal(format!("{p}.ffn.w2"), config.ffn_dim, d),
                    b2: init.zeros(format!("{p}.ffn.b2"), 1, d),
                }
            })
            .collect();
        let final_ln = init.layer_norm("final_ln", d);
        let out_bias = init.zeros("out_bias".into(), 1, vocab.size());
        Ok(Self {
            config,
            vocab_size: vocab.size(),
            params,
            tok_emb,
            pos_emb,
            time,
            layers,
            final_ln,
            out_bias,
            adapter: None,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
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

    pub fn adapter_config(&self) -> Option<&AdapterConfig> {
        self.adapter.as_ref().map(|a| &a.config)
    }

    pub fn has_adapter(&self) -> bool {
        self.adapter.is_some()
    }

    /// Inserts one cross-attention + bottleneck FFN block after the last
    /// layer and freezes every existing parameter. Both residual branches
    /// start at zero, so the model's outputs are unchanged.
    pub fn attach_adapter(&mut self, config: AdapterConfig, seed: u64) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::InvalidInput("adapter already attached".into()));
        }
        if config.cond_dim == 0 || config.bottleneck_dim == 0 {
            return Err(Error::InvalidInput("adapter dimensions must be positive".into()));
        }
        for entry in self.params.entries_mut() {
            entry.trainable = false;
        }
        let d = self.config.embed_dim;
        let mut init = Init {
            params: &mut self.params,
            seed,
        };
        let ids = AdapterIds {
            ln_attn: init.layer_norm("adapter.ln_attn", d),
            attn: init.attention("adapter.attn", d, config.cond_dim, true),
            ln_ffn: init.layer_norm("adapter.ln_ffn", d),
            w_down: init.normal("adapter.ffn.w_down".into(), d, config.bottleneck_dim),
            b_down: init.zeros("adapter.ffn.b_down".into(), 1, config.bottleneck_dim),
            w_up: init.zeros("adapter.ffn.w_up".into(), config.bottleneck_dim, d),
            b_up: init.zeros("adapter.ffn.b_up".into(), 1, d),
            config,
        };
        self.adapter = Some(ids);
        Ok(())
    }

    fn check_input(&self, ids: &[usize], cond: Option<&ConditionEmbedding>) -> Result<()> {
        if ids.len() > self.config.max_len {
            return Err(Error::TooLong {
                len: ids.len(),
                max_len: self.config.max_len,
            });
        }
        if let Some(pos) = ids.iter().position(|&id| id >= self.vocab_size) {
            return Err(Error::InvalidInput(format!("token id {} at position {pos} out of range", ids[pos])));
        }
        if let (Some(adapter), Some(cond)) = (&self.adapter, cond) {
            if cond.states.ncols() != adapter.config.cond_dim {
                return Err(Error::ShapeMismatch(format!(
                    "condition width {} but adapter expects {}",
                    cond.states.ncols(),
                    adapter.config.cond_dim
                )));
            }
        }
        Ok(())
    }

    /// Records a forward pass on `tape`. `t` is read only when time
    /// conditioning is enabled; `cond` only when an adapter is attached.
    pub fn build<'a>(
        &self,
        tape: &mut Tape<'a>,
        ids: &[usize],
        t: usize,
        cond: Option<&ConditionEmbedding>,
        mode: Mode,
    ) -> Result<ForwardVars> {
        self.check_input(ids, cond)?;
        let len = ids.len();
        let tok_emb = tape.param(self.tok_emb);
        let mut h = tape.gather(tok_emb, ids);
        if let Some(pos) = self.pos_emb {
            let table = tape.param(pos);
            let positions: Vec<usize> = (0..len).collect();
            let p = tape.gather(table, &positions);
            h = tape.add(h, p);
        }
        if let Some((w, b)) = self.time {
            let feats = tape.constant(timestep_features(t, self.config.embed_dim));
            let (w, b) = (tape.param(w), tape.param(b));
            let e = tape.linear(feats, w, b);
            h = tape.add_row(h, e);
        }
        let rot = (self.config.positional_scheme == PositionalScheme::Rotary)
            .then(|| rotary_tables(0..len, self.config.head_dim()));
        let mut dropout = DropoutSource {
            mode,
            rate: self.config.dropout_rate,
            site: 0,
        };
        for layer in &self.layers {
            let x = layer_norm(tape, h, layer.ln1);
            let a = self.attention(tape, x, x, &layer.attn, rot.as_ref(), rot.as_ref(), None);
            let a = dropout.apply(tape, a);
            h = tape.add(h, a);
            let x = layer_norm(tape, h, layer.ln2);
            let (w1, b1) = (tape.param(layer.w1), tape.param(layer.b1));
            let f = tape.linear(x, w1, b1);
            let f = tape.gelu(f);
            let (w2, b2) = (tape.param(layer.w2), tape.param(layer.b2));
            let f = tape.linear(f, w2, b2);
            let f = dropout.apply(tape, f);
            h = tape.add(h, f);
        }
        if let (Some(adapter), Some(cond)) = (&self.adapter, cond) {
            h = self.adapter_block(tape, h, adapter, cond, rot.as_ref(), &mut dropout);
        }
        let hidden = layer_norm(tape, h, self.final_ln);
        let logits = tape.matmul_t(hidden, tok_emb);
        let out_bias = tape.param(self.out_bias);
        let logits = tape.add_row(logits, out_bias);
        Ok(ForwardVars { hidden, logits })
    }

    fn adapter_block(
        &self,
        tape: &mut Tape<'_>,
        h: Var,
        adapter: &AdapterIds,
        cond: &ConditionEmbedding,
        rot_q: Option<&(Array2<f64>, Array2<f64>)>,
        dropout: &mut DropoutSource,
    ) -> Var {
        let len = tape.value(h).nrows();
        let rot_k = rot_q.map(|_| rotary_tables(0..cond.len(), self.config.head_dim()));
        let mask = Array2::from_shape_fn((len, cond.len()), |(_, j)| {
            if cond.valid[j] {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        });
        let states = tape.constant(cond.states.clone());
        let x = layer_norm(tape, h, adapter.ln_attn);
        let a = self.attention(tape, x, states, &adapter.attn, rot_q, rot_k.as_ref(), Some(mask));
        let a = dropout.apply(tape, a);
        let h = tape.add(h, a);
        let x = layer_norm(tape, h, adapter.ln_ffn);
        let (w, b) = (tape.param(adapter.w_down), tape.param(adapter.b_down));
        let f = tape.linear(x, w, b);
        let f = tape.gelu(f);
        let (w, b) = (tape.param(adapter.w_up), tape.param(adapter.b_up));
        let f = tape.linear(f, w, b);
        let f = dropout.apply(tape, f);
        tape.add(h, f)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape<'_>,
        q_in: Var,
        kv_in: Var,
        ids: &AttnIds,
        rot_q: Option<&(Array2<f64>, Array2<f64>)>,
        rot_k: Option<&(Array2<f64>, Array2<f64>)>,
        mask: Option<Array2<f64>>,
    ) -> Var {
        let (wq, bq) = (tape.param(ids.wq), tape.param(ids.bq));
        let (wk, bk) = (tape.param(ids.wk), tape.param(ids.bk));
        let (wv, bv) = (tape.param(ids.wv), tape.param(ids.bv));
        let mut q = tape.linear(q_in, wq, bq);
        let mut k = tape.linear(kv_in, wk, bk);
        let v = tape.linear(kv_in, wv, bv);
        if let (Some((cq, sq)), Some((ck, sk))) = (rot_q, rot_k) {
            q = tape.rotary(q, cq.clone(), sq.clone());
            k = tape.rotary(k, ck.clone(), sk.clone());
        }
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mask = mask.map(|m| tape.constant(m));
        let heads: Vec<Var> = (0..self.config.num_heads)
            .map(|head| {
                let qh = tape.slice_cols(q, head * dh, dh);
                let kh = tape.slice_cols(k, head * dh, dh);
                let vh = tape.slice_cols(v, head * dh, dh);
                let s = tape.matmul_t(qh, kh);
                let mut s = tape.scale(s, scale);
                if let Some(m) = mask {
                    s = tape.add(s, m);
                }
                let p = tape.softmax(s);
                tape.matmul(p, vh)
            })
            .collect();
        let o = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let (wo, bo) = (tape.param(ids.wo), tape.param(ids.bo));
        tape.linear(o, wo, bo)
    }

    /// Logits `L x |V|` for the token ids of `x_t`.
    pub fn forward(
        &self,
        ids: &[usize],
        t: usize,
        cond: Option<&ConditionEmbedding>,
        mode: Mode,
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::new(&self.params);
        let out = self.build(&mut tape, ids, t, cond, mode)?;
        let logits = tape.value(out.logits);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser logits".into()));
        }
        Ok(logits.clone())
    }

    /// Final hidden states (before the output projection) of a clean
    /// sequence at `t = 0`.
    pub fn embed(&self, x: &TokenSequence) -> Result<Array2<f64>> {
        let mut tape = Tape::new(&self.params);
        let out = self.build(&mut tape, x.ids(), 0, None, Mode::Eval)?;
        Ok(tape.value(out.hidden).clone())
    }
}

fn layer_norm(tape: &mut Tape<'_>, x: Var, (g, b): (ParamId, ParamId)) -> Var {
    let (g, b) = (tape.param(g), tape.param(b));
    tape.layer_norm(x, g, b)
}

/// Sinusoidal features of a timestep, `1 x dim`.
fn timestep_features(t: usize, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    Array2::from_shape_fn((1, dim), |(_, j)| {
        let k = j % half.max(1);
        let freq = 10_000f64.powf(-(k as f64) / half.max(1) as f64);
        let angle = t as f64 * freq;
        if j < half {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

struct DropoutSource {
    mode: Mode,
    rate: f64,
    site: u64,
}

impl DropoutSource {
    fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Var {
        let Mode::Train { seed, sequence, step } = self.mode else {
            return x;
        };
        if self.rate == 0.0 {
            return x;
        }
        self.site += 1;
        let mut rng = rng::stream(seed, Domain::Dropout, sequence, step, self.site);
        let keep = 1.0 - self.rate;
        let shape = tape.value(x).raw_dim();
        let mask = Array2::from_shape_simple_fn(shape, || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        tape.dropout(x, mask)
    }
}
