//! Brute-force reference computations over tiny state spaces.
//!
//! Everything here is built from the schedule's `alpha`, `beta` and `q_noise`
//! by explicit kernel products, Bayes' rule and exhaustive enumeration. None
//! of it calls the production kernels in `diffusion`, `training` or
//! `guidance`; tests compare the two routes.
//!
//! Sums use Neumaier compensation; `f64` is the widest native float.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::schedule::{MixtureConstants, NoiseSchedule, Stationary};
use crate::vocab::Vocab;

/// Largest `|V|^L` the oracle will enumerate.
pub const SUPPORT_LIMIT: usize = 100_000;

/// Logits `L x |V|` for a state at a timestep.
pub type Predictor<'a> = dyn Fn(&[usize], usize) -> Result<Array2<f64>> + 'a;

/// Compensated sum.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let s = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - s) + v;
        } else {
            comp += (v - s) + sum;
        }
        sum = s;
    }
    sum + comp
}

/// Exhaustive map from full sequence states to probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct EnumeratedDistribution {
    probs: BTreeMap<Vec<usize>, f64>,
}

impl EnumeratedDistribution {
    pub fn point(outcome: Vec<usize>) -> Self {
        let mut probs = BTreeMap::new();
        probs.insert(outcome, 1.0);
        Self { probs }
    }

    /// Independent positions; each entry lists `(token, probability)` pairs.
    /// Zero-probability outcomes are dropped.
    pub fn product(positions: &[Vec<(usize, f64)>]) -> Self {
        let mut probs = BTreeMap::new();
        let mut outcome = vec![0; positions.len()];
        fn walk(
            positions: &[Vec<(usize, f64)>],
            i: usize,
            p: f64,
            outcome: &mut Vec<usize>,
            probs: &mut BTreeMap<Vec<usize>, f64>,
        ) {
            if p == 0.0 {
                return;
            }
            if i == positions.len() {
                *probs.entry(outcome.clone()).or_insert(0.0) += p;
                return;
            }
            for &(tok, q) in &positions[i] {
                outcome[i] = tok;
                walk(positions, i + 1, p * q, outcome, probs);
            }
        }
        walk(positions, 0, 1.0, &mut outcome, &mut probs);
        Self { probs }
    }

    pub fn prob(&self, outcome: &[usize]) -> f64 {
        self.probs.get(outcome).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[usize], f64)> {
        self.probs.iter().map(|(k, &v)| (k.as_slice(), v))
    }

    pub fn total(&self) -> f64 {
        exact_sum(self.probs.values().copied())
    }

    /// `E[f(x)]`.
    pub fn expect(&self, mut f: impl FnMut(&[usize]) -> Result<f64>) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.probs.len());
        for (x, &p) in &self.probs {
            terms.push(p * f(x)?);
        }
        Ok(exact_sum(terms))
    }

    /// Largest entrywise difference over the union of supports.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.probs
            .keys()
            .chain(other.probs.keys())
            .map(|k| (self.prob(k) - other.prob(k)).abs())
            .fold(0.0, f64::max)
    }

    /// Single-position marginal over `size` tokens.
    pub fn marginal(&self, pos: usize, size: usize) -> Vec<f64> {
        let mut cols = vec![Vec::new(); size];
        for (x, &p) in &self.probs {
            cols[x[pos]].push(p);
        }
        cols.into_iter().map(exact_sum).collect()
    }
}

fn check_support(vocab_size: usize, len: usize) -> Result<()> {
    let states = (vocab_size as f64).powi(len as i32);
    if states > SUPPORT_LIMIT as f64 {
        return Err(Error::SupportTooLarge {
            states: if states >= usize::MAX as f64 { usize::MAX } else { states as usize },
            limit: SUPPORT_LIMIT,
        });
    }
    Ok(())
}

fn check_ids(ids: &[usize], vocab: &Vocab) -> Result<()> {
    if let Some(&bad) = ids.iter().find(|&&id| id >= vocab.size()) {
        return Err(Error::InvalidInput(format!("token id {bad} out of range")));
    }
    Ok(())
}

/// One-step kernel, `K[i][j] = q(x_t = j | x_{t-1} = i)`.
pub fn kernel_matrix(t: usize, schedule: &NoiseSchedule) -> Result<Vec<Vec<f64>>> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::TimestepOutOfRange { t, max: schedule.steps() });
    }
    let beta = schedule.betas()[t - 1];
    let q = schedule.q_noise();
    let n = q.len();
    Ok((0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { beta + (1.0 - beta) * q[j] } else { (1.0 - beta) * q[j] })
                .collect()
        })
        .collect())
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = b[0].len();
    a.iter()
        .map(|row| (0..n).map(|j| exact_sum(row.iter().zip(b).map(|(&x, brow)| x * brow[j]))).collect())
        .collect()
}

/// `K_1 K_2 ... K_t`, so row `i` is `q(x_t | x_0 = i)` by Chapman–Kolmogorov.
pub fn composed_kernel(t: usize, schedule: &NoiseSchedule) -> Result<Vec<Vec<f64>>> {
    if t > schedule.steps() {
        return Err(Error::TimestepOutOfRange { t, max: schedule.steps() });
    }
    let n = schedule.q_noise().len();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for s in 1..=t {
        m = matmul(&m, &kernel_matrix(s, schedule)?);
    }
    Ok(m)
}

fn nonzero(row: &[f64]) -> Vec<(usize, f64)> {
    row.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(j, &p)| (j, p)).collect()
}

/// Exact distribution of `x_t` given `x_0`; special tokens stay put.
pub fn enumerate_forward(
    x0: &[usize],
    t: usize,
    schedule: &NoiseSchedule,
    vocab: &Vocab,
) -> Result<EnumeratedDistribution> {
    check_ids(x0, vocab)?;
    check_support(vocab.size(), x0.len())?;
    let m = composed_kernel(t, schedule)?;
    let positions: Vec<Vec<(usize, f64)>> = x0
        .iter()
        .map(|&tok| {
            if vocab.is_special(tok) {
                vec![(tok, 1.0)]
            } else {
                nonzero(&m[tok])
            }
        })
        .collect();
    Ok(EnumeratedDistribution::product(&positions))
}

/// Bayes posterior `q(x_{t-1} = . | x_t = cur, x_0 = target)` for one
/// position.
pub fn posterior_position(cur: usize, target: usize, t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let k = kernel_matrix(t, schedule)?;
    let m = composed_kernel(t - 1, schedule)?;
    let n = k.len();
    if cur >= n || target >= n {
        return Err(Error::InvalidInput("token id out of range".into()));
    }
    let w: Vec<f64> = (0..n).map(|j| k[j][cur] * m[target][j]).collect();
    let z = exact_sum(w.iter().copied());
    if z <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "q(x_t = {cur} | x_0 = {target}) is zero at t = {t}; posterior undefined"
        )));
    }
    Ok(w.into_iter().map(|v| v / z).collect())
}

/// Exact `q(x_{t-1} | x_t, x_0)` over full sequences.
pub fn enumerate_posterior(
    xt: &[usize],
    x0: &[usize],
    t: usize,
    schedule: &NoiseSchedule,
    vocab: &Vocab,
) -> Result<EnumeratedDistribution> {
    if xt.len() != x0.len() {
        return Err(Error::ShapeMismatch(format!("x_t has length {}, x_0 has {}", xt.len(), x0.len())));
    }
    check_ids(xt, vocab)?;
    check_ids(x0, vocab)?;
    check_support(vocab.size(), x0.len())?;
    let mut positions = Vec::with_capacity(x0.len());
    for (i, (&cur, &target)) in xt.iter().zip(x0).enumerate() {
        if vocab.is_special(target) {
            if cur != target {
                return Err(Error::InvalidInput(format!(
                    "position {i}: special token in x_0 cannot change"
                )));
            }
            positions.push(vec![(target, 1.0)]);
            continue;
        }
        let post = posterior_position(cur, target, t, schedule)
            .map_err(|e| Error::InvalidInput(format!("position {i}: {e}")))?;
        positions.push(nonzero(&post));
    }
    Ok(EnumeratedDistribution::product(&positions))
}

/// Softmax of each row over the data tokens.
fn data_probs(logits: &Array2<f64>, vocab: &Vocab) -> Vec<Vec<f64>> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let m = vocab.data_ids().iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let z = exact_sum(vocab.data_ids().iter().map(|&j| (row[j] - m).exp()));
            let mut p = vec![0.0; row.len()];
            for &j in vocab.data_ids() {
                p[j] = (row[j] - m).exp() / z;
            }
            p
        })
        .collect()
}

fn predict(model: &Predictor, xt: &[usize], t: usize, vocab: &Vocab) -> Result<Vec<Vec<f64>>> {
    let logits = model(xt, t)?;
    if logits.dim() != (xt.len(), vocab.size()) {
        return Err(Error::ShapeMismatch(format!(
            "predictor returned {:?}, expected ({}, {})",
            logits.dim(),
            xt.len(),
            vocab.size()
        )));
    }
    Ok(data_probs(&logits, vocab))
}

/// Per-timestep terms of the bound, each an exact expectation over `x_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboTerms {
    /// `J_t` as the KL between the posterior and the model, both augmented
    /// with the mixture indicators. Index `t - 1`.
    pub kl_form: Vec<f64>,
    /// `loss_weight(t) * E[sum_i b_i * -log p(x0_i | x_t)]`. Index `t - 1`.
    pub ce_form: Vec<f64>,
    /// `-E[log p(x_0 | x_1)]`, which is also `J_1`.
    pub reconstruction: f64,
    /// `KL(q(x_T | x_0) || q_noise^L)`.
    pub prior: f64,
}

impl ElboTerms {
    /// Upper bound on `-log p(x_0)`.
    pub fn negative_elbo(&self) -> f64 {
        self.prior + exact_sum(self.kl_form.iter().copied())
    }
}

/// Mixture weight of the "stay/reveal" component, recovered from the Bayes
/// posterior. For `cur == target` the posterior is
/// `l1 * onehot(cur) + (1 - l1) * q_noise`; otherwise it is
/// `l2 * onehot(target) + (1 - l2) * (beta * onehot(cur) + (1 - beta) * q_noise)`.
fn recovered_weight(post: &[f64], cur: usize, target: usize, beta: f64, q: &[f64]) -> Result<f64> {
    if cur == target {
        let j = (0..q.len())
            .filter(|&j| j != cur && q[j] > 0.0)
            .max_by(|&a, &b| q[a].total_cmp(&q[b]));
        Ok(match j {
            Some(j) => 1.0 - post[j] / q[j],
            // q_noise is a point mass on cur: both components coincide.
            None => 1.0,
        })
    } else {
        let rest = beta + (1.0 - beta) * q[cur];
        if rest <= 0.0 {
            return Ok(1.0);
        }
        Ok(1.0 - post[cur] / rest)
    }
}

/// Exact terms of the bound for one clean sequence.
///
/// The model side shares the indicator variables with the posterior and
/// differs only where the posterior reveals `x_0`, where it substitutes the
/// predicted distribution. KLs are summed over every joint
/// `(indicators, x_{t-1})` outcome, never via the closed form.
pub fn exact_elbo_terms(
    x0: &[usize],
    model: &Predictor,
    schedule: &NoiseSchedule,
    constants: &MixtureConstants,
    vocab: &Vocab,
) -> Result<ElboTerms> {
    check_ids(x0, vocab)?;
    let q = schedule.q_noise();
    let n = vocab.size();
    let mut kl_form = Vec::with_capacity(schedule.steps());
    let mut ce_form = Vec::with_capacity(schedule.steps());
    let mut reconstruction = 0.0;
    for t in 1..=schedule.steps() {
        let beta = schedule.betas()[t - 1];
        let forward = enumerate_forward(x0, t, schedule, vocab)?;
        let kl = forward.expect(|xt| {
            let probs = predict(model, xt, t, vocab)?;
            // per position: (q, p) over joint indicator/token outcomes
            let mut positions: Vec<Vec<(f64, f64)>> = Vec::with_capacity(xt.len());
            for (i, (&cur, &target)) in xt.iter().zip(x0).enumerate() {
                if vocab.is_special(target) {
                    positions.push(vec![(1.0, 1.0)]);
                    continue;
                }
                let post = posterior_position(cur, target, t, schedule)?;
                let w = recovered_weight(&post, cur, target, beta, q)?;
                let mut outcomes = Vec::new();
                if cur == target {
                    outcomes.push((w, w));
                    for j in 0..n {
                        outcomes.push(((1.0 - w) * q[j], (1.0 - w) * q[j]));
                    }
                } else {
                    for j in 0..n {
                        outcomes.push((w * f64::from(u8::from(j == target)), w * probs[i][j]));
                    }
                    for j in 0..n {
                        let r = if j == cur { beta } else { 0.0 } + (1.0 - beta) * q[j];
                        outcomes.push(((1.0 - w) * r, (1.0 - w) * r));
                    }
                }
                outcomes.retain(|&(qp, _)| qp > 0.0);
                positions.push(outcomes);
            }
            joint_kl(&positions)
        })?;
        let ce = forward.expect(|xt| {
            let probs = predict(model, xt, t, vocab)?;
            Ok(exact_sum(
                xt.iter().zip(x0).enumerate().filter(|(_, (c, x))| c != x).map(|(i, (_, &x))| -probs[i][x].ln()),
            ))
        })?;
        if t == 1 {
            reconstruction = ce;
        }
        kl_form.push(kl);
        ce_form.push(constants.loss_weight(t) * ce);
    }
    let last = enumerate_forward(x0, schedule.steps(), schedule, vocab)?;
    let prior = last.expect(|xt| {
        Ok(exact_sum(xt.iter().zip(x0).map(|(&c, &x)| {
            if vocab.is_special(x) {
                0.0
            } else {
                let m = composed_kernel(schedule.steps(), schedule).expect("checked");
                (m[x][c] / q[c]).ln()
            }
        })))
    })?;
    Ok(ElboTerms { kl_form, ce_form, reconstruction, prior })
}

/// `sum Q log(Q / P)` over the product of per-position outcome lists.
fn joint_kl(positions: &[Vec<(f64, f64)>]) -> Result<f64> {
    let mut terms = Vec::new();
    fn walk(positions: &[Vec<(f64, f64)>], i: usize, qp: f64, pp: f64, terms: &mut Vec<f64>) {
        if i == positions.len() {
            terms.push(qp * (qp.ln() - pp.ln()));
            return;
        }
        for &(q, p) in &positions[i] {
            walk(positions, i + 1, qp * q, pp * p, terms);
        }
    }
    walk(positions, 0, 1.0, 1.0, &mut terms);
    let kl = exact_sum(terms);
    if !kl.is_finite() {
        return Err(Error::NonFinite("model assigns zero mass where the posterior does not".into()));
    }
    Ok(kl)
}

/// Exact `-log p(x_0)` under the absorbing reverse chain
/// `p(x_{t-1} | x_t) = sum_x p_model(x | x_t) q(x_{t-1} | x_t, x)` started
/// from the all-mask state. Unmasked positions are carried over.
pub fn exact_nll(x0: &[usize], model: &Predictor, schedule: &NoiseSchedule, vocab: &Vocab) -> Result<f64> {
    if schedule.stationary() != Stationary::Absorbing {
        return Err(Error::InvalidInput("exact likelihood is only defined for the absorbing chain".into()));
    }
    check_ids(x0, vocab)?;
    check_support(vocab.size(), x0.len())?;
    let mask = vocab.mask_id();
    let start: Vec<usize> = x0.iter().map(|&x| if vocab.is_special(x) { x } else { mask }).collect();
    let mut current = BTreeMap::new();
    current.insert(start, 1.0f64);
    for t in (1..=schedule.steps()).rev() {
        let mut next: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
        for (state, p) in &current {
            let probs = predict(model, state, t, vocab)?;
            let mut positions = Vec::with_capacity(state.len());
            for (i, &cur) in state.iter().enumerate() {
                if cur != mask {
                    positions.push(vec![(cur, 1.0)]);
                    continue;
                }
                let mut row = vec![Vec::new(); vocab.size()];
                for &x in vocab.data_ids() {
                    let post = posterior_position(mask, x, t, schedule)?;
                    for (j, &pj) in post.iter().enumerate() {
                        row[j].push(probs[i][x] * pj);
                    }
                }
                let row: Vec<f64> = row.into_iter().map(exact_sum).collect();
                positions.push(nonzero(&row));
            }
            for (y, py) in EnumeratedDistribution::product(&positions).iter() {
                next.entry(y.to_vec()).or_default().push(p * py);
            }
        }
        current = next.into_iter().map(|(k, v)| (k, exact_sum(v))).collect();
    }
    let p = current.get(x0).copied().unwrap_or(0.0);
    Ok(-p.ln())
}

/// `E[sum_i b_i * -log p(x0_i | x)]` when each data position is masked
/// independently with probability `ratio`.
pub fn expected_masked_ce(
    x0: &[usize],
    ratio: f64,
    t: usize,
    model: &Predictor,
    vocab: &Vocab,
) -> Result<f64> {
    check_ids(x0, vocab)?;
    check_support(vocab.size(), x0.len())?;
    let positions: Vec<Vec<(usize, f64)>> = x0
        .iter()
        .map(|&x| {
            if vocab.is_special(x) {
                vec![(x, 1.0)]
            } else {
                vec![(x, 1.0 - ratio), (vocab.mask_id(), ratio)]
            }
        })
        .collect();
    EnumeratedDistribution::product(&positions).expect(|x| {
        let probs = predict(model, x, t, vocab)?;
        Ok(exact_sum(
            x.iter().zip(x0).enumerate().filter(|(_, (c, o))| c != o).map(|(i, (_, &o))| -probs[i][o].ln()),
        ))
    })
}

/// Product distribution whose positions are the data-token softmax of
/// `logits`.
pub fn enumerate_logits(logits: &Array2<f64>, vocab: &Vocab) -> Result<EnumeratedDistribution> {
    if logits.ncols() != vocab.size() {
        return Err(Error::ShapeMismatch(format!("logits have {} columns", logits.ncols())));
    }
    check_support(vocab.size(), logits.nrows())?;
    let positions: Vec<Vec<(usize, f64)>> = data_probs(logits, vocab).iter().map(|row| nonzero(row)).collect();
    Ok(EnumeratedDistribution::product(&positions))
}

/// `p(x) exp(eta * sum_i g[i, x_i]) / Z` over the whole support.
pub fn enumerate_guided(base: &EnumeratedDistribution, g: &Array2<f64>, eta: f64) -> EnumeratedDistribution {
    let log_w: Vec<(Vec<usize>, f64)> = base
        .iter()
        .map(|(x, p)| {
            let dot = exact_sum(x.iter().enumerate().map(|(i, &tok)| g[[i, tok]]));
            (x.to_vec(), p.ln() + eta * dot)
        })
        .collect();
    let m = log_w.iter().map(|(_, w)| *w).fold(f64::NEG_INFINITY, f64::max);
    let z = exact_sum(log_w.iter().map(|(_, w)| (w - m).exp()));
    let probs = log_w.into_iter().map(|(x, w)| (x, (w - m).exp() / z)).collect();
    EnumeratedDistribution { probs }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ab() -> Vocab {
        Vocab::new(&["A", "B"]).unwrap()
    }

    #[test]
    fn forward_example_half_alpha() {
        let vocab = ab();
        let schedule = NoiseSchedule::linear(2, Stationary::Absorbing, &vocab).unwrap();
        let (a, b, x) = (vocab.id_of("A").unwrap(), vocab.id_of("B").unwrap(), vocab.mask_id());
        let d = enumerate_forward(&[a, b], 1, &schedule, &vocab).unwrap();
        for s in [[a, b], [a, x], [x, b], [x, x]] {
            assert!((d.prob(&s) - 0.25).abs() < 1e-15);
        }
        assert_eq!(d.len(), 4);
        assert_eq!(enumerate_forward(&[a, b], 0, &schedule, &vocab).unwrap(), EnumeratedDistribution::point(vec![a, b]));
        assert_eq!(enumerate_forward(&[a, b], 2, &schedule, &vocab).unwrap(), EnumeratedDistribution::point(vec![x, x]));
    }

    #[test]
    fn support_limit() {
        let vocab = Vocab::amino_acids();
        let schedule = NoiseSchedule::linear(2, Stationary::Absorbing, &vocab).unwrap();
        let x0 = vec![vocab.data_ids()[0]; 4];
        assert!(matches!(
            enumerate_forward(&x0, 1, &schedule, &vocab),
            Err(Error::SupportTooLarge { .. })
        ));
    }

    #[test]
    fn impossible_posterior_is_rejected() {
        let vocab = ab();
        let schedule = NoiseSchedule::linear(4, Stationary::Absorbing, &vocab).unwrap();
        let (a, b) = (vocab.id_of("A").unwrap(), vocab.id_of("B").unwrap());
        let err = enumerate_posterior(&[b], &[a], 2, &schedule, &vocab).unwrap_err();
        assert!(err.to_string().contains("posterior undefined"), "{err}");
    }

    #[test]
    fn perfect_model_has_zero_terms() {
        let vocab = ab();
        let schedule = NoiseSchedule::linear(3, Stationary::Absorbing, &vocab).unwrap();
        let constants = schedule.mixture_constants().unwrap();
        let x0 = [vocab.id_of("A").unwrap(), vocab.id_of("B").unwrap()];
        let model = |xt: &[usize], _t: usize| {
            let mut l = Array2::from_elem((xt.len(), vocab.size()), -800.0);
            for (i, &x) in x0.iter().enumerate() {
                l[[i, x]] = 0.0;
            }
            Ok(l)
        };
        let terms = exact_elbo_terms(&x0, &model, &schedule, &constants, &vocab).unwrap();
        assert!(terms.kl_form.iter().chain(&terms.ce_form).all(|v| v.abs() < 1e-12), "{terms:?}");
        assert_eq!(terms.prior, 0.0);
    }

    #[test]
    fn uniform_model_ce_is_expected_count_times_log_k() {
        let vocab = ab();
        let schedule = NoiseSchedule::linear(3, Stationary::Absorbing, &vocab).unwrap();
        let constants = schedule.mixture_constants().unwrap();
        let x0 = [vocab.id_of("A").unwrap(), vocab.id_of("B").unwrap()];
        let model = |xt: &[usize], _t: usize| Ok(Array2::zeros((xt.len(), vocab.size())));
        let terms = exact_elbo_terms(&x0, &model, &schedule, &constants, &vocab).unwrap();
        for t in 1..=3 {
            let expected = constants.loss_weight(t) * 2.0 * (t as f64 / 3.0) * 2f64.ln();
            assert!((terms.ce_form[t - 1] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn guided_with_zero_eta_is_base() {
        let vocab = ab();
        let logits = Array2::from_shape_fn((2, vocab.size()), |(i, j)| (i * 3 + j) as f64 * 0.1);
        let base = enumerate_logits(&logits, &vocab).unwrap();
        let g = Array2::from_shape_fn((2, vocab.size()), |(i, j)| (i + 2 * j) as f64);
        assert!(enumerate_guided(&base, &g, 0.0).max_abs_diff(&base) < 1e-15);
        assert!((base.total() - 1.0).abs() < 1e-15);
    }
}
