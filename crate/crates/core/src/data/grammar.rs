//! A seedable first-order Markov grammar over the data tokens with a
//! deterministic token-to-class labelling.
//!
//! Every token has two successors: a major one (a single cycle through all
//! tokens) and a minor one biased toward a few hub tokens, which makes the
//! stationary distribution non-uniform.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::TokenSequence;
use crate::error::{Error, Result};
use crate::guidance::{Annotation, LABELS};
use crate::rng::{self, Domain};
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrammarConfig {
    pub seed: u64,
    /// Probability of the major successor.
    pub major_prob: f64,
    pub hubs: usize,
    /// Probability that a minor successor is drawn from the hubs.
    pub hub_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            major_prob: 0.9,
            hubs: 3,
            hub_prob: 0.6,
            min_len: 32,
            max_len: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticGrammar {
    config: GrammarConfig,
    data_ids: Vec<usize>,
    /// Vocabulary id to data index.
    index_of: Vec<Option<usize>>,
    /// Row-stochastic `K x K` matrix over data indices.
    transition: Vec<Vec<f64>>,
    initial: Vec<f64>,
    class_of: Vec<usize>,
}

impl SyntheticGrammar {
    pub fn new(config: GrammarConfig, vocab: &Vocab) -> Result<Self> {
        let k = vocab.num_data();
        if k < 3 {
            return Err(Error::InvalidInput("grammar needs at least 3 data tokens".into()));
        }
        if !(config.major_prob > 0.0 && config.major_prob < 1.0) {
            return Err(Error::InvalidInput(format!("major_prob {} outside (0, 1)", config.major_prob)));
        }
        if !(0.0..=1.0).contains(&config.hub_prob) || config.hubs == 0 || config.hubs > k {
            return Err(Error::InvalidInput("invalid hub configuration".into()));
        }
        if config.min_len == 0 || config.min_len > config.max_len {
            return Err(Error::InvalidInput(format!(
                "invalid length range {}..={}",
                config.min_len, config.max_len
            )));
        }
        let mut rng = rng::stream(config.seed, Domain::Corpus, u64::MAX, 0, 0);
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        let mut major = vec![0; k];
        for i in 0..k {
            major[order[i]] = order[(i + 1) % k];
        }
        let mut hubs: Vec<usize> = (0..k).collect();
        hubs.shuffle(&mut rng);
        hubs.truncate(config.hubs);
        let mut transition = vec![vec![0.0; k]; k];
        for a in 0..k {
            let minor = loop {
                let c = if rng.random::<f64>() < config.hub_prob {
                    hubs[rng.random_range(0..hubs.len())]
                } else {
                    rng.random_range(0..k)
                };
                if c != a && c != major[a] {
                    break c;
                }
            };
            transition[a][major[a]] = config.major_prob;
            transition[a][minor] = 1.0 - config.major_prob;
        }
        let mut classes: Vec<usize> = (0..k).collect();
        classes.shuffle(&mut rng);
        let mut class_of = vec![0; k];
        for (rank, &tok) in classes.iter().enumerate() {
            class_of[tok] = rank * LABELS.len() / k;
        }
        let initial = stationary(&transition);
        let mut index_of = vec![None; vocab.size()];
        for (i, &id) in vocab.data_ids().iter().enumerate() {
            index_of[id] = Some(i);
        }
        Ok(Self {
            config,
            data_ids: vocab.data_ids().to_vec(),
            index_of,
            transition,
            initial,
            class_of,
        })
    }

    pub fn config(&self) -> &GrammarConfig {
        &self.config
    }

    /// `P(next = b | current = a)` for vocabulary ids; 0 for non-data ids.
    pub fn transition_prob(&self, a: usize, b: usize) -> f64 {
        match (self.index(a), self.index(b)) {
            (Some(i), Some(j)) => self.transition[i][j],
            _ => 0.0,
        }
    }

    /// Stationary distribution over data indices (also the start distribution).
    pub fn stationary(&self) -> &[f64] {
        &self.initial
    }

    pub fn data_ids(&self) -> &[usize] {
        &self.data_ids
    }

    fn index(&self, id: usize) -> Option<usize> {
        self.index_of.get(id).copied().flatten()
    }

    /// Class label of a data token.
    pub fn label_of(&self, id: usize) -> Option<usize> {
        self.index(id).map(|i| self.class_of[i])
    }

    /// Labels of a sequence of data tokens.
    pub fn labels(&self, ids: &[usize]) -> Result<Annotation> {
        ids.iter()
            .map(|&id| {
                self.label_of(id)
                    .ok_or_else(|| Error::InvalidInput(format!("token id {id} has no class")))
            })
            .collect::<Result<Vec<_>>>()
            .and_then(Annotation::new)
    }

    /// True if every token is a data token and every transition has positive
    /// probability.
    pub fn is_valid(&self, ids: &[usize]) -> bool {
        !ids.is_empty()
            && ids.iter().all(|&id| self.index(id).is_some())
            && ids.windows(2).all(|w| self.transition_prob(w[0], w[1]) > 0.0)
    }

    /// Fraction of valid transitions, a softer score than [`Self::is_valid`].
    pub fn transition_validity(&self, ids: &[usize]) -> f64 {
        if ids.len() < 2 {
            return if self.is_valid(ids) { 1.0 } else { 0.0 };
        }
        let ok = ids.windows(2).filter(|w| self.transition_prob(w[0], w[1]) > 0.0).count();
        ok as f64 / (ids.len() - 1) as f64
    }

    /// Sequence number `index` of the stream keyed by `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> (TokenSequence, Annotation) {
        let mut rng = rng::stream(seed, Domain::Corpus, index, 0, 0);
        let len = rng.random_range(self.config.min_len..=self.config.max_len);
        let mut cur = rng::categorical(&self.initial, rng.random());
        let mut idx = Vec::with_capacity(len);
        idx.push(cur);
        while idx.len() < len {
            cur = rng::categorical(&self.transition[cur], rng.random());
            idx.push(cur);
        }
        let ids: Vec<usize> = idx.iter().map(|&i| self.data_ids[i]).collect();
        let labels = Annotation::new(idx.iter().map(|&i| self.class_of[i]).collect()).expect("labels in range");
        (TokenSequence::from_valid(ids), labels)
    }

    /// `n` independent samples.
    pub fn generate_corpus(&self, n: usize, seed: u64) -> Result<Vec<(TokenSequence, Annotation)>> {
        if n == 0 {
            return Err(Error::InvalidInput("corpus size must be at least 1".into()));
        }
        Ok((0..n as u64).map(|i| self.sample(seed, i)).collect())
    }
}

fn stationary(transition: &[Vec<f64>]) -> Vec<f64> {
    let k = transition.len();
    let mut pi = vec![1.0 / k as f64; k];
    for _ in 0..10_000 {
        let mut next = vec![0.0; k];
        for (a, row) in transition.iter().enumerate() {
            for (b, &p) in row.iter().enumerate() {
                next[b] += pi[a] * p;
            }
        }
        // lazy step keeps the iteration convergent on periodic chains
        let delta: f64 = next.iter().zip(&pi).map(|(n, p)| (n - p).abs()).sum();
        for (p, n) in pi.iter_mut().zip(&next) {
            *p = 0.5 * *p + 0.5 * n;
        }
        if delta < 1e-15 {
            break;
        }
    }
    let total: f64 = pi.iter().sum();
    pi.iter().map(|p| p / total).collect()
}
