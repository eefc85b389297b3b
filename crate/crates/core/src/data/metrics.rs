//! Sequence-space generation metrics: grammar validity, distinct-n, mean
//! pairwise identity within equal-length groups, pseudo-perplexity, infill
//! exact match and annotation match.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::grammar::SyntheticGrammar;
use crate::denoiser::Denoiser;
use crate::diffusion::TokenSequence;
use crate::error::{Error, Result};
use crate::guidance::Annotation;
use crate::training::pseudo_perplexity;
use crate::vocab::Vocab;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub validity: Option<f64>,
    /// distinct-1 through distinct-4.
    pub distinct: [f64; 4],
    /// Mean per-position identity over same-length pairs; absent with fewer
    /// than two samples of a shared length.
    pub inner_identity: Option<f64>,
    pub pseudo_perplexity: Option<f64>,
    pub infill_exact_match: Option<f64>,
    pub annotation_match: Option<f64>,
}

/// Unique n-grams over all n-grams, pooled across samples.
pub fn distinct_n(samples: &[TokenSequence], n: usize) -> f64 {
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for s in samples {
        for gram in s.ids().windows(n) {
            seen.insert(gram.to_vec());
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

/// Mean fraction of identical positions over all pairs of equal length.
pub fn mean_pairwise_identity(samples: &[TokenSequence]) -> Option<f64> {
    let mut groups: BTreeMap<usize, Vec<&TokenSequence>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.len()).or_default().push(s);
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for group in groups.values() {
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                let (a, b) = (group[i].ids(), group[j].ids());
                if a.is_empty() {
                    continue;
                }
                let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
                sum += same as f64 / a.len() as f64;
                pairs += 1;
            }
        }
    }
    (pairs > 0).then(|| sum / pairs as f64)
}

/// Fraction of free template positions reproduced exactly.
pub fn infill_exact_match(outputs: &[TokenSequence], references: &[TokenSequence], free: &[Vec<bool>]) -> Result<f64> {
    if outputs.len() != references.len() || outputs.len() != free.len() {
        return Err(Error::ShapeMismatch("infill outputs, references and masks differ in count".into()));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for ((o, r), f) in outputs.iter().zip(references).zip(free) {
        for i in (0..o.len()).filter(|&i| f[i]) {
            total += 1;
            hits += usize::from(o.ids()[i] == r.ids()[i]);
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Mean per-position agreement between the grammar labels of each sample and
/// its target annotation.
pub fn annotation_match(samples: &[TokenSequence], targets: &[Annotation], grammar: &SyntheticGrammar) -> Result<f64> {
    if samples.len() != targets.len() || samples.is_empty() {
        return Err(Error::ShapeMismatch("samples and targets differ in count".into()));
    }
    let mut sum = 0.0;
    for (s, y) in samples.iter().zip(targets) {
        if s.len() != y.len() {
            return Err(Error::ShapeMismatch("sample and annotation lengths differ".into()));
        }
        sum += grammar.labels(s.ids())?.match_rate(y);
    }
    Ok(sum / samples.len() as f64)
}

/// Computes every metric that the supplied inputs allow.
pub fn evaluate(
    samples: &[TokenSequence],
    grammar: Option<&SyntheticGrammar>,
    model: Option<&Denoiser>,
    vocab: &Vocab,
) -> Result<EvalReport> {
    let validity = grammar.map(|g| {
        let ok = samples.iter().filter(|s| g.is_valid(s.ids())).count();
        ok as f64 / samples.len().max(1) as f64
    });
    let pseudo_perplexity = match model {
        Some(m) if !samples.is_empty() => {
            let values: Vec<f64> = samples
                .par_iter()
                .map(|s| pseudo_perplexity(s, m, vocab))
                .collect::<Result<_>>()?;
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
        _ => None,
    };
    Ok(EvalReport {
        num_samples: samples.len(),
        validity,
        distinct: [1, 2, 3, 4].map(|n| distinct_n(samples, n)),
        inner_identity: mean_pairwise_identity(samples),
        pseudo_perplexity,
        infill_exact_match: None,
        annotation_match: None,
    })
}
