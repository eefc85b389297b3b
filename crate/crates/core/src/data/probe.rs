//! Per-position softmax-regression probe on frozen embeddings.

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::training::{AdamW, OptimizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Fraction of sequences held out for the reported accuracy.
    pub test_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 0.05,
            test_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub num_classes: usize,
}

/// Fits a linear classifier from per-position embeddings (`L x d` per
/// sequence) to labels. The last `test_fraction` of sequences is held out.
pub fn linear_probe(embeddings: &[Array2<f64>], labels: &[Vec<usize>], config: &ProbeConfig) -> Result<ProbeReport> {
    if embeddings.len() != labels.len() || embeddings.len() < 2 {
        return Err(Error::ShapeMismatch("need at least two labelled sequences".into()));
    }
    for (e, l) in embeddings.iter().zip(labels) {
        if e.nrows() != l.len() {
            return Err(Error::ShapeMismatch(format!("{} embeddings for {} labels", e.nrows(), l.len())));
        }
    }
    let num_classes = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let distinct: std::collections::HashSet<usize> = labels.iter().flatten().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidInput("probe labels have a single class".into()));
    }
    let n_test = ((embeddings.len() as f64 * config.test_fraction).round() as usize).clamp(1, embeddings.len() - 1);
    let split = embeddings.len() - n_test;
    let stack = |range: std::ops::Range<usize>| {
        let views: Vec<_> = embeddings[range.clone()].iter().map(|e| e.view()).collect();
        let x = concatenate(Axis(0), &views).expect("equal widths");
        let y: Vec<usize> = labels[range].iter().flatten().copied().collect();
        (x, y)
    };
    let (mut x_train, y_train) = stack(0..split);
    let (mut x_test, y_test) = stack(split..embeddings.len());
    // standardize with training statistics
    let mean = x_train.mean_axis(Axis(0)).expect("non-empty");
    let std = x_train.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-8));
    for x in [&mut x_train, &mut x_test] {
        *x -= &mean;
        *x /= &std;
    }
    let dim = x_train.ncols();
    let mut params = ParamStore::new();
    let w = params.add("w", Array2::zeros((dim, num_classes)));
    let b = params.add("b", Array2::zeros((1, num_classes)));
    let mut opt = AdamW::new(
        OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        },
        &params,
    );
    let weights = vec![1.0 / y_train.len() as f64; y_train.len()];
    let support = vec![true; num_classes];
    for _ in 0..config.steps {
        let grads = {
            let mut tape = Tape::new(&params);
            let x = tape.constant(x_train.clone());
            let (wv, bv) = (tape.param(w), tape.param(b));
            let logits = tape.linear(x, wv, bv);
            let ce = tape.cross_entropy(logits, &y_train, &weights, &support);
            let mut grads = vec![None; params.len()];
            tape.backward(ce).accumulate_params(&tape, &mut grads);
            grads
        };
        opt.update(&mut params, &grads, config.learning_rate);
    }
    let accuracy = |x: &Array2<f64>, y: &[usize]| {
        let logits = x.dot(params.get(w)) + params.get(b);
        let hits = logits
            .rows()
            .into_iter()
            .zip(y)
            .filter(|(row, &label)| crate::training::argmax(row.as_slice().expect("contiguous")) == label)
            .count();
        hits as f64 / y.len().max(1) as f64
    };
    Ok(ProbeReport {
        train_accuracy: accuracy(&x_train, &y_train),
        test_accuracy: accuracy(&x_test, &y_test),
        num_classes,
    })
}
