#![allow(dead_code)]

use ddseq_core::denoiser::{Denoiser, DenoiserConfig};
use ddseq_core::{NoiseSchedule, Stationary, Vocab};

pub const LETTERS: [&str; 4] = ["A", "B", "C", "D"];

/// A vocabulary with `k` data letters.
pub fn letters(k: usize) -> Vocab {
    Vocab::new(&LETTERS[..k]).unwrap()
}

/// Every (stationary, T, data size) combination with at most four states.
pub fn grid() -> Vec<(Stationary, usize, Vocab)> {
    let mut out = Vec::new();
    for stationary in [Stationary::Absorbing, Stationary::Uniform] {
        for steps in [2, 4] {
            let sizes = if stationary == Stationary::Absorbing { 1..=3 } else { 1..=4 };
            for k in sizes {
                out.push((stationary, steps, letters(k)));
            }
        }
    }
    out
}

pub fn schedule(stationary: Stationary, steps: usize, vocab: &Vocab) -> NoiseSchedule {
    NoiseSchedule::linear(steps, stationary, vocab).unwrap()
}

/// Every sequence of `len` data tokens.
pub fn all_sequences(vocab: &Vocab, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                vocab.data_ids().iter().map(move |&d| {
                    let mut q = p.clone();
                    q.push(d);
                    q
                })
            })
            .collect();
    }
    out
}

pub fn tiny_model(vocab: &Vocab, seed: u64, time: bool) -> Denoiser {
    let config = DenoiserConfig {
        num_layers: 2,
        num_heads: 2,
        embed_dim: 16,
        ffn_dim: 32,
        max_len: 64,
        time_conditioning: time,
        ..Default::default()
    };
    let mut model = Denoiser::new(config, vocab, seed).unwrap();
    // default init is close to uniform; spread the logits so tests bite
    for entry in model.params_mut().entries_mut() {
        if entry.name == "out_bias" {
            for (j, v) in entry.value.iter_mut().enumerate() {
                *v = ((j * 7 + seed as usize) % 5) as f64 * 0.3 - 0.6;
            }
        }
        if entry.name == "tok_emb" {
            entry.value.mapv_inplace(|v| v * 30.0);
        }
    }
    model
}

/// Pearson chi-square p-value of `counts` against `probs`, pooling cells
/// with expected count below 5 into one.
pub fn chi_square_p(counts: &[u64], probs: &[f64]) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let n: u64 = counts.iter().sum();
    let (mut stat, mut cells) = (0.0, 0usize);
    let (mut pool_obs, mut pool_exp) = (0.0, 0.0);
    for (&c, &p) in counts.iter().zip(probs) {
        let e = p * n as f64;
        if e == 0.0 {
            assert_eq!(c, 0, "observed an outcome of probability zero");
            continue;
        }
        if e < 5.0 {
            pool_obs += c as f64;
            pool_exp += e;
            continue;
        }
        stat += (c as f64 - e).powi(2) / e;
        cells += 1;
    }
    if pool_exp > 0.0 {
        stat += (pool_obs - pool_exp).powi(2) / pool_exp;
        cells += 1;
    }
    if cells < 2 {
        return 1.0;
    }
    1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat)
}
