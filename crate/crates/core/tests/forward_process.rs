mod common;

use common::*;
use ddseq_core::diffusion::{corrupt, forward_kernel, marginal};
use ddseq_core::oracle::{composed_kernel, enumerate_forward};
use ddseq_core::{NoiseSchedule, RngKey, Stationary, TokenSequence, Vocab};
use proptest::prelude::*;

fn product_of_marginals(x0: &[usize], t: usize, schedule: &NoiseSchedule, vocab: &Vocab, state: &[usize]) -> f64 {
    x0.iter()
        .zip(state)
        .map(|(&x, &s)| marginal(x, t, schedule, vocab).unwrap()[s])
        .product()
}

fn all_states(size: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..size).map(move |s| {
                    let mut q = p.clone();
                    q.push(s);
                    q
                })
            })
            .collect();
    }
    out
}

#[test]
fn enumerated_forward_matches_closed_form_on_grid() {
    for (stationary, steps, vocab) in grid() {
        let schedule = schedule(stationary, steps, &vocab);
        for len in 1..=2 {
            for x0 in all_sequences(&vocab, len) {
                for t in 0..=steps {
                    let d = enumerate_forward(&x0, t, &schedule, &vocab).unwrap();
                    assert!((d.total() - 1.0).abs() < 1e-12);
                    for state in all_states(vocab.size(), len) {
                        let closed = product_of_marginals(&x0, t, &schedule, &vocab, &state);
                        let diff = (d.prob(&state) - closed).abs();
                        assert!(diff < 1e-12, "{stationary:?} T={steps} t={t} x0={x0:?} {state:?}: {diff}");
                    }
                }
            }
        }
    }
}

#[test]
fn chapman_kolmogorov_through_production_kernels() {
    for (stationary, steps, vocab) in grid() {
        let schedule = schedule(stationary, steps, &vocab);
        for &x in vocab.data_ids() {
            for s in 0..=steps {
                for t in s..=steps {
                    // q(x_s | x_0) pushed through kernels s+1..t
                    let mut p = marginal(x, s, &schedule, &vocab).unwrap();
                    for r in s + 1..=t {
                        let mut next = vec![0.0; vocab.size()];
                        for (j, &pj) in p.iter().enumerate() {
                            for (k, kv) in forward_kernel(j, r, &schedule).unwrap().into_iter().enumerate() {
                                next[k] += pj * kv;
                            }
                        }
                        p = next;
                    }
                    let direct = marginal(x, t, &schedule, &vocab).unwrap();
                    let oracle = &composed_kernel(t, &schedule).unwrap()[x];
                    for k in 0..vocab.size() {
                        assert!((p[k] - direct[k]).abs() < 1e-12);
                        assert!((oracle[k] - direct[k]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn absorbing_endpoint_is_all_mask() {
    let vocab = letters(3);
    let schedule = schedule(Stationary::Absorbing, 4, &vocab);
    let x0 = vec![vocab.data_ids()[0], vocab.data_ids()[2]];
    let d = enumerate_forward(&x0, 4, &schedule, &vocab).unwrap();
    assert_eq!(d.len(), 1);
    assert_eq!(d.prob(&[vocab.mask_id(), vocab.mask_id()]), 1.0);
}

#[test]
fn corrupt_frequencies_pass_chi_square() {
    for stationary in [Stationary::Absorbing, Stationary::Uniform] {
        let vocab = letters(3);
        let schedule = schedule(stationary, 4, &vocab);
        let x0 = TokenSequence::new(vec![vocab.data_ids()[0], vocab.data_ids()[1]], &vocab).unwrap();
        for t in 1..=4 {
            let d = enumerate_forward(x0.ids(), t, &schedule, &vocab).unwrap();
            let states = all_states(vocab.size(), 2);
            let index = |s: &[usize]| s[0] * vocab.size() + s[1];
            let mut counts = vec![0u64; states.len()];
            for i in 0..100_000u64 {
                let xt = corrupt(&x0, t, &schedule, &vocab, RngKey::new(17, i)).unwrap();
                counts[index(&xt.ids)] += 1;
                for pos in 0..2 {
                    assert_eq!(xt.noised[pos], xt.ids[pos] != x0.ids()[pos]);
                }
            }
            let probs: Vec<f64> = states.iter().map(|s| d.prob(s)).collect();
            let p = chi_square_p(&counts, &probs);
            assert!(p > 1e-3, "{stationary:?} t={t}: p={p}");
        }
    }
}

#[test]
fn specials_are_never_corrupted() {
    let vocab = letters(2);
    let schedule = schedule(Stationary::Uniform, 4, &vocab);
    let ids = vec![vocab.bos_id(), vocab.data_ids()[0], vocab.eos_id()];
    let x0 = TokenSequence::new(ids.clone(), &vocab).unwrap();
    for i in 0..200 {
        let xt = corrupt(&x0, 4, &schedule, &vocab, RngKey::new(3, i)).unwrap();
        assert_eq!((xt.ids[0], xt.ids[2]), (ids[0], ids[2]));
        assert!(!xt.noised[0] && !xt.noised[2]);
    }
}

fn arb_schedule() -> impl Strategy<Value = (Vec<f64>, bool, usize)> {
    (prop::collection::vec(0.0f64..1.0, 1..6), any::<bool>(), 1usize..=4).prop_map(|(fr, absorbing, k)| {
        // non-increasing alpha from 1 by repeated multiplication
        let mut alpha = vec![1.0];
        for f in fr {
            let last = *alpha.last().unwrap();
            alpha.push(last * f);
        }
        (alpha, absorbing, k)
    })
}

proptest! {
    #[test]
    fn marginals_are_distributions_and_compose((alpha, absorbing, k) in arb_schedule(), pick in 0usize..4, tpick in 0usize..8) {
        let vocab = letters(k);
        let stationary = if absorbing { Stationary::Absorbing } else { Stationary::Uniform };
        let schedule = NoiseSchedule::from_alpha(alpha, stationary, &vocab).unwrap();
        let t = tpick % (schedule.steps() + 1);
        let x = vocab.data_ids()[pick % k];
        let m = marginal(x, t, &schedule, &vocab).unwrap();
        prop_assert!(m.iter().all(|&p| p >= 0.0));
        prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let oracle = &composed_kernel(t, &schedule).unwrap()[x];
        for (a, b) in m.iter().zip(oracle) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        if t >= 1 {
            let kernel = forward_kernel(x, t, &schedule).unwrap();
            prop_assert!((kernel.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn corrupt_is_deterministic_and_in_support(seed in any::<u64>(), t in 0usize..=6, len in 1usize..12) {
        let vocab = Vocab::amino_acids();
        let schedule = NoiseSchedule::linear(6, Stationary::Absorbing, &vocab).unwrap();
        let ids: Vec<usize> = (0..len).map(|i| vocab.data_ids()[(i * 7 + seed as usize) % 20]).collect();
        let x0 = TokenSequence::new(ids, &vocab).unwrap();
        let a = corrupt(&x0, t, &schedule, &vocab, seed).unwrap();
        let b = corrupt(&x0, t, &schedule, &vocab, seed).unwrap();
        prop_assert_eq!(&a, &b);
        for (i, &id) in a.ids.iter().enumerate() {
            prop_assert!(id == x0.ids()[i] || id == vocab.mask_id());
        }
        if t == 0 {
            prop_assert_eq!(a.num_noised(), 0);
        }
        if t == 6 {
            prop_assert_eq!(a.num_noised(), len);
        }
    }
}
