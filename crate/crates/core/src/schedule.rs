//! Noise schedules and the mixture constants of the reparameterized
//! backward transition.
//!
//! The forward kernel is `q(x_t | x_{t-1}) = beta_t * x_{t-1} + (1 - beta_t) * q_noise`
//! and the marginal `q(x_t | x_0) = alpha_t * x_0 + (1 - alpha_t) * q_noise` with
//! `alpha_t = prod_{s<=t} beta_s`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stationary {
    /// All mass on the mask token.
    Absorbing,
    /// Uniform over the data tokens.
    Uniform,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Serialized form of a schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(default)]
    pub schedule_kind: ScheduleKind,
    pub stationary: Stationary,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 500,
            schedule_kind: ScheduleKind::Linear,
            stationary: Stationary::Absorbing,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self, vocab: &Vocab) -> Result<NoiseSchedule> {
        match self.schedule_kind {
            ScheduleKind::Linear => NoiseSchedule::linear(self.steps, self.stationary, vocab),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    stationary: Stationary,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    q_noise: Vec<f64>,
}

impl NoiseSchedule {
    /// `alpha_t = 1 - t/T`.
    pub fn linear(steps: usize, stationary: Stationary, vocab: &Vocab) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        let alpha: Vec<f64> = (0..=steps)
            .map(|t| 1.0 - t as f64 / steps as f64)
            .collect();
        let mut s = Self::from_alpha(alpha, stationary, vocab)?;
        s.kind = ScheduleKind::Linear;
        Ok(s)
    }

    /// Builds a schedule from explicit keep-probabilities `alpha_0..alpha_T`.
    ///
    /// `alpha` must start at 1, stay in `[0, 1]` and be non-increasing.
    pub fn from_alpha(alpha: Vec<f64>, stationary: Stationary, vocab: &Vocab) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::InvalidSchedule("need alpha_0..alpha_T with T >= 1".into()));
        }
        if alpha[0] != 1.0 {
            return Err(Error::InvalidSchedule("alpha_0 must be 1".into()));
        }
        for (t, w) in alpha.windows(2).enumerate() {
            if !(0.0..=1.0).contains(&w[1]) || w[1] > w[0] {
                return Err(Error::InvalidSchedule(format!(
                    "alpha must be non-increasing in [0,1] (t={})",
                    t + 1
                )));
            }
        }
        let beta = alpha
            .windows(2)
            .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
            .collect();
        let mut q_noise = vec![0.0; vocab.size()];
        match stationary {
            Stationary::Absorbing => q_noise[vocab.mask_id()] = 1.0,
            Stationary::Uniform => {
                let mass = 1.0 / vocab.num_data() as f64;
                for &id in vocab.data_ids() {
                    q_noise[id] = mass;
                }
            }
        }
        Ok(Self {
            kind: ScheduleKind::Linear,
            stationary,
            alpha,
            beta,
            q_noise,
        })
    }

    /// Total number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn stationary(&self) -> Stationary {
        self.stationary
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            steps: self.steps(),
            schedule_kind: self.kind,
            stationary: self.stationary,
        }
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1, "beta is defined for t >= 1");
        self.beta[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn q_noise(&self) -> &[f64] {
        &self.q_noise
    }

    pub fn vocab_size(&self) -> usize {
        self.q_noise.len()
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// Mixture constants of the reparameterized backward transition.
    pub fn mixture_constants(&self) -> Result<MixtureConstants> {
        MixtureConstants::new(self)
    }
}

/// Constants for the mixture form of `q(x_{t-1} | x_t, x_0)`:
///
/// * `x_t == x_0`: `lambda1 * x_t + (1 - lambda1) * q_noise`
/// * `x_t != x_0`: `lambda2 * x_0 + (1 - lambda2) * (beta_t * x_t + (1 - beta_t) * q_noise)`
///
/// Matching these against the Bayes posterior gives
/// `lambda2 = (alpha_{t-1} - alpha_t) / (1 - alpha_t)` and
/// `1 - lambda1 = (1 - beta_t)(1 - alpha_{t-1}) q / (alpha_t + (1 - alpha_t) q)`
/// where `q` is the stationary mass on `x_0` (zero under absorbing, `1/K`
/// under uniform).
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureConstants {
    lambda1: Vec<f64>,
    lambda2: Vec<f64>,
    loss_weight: Vec<f64>,
}

impl MixtureConstants {
    pub fn new(schedule: &NoiseSchedule) -> Result<Self> {
        let steps = schedule.steps();
        // stationary mass on a data token
        let q_data = match schedule.stationary {
            Stationary::Absorbing => 0.0,
            Stationary::Uniform => schedule.q_noise.iter().copied().fold(0.0, f64::max),
        };
        let mut lambda1 = Vec::with_capacity(steps);
        let mut lambda2 = Vec::with_capacity(steps);
        for t in 1..=steps {
            let prev = schedule.alpha(t - 1);
            let cur = schedule.alpha(t);
            if cur == prev {
                return Err(Error::InvalidSchedule(format!(
                    "zero-noise step at t={t} (alpha_t == alpha_(t-1))"
                )));
            }
            let beta = schedule.beta(t);
            lambda2.push((prev - cur) / (1.0 - cur));
            let denom = cur + (1.0 - cur) * q_data;
            let renoise = if q_data == 0.0 {
                0.0
            } else {
                (1.0 - beta) * (1.0 - prev) * q_data / denom
            };
            lambda1.push(1.0 - renoise);
        }
        let loss_weight = lambda2.clone();
        Ok(Self {
            lambda1,
            lambda2,
            loss_weight,
        })
    }

    /// `lambda^(1)_{t-1}` for `1 <= t <= T`.
    pub fn lambda1(&self, t: usize) -> f64 {
        self.lambda1[t - 1]
    }

    /// `lambda^(2)_{t-1}` for `1 <= t <= T`.
    pub fn lambda2(&self, t: usize) -> f64 {
        self.lambda2[t - 1]
    }

    /// Cross-entropy weight of timestep `t`; equals `lambda2(t)`.
    pub fn loss_weight(&self, t: usize) -> f64 {
        self.loss_weight[t - 1]
    }

    pub fn lambda1_all(&self) -> &[f64] {
        &self.lambda1
    }

    pub fn lambda2_all(&self) -> &[f64] {
        &self.lambda2
    }

    pub fn loss_weights(&self) -> &[f64] {
        &self.loss_weight
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::amino_acids()
    }

    #[test]
    fn linear_t4_alpha_beta() {
        let s = NoiseSchedule::linear(4, Stationary::Absorbing, &vocab()).unwrap();
        assert_eq!(s.alphas(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        let beta = s.betas();
        assert_eq!(beta[0], 0.75);
        assert!((beta[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(beta[2], 0.5);
        assert_eq!(beta[3], 0.0);
    }

    #[test]
    fn one_step_schedule() {
        let s = NoiseSchedule::linear(1, Stationary::Absorbing, &vocab()).unwrap();
        assert_eq!(s.alphas(), &[1.0, 0.0]);
        assert_eq!(s.betas(), &[0.0]);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(NoiseSchedule::linear(0, Stationary::Absorbing, &vocab()).is_err());
    }

    #[test]
    fn q_noise_supports() {
        let v = vocab();
        let a = NoiseSchedule::linear(4, Stationary::Absorbing, &v).unwrap();
        assert_eq!(a.q_noise()[v.mask_id()], 1.0);
        assert_eq!(a.q_noise().iter().sum::<f64>(), 1.0);
        let u = NoiseSchedule::linear(4, Stationary::Uniform, &v).unwrap();
        assert!((u.q_noise().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(u.q_noise()[v.mask_id()], 0.0);
        assert_eq!(u.q_noise()[v.pad_id()], 0.0);
        assert_eq!(u.q_noise()[0], 0.05);
    }

    #[test]
    fn lambda2_absorbing_t4() {
        let s = NoiseSchedule::linear(4, Stationary::Absorbing, &vocab()).unwrap();
        let c = s.mixture_constants().unwrap();
        assert!((c.lambda2(2) - 0.5).abs() < 1e-15);
        // t = T: lambda2 = alpha_{T-1}
        assert!((c.lambda2(4) - 0.25).abs() < 1e-15);
        assert!(c.lambda1_all().iter().all(|&l| l == 1.0));
    }

    #[test]
    fn absorbing_linear_loss_weight_is_inverse_t() {
        for steps in [1usize, 3, 10, 500] {
            let s = NoiseSchedule::linear(steps, Stationary::Absorbing, &vocab()).unwrap();
            let c = s.mixture_constants().unwrap();
            for t in 1..=steps {
                assert!((c.loss_weight(t) - 1.0 / t as f64).abs() < 1e-12, "T={steps} t={t}");
                assert_eq!(c.loss_weight(t), c.lambda2(t));
            }
        }
    }

    #[test]
    fn flat_step_rejected() {
        let s = NoiseSchedule::from_alpha(vec![1.0, 0.5, 0.5, 0.0], Stationary::Absorbing, &vocab())
            .unwrap();
        assert!(s.mixture_constants().is_err());
    }

    proptest! {
        #[test]
        fn linear_schedule_invariants(steps in 1usize..=1024) {
            let s = NoiseSchedule::linear(steps, Stationary::Absorbing, &vocab()).unwrap();
            prop_assert_eq!(s.alpha(0), 1.0);
            prop_assert_eq!(s.alpha(steps), 0.0);
            for t in 1..=steps {
                prop_assert!(s.alpha(t) < s.alpha(t - 1));
                let b = s.beta(t);
                prop_assert!((0.0..=1.0).contains(&b));
                if t < steps {
                    prop_assert!(b > 0.0);
                }
                prop_assert!((b * s.alpha(t - 1) - s.alpha(t)).abs() < 1e-12);
            }
            let c = s.mixture_constants().unwrap();
            for t in 1..=steps {
                for v in [c.lambda1(t), c.lambda2(t), c.loss_weight(t)] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn uniform_constants_in_unit_interval(steps in 1usize..=256) {
            let s = NoiseSchedule::linear(steps, Stationary::Uniform, &vocab()).unwrap();
            let c = s.mixture_constants().unwrap();
            for t in 1..=steps {
                prop_assert!((0.0..=1.0).contains(&c.lambda1(t)));
                prop_assert!((0.0..=1.0).contains(&c.lambda2(t)));
            }
        }
    }
}
