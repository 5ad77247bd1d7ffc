//! Variance schedule and the per-step constants derived from it.

use crate::error::{CoreError, Result};

/// Per-step diffusion constants, indexed directly by step `t`.
///
/// Index 0 holds the conventions `β_0 = 0`, `α_0 = 1`, `ᾱ_0 = 1`,
/// `β̃_0 = 0`, `σ_0 = 0`; steps `1..=T` hold the schedule proper.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// `1 − ᾱ_t`, accumulated as `(1−ᾱ_{t−1}) + ᾱ_{t−1}·β_t` to avoid cancellation.
    pub one_minus_alpha_bar: Vec<f64>,
    pub beta_tilde: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Schedule {
    /// Derives every constant from `β_1..β_T` without validating.
    pub fn derive_from_betas(betas: &[f64]) -> Self {
        let steps = betas.len();
        let mut beta = Vec::with_capacity(steps + 1);
        beta.push(0.0);
        beta.extend_from_slice(betas);
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = vec![1.0; steps + 1];
        let mut one_minus_alpha_bar = vec![0.0; steps + 1];
        for t in 1..=steps {
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
            one_minus_alpha_bar[t] = one_minus_alpha_bar[t - 1] + alpha_bar[t - 1] * beta[t];
        }
        let mut beta_tilde = vec![0.0; steps + 1];
        for t in 1..=steps {
            beta_tilde[t] = one_minus_alpha_bar[t - 1] / one_minus_alpha_bar[t] * beta[t];
        }
        let sigma = beta_tilde.iter().map(|v| v.sqrt()).collect();
        Self {
            beta,
            alpha,
            alpha_bar,
            one_minus_alpha_bar,
            beta_tilde,
            sigma,
        }
    }

    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        let s = Self::derive_from_betas(betas);
        s.validate()?;
        Ok(s)
    }

    /// `β_t = β_1 + (t−1)/(T−1)·(β_T − β_1)`, endpoints included.
    pub fn linear(steps: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if steps < 2 {
            return Err(CoreError::InvalidSchedule(format!(
                "need at least 2 steps, got {steps}"
            )));
        }
        if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
            return Err(CoreError::InvalidSchedule(format!(
                "require 0 < beta_1 <= beta_T < 1, got beta_1={beta_1}, beta_T={beta_t}"
            )));
        }
        let span = (steps - 1) as f64;
        let betas: Vec<f64> = (1..=steps)
            .map(|t| beta_1 + ((t - 1) as f64 / span) * (beta_t - beta_1))
            .collect();
        Self::from_betas(&betas)
    }

    /// `T = 100`, `β` from `1e-4` to `0.06`.
    pub fn standard() -> Self {
        Self::linear(100, 1e-4, 0.06).expect("valid default schedule")
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len().saturating_sub(1)
    }

    pub fn check_step(&self, t: usize, min: usize) -> Result<()> {
        let max = self.steps();
        if t < min || t > max {
            return Err(CoreError::StepOutOfRange { t, min, max });
        }
        Ok(())
    }

    /// Signal-to-noise ratio `ᾱ_t / (1 − ᾱ_t)`.
    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar[t] / self.one_minus_alpha_bar[t]
    }

    /// Checks every invariant, reporting the first violation and its step.
    pub fn validate(&self) -> Result<()> {
        let fail = |invariant: &'static str, step: usize| Err(CoreError::Schedule { invariant, step });
        let steps = self.steps();
        if steps == 0 {
            return fail("at least one step", 0);
        }
        let n = steps + 1;
        if self.alpha.len() != n
            || self.alpha_bar.len() != n
            || self.one_minus_alpha_bar.len() != n
            || self.beta_tilde.len() != n
            || self.sigma.len() != n
        {
            return fail("all per-step arrays have T+1 entries", 0);
        }
        if self.alpha_bar[0] != 1.0 || self.one_minus_alpha_bar[0] != 0.0 {
            return fail("alpha_bar[0] = 1 convention", 0);
        }
        for t in 1..=steps {
            let b = self.beta[t];
            if !(b > 0.0 && b < 1.0) {
                return fail("0 < beta < 1", t);
            }
            if t > 1 && b < self.beta[t - 1] {
                return fail("beta nondecreasing", t);
            }
            if (self.alpha[t] - (1.0 - b)).abs() > 1e-15 {
                return fail("alpha = 1 - beta", t);
            }
            let expected = self.alpha_bar[t - 1] * self.alpha[t];
            if (self.alpha_bar[t] - expected).abs() > 1e-12 * expected {
                return fail("alpha_bar is the running product of alpha", t);
            }
            if self.alpha_bar[t] >= self.alpha_bar[t - 1] {
                return fail("alpha_bar strictly decreasing", t);
            }
            if (self.one_minus_alpha_bar[t] - (1.0 - self.alpha_bar[t])).abs() > 1e-14 {
                return fail("one_minus_alpha_bar = 1 - alpha_bar", t);
            }
            let bt = self.beta_tilde[t];
            if t == 1 && bt != 0.0 {
                return fail("beta_tilde[1] = 0", t);
            }
            let expected =
                self.one_minus_alpha_bar[t - 1] / self.one_minus_alpha_bar[t] * self.beta[t];
            if (bt - expected).abs() > 1e-12 * expected.max(f64::MIN_POSITIVE) {
                return fail("beta_tilde posterior variance formula", t);
            }
            if bt < 0.0 || bt > b {
                return fail("0 <= beta_tilde <= beta", t);
            }
            if (self.sigma[t] * self.sigma[t] - bt).abs() > 1e-12 * bt.max(1e-300) {
                return fail("sigma^2 = beta_tilde", t);
            }
        }
        Ok(())
    }
}
