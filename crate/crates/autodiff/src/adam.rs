//! Adam with bias-corrected moment estimates.

use std::collections::BTreeMap;

use crate::array::Array;
use crate::error::AutodiffError;
use crate::params::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    first: BTreeMap<String, Array>,
    second: BTreeMap<String, Array>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update of every parameter in `params`.
///
/// Parameters missing from `grads` see a zero gradient. Nothing is modified
/// if any gradient is non-finite.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    cfg: &AdamConfig,
    state: &mut AdamState,
) -> Result<(), AutodiffError> {
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return Err(AutodiffError::NonFiniteGradient { param: name.clone() });
        }
        if let Some(p) = params.get(name) {
            if p.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
    }
    for (name, p) in params.iter() {
        for moments in [&state.first, &state.second] {
            if let Some(m) = moments.get(name) {
                if m.shape() != p.shape() {
                    return Err(AutodiffError::StateMismatch {
                        param: name.clone(),
                        expected: p.shape().to_vec(),
                        found: m.shape().to_vec(),
                    });
                }
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Array::zeros(p.shape()));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Array::zeros(p.shape()));
        let g = grads.get(name);
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            p.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Array::from_vec(vec![value]));
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = single(0.7);
        let mut g = Gradients::new();
        g.insert("w", Array::from_vec(vec![0.0]));
        let mut st = AdamState::new();
        for _ in 0..5 {
            adam_step(&mut p, &g, &AdamConfig::default(), &mut st).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε) ≈ lr·sign(g).
        for g0 in [3.0, -0.02, 250.0] {
            let mut p = single(1.0);
            let mut g = Gradients::new();
            g.insert("w", Array::from_vec(vec![g0]));
            let cfg = AdamConfig::default();
            let mut st = AdamState::new();
            adam_step(&mut p, &g, &cfg, &mut st).unwrap();
            let expected = 1.0 - cfg.lr * g0 / (g0.abs() + cfg.eps);
            assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
            assert!(((p.get("w").unwrap().item() - 1.0).abs() - cfg.lr).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_gradient_is_reported_by_name() {
        let mut p = single(1.0);
        let mut g = Gradients::new();
        g.insert("w", Array::from_vec(vec![f64::NAN]));
        let err = adam_step(&mut p, &g, &AdamConfig::default(), &mut AdamState::new()).unwrap_err();
        assert_eq!(err, AutodiffError::NonFiniteGradient { param: "w".into() });
        assert_eq!(p.get("w").unwrap().item(), 1.0);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut p = single(1.0);
        let mut g = Gradients::new();
        g.insert("w", Array::from_vec(vec![1.0]));
        let mut st = AdamState::new();
        adam_step(&mut p, &g, &AdamConfig::default(), &mut st).unwrap();
        p.insert("w", Array::from_vec(vec![1.0, 2.0]));
        g.insert("w", Array::from_vec(vec![1.0, 2.0]));
        assert!(matches!(
            adam_step(&mut p, &g, &AdamConfig::default(), &mut st),
            Err(AutodiffError::StateMismatch { .. })
        ));
    }
}
