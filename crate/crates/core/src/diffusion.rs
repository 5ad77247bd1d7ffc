//! Closed-form diffusion mathematics and the two reverse-process samplers.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::grid::{ConditionSeq, Grid, NoiseDraw, NoisedGrid};
use crate::rng;
use crate::schedule::Schedule;

/// Mean and (isotropic) variance of a Gaussian reverse transition.
#[derive(Clone, Debug, PartialEq)]
pub struct ReverseMoment {
    pub mean: Grid,
    pub variance: f64,
}

/// A conditional noise predictor `ε_θ(M_t, E_m, t)`.
pub trait NoisePredictor {
    fn bins(&self) -> usize;

    fn predict_noise(&self, noisy: &NoisedGrid, cond: &ConditionSeq) -> Result<Grid>;
}

/// How the per-step ε objective is weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossWeighting {
    /// Unweighted mean squared error.
    #[default]
    Simple,
    /// Weighted by `β_t² / (2σ_t² α_t (1−ᾱ_t))`.
    Elbo,
}

/// `y_t = √ᾱ_t·y_0 + √(1−ᾱ_t)·ε`.
pub fn forward_sample(y0: &Grid, t: usize, eps: &NoiseDraw, s: &Schedule) -> Result<NoisedGrid> {
    s.check_step(t, 0)?;
    y0.ensure_same_shape(eps.grid(), "forward_sample noise")?;
    let a = s.alpha_bar[t].sqrt();
    let b = s.one_minus_alpha_bar[t].sqrt();
    let values = y0
        .values()
        .iter()
        .zip(eps.values())
        .map(|(y, e)| a * y + b * e)
        .collect();
    Ok(NoisedGrid {
        grid: Grid::new(y0.frames(), y0.bins(), values)?,
        t,
    })
}

/// One Markov step `y_t ~ N(√(1−β_t)·y_{t−1}, β_t·I)`.
pub fn single_step_diffuse<R: Rng + ?Sized>(
    y_prev: &NoisedGrid,
    s: &Schedule,
    rng: &mut R,
) -> Result<NoisedGrid> {
    let t = y_prev.t + 1;
    if t > s.steps() {
        return Err(CoreError::StepOutOfRange {
            t,
            min: 1,
            max: s.steps(),
        });
    }
    let scale = (1.0 - s.beta[t]).sqrt();
    let sd = s.beta[t].sqrt();
    let values = y_prev
        .grid
        .values()
        .iter()
        .map(|y| scale * y + sd * rng::standard_normal(rng))
        .collect();
    Ok(NoisedGrid {
        grid: Grid::new(y_prev.grid.frames(), y_prev.grid.bins(), values)?,
        t,
    })
}

/// Moments of the forward posterior `q(y_{t−1} | y_t, y_0)`.
pub fn posterior_moment(y_t: &NoisedGrid, y0: &Grid, s: &Schedule) -> Result<ReverseMoment> {
    let t = y_t.t;
    s.check_step(t, 1)?;
    y0.ensure_same_shape(&y_t.grid, "posterior_moment")?;
    let denom = s.one_minus_alpha_bar[t];
    let c0 = s.alpha_bar[t - 1].sqrt() * s.beta[t] / denom;
    let ct = s.alpha[t].sqrt() * s.one_minus_alpha_bar[t - 1] / denom;
    let values = y0
        .values()
        .iter()
        .zip(y_t.grid.values())
        .map(|(a, b)| c0 * a + ct * b)
        .collect();
    Ok(ReverseMoment {
        mean: Grid::new(y0.frames(), y0.bins(), values)?,
        variance: s.beta_tilde[t],
    })
}

/// `μ_θ(y_t, t) = (y_t − β_t/√(1−ᾱ_t)·ε_θ) / √α_t`.
pub fn reverse_mean(y_t: &NoisedGrid, eps_pred: &Grid, s: &Schedule) -> Result<Grid> {
    let t = y_t.t;
    s.check_step(t, 1)?;
    y_t.grid.ensure_same_shape(eps_pred, "reverse_step prediction")?;
    let inv_sqrt_alpha = 1.0 / s.alpha[t].sqrt();
    let eps_coef = s.beta[t] / s.one_minus_alpha_bar[t].sqrt();
    let values = y_t
        .grid
        .values()
        .iter()
        .zip(eps_pred.values())
        .map(|(y, e)| inv_sqrt_alpha * (y - eps_coef * e))
        .collect();
    Grid::new(y_t.grid.frames(), y_t.grid.bins(), values)
}

/// `y_{t−1} = μ_θ(y_t, t) + σ_t·z`, with `z = 0` required at `t = 1`.
pub fn reverse_step(
    y_t: &NoisedGrid,
    eps_pred: &Grid,
    z: &NoiseDraw,
    s: &Schedule,
) -> Result<NoisedGrid> {
    let t = y_t.t;
    s.check_step(t, 1)?;
    y_t.grid.ensure_same_shape(z.grid(), "reverse_step noise")?;
    if t == 1 && !z.is_zero() {
        return Err(CoreError::NonZeroFinalNoise);
    }
    let mut mean = reverse_mean(y_t, eps_pred, s)?;
    let sigma = s.sigma[t];
    if sigma > 0.0 {
        for (m, zv) in mean.values_mut().iter_mut().zip(z.values()) {
            *m += sigma * zv;
        }
    }
    Ok(NoisedGrid { grid: mean, t: t - 1 })
}

/// Mean squared error between true and predicted noise.
pub fn simple_loss(eps_true: &NoiseDraw, eps_pred: &Grid) -> Result<f64> {
    eps_true.grid().ensure_same_shape(eps_pred, "simple_loss")?;
    Ok(eps_true.grid().mse(eps_pred))
}

/// Per-step weight `β_t² / (2σ_t² α_t (1−ᾱ_t))` of the ε objective.
///
/// `σ_1² = β̃_1 = 0`, so step 1 uses `σ_1² = β_1` instead.
pub fn elbo_weight(t: usize, s: &Schedule) -> Result<f64> {
    s.check_step(t, 1)?;
    let var = if s.beta_tilde[t] > 0.0 {
        s.beta_tilde[t]
    } else {
        s.beta[t]
    };
    Ok(s.beta[t].powi(2) / (2.0 * var * s.alpha[t] * s.one_minus_alpha_bar[t]))
}

pub fn loss_weight(weighting: LossWeighting, t: usize, s: &Schedule) -> Result<f64> {
    match weighting {
        LossWeighting::Simple => Ok(1.0),
        LossWeighting::Elbo => elbo_weight(t, s),
    }
}

/// `elbo_weight(t) · simple_loss`.
pub fn weighted_loss(eps_true: &NoiseDraw, eps_pred: &Grid, t: usize, s: &Schedule) -> Result<f64> {
    Ok(elbo_weight(t, s)? * simple_loss(eps_true, eps_pred)?)
}

/// Runs the reverse chain from `start` down to step 0.
fn run_reverse<P, R>(
    denoiser: &P,
    start: NoisedGrid,
    cond: &ConditionSeq,
    s: &Schedule,
    rng: &mut R,
) -> Result<Grid>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let (frames, bins) = start.grid.dims();
    let mut cur = start;
    while cur.t >= 1 {
        let eps = denoiser.predict_noise(&cur, cond)?;
        let z = if cur.t > 1 {
            NoiseDraw::sample(frames, bins, rng)
        } else {
            NoiseDraw::zeros(frames, bins)
        };
        cur = reverse_step(&cur, &eps, &z, s)?;
    }
    Ok(cur.grid)
}

/// Full-length sampler: starts from white noise at step `T`.
pub fn naive_sample<P, R>(denoiser: &P, cond: &ConditionSeq, s: &Schedule, rng: &mut R) -> Result<Grid>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let start = NoisedGrid {
        grid: NoiseDraw::sample(cond.frames(), denoiser.bins(), rng).grid().clone(),
        t: s.steps(),
    };
    run_reverse(denoiser, start, cond, s, rng)
}

/// Shallow sampler: diffuses the auxiliary prediction to step `k` in closed
/// form and runs `k` reverse steps from there.
pub fn shallow_sample<P, R>(
    denoiser: &P,
    aux_out: &Grid,
    k: usize,
    cond: &ConditionSeq,
    s: &Schedule,
    rng: &mut R,
) -> Result<Grid>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    s.check_step(k, 1)?;
    if aux_out.frames() != cond.frames() {
        return Err(CoreError::FrameMismatch {
            expected: cond.frames(),
            found: aux_out.frames(),
        });
    }
    let eps = NoiseDraw::sample(aux_out.frames(), aux_out.bins(), rng);
    let start = forward_sample(aux_out, k, &eps, s)?;
    run_reverse(denoiser, start, cond, s, rng)
}
