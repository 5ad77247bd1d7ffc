//! Warmup (encoder + auxiliary decoder, L1) and main-stage (denoiser, ε-MSE)
//! optimisation loops.
//!
//! Each minibatch item gets its own tape; gradients are summed in item order
//! and divided by the batch size before the Adam update, so results depend
//! only on the seed.

use rand::Rng;
use shallowdiff_autodiff::{adam_step, AdamConfig, AdamState, Gradients, Tape};

use crate::denoiser::Denoiser;
use crate::diffusion::{forward_sample, loss_weight, LossWeighting};
use crate::encoder::{l1_loss, ScoreModel};
use crate::error::{CoreError, Result};
use crate::grid::{ConditionSeq, Grid, NoiseDraw};
use crate::rng;
use crate::schedule::Schedule;
use crate::score::MusicScore;

/// Any loss above this is treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct LoopConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
}

fn check_loss(loss: f64, stage: &str, step: usize) -> Result<()> {
    if !loss.is_finite() || loss.abs() > DIVERGENCE_LIMIT {
        return Err(CoreError::Divergence(format!("{stage} loss {loss} at step {step}")));
    }
    Ok(())
}

/// Trains encoder and auxiliary decoder jointly on L1. `on_step` receives
/// `(step, mean batch loss)` and may abort by returning an error.
pub fn train_aux<G, F>(
    model: &mut ScoreModel,
    data: &[(MusicScore, Grid)],
    cfg: &LoopConfig,
    rng: &mut G,
    mut on_step: F,
) -> Result<()>
where
    G: Rng + ?Sized,
    F: FnMut(usize, f64, &ScoreModel) -> Result<()>,
{
    if data.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let mut state = AdamState::new();
    for step in 0..cfg.steps {
        let mut grads = Gradients::new();
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let (score, target) = &data[rng.random_range(0..data.len())];
            let mut tape = Tape::new();
            let loss = model.l1_graph(&mut tape, score, target)?;
            total += tape.value(loss).item();
            tape.backward(loss)?;
            grads.accumulate(&tape.param_grads());
        }
        let mean = total / cfg.batch as f64;
        check_loss(mean, "auxiliary", step)?;
        grads.scale(1.0 / cfg.batch as f64);
        adam_step(&mut model.params, &grads, &cfg.adam, &mut state)?;
        on_step(step, mean, model)?;
    }
    Ok(())
}

/// Mean L1 of the auxiliary decoder over a dataset.
pub fn eval_aux(model: &ScoreModel, data: &[(MusicScore, Grid)]) -> Result<f64> {
    if data.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let mut total = 0.0;
    for (score, target) in data {
        let (_, pred) = model.encode_and_decode(score)?;
        total += l1_loss(&pred, target)?;
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserTrainConfig {
    pub lp: LoopConfig,
    /// Steps are drawn uniformly from `1..=t_max`.
    pub t_max: usize,
    pub weighting: LossWeighting,
}

/// One item of main-stage training data: the frozen condition and its target.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserExample {
    pub cond: ConditionSeq,
    pub target: Grid,
}

/// Main stage: ε-prediction on `M_t = √ᾱ_t M + √(1−ᾱ_t) ε`, `t ~ U{1..t_max}`.
pub fn train_denoiser<G, F>(
    den: &mut Denoiser,
    data: &[DenoiserExample],
    s: &Schedule,
    cfg: &DenoiserTrainConfig,
    rng: &mut G,
    mut on_step: F,
) -> Result<()>
where
    G: Rng + ?Sized,
    F: FnMut(usize, f64, &Denoiser) -> Result<()>,
{
    if data.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    s.check_step(cfg.t_max, 1)?;
    let mut state = AdamState::new();
    for step in 0..cfg.lp.steps {
        let mut grads = Gradients::new();
        let mut total = 0.0;
        for _ in 0..cfg.lp.batch {
            let ex = &data[rng.random_range(0..data.len())];
            let t = rng.random_range(1..=cfg.t_max);
            let eps = NoiseDraw::sample(ex.target.frames(), ex.target.bins(), rng);
            let m_t = forward_sample(&ex.target, t, &eps, s)?;
            let mut tape = Tape::new();
            let mut loss = den.loss_graph(&mut tape, &m_t, &ex.cond, &eps)?;
            let w = loss_weight(cfg.weighting, t, s)?;
            if w != 1.0 {
                loss = tape.scale(loss, w)?;
            }
            total += tape.value(loss).item();
            tape.backward(loss)?;
            grads.accumulate(&tape.param_grads());
        }
        let mean = total / cfg.lp.batch as f64;
        check_loss(mean, "denoiser", step)?;
        grads.scale(1.0 / cfg.lp.batch as f64);
        adam_step(&mut den.params, &grads, &cfg.lp.adam, &mut state)?;
        on_step(step, mean, den)?;
    }
    Ok(())
}

/// Unweighted ε-MSE over a fixed evaluation set: `draws` `(t, ε)` pairs per
/// item from the stream `(seed, 0)`, with `t ~ U{1..t_max}`.
pub fn eval_denoiser(
    den: &Denoiser,
    data: &[DenoiserExample],
    s: &Schedule,
    t_max: usize,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() || draws == 0 {
        return Err(CoreError::EmptyDataset);
    }
    s.check_step(t_max, 1)?;
    let mut rng = rng::stream(seed, 0);
    let mut total = 0.0;
    for ex in data {
        for _ in 0..draws {
            let t = rng.random_range(1..=t_max);
            let eps = NoiseDraw::sample(ex.target.frames(), ex.target.bins(), &mut rng);
            let m_t = forward_sample(&ex.target, t, &eps, s)?;
            let pred = den.predict(&m_t, &ex.cond, None)?;
            total += pred.mse(eps.grid());
        }
    }
    Ok(total / (data.len() * draws) as f64)
}
