//! Gated non-causal convolutional noise predictor `ε_θ(M_t, E_m, t)`.
//!
//! Layout inside the network is channels × frames, so every convolution runs
//! along the time axis and spectrogram bins act as input channels.

use rand::Rng;
use shallowdiff_autodiff::{Array, ParamStore, Tape, Var};

use crate::diffusion::NoisePredictor;
use crate::error::{CoreError, Result};
use crate::grid::{ConditionSeq, Grid, NoiseDraw, NoisedGrid};
use crate::nn;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub bins: usize,
    pub cond_channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            layers: 4,
            kernel: 3,
            dilation: 1,
            bins: 16,
            cond_channels: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidConfig(m));
        if self.layers == 0 {
            return bad("denoiser needs at least one layer".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("denoiser kernel must be odd, got {}", self.kernel));
        }
        if self.channels == 0 || self.channels % 2 != 0 {
            return bad(format!("denoiser channels must be even, got {}", self.channels));
        }
        if self.dilation == 0 || self.bins == 0 || self.cond_channels == 0 {
            return bad("dilation, bins and cond_channels must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub params: ParamStore,
}

impl Denoiser {
    pub fn init<G: Rng + ?Sized>(cfg: DenoiserConfig, rng: &mut G) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut p = ParamStore::new();
        nn::init_step_mlp(&mut p, "den.step", c, rng);
        nn::init_conv(&mut p, "den.in", c, cfg.bins, 1, rng);
        for i in 0..cfg.layers {
            let b = format!("den.block{i}");
            nn::init_linear(&mut p, &format!("{b}.step"), c, c, rng);
            nn::init_conv(&mut p, &format!("{b}.conv"), 2 * c, c, cfg.kernel, rng);
            nn::init_conv(&mut p, &format!("{b}.cond"), 2 * c, cfg.cond_channels, 1, rng);
            nn::init_conv(&mut p, &format!("{b}.out"), 2 * c, c, 1, rng);
        }
        nn::init_conv_zero(&mut p, "den.final", cfg.bins, c, 1);
        Ok(Self { cfg, params: p })
    }

    pub fn from_params(cfg: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let probe = Self::init(cfg.clone(), &mut crate::rng::stream(0, 0))?;
        for (name, a) in probe.params.iter() {
            match params.get(name) {
                Some(b) if b.shape() == a.shape() => {}
                Some(b) => {
                    return Err(CoreError::Format(format!(
                        "parameter {name}: expected shape {:?}, found {:?}",
                        a.shape(),
                        b.shape()
                    )))
                }
                None => return Err(CoreError::Format(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { cfg, params })
    }

    fn check_inputs(&self, m_t: &Grid, frames: usize) -> Result<()> {
        if m_t.bins() != self.cfg.bins {
            return Err(CoreError::ShapeMismatch {
                what: "denoiser input",
                expected: (m_t.frames(), self.cfg.bins),
                found: m_t.dims(),
            });
        }
        if m_t.frames() != frames {
            return Err(CoreError::FrameMismatch {
                expected: frames,
                found: m_t.frames(),
            });
        }
        Ok(())
    }

    /// Builds the prediction graph. `m_t` is `[frames × bins]`, `cond` is
    /// `[frames × cond_channels]`; the result is `[frames × bins]`.
    /// `ablate_skip` drops one block's skip contribution.
    pub fn graph(&self, tape: &mut Tape, m_t: Var, cond: Var, t: usize, ablate_skip: Option<usize>) -> Result<Var> {
        let cfg = &self.cfg;
        let p = &self.params;
        let c = cfg.channels;
        if tape.value(cond).cols() != cfg.cond_channels {
            return Err(CoreError::InvalidConfig(format!(
                "condition has {} channels, denoiser expects {}",
                tape.value(cond).cols(),
                cfg.cond_channels
            )));
        }
        let e_t = nn::step_mlp(tape, p, "den.step", t, c)?;
        let xt = tape.transpose(m_t)?;
        let mut x = nn::conv(tape, p, "den.in", xt, 1)?;
        let cond_t = tape.transpose(cond)?;
        let res_scale = std::f64::consts::FRAC_1_SQRT_2;
        let mut skips: Option<Var> = None;
        for i in 0..cfg.layers {
            let b = format!("den.block{i}");
            let step = nn::linear(tape, p, &format!("{b}.step"), e_t)?;
            let step = tape.reshape(step, &[c])?;
            let h = tape.add_col(x, step)?;
            let h = nn::conv(tape, p, &format!("{b}.conv"), h, cfg.dilation)?;
            let cproj = nn::conv(tape, p, &format!("{b}.cond"), cond_t, 1)?;
            let h = tape.add(h, cproj)?;
            let filt = tape.slice_rows(h, 0, c)?;
            let gate = tape.slice_rows(h, c, 2 * c)?;
            let filt = tape.tanh(filt)?;
            let gate = tape.sigmoid(gate)?;
            let g = tape.mul(filt, gate)?;
            let o = nn::conv(tape, p, &format!("{b}.out"), g, 1)?;
            let res = tape.slice_rows(o, 0, c)?;
            let skip = tape.slice_rows(o, c, 2 * c)?;
            let r = tape.add(x, res)?;
            x = tape.scale(r, res_scale)?;
            if ablate_skip == Some(i) {
                continue;
            }
            skips = Some(match skips {
                Some(acc) => tape.add(acc, skip)?,
                None => skip,
            });
        }
        let s = match skips {
            Some(s) => tape.scale(s, 1.0 / (cfg.layers as f64).sqrt())?,
            None => tape.constant(Array::zeros(tape.value(x).shape())),
        };
        let out = nn::conv(tape, p, "den.final", s, 1)?;
        Ok(tape.transpose(out)?)
    }

    pub fn predict(&self, m_t: &NoisedGrid, cond: &ConditionSeq, ablate_skip: Option<usize>) -> Result<Grid> {
        self.check_inputs(&m_t.grid, cond.frames())?;
        let mut tape = Tape::new();
        let x = tape.constant(m_t.grid.to_array());
        let e = tape.constant(cond.array().clone());
        let y = self.graph(&mut tape, x, e, m_t.t, ablate_skip)?;
        Grid::from_array(tape.value(y))
    }

    /// Training objective: mean squared error between `eps` and the prediction.
    pub fn loss_graph(&self, tape: &mut Tape, m_t: &NoisedGrid, cond: &ConditionSeq, eps: &NoiseDraw) -> Result<Var> {
        self.check_inputs(&m_t.grid, cond.frames())?;
        m_t.grid.ensure_same_shape(eps.grid(), "denoiser target noise")?;
        let x = tape.constant(m_t.grid.to_array());
        let e = tape.constant(cond.array().clone());
        let y = self.graph(tape, x, e, m_t.t, None)?;
        let target = tape.constant(eps.grid().to_array());
        let d = tape.sub(y, target)?;
        let d = tape.square(d)?;
        Ok(tape.mean(d)?)
    }
}

impl NoisePredictor for Denoiser {
    fn bins(&self) -> usize {
        self.cfg.bins
    }

    fn predict_noise(&self, noisy: &NoisedGrid, cond: &ConditionSeq) -> Result<Grid> {
        self.predict(noisy, cond, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, stream};

    fn cfg() -> DenoiserConfig {
        DenoiserConfig {
            channels: 8,
            layers: 2,
            kernel: 3,
            dilation: 1,
            bins: 6,
            cond_channels: 4,
        }
    }

    fn inputs(frames: usize, bins: usize, cc: usize, seed: u64) -> (NoisedGrid, ConditionSeq) {
        let mut rng = stream(seed, 9);
        let g = Grid::new(frames, bins, normal_vec(&mut rng, frames * bins)).unwrap();
        let c = Array::new(vec![frames, cc], normal_vec(&mut rng, frames * cc)).unwrap();
        (NoisedGrid { grid: g, t: 7 }, ConditionSeq::new(c).unwrap())
    }

    #[test]
    fn zero_final_projection_predicts_zero() {
        let d = Denoiser::init(cfg(), &mut stream(3, 0)).unwrap();
        let (m, c) = inputs(10, 6, 4, 1);
        let y = d.predict(&m, &c, None).unwrap();
        assert_eq!(y.dims(), (10, 6));
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_contract() {
        let mut c = cfg();
        c.bins = 16;
        let mut d = Denoiser::init(c, &mut stream(3, 0)).unwrap();
        d.params.insert("den.final.w", Array::full(&[16, 8, 1], 0.1));
        let (m, cond) = inputs(32, 16, 4, 2);
        let y = d.predict(&m, &cond, None).unwrap();
        assert_eq!(y.dims(), (32, 16));
        assert!(y.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn config_invariants() {
        let mut c = cfg();
        c.layers = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.kernel = 4;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.channels = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn frame_mismatch_rejected() {
        let d = Denoiser::init(cfg(), &mut stream(3, 0)).unwrap();
        let (m, _) = inputs(10, 6, 4, 1);
        let (_, c) = inputs(9, 6, 4, 1);
        assert!(matches!(d.predict(&m, &c, None), Err(CoreError::FrameMismatch { .. })));
    }
}
