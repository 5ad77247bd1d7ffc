//! Flat `key = value` run configuration.
//!
//! Layering, lowest to highest priority: built-in defaults (or the `paper`
//! profile), the config file, `--set key=value` flags, then the
//! `SHALLOWDIFF_SEED` environment variable.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use shallowdiff_autodiff::AdamConfig;
use shallowdiff_core::boundary::ClassifierConfig;
use shallowdiff_core::diffusion::LossWeighting;
use shallowdiff_core::synth::SynthSpec;
use shallowdiff_core::{DenoiserConfig, EncoderConfig, Schedule};

use crate::error::{PipelineError, Result};

pub const SEED_ENV: &str = "SHALLOWDIFF_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryMethod {
    Classifier,
    Kl,
    Fixed,
}

/// What plays the role of `M̃` when locating the boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryProxy {
    /// Clipped output of the trained auxiliary decoder.
    Aux,
    /// Box-blurred ground truth.
    Blur,
    /// The ground truth itself (degenerate; k = 1).
    Target,
}

/// Step range for main-stage training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepRange {
    /// `t ~ U{1..k}`.
    Shallow,
    /// `t ~ U{1..T}`, for naive-sampler baselines.
    Full,
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $($name:literal => $v:expr),+) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($v),)+
                    _ => Err(format!(concat!("unknown ", $what, " {:?}, expected one of: "), s)
                        + &[$($name),+].join(", ")),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let name = match self { $(x if *x == $v => $name,)+ _ => unreachable!() };
                f.write_str(name)
            }
        }
    };
}

keyword_enum!(BoundaryMethod, "boundary method", "classifier" => BoundaryMethod::Classifier, "kl" => BoundaryMethod::Kl, "fixed" => BoundaryMethod::Fixed);
keyword_enum!(BoundaryProxy, "boundary proxy", "aux" => BoundaryProxy::Aux, "blur" => BoundaryProxy::Blur, "target" => BoundaryProxy::Target);
keyword_enum!(StepRange, "step range", "shallow" => StepRange::Shallow, "full" => StepRange::Full);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Weighting(pub LossWeighting);

keyword_enum!(Weighting, "loss weighting", "simple" => Weighting(LossWeighting::Simple), "elbo" => Weighting(LossWeighting::Elbo));

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // schedule
    pub diffusion_steps: usize,
    pub beta_1: f64,
    pub beta_t: f64,
    // data
    pub items: usize,
    pub holdout: usize,
    pub frames: usize,
    pub bins: usize,
    pub vocab: usize,
    pub pitch_vocab: usize,
    pub harmonics: usize,
    pub harmonic_width: f64,
    pub noise_floor: f64,
    pub blur_radius: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    // encoder + auxiliary decoder
    pub enc_channels: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    // denoiser
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
    pub dilation: usize,
    // boundary classifier
    pub bp_channels: usize,
    pub bp_layers: usize,
    // training
    pub lr: f64,
    pub aux_lr: f64,
    pub bp_lr: f64,
    pub batch: usize,
    pub warmup_steps: usize,
    pub bp_steps: usize,
    pub main_steps: usize,
    pub loss_weighting: Weighting,
    pub step_range: StepRange,
    // boundary
    pub tau: f64,
    pub boundary_method: BoundaryMethod,
    pub fixed_k: usize,
    pub boundary_proxy: BoundaryProxy,
    pub margin_draws: usize,
    // paths
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        Self {
            seed: 7,
            diffusion_steps: 100,
            beta_1: 1e-4,
            beta_t: 0.06,
            items: 96,
            holdout: 32,
            frames: synth.frames,
            bins: synth.bins,
            vocab: synth.vocab,
            pitch_vocab: synth.pitch_vocab,
            harmonics: synth.harmonics,
            harmonic_width: synth.harmonic_width,
            noise_floor: synth.noise_floor,
            blur_radius: synth.blur_radius,
            min_phonemes: synth.min_phonemes,
            max_phonemes: synth.max_phonemes,
            enc_channels: 32,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_hidden: 64,
            channels: 32,
            layers: 4,
            kernel: 3,
            dilation: 1,
            bp_channels: 16,
            bp_layers: 5,
            lr: 3e-3,
            aux_lr: 1e-3,
            bp_lr: 1e-3,
            batch: 16,
            warmup_steps: 1000,
            bp_steps: 1000,
            main_steps: 2000,
            loss_weighting: Weighting(LossWeighting::Simple),
            step_range: StepRange::Shallow,
            tau: 0.4,
            boundary_method: BoundaryMethod::Kl,
            fixed_k: 54,
            boundary_proxy: BoundaryProxy::Aux,
            margin_draws: 1,
            dataset_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            output_dir: "out".into(),
        }
    }
}

// Every key accepted in a config file, in the order `to_text` writes them.
const KEYS: &[&str] = &[
    "seed",
    "diffusion_steps",
    "beta_1",
    "beta_t",
    "items",
    "holdout",
    "frames",
    "bins",
    "vocab",
    "pitch_vocab",
    "harmonics",
    "harmonic_width",
    "noise_floor",
    "blur_radius",
    "min_phonemes",
    "max_phonemes",
    "enc_channels",
    "heads",
    "encoder_layers",
    "decoder_layers",
    "ffn_hidden",
    "channels",
    "layers",
    "kernel",
    "dilation",
    "bp_channels",
    "bp_layers",
    "lr",
    "aux_lr",
    "bp_lr",
    "batch",
    "warmup_steps",
    "bp_steps",
    "main_steps",
    "loss_weighting",
    "step_range",
    "tau",
    "boundary_method",
    "fixed_k",
    "boundary_proxy",
    "margin_draws",
    "dataset_dir",
    "checkpoint_dir",
    "output_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| PipelineError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

impl RunConfig {
    /// Full-scale hyperparameters from the original two-stage recipe.
    /// Far too slow for a desk machine; provided for reference runs.
    pub fn paper() -> Self {
        Self {
            items: 2048,
            holdout: 64,
            frames: 256,
            bins: 80,
            vocab: 61,
            pitch_vocab: 300,
            max_phonemes: 64,
            harmonics: 8,
            enc_channels: 256,
            heads: 2,
            encoder_layers: 4,
            decoder_layers: 4,
            ffn_hidden: 1024,
            channels: 256,
            layers: 20,
            lr: 1e-3,
            aux_lr: 1e-3,
            bp_lr: 1e-3,
            batch: 48,
            warmup_steps: 160_000,
            bp_steps: 30_000,
            main_steps: 160_000,
            boundary_method: BoundaryMethod::Classifier,
            ..Self::default()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "paper" => Ok(Self::paper()),
            _ => Err(PipelineError::Config(format!("unknown profile {name:?} (expected desk or paper)"))),
        }
    }

    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "diffusion_steps" => self.diffusion_steps = parse(key, v)?,
            "beta_1" => self.beta_1 = parse(key, v)?,
            "beta_t" => self.beta_t = parse(key, v)?,
            "items" => self.items = parse(key, v)?,
            "holdout" => self.holdout = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "bins" => self.bins = parse(key, v)?,
            "vocab" => self.vocab = parse(key, v)?,
            "pitch_vocab" => self.pitch_vocab = parse(key, v)?,
            "harmonics" => self.harmonics = parse(key, v)?,
            "harmonic_width" => self.harmonic_width = parse(key, v)?,
            "noise_floor" => self.noise_floor = parse(key, v)?,
            "blur_radius" => self.blur_radius = parse(key, v)?,
            "min_phonemes" => self.min_phonemes = parse(key, v)?,
            "max_phonemes" => self.max_phonemes = parse(key, v)?,
            "enc_channels" => self.enc_channels = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "encoder_layers" => self.encoder_layers = parse(key, v)?,
            "decoder_layers" => self.decoder_layers = parse(key, v)?,
            "ffn_hidden" => self.ffn_hidden = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "kernel" => self.kernel = parse(key, v)?,
            "dilation" => self.dilation = parse(key, v)?,
            "bp_channels" => self.bp_channels = parse(key, v)?,
            "bp_layers" => self.bp_layers = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "aux_lr" => self.aux_lr = parse(key, v)?,
            "bp_lr" => self.bp_lr = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "bp_steps" => self.bp_steps = parse(key, v)?,
            "main_steps" => self.main_steps = parse(key, v)?,
            "loss_weighting" => self.loss_weighting = parse(key, v)?,
            "step_range" => self.step_range = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "boundary_method" => self.boundary_method = parse(key, v)?,
            "fixed_k" => self.fixed_k = parse(key, v)?,
            "boundary_proxy" => self.boundary_proxy = parse(key, v)?,
            "margin_draws" => self.margin_draws = parse(key, v)?,
            "dataset_dir" => self.dataset_dir = v.into(),
            "checkpoint_dir" => self.checkpoint_dir = v.into(),
            "output_dir" => self.output_dir = v.into(),
            other => return Err(PipelineError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v).map_err(|e| match e {
                PipelineError::Config(m) => PipelineError::Config(format!("line {}: {m}", i + 1)),
                e => e,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        self.apply_text(&text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Applies `SHALLOWDIFF_SEED` if present in `value`.
    pub fn apply_seed_env(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| PipelineError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    fn get(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "diffusion_steps" => self.diffusion_steps.to_string(),
            "beta_1" => self.beta_1.to_string(),
            "beta_t" => self.beta_t.to_string(),
            "items" => self.items.to_string(),
            "holdout" => self.holdout.to_string(),
            "frames" => self.frames.to_string(),
            "bins" => self.bins.to_string(),
            "vocab" => self.vocab.to_string(),
            "pitch_vocab" => self.pitch_vocab.to_string(),
            "harmonics" => self.harmonics.to_string(),
            "harmonic_width" => self.harmonic_width.to_string(),
            "noise_floor" => self.noise_floor.to_string(),
            "blur_radius" => self.blur_radius.to_string(),
            "min_phonemes" => self.min_phonemes.to_string(),
            "max_phonemes" => self.max_phonemes.to_string(),
            "enc_channels" => self.enc_channels.to_string(),
            "heads" => self.heads.to_string(),
            "encoder_layers" => self.encoder_layers.to_string(),
            "decoder_layers" => self.decoder_layers.to_string(),
            "ffn_hidden" => self.ffn_hidden.to_string(),
            "channels" => self.channels.to_string(),
            "layers" => self.layers.to_string(),
            "kernel" => self.kernel.to_string(),
            "dilation" => self.dilation.to_string(),
            "bp_channels" => self.bp_channels.to_string(),
            "bp_layers" => self.bp_layers.to_string(),
            "lr" => self.lr.to_string(),
            "aux_lr" => self.aux_lr.to_string(),
            "bp_lr" => self.bp_lr.to_string(),
            "batch" => self.batch.to_string(),
            "warmup_steps" => self.warmup_steps.to_string(),
            "bp_steps" => self.bp_steps.to_string(),
            "main_steps" => self.main_steps.to_string(),
            "loss_weighting" => self.loss_weighting.to_string(),
            "step_range" => self.step_range.to_string(),
            "tau" => self.tau.to_string(),
            "boundary_method" => self.boundary_method.to_string(),
            "fixed_k" => self.fixed_k.to_string(),
            "boundary_proxy" => self.boundary_proxy.to_string(),
            "margin_draws" => self.margin_draws.to_string(),
            "dataset_dir" => self.dataset_dir.display().to_string(),
            "checkpoint_dir" => self.checkpoint_dir.display().to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            _ => unreachable!("key list and getter out of sync: {key}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.schedule()?;
        self.synth_spec().validate()?;
        self.encoder_config().validate()?;
        self.denoiser_config().validate()?;
        self.classifier_config().validate()?;
        if self.holdout >= self.items {
            return bad(format!("holdout ({}) must be smaller than items ({})", self.holdout, self.items));
        }
        if self.batch == 0 || self.warmup_steps == 0 || self.bp_steps == 0 {
            return bad("batch, warmup_steps and bp_steps must be at least 1".into());
        }
        for (name, lr) in [("lr", self.lr), ("aux_lr", self.aux_lr), ("bp_lr", self.bp_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if self.boundary_method == BoundaryMethod::Fixed && !(1..=self.diffusion_steps).contains(&self.fixed_k) {
            return bad(format!(
                "fixed_k must lie in [1, {}] when boundary_method = fixed, got {}",
                self.diffusion_steps, self.fixed_k
            ));
        }
        if self.margin_draws == 0 {
            return bad("margin_draws must be at least 1".into());
        }
        let paths = [&self.dataset_dir, &self.checkpoint_dir, &self.output_dir];
        for (i, a) in paths.iter().enumerate() {
            for b in &paths[i + 1..] {
                if same_path(a, b) {
                    return bad(format!("paths must be distinct, {} is used twice", a.display()));
                }
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Ok(Schedule::linear(self.diffusion_steps, self.beta_1, self.beta_t)?)
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.seed,
            items: self.items,
            frames: self.frames,
            bins: self.bins,
            vocab: self.vocab,
            pitch_vocab: self.pitch_vocab,
            harmonics: self.harmonics,
            harmonic_width: self.harmonic_width,
            noise_floor: self.noise_floor,
            blur_radius: self.blur_radius,
            min_phonemes: self.min_phonemes,
            max_phonemes: self.max_phonemes,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            vocab: self.vocab,
            pitch_vocab: self.pitch_vocab,
            channels: self.enc_channels,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            ffn_hidden: self.ffn_hidden,
            bins: self.bins,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            channels: self.channels,
            layers: self.layers,
            kernel: self.kernel,
            dilation: self.dilation,
            bins: self.bins,
            cond_channels: self.enc_channels,
        }
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            channels: self.bp_channels,
            layers: self.bp_layers,
            bins: self.bins,
            ..ClassifierConfig::default()
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }

    /// Items used for training; the last `holdout` items are kept back.
    pub fn train_items(&self) -> usize {
        self.items - self.holdout
    }
}

fn same_path(a: &Path, b: &Path) -> bool {
    let norm = |p: &Path| {
        p.components()
            .filter(|c| !matches!(c, std::path::Component::CurDir))
            .collect::<PathBuf>()
    };
    norm(a) == norm(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.seed = 99;
        c.boundary_method = BoundaryMethod::Fixed;
        c.output_dir = "elsewhere/out".into();
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        let mut p = RunConfig::default();
        p.apply_text(&RunConfig::paper().to_text()).unwrap();
        assert_eq!(p, RunConfig::paper());
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let mut c = RunConfig::default();
        let err = c.apply_text("seed = 3\n\n# note\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(c.apply_text("seed 3").is_err());
        assert!(c.apply_text("seed = three").is_err());
        assert!(c.apply_text("boundary_method = guess").is_err());
    }

    #[test]
    fn layering_order() {
        let mut c = RunConfig::default();
        c.apply_text("seed = 3\nlr = 0.01").unwrap();
        c.apply_override("seed=4").unwrap();
        assert_eq!(c.seed, 4);
        c.apply_seed_env(Some("11")).unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.lr, 0.01);
        assert!(c.apply_seed_env(Some("-1")).is_err());
        c.apply_seed_env(None).unwrap();
        assert_eq!(c.seed, 11);
    }

    #[test]
    fn invariants() {
        RunConfig::default().validate().unwrap();
        RunConfig::paper().validate().unwrap();
        let mut c = RunConfig::default();
        c.checkpoint_dir = "./data".into();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.boundary_method = BoundaryMethod::Fixed;
        c.fixed_k = 0;
        assert!(c.validate().is_err());
        c.fixed_k = 101;
        assert!(c.validate().is_err());
        c.fixed_k = 100;
        c.validate().unwrap();
        let mut c = RunConfig::default();
        c.bp_steps = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.main_steps = 0;
        c.validate().unwrap();
        let mut c = RunConfig::default();
        c.tau = 1.0;
        assert!(c.validate().is_err());
    }
}
