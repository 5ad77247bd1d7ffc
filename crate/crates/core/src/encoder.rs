//! Score encoder and the L1-trained auxiliary decoder.
//!
//! `encode` embeds phonemes, adds sinusoidal positions, runs the FFT blocks,
//! expands to frames with the length regulator and adds the pitch embedding.
//! `aux_decode` maps the frame-level condition straight to a grid.

use rand::Rng;
use shallowdiff_autodiff::{uniform_init, ParamStore, Tape, Var};

use crate::error::{CoreError, Result};
use crate::grid::{ConditionSeq, Grid};
use crate::nn::{self, FftBlockConfig};
use crate::score::MusicScore;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub vocab: usize,
    pub pitch_vocab: usize,
    pub channels: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    pub bins: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab: 16,
            pitch_vocab: 8,
            channels: 32,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_hidden: 64,
            bins: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidConfig(m));
        if self.vocab == 0 || self.pitch_vocab == 0 {
            return bad("vocabulary sizes must be positive".into());
        }
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!(
                "{} channels not divisible by {} heads",
                self.channels, self.heads
            ));
        }
        if self.ffn_hidden == 0 || self.bins == 0 {
            return bad("ffn_hidden and bins must be positive".into());
        }
        Ok(())
    }

    fn block(&self) -> FftBlockConfig {
        FftBlockConfig {
            channels: self.channels,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            kernels: (9, 1),
        }
    }
}

/// Encoder plus auxiliary decoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreModel {
    pub cfg: EncoderConfig,
    pub params: ParamStore,
}

impl ScoreModel {
    pub fn init<G: Rng + ?Sized>(cfg: EncoderConfig, rng: &mut G) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut p = ParamStore::new();
        // Embedding tables use unit fan-in so rows start at O(1) scale.
        p.insert("enc.phoneme", uniform_init(&[cfg.vocab, c], 1, rng));
        p.insert("enc.pitch", uniform_init(&[cfg.pitch_vocab, c], 1, rng));
        let block = cfg.block();
        for i in 0..cfg.encoder_layers {
            nn::init_fft_block(&mut p, &format!("enc.block{i}"), &block, rng);
        }
        for i in 0..cfg.decoder_layers {
            nn::init_fft_block(&mut p, &format!("aux.block{i}"), &block, rng);
        }
        nn::init_layer_norm(&mut p, "aux.ln", c);
        nn::init_linear(&mut p, "aux.out", c, cfg.bins, rng);
        Ok(Self { cfg, params: p })
    }

    pub fn from_params(cfg: EncoderConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
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

    fn check(&self, score: &MusicScore) -> Result<()> {
        score.check_vocab(self.cfg.vocab, self.cfg.pitch_vocab)
    }

    /// Phoneme-level hidden states after the FFT blocks, expanded to frames
    /// (before the pitch embedding is added).
    pub fn linguistic_graph(&self, tape: &mut Tape, score: &MusicScore) -> Result<Var> {
        self.check(score)?;
        let c = self.cfg.channels;
        let table = tape.param(&self.params, "enc.phoneme")?;
        let x = tape.gather_rows(table, score.phonemes())?;
        let pos = tape.constant(nn::positions(score.len(), c));
        let mut x = tape.add(x, pos)?;
        let block = self.cfg.block();
        for i in 0..self.cfg.encoder_layers {
            x = nn::fft_block(tape, &self.params, &format!("enc.block{i}"), x, &block)?;
        }
        Ok(tape.gather_rows(x, &score.frame_index())?)
    }

    /// Frame-level condition `E_m` as a tape node.
    pub fn encode_graph(&self, tape: &mut Tape, score: &MusicScore) -> Result<Var> {
        let h = self.linguistic_graph(tape, score)?;
        let table = tape.param(&self.params, "enc.pitch")?;
        let per_frame: Vec<usize> = score.frame_index().iter().map(|&i| score.pitches()[i]).collect();
        let p = tape.gather_rows(table, &per_frame)?;
        Ok(tape.add(h, p)?)
    }

    /// Auxiliary prediction `M̃` from a condition node.
    pub fn aux_graph(&self, tape: &mut Tape, cond: Var) -> Result<Var> {
        let frames = tape.value(cond).rows();
        let pos = tape.constant(nn::positions(frames, self.cfg.channels));
        let mut x = tape.add(cond, pos)?;
        let block = self.cfg.block();
        for i in 0..self.cfg.decoder_layers {
            x = nn::fft_block(tape, &self.params, &format!("aux.block{i}"), x, &block)?;
        }
        let x = nn::layer_norm(tape, &self.params, "aux.ln", x)?;
        Ok(nn::linear(tape, &self.params, "aux.out", x)?)
    }

    pub fn encode(&self, score: &MusicScore) -> Result<ConditionSeq> {
        let mut tape = Tape::new();
        let e = self.encode_graph(&mut tape, score)?;
        ConditionSeq::new(tape.value(e).clone())
    }

    pub fn aux_decode(&self, cond: &ConditionSeq) -> Result<Grid> {
        let mut tape = Tape::new();
        let c = tape.constant(cond.array().clone());
        let y = self.aux_graph(&mut tape, c)?;
        Grid::from_array(tape.value(y))
    }

    /// Condition and auxiliary prediction in one pass.
    pub fn encode_and_decode(&self, score: &MusicScore) -> Result<(ConditionSeq, Grid)> {
        let mut tape = Tape::new();
        let e = self.encode_graph(&mut tape, score)?;
        let y = self.aux_graph(&mut tape, e)?;
        Ok((ConditionSeq::new(tape.value(e).clone())?, Grid::from_array(tape.value(y))?))
    }

    /// Builds the warmup objective `L1(aux(encode(score)), target)` on `tape`.
    pub fn l1_graph(&self, tape: &mut Tape, score: &MusicScore, target: &Grid) -> Result<Var> {
        if score.frames() != target.frames() {
            return Err(CoreError::FrameMismatch {
                expected: target.frames(),
                found: score.frames(),
            });
        }
        if target.bins() != self.cfg.bins {
            return Err(CoreError::ShapeMismatch {
                what: "aux target",
                expected: (target.frames(), self.cfg.bins),
                found: target.dims(),
            });
        }
        let e = self.encode_graph(tape, score)?;
        let y = self.aux_graph(tape, e)?;
        let t = tape.constant(target.to_array());
        let d = tape.sub(y, t)?;
        let d = tape.abs(d)?;
        Ok(tape.mean(d)?)
    }
}

/// Mean absolute difference.
pub fn l1_loss(pred: &Grid, target: &Grid) -> Result<f64> {
    pred.ensure_same_shape(target, "l1_loss")?;
    let n = pred.values().len() as f64;
    Ok(pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}
