//! Synthetic score/grid pairs with harmonic structure, and the blurred proxy
//! used in place of a trained auxiliary decoder.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::grid::Grid;
use crate::rng::{self, standard_normal};
use crate::score::MusicScore;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub items: usize,
    pub frames: usize,
    pub bins: usize,
    pub vocab: usize,
    pub pitch_vocab: usize,
    pub harmonics: usize,
    /// Gaussian bump width in bins; 0 puts each harmonic in a single bin.
    pub harmonic_width: f64,
    /// Standard deviation of additive noise, in grid units.
    pub noise_floor: f64,
    pub blur_radius: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            items: 96,
            frames: 32,
            bins: 16,
            vocab: 16,
            pitch_vocab: 8,
            harmonics: 3,
            harmonic_width: 0.7,
            noise_floor: 0.01,
            blur_radius: 2,
            min_phonemes: 2,
            max_phonemes: 5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidConfig(m));
        if self.frames < 8 || self.bins < 8 {
            return bad(format!("grids must be at least 8x8, got {}x{}", self.frames, self.bins));
        }
        if self.harmonics == 0 {
            return bad("need at least one harmonic".into());
        }
        if self.items == 0 || self.vocab == 0 || self.pitch_vocab == 0 {
            return bad("items and vocabulary sizes must be positive".into());
        }
        if !(self.harmonic_width >= 0.0 && self.harmonic_width.is_finite()) {
            return bad(format!("harmonic_width must be >= 0, got {}", self.harmonic_width));
        }
        if !(self.noise_floor >= 0.0 && self.noise_floor.is_finite()) {
            return bad(format!("noise_floor must be >= 0, got {}", self.noise_floor));
        }
        if self.min_phonemes == 0 || self.min_phonemes > self.max_phonemes || self.max_phonemes > self.frames {
            return bad(format!(
                "phoneme count range {}..={} invalid for {} frames",
                self.min_phonemes, self.max_phonemes, self.frames
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthItem {
    pub score: MusicScore,
    pub target: Grid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub items: Vec<SynthItem>,
    /// Harmonics dropped because they fell past the last bin.
    pub clipped_harmonics: usize,
}

/// Fundamental bin for a pitch ID.
pub fn fundamental_bin(pitch: usize) -> usize {
    1 + pitch
}

// Per-phoneme timbre, fixed by ID so the score fully determines the grid
// up to the noise floor.
fn level(ph: usize, vocab: usize) -> f64 {
    if vocab <= 1 {
        return 1.0;
    }
    0.55 + 0.45 * ((ph * 7) % vocab) as f64 / (vocab - 1) as f64
}

fn tilt(ph: usize) -> f64 {
    0.45 + 0.125 * ((ph * 3) % 5) as f64
}

fn envelope(ph: usize, pos: usize, dur: usize) -> f64 {
    let x = (pos as f64 + 0.5) / dur as f64;
    let shape = 0.5 + 0.25 * (ph % 3) as f64;
    (std::f64::consts::PI * x).sin().powf(shape)
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut items = Vec::with_capacity(spec.items);
    let mut clipped = 0;
    for i in 0..spec.items {
        let mut rng = rng::stream(spec.seed, i as u64);
        let n = rng.random_range(spec.min_phonemes..=spec.max_phonemes);
        let durations = split_frames(spec.frames, n, &mut rng);
        let phonemes: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.vocab)).collect();
        let pitches: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.pitch_vocab)).collect();
        let score = MusicScore::new(phonemes, pitches, durations)?;
        let (target, c) = render(spec, &score, &mut rng)?;
        clipped += c;
        items.push(SynthItem { score, target });
    }
    Ok(SynthDataset {
        items,
        clipped_harmonics: clipped,
    })
}

/// `n` positive durations summing to `frames`.
fn split_frames<R: Rng + ?Sized>(frames: usize, n: usize, rng: &mut R) -> Vec<usize> {
    // choose n-1 distinct cut points in 1..frames
    let mut cuts: Vec<usize> = rand::seq::index::sample(rng, frames - 1, n - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(n);
    let mut prev = 0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(frames - prev);
    out
}

fn render<R: Rng + ?Sized>(spec: &SynthSpec, score: &MusicScore, rng: &mut R) -> Result<(Grid, usize)> {
    let bins = spec.bins;
    let mut mag = vec![0.0; spec.frames * bins];
    let mut clipped = 0;
    let mut frame = 0;
    for k in 0..score.len() {
        let (ph, pitch, dur) = (score.phonemes()[k], score.pitches()[k], score.durations()[k]);
        let f0 = fundamental_bin(pitch);
        for h in 1..=spec.harmonics {
            let centre = h * f0;
            if centre >= bins {
                clipped += dur;
                continue;
            }
            let amp = level(ph, spec.vocab) * tilt(ph).powi(h as i32 - 1);
            for pos in 0..dur {
                let env = envelope(ph, pos, dur);
                let row = &mut mag[(frame + pos) * bins..(frame + pos + 1) * bins];
                if spec.harmonic_width == 0.0 {
                    row[centre] += amp * env;
                } else {
                    let w2 = 2.0 * spec.harmonic_width * spec.harmonic_width;
                    for (b, v) in row.iter_mut().enumerate() {
                        let d = b as f64 - centre as f64;
                        *v += amp * env * (-d * d / w2).exp();
                    }
                }
            }
        }
        frame += dur;
    }
    let values = mag
        .into_iter()
        .map(|m: f64| {
            let mut v = 2.0 * m.clamp(0.0, 1.0) - 1.0;
            if spec.noise_floor > 0.0 {
                v += spec.noise_floor * standard_normal(rng);
            }
            v.clamp(-1.0, 1.0)
        })
        .collect();
    Ok((Grid::new(spec.frames, bins, values)?, clipped))
}

/// Separable box blur along frames then bins, clamped back into `[-1, 1]`.
///
/// Windows shrink at the edges, so a constant grid is left unchanged and a
/// radius covering the whole grid yields its mean everywhere.
pub fn blur_proxy(target: &Grid, radius: usize) -> Result<Grid> {
    if radius == 0 {
        return Err(CoreError::InvalidConfig("blur radius must be at least 1".into()));
    }
    let (frames, bins) = target.dims();
    let mut tmp = vec![0.0; frames * bins];
    for r in 0..frames {
        let lo = r.saturating_sub(radius);
        let hi = (r + radius).min(frames - 1);
        for c in 0..bins {
            let s: f64 = (lo..=hi).map(|rr| target.at(rr, c)).sum();
            tmp[r * bins + c] = s / (hi - lo + 1) as f64;
        }
    }
    let mut out = vec![0.0; frames * bins];
    for r in 0..frames {
        for c in 0..bins {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(bins - 1);
            let s: f64 = (lo..=hi).map(|cc| tmp[r * bins + cc]).sum();
            out[r * bins + c] = (s / (hi - lo + 1) as f64).clamp(-1.0, 1.0);
        }
    }
    Grid::new(frames, bins, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_harmonic_delta_one_active_bin() {
        let spec = SynthSpec {
            harmonics: 1,
            harmonic_width: 0.0,
            noise_floor: 0.0,
            items: 8,
            ..SynthSpec::default()
        };
        let ds = generate(&spec).unwrap();
        for it in &ds.items {
            let mut frame = 0;
            for k in 0..it.score.len() {
                let f0 = fundamental_bin(it.score.pitches()[k]);
                for pos in 0..it.score.durations()[k] {
                    let r = frame + pos;
                    let active: Vec<usize> = (0..spec.bins).filter(|&b| it.target.at(r, b) > -1.0).collect();
                    assert_eq!(active, vec![f0]);
                }
                frame += it.score.durations()[k];
            }
        }
    }

    #[test]
    fn durations_sum_to_frames_and_clean() {
        let ds = generate(&SynthSpec::default()).unwrap();
        assert_eq!(ds.items.len(), 96);
        for it in &ds.items {
            assert_eq!(it.score.frames(), 32);
            it.score.check_vocab(16, 8).unwrap();
            it.target.check_clean().unwrap();
        }
    }

    #[test]
    fn blur_limits() {
        let c = Grid::filled(9, 10, 0.3);
        assert_eq!(blur_proxy(&c, 2).unwrap(), c);
        let g = Grid::from_fn(9, 10, |r, c| ((r * 3 + c * 7) % 5) as f64 / 4.0 - 0.5);
        let b = blur_proxy(&g, 50).unwrap();
        let m = g.mean();
        assert!(b.values().iter().all(|v| (v - m).abs() < 1e-12));
        assert!(blur_proxy(&g, 1).unwrap().sq_dist(&g) > 0.0);
        assert!(blur_proxy(&g, 0).is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = SynthSpec::default();
        s.frames = 7;
        assert!(generate(&s).is_err());
        let mut s = SynthSpec::default();
        s.harmonics = 0;
        assert!(generate(&s).is_err());
    }
}
