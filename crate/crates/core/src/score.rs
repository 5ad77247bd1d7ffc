//! Symbolic music scores and their line-oriented text format.
//!
//! One utterance per line, `phoneme:pitch:duration` triples separated by
//! whitespace. Blank lines and lines starting with `#` are skipped.

use std::fmt;

use crate::error::{CoreError, Result};

/// Phoneme IDs, per-phoneme pitch IDs and per-phoneme frame durations.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MusicScore {
    phonemes: Vec<usize>,
    pitches: Vec<usize>,
    durations: Vec<usize>,
}

impl MusicScore {
    pub fn new(phonemes: Vec<usize>, pitches: Vec<usize>, durations: Vec<usize>) -> Result<Self> {
        if phonemes.is_empty() {
            return Err(CoreError::InvalidScore("score has no phonemes".into()));
        }
        if phonemes.len() != pitches.len() || phonemes.len() != durations.len() {
            return Err(CoreError::InvalidScore(format!(
                "list lengths differ: {} phonemes, {} pitches, {} durations",
                phonemes.len(),
                pitches.len(),
                durations.len()
            )));
        }
        if let Some(i) = durations.iter().position(|&d| d == 0) {
            return Err(CoreError::InvalidScore(format!("zero duration at position {i}")));
        }
        Ok(Self {
            phonemes,
            pitches,
            durations,
        })
    }

    pub fn phonemes(&self) -> &[usize] {
        &self.phonemes
    }

    pub fn pitches(&self) -> &[usize] {
        &self.pitches
    }

    pub fn durations(&self) -> &[usize] {
        &self.durations
    }

    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    /// Total frame count, `Σ durations`.
    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }

    /// Phoneme index for every frame (the length-regulator expansion).
    pub fn frame_index(&self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.frames());
        for (i, &d) in self.durations.iter().enumerate() {
            idx.extend(std::iter::repeat(i).take(d));
        }
        idx
    }

    /// Checks IDs against the vocabulary sizes.
    pub fn check_vocab(&self, vocab: usize, pitch_vocab: usize) -> Result<()> {
        if let Some(i) = self.phonemes.iter().position(|&p| p >= vocab) {
            return Err(CoreError::InvalidScore(format!(
                "phoneme id {} at position {i} outside vocabulary of {vocab}",
                self.phonemes[i]
            )));
        }
        if let Some(i) = self.pitches.iter().position(|&p| p >= pitch_vocab) {
            return Err(CoreError::InvalidScore(format!(
                "pitch id {} at position {i} outside pitch vocabulary of {pitch_vocab}",
                self.pitches[i]
            )));
        }
        Ok(())
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut ph = Vec::new();
        let mut pi = Vec::new();
        let mut du = Vec::new();
        for tok in line.split_whitespace() {
            let parts: Vec<&str> = tok.split(':').collect();
            if parts.len() != 3 {
                return Err(CoreError::InvalidScore(format!(
                    "expected phoneme:pitch:duration, got {tok:?}"
                )));
            }
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| CoreError::InvalidScore(format!("bad integer {s:?} in {tok:?}")))
            };
            ph.push(num(parts[0])?);
            pi.push(num(parts[1])?);
            du.push(num(parts[2])?);
        }
        Self::new(ph, pi, du)
    }
}

impl fmt::Display for MusicScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{}:{}:{}", self.phonemes[i], self.pitches[i], self.durations[i])?;
        }
        Ok(())
    }
}

/// Parses a whole score file.
pub fn parse_scores(text: &str) -> Result<Vec<MusicScore>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let score = MusicScore::parse_line(line).map_err(|e| match e {
            CoreError::InvalidScore(msg) => CoreError::InvalidScore(format!("line {}: {msg}", n + 1)),
            other => other,
        })?;
        out.push(score);
    }
    Ok(out)
}

pub fn format_scores(scores: &[MusicScore]) -> String {
    let mut s = String::new();
    for sc in scores {
        s.push_str(&sc.to_string());
        s.push('\n');
    }
    s
}
