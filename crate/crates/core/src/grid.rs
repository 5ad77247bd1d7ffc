//! Grid-shaped values: clean spectrogram stand-ins, noise draws, noised
//! samples and per-frame condition sequences.

use shallowdiff_autodiff::Array;

use crate::error::{CoreError, Result};
use crate::rng;

/// Slack allowed on the `[-1, 1]` bound of clean grids.
pub const CLEAN_TOLERANCE: f64 = 1e-9;

/// A `frames × bins` row-major grid of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    frames: usize,
    bins: usize,
    values: Vec<f64>,
}

impl Grid {
    pub fn new(frames: usize, bins: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 || bins == 0 {
            return Err(CoreError::InvalidConfig(format!(
                "grid extents must be positive, got {frames}x{bins}"
            )));
        }
        if values.len() != frames * bins {
            return Err(CoreError::Format(format!(
                "{} values for a {frames}x{bins} grid",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::Divergence(format!("non-finite grid value at index {i}")));
        }
        Ok(Self {
            frames,
            bins,
            values,
        })
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self::filled(frames, bins, 0.0)
    }

    pub fn filled(frames: usize, bins: usize, value: f64) -> Self {
        Self {
            frames,
            bins,
            values: vec![value; frames * bins],
        }
    }

    pub fn from_fn(frames: usize, bins: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(frames * bins);
        for r in 0..frames {
            for c in 0..bins {
                values.push(f(r, c));
            }
        }
        Self {
            frames,
            bins,
            values,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, frame: usize, bin: usize) -> f64 {
        self.values[frame * self.bins + bin]
    }

    pub fn ensure_same_shape(&self, other: &Grid, what: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(CoreError::ShapeMismatch {
                what,
                expected: self.dims(),
                found: other.dims(),
            });
        }
        Ok(())
    }

    /// Checks the clean-data contract: finite and within `[-1, 1]`.
    pub fn check_clean(&self) -> Result<()> {
        for (i, &v) in self.values.iter().enumerate() {
            if !v.is_finite() || v.abs() > 1.0 + CLEAN_TOLERANCE {
                return Err(CoreError::Format(format!(
                    "grid value {v} at index {i} outside [-1, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn clipped_unit(&self) -> Grid {
        Grid {
            frames: self.frames,
            bins: self.bins,
            values: self.values.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        }
    }

    pub fn sq_dist(&self, other: &Grid) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Mean squared difference per element.
    pub fn mse(&self, other: &Grid) -> f64 {
        self.sq_dist(other) / self.values.len() as f64
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Per-bin average over frames (the spectral envelope).
    pub fn bin_profile(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.bins];
        for row in self.values.chunks(self.bins) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= self.frames as f64;
        }
        out
    }

    /// `[frames × bins]` array.
    pub fn to_array(&self) -> Array {
        Array::new(vec![self.frames, self.bins], self.values.clone()).expect("grid shape")
    }

    pub fn from_array(a: &Array) -> Result<Self> {
        if a.rank() != 2 {
            return Err(CoreError::Format(format!(
                "expected a rank-2 array, got shape {:?}",
                a.shape()
            )));
        }
        Self::new(a.rows(), a.cols(), a.data().to_vec())
    }

    /// Little-endian bytes of the payload, for hashing and persistence.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Standard-normal values shaped like a [`Grid`].
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw(Grid);

impl NoiseDraw {
    pub fn sample<R: rand::Rng + ?Sized>(frames: usize, bins: usize, rng: &mut R) -> Self {
        Self(Grid {
            frames,
            bins,
            values: rng::normal_vec(rng, frames * bins),
        })
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self(Grid::zeros(frames, bins))
    }

    pub fn from_grid(g: Grid) -> Self {
        Self(g)
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }

    pub fn is_zero(&self) -> bool {
        self.0.values.iter().all(|&v| v == 0.0)
    }
}

/// A grid at diffusion step `t` (`t = 0` is clean data).
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedGrid {
    pub grid: Grid,
    pub t: usize,
}

/// Per-frame condition sequence `E_m`: `frames × channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSeq {
    values: Array,
}

impl ConditionSeq {
    pub fn new(values: Array) -> Result<Self> {
        if values.rank() != 2 || values.rows() == 0 || values.cols() == 0 {
            return Err(CoreError::Format(format!(
                "condition must be a non-empty frames x channels array, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn array(&self) -> &Array {
        &self.values
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        let c = self.channels();
        &self.values.data()[frame * c..(frame + 1) * c]
    }
}
