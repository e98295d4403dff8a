//! Motion tokens: quantized per-step position deltas on a square grid.
//!
//! Token ids `0..bins²` enumerate `(dx bin, dy bin)` pairs row-major in the dx
//! bin; the id after them is the decoder's begin-of-sequence marker.
//!
//! Each step is quantized against the *reconstructed* previous position rather
//! than the raw one, so rounding error does not accumulate along the horizon:
//! for in-range trajectories every decoded point is within `bin_size / 2` of
//! the original on each axis.

use serde::{Deserialize, Serialize};

use crate::scene::{Point, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionVocab {
    /// Odd number of bins per axis; the middle bin is a zero delta.
    pub delta_bins_per_axis: usize,
    /// Bin width in meters.
    pub bin_size: f64,
    /// Odd number of lateral bins when the grid is not square.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lateral_bins: Option<usize>,
}

impl Default for MotionVocab {
    fn default() -> Self {
        Self {
            delta_bins_per_axis: 13,
            bin_size: 0.5,
            lateral_bins: None,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TokenError {
    #[error("invalid token id {id} at position {position} (vocabulary has {motion_tokens} motion tokens)")]
    InvalidToken {
        id: u32,
        position: usize,
        motion_tokens: usize,
    },
    #[error("invalid vocabulary: {0}")]
    Vocab(String),
}

impl MotionVocab {
    pub fn validate(&self) -> Result<(), TokenError> {
        for (name, n) in [("delta_bins_per_axis", self.delta_bins_per_axis), ("lateral_bins", self.ny())] {
            if n % 2 == 0 {
                return Err(TokenError::Vocab(format!("{name} must be odd, got {n}")));
            }
        }
        if !(self.bin_size.is_finite() && self.bin_size > 0.0) {
            return Err(TokenError::Vocab(format!("bin_size must be positive, got {}", self.bin_size)));
        }
        Ok(())
    }

    fn ny(&self) -> usize {
        self.lateral_bins.unwrap_or(self.delta_bins_per_axis)
    }

    fn half(&self) -> i64 {
        (self.delta_bins_per_axis / 2) as i64
    }

    fn half_y(&self) -> i64 {
        (self.ny() / 2) as i64
    }

    /// Number of tokens that encode motion (everything except BOS).
    pub fn motion_tokens(&self) -> usize {
        self.delta_bins_per_axis * self.ny()
    }

    pub fn vocab_size(&self) -> usize {
        self.motion_tokens() + 1
    }

    pub fn bos(&self) -> u32 {
        self.motion_tokens() as u32
    }

    pub fn center(&self) -> u32 {
        self.encode_bins(0, 0)
    }

    /// Largest representable per-step delta along `x`.
    pub fn max_delta(&self) -> f64 {
        self.half() as f64 * self.bin_size
    }

    /// Token id of a `(dx, dy)` bin pair, each within its half-width.
    pub fn encode_bins(&self, bx: i64, by: i64) -> u32 {
        let (hx, hy) = (self.half(), self.half_y());
        debug_assert!(bx.abs() <= hx && by.abs() <= hy);
        ((bx + hx) * self.ny() as i64 + (by + hy)) as u32
    }

    pub fn decode_bins(&self, id: u32) -> Option<(i64, i64)> {
        if id as usize >= self.motion_tokens() {
            return None;
        }
        let n = self.ny() as i64;
        let id = id as i64;
        Some((id / n - self.half(), id % n - self.half_y()))
    }

    /// Bin-center delta of a motion token.
    pub fn delta(&self, id: u32) -> Option<Point> {
        self.decode_bins(id)
            .map(|(bx, by)| Point::new(bx as f64 * self.bin_size, by as f64 * self.bin_size))
    }

    fn bin_of(&self, d: f64, h: i64) -> i64 {
        ((d / self.bin_size).round() as i64).clamp(-h, h)
    }
}

/// Discrete motion tokens for one agent, one per future step.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

/// Quantizes a trajectory starting from the ego-frame origin. Out-of-range
/// deltas clamp to the outermost bin; the residual carries into later steps.
pub fn tokenize(traj: &Trajectory, vocab: &MotionVocab) -> TokenSequence {
    let mut recon = Point::ORIGIN;
    let tokens = traj
        .points
        .iter()
        .map(|&p| {
            let d = p - recon;
            let (bx, by) = (vocab.bin_of(d.x, vocab.half()), vocab.bin_of(d.y, vocab.half_y()));
            recon = recon + Point::new(bx as f64 * vocab.bin_size, by as f64 * vocab.bin_size);
            vocab.encode_bins(bx, by)
        })
        .collect();
    TokenSequence(tokens)
}

/// Cumulative sum of bin-center deltas from the origin.
pub fn detokenize(seq: &TokenSequence, vocab: &MotionVocab, dt: f64) -> Result<Trajectory, TokenError> {
    let mut pos = Point::ORIGIN;
    let mut points = Vec::with_capacity(seq.len());
    for (position, &id) in seq.0.iter().enumerate() {
        let d = vocab.delta(id).ok_or(TokenError::InvalidToken {
            id,
            position,
            motion_tokens: vocab.motion_tokens(),
        })?;
        pos = pos + d;
        points.push(pos);
    }
    Ok(Trajectory::new(dt, points))
}
