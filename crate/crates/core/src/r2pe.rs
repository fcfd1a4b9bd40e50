//! Relational 3D rotary positions.
//!
//! Video tokens get the raster index `(frame, col, row)`. Every background or
//! object entity is placed on its own temporal index after the video, and each
//! subject group shares one temporal index with its members spread along the
//! `(j, k)` diagonal by whole-frame offsets, so no two tokens collide.
//!
//! Rotation uses the interleaved-pair convention: dimensions `2m` and `2m+1`
//! of a sub-band form one rotated pair. The head dimension is split into an
//! `i` band, a `j` band and a `k` band, in that order.

use crate::error::{Error, Result};
use crate::layout::{EntityRole, LayoutSpec};
use crate::tensor::Tensor2;

/// `(i, j, k)` = (temporal, width, height) rotary index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Position3 {
    pub i: u32,
    pub j: u32,
    pub k: u32,
}

impl Position3 {
    pub const fn new(i: u32, j: u32, k: u32) -> Self {
        Self { i, j, k }
    }

    fn axes(self) -> [f64; 3] {
        [self.i as f64, self.j as f64, self.k as f64]
    }
}

/// Rotary position of every token of the concatenated sequence.
pub fn assign_positions(spec: &LayoutSpec) -> Vec<Position3> {
    let (t, h, w) = (spec.t(), spec.h(), spec.w());
    let mut out = Vec::with_capacity(spec.n_tokens());
    for frame in 0..t {
        for row in 0..h {
            for col in 0..w {
                out.push(Position3::new(frame as u32, col as u32, row as u32));
            }
        }
    }
    let first_subject_frame = t + spec.n_standalone();
    for e in 0..spec.n_conditions() {
        let (i, dj, dk) = match spec.role(e) {
            EntityRole::Standalone { ordinal } => (ordinal + t, 0, 0),
            EntityRole::Subject { group, member } => {
                (group + first_subject_frame, w * member, h * member)
            }
        };
        for row in 0..h {
            for col in 0..w {
                out.push(Position3::new(i as u32, (col + dj) as u32, (row + dk) as u32));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotaryConfig {
    head_dim: usize,
    split: [usize; 3],
    base: f64,
}

impl RotaryConfig {
    /// Default split: the largest even `d_j = d_k` with `d_i ≥ d_j`; base 10000.
    pub fn new(head_dim: usize) -> Result<Self> {
        if head_dim < 6 || !head_dim.is_multiple_of(2) {
            return Err(Error::Param(format!(
                "head_dim must be even and at least 6, got {head_dim}"
            )));
        }
        let side = (head_dim / 3) & !1;
        Self::with_split(head_dim, [head_dim - 2 * side, side, side], 10_000.0)
    }

    pub fn with_split(head_dim: usize, split: [usize; 3], base: f64) -> Result<Self> {
        if split.iter().any(|&d| d < 2 || d % 2 != 0) {
            return Err(Error::Param(format!(
                "sub-band widths must be even and >= 2, got {split:?}"
            )));
        }
        if split.iter().sum::<usize>() != head_dim {
            return Err(Error::Param(format!(
                "sub-bands {split:?} do not sum to head_dim {head_dim}"
            )));
        }
        if !(base.is_finite() && base > 0.0) {
            return Err(Error::Param(format!("base must be positive, got {base}")));
        }
        Ok(Self {
            head_dim,
            split,
            base,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn split(&self) -> [usize; 3] {
        self.split
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Rotation angle of every pair for one position, `head_dim / 2` entries.
    pub fn angles(&self, pos: Position3) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.head_dim / 2);
        for (axis, &width) in pos.axes().iter().zip(&self.split) {
            for m in 0..width / 2 {
                let theta = self.base.powf(-2.0 * m as f64 / width as f64);
                out.push(theta * axis);
            }
        }
        out
    }
}

/// Precomputed cos/sin for every (row, pair) of a position list.
#[derive(Debug, Clone)]
pub struct RotaryTable {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotaryTable {
    pub fn new(positions: &[Position3], cfg: &RotaryConfig) -> Self {
        let half = cfg.head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for a in cfg.angles(p) {
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        Self { half, cos, sin }
    }

    pub fn len(&self) -> usize {
        self.cos.len() / self.half
    }

    pub fn is_empty(&self) -> bool {
        self.cos.is_empty()
    }

    pub fn head_dim(&self) -> usize {
        self.half * 2
    }

    /// Rotates one row in place; `inverse` applies the transpose rotation.
    pub fn rotate_row_f64(&self, row: usize, x: &mut [f64], inverse: bool) {
        let base = row * self.half;
        let sign = if inverse { -1.0 } else { 1.0 };
        for m in 0..self.half {
            let (c, s) = (self.cos[base + m], sign * self.sin[base + m]);
            let (a, b) = (x[2 * m], x[2 * m + 1]);
            x[2 * m] = a * c - b * s;
            x[2 * m + 1] = a * s + b * c;
        }
    }

    fn rotate_row_f32(&self, row: usize, x: &mut [f32]) {
        let base = row * self.half;
        for m in 0..self.half {
            let (c, s) = (self.cos[base + m], self.sin[base + m]);
            let (a, b) = (x[2 * m] as f64, x[2 * m + 1] as f64);
            x[2 * m] = (a * c - b * s) as f32;
            x[2 * m + 1] = (a * s + b * c) as f32;
        }
    }

    pub fn apply(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.rows() != self.len() || x.cols() != self.head_dim() {
            return Err(Error::shape(format!(
                "rotary table is {}x{}, input is {}x{}",
                self.len(),
                self.head_dim(),
                x.rows(),
                x.cols()
            )));
        }
        let mut out = x.clone();
        let cols = out.cols();
        let rotate = |(r, row): (usize, &mut [f32])| self.rotate_row_f32(r, row);
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            out.data_mut().par_chunks_mut(cols).enumerate().for_each(rotate);
        }
        #[cfg(not(feature = "parallel"))]
        out.data_mut().chunks_mut(cols).enumerate().for_each(rotate);
        Ok(out)
    }
}

/// Rotates each row of `x` by its position.
pub fn apply_rotary(x: &Tensor2, positions: &[Position3], cfg: &RotaryConfig) -> Result<Tensor2> {
    if x.rows() != positions.len() {
        return Err(Error::shape(format!(
            "{} rows but {} positions",
            x.rows(),
            positions.len()
        )));
    }
    if x.cols() != cfg.head_dim {
        return Err(Error::shape(format!(
            "{} columns but head_dim {}",
            x.cols(),
            cfg.head_dim
        )));
    }
    RotaryTable::new(positions, cfg).apply(x)
}
