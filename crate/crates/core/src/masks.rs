//! Causal self-attention mask with its block decomposition, and the
//! multilevel cross-attention mask.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::layout::LayoutSpec;

/// Packed boolean matrix, one `u64`-word run per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    stride: usize,
    words: Vec<u64>,
}

impl BitMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        let stride = cols.div_ceil(64);
        Self {
            rows,
            cols,
            stride,
            words: vec![0; rows * stride],
        }
    }

    pub fn filled(rows: usize, cols: usize) -> Self {
        let mut m = Self::new(rows, cols);
        for r in 0..rows {
            m.set_range(r, 0..cols);
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::new(n, n);
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                if f(r, c) {
                    m.set(r, c, true);
                }
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        debug_assert!(r < self.rows && c < self.cols);
        self.words[r * self.stride + c / 64] >> (c % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        let w = &mut self.words[r * self.stride + c / 64];
        if v {
            *w |= 1 << (c % 64);
        } else {
            *w &= !(1 << (c % 64));
        }
    }

    pub fn set_range(&mut self, r: usize, cols: Range<usize>) {
        for c in cols {
            self.set(r, c, true);
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Maximal runs of `true` in row `r`, in column order.
    pub fn row_runs(&self, r: usize) -> Vec<Range<usize>> {
        let mut runs = Vec::new();
        let mut start = None;
        for c in 0..self.cols {
            match (self.get(r, c), start) {
                (true, None) => start = Some(c),
                (false, Some(s)) => {
                    runs.push(s..c);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push(s..self.cols);
        }
        runs
    }
}

/// Rectangular query × key region of a mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Block {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
}

impl Block {
    pub fn new(queries: Range<usize>, keys: Range<usize>) -> Self {
        Self { queries, keys }
    }

    pub fn area(&self) -> usize {
        self.queries.len() * self.keys.len()
    }
}

/// Splits a boolean mask into disjoint rectangles.
///
/// Each row is cut into maximal runs; consecutive rows with identical run
/// sets share one block per run. Rows without any admissible key are rejected
/// since attention over them is undefined.
pub fn decompose_blocks(mask: &BitMatrix) -> Result<Vec<Block>> {
    let mut blocks = Vec::new();
    let mut open: Option<(usize, Vec<Range<usize>>)> = None;
    for r in 0..mask.rows() {
        let runs = mask.row_runs(r);
        if runs.is_empty() {
            return Err(Error::EmptyMaskRow { row: r });
        }
        match &open {
            Some((_, prev)) if *prev == runs => continue,
            _ => {}
        }
        if let Some((start, prev)) = open.take() {
            blocks.extend(prev.into_iter().map(|k| Block::new(start..r, k)));
        }
        open = Some((r, runs));
    }
    if let Some((start, prev)) = open {
        blocks.extend(prev.into_iter().map(|k| Block::new(start..mask.rows(), k)));
    }
    Ok(blocks)
}

/// Paints blocks onto an `n × n` matrix.
pub fn materialize_blocks(n: usize, blocks: &[Block]) -> BitMatrix {
    let mut m = BitMatrix::new(n, n);
    for b in blocks {
        for q in b.queries.clone() {
            m.set_range(q, b.keys.clone());
        }
    }
    m
}

/// Self-attention mask over the concatenated visual sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsamMask {
    bits: BitMatrix,
    blocks: Vec<Block>,
}

impl CsamMask {
    /// Wraps an arbitrary square mask, deriving its block cover.
    pub fn from_bits(bits: BitMatrix) -> Result<Self> {
        if bits.rows() != bits.cols() {
            return Err(Error::shape(format!(
                "self-attention mask must be square, got {}x{}",
                bits.rows(),
                bits.cols()
            )));
        }
        let blocks = decompose_blocks(&bits)?;
        Ok(Self { bits, blocks })
    }

    pub fn n(&self) -> usize {
        self.bits.rows()
    }

    pub fn bits(&self) -> &BitMatrix {
        &self.bits
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    #[inline]
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.bits.get(q, k)
    }
}

/// Video queries see every token; condition queries see only their own
/// branch, where a whole subject group is one branch.
pub fn build_csam(spec: &LayoutSpec) -> CsamMask {
    let n = spec.n_tokens();
    let mut bits = BitMatrix::new(n, n);
    for q in 0..spec.n_video_tokens() {
        bits.set_range(q, 0..n);
    }
    for branch in spec.condition_branches() {
        let range = spec.branch_tokens(branch).expect("condition branch");
        for q in range.clone() {
            bits.set_range(q, range.clone());
        }
    }
    // Same cover decompose_blocks derives, built directly. T >= 1 so the
    // video block is never empty.
    let mut blocks = vec![Block::new(0..spec.n_video_tokens(), 0..n)];
    blocks.extend(spec.condition_branches().into_iter().map(|b| {
        let r = spec.branch_tokens(b).expect("condition branch");
        Block::new(r.clone(), r)
    }));
    CsamMask { bits, blocks }
}

/// Three-level visual × text correlation mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct McamMask {
    rows: usize,
    cols: usize,
    levels: Vec<i8>,
}

impl McamMask {
    pub fn from_levels(rows: usize, cols: usize, levels: Vec<i8>) -> Result<Self> {
        if levels.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} levels for a {rows}x{cols} mask",
                levels.len()
            )));
        }
        if let Some(bad) = levels.iter().find(|l| !(-1..=1).contains(*l)) {
            return Err(Error::Param(format!("mask level {bad} not in {{-1,0,1}}")));
        }
        Ok(Self { rows, cols, levels })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            levels: vec![0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, v: usize, t: usize) -> i8 {
        self.levels[v * self.cols + t]
    }

    pub fn set(&mut self, v: usize, t: usize, level: i8) {
        assert!((-1..=1).contains(&level));
        self.levels[v * self.cols + t] = level;
    }

    pub fn row(&self, v: usize) -> &[i8] {
        &self.levels[v * self.cols..(v + 1) * self.cols]
    }

    pub fn levels(&self) -> &[i8] {
        &self.levels
    }
}

pub fn build_mcam(spec: &LayoutSpec) -> McamMask {
    let (rows, cols) = (spec.n_tokens(), spec.text_len());
    let mut levels = vec![0i8; rows * cols];
    for e in 0..spec.n_conditions() {
        let row: Vec<i8> = (0..cols).map(|t| spec.level_unchecked(Some(e), t)).collect();
        for v in spec.entity_tokens(e) {
            levels[v * cols..(v + 1) * cols].copy_from_slice(&row);
        }
    }
    McamMask { rows, cols, levels }
}
