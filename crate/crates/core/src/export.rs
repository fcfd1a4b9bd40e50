//! Byte-stable CSV and binary PGM renderings of masks, positions and blocks.
//!
//! CSV files carry a header row and LF line endings. PGM files are `P5`
//! with maxval 255.

use std::fmt::Write;

use crate::masks::{BitMatrix, Block, McamMask};
use crate::r2pe::Position3;

fn matrix_header(out: &mut String, cols: usize) {
    out.push('q');
    for c in 0..cols {
        write!(out, ",{c}").unwrap();
    }
    out.push('\n');
}

/// One row per query: the row index then `0/1` per key.
pub fn bits_csv(mask: &BitMatrix) -> String {
    let mut out = String::with_capacity(mask.rows() * (mask.cols() * 2 + 8));
    matrix_header(&mut out, mask.cols());
    for r in 0..mask.rows() {
        write!(out, "{r}").unwrap();
        for c in 0..mask.cols() {
            out.push_str(if mask.get(r, c) { ",1" } else { ",0" });
        }
        out.push('\n');
    }
    out
}

/// One row per visual token: the row index then `-1/0/1` per text token.
pub fn levels_csv(mask: &McamMask) -> String {
    let mut out = String::with_capacity(mask.rows() * (mask.cols() * 3 + 8));
    matrix_header(&mut out, mask.cols());
    for r in 0..mask.rows() {
        write!(out, "{r}").unwrap();
        for &l in mask.row(r) {
            write!(out, ",{l}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn positions_csv(positions: &[Position3]) -> String {
    let mut out = String::from("flat,i,j,k\n");
    for (flat, p) in positions.iter().enumerate() {
        writeln!(out, "{flat},{},{},{}", p.i, p.j, p.k).unwrap();
    }
    out
}

pub fn blocks_csv(blocks: &[Block]) -> String {
    let mut out = String::from("q0,q1,k0,k1\n");
    for b in blocks {
        writeln!(
            out,
            "{},{},{},{}",
            b.queries.start, b.queries.end, b.keys.start, b.keys.end
        )
        .unwrap();
    }
    out
}

fn pgm(width: usize, height: usize, pixels: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

/// Admissible pairs white (255), blocked pairs black (0).
pub fn bits_pgm(mask: &BitMatrix) -> Vec<u8> {
    let (rows, cols) = (mask.rows(), mask.cols());
    pgm(
        cols,
        rows,
        (0..rows).flat_map(|r| (0..cols).map(move |c| if mask.get(r, c) { 255 } else { 0 })),
    )
}

/// `-1 → 0`, `0 → 128`, `+1 → 255`.
pub fn levels_pgm(mask: &McamMask) -> Vec<u8> {
    pgm(
        mask.cols(),
        mask.rows(),
        mask.levels().iter().map(|&l| level_gray(l)),
    )
}

pub fn level_gray(level: i8) -> u8 {
    match level {
        -1 => 0,
        0 => 128,
        _ => 255,
    }
}

/// C-style `%.6e`: six fractional digits and a signed, at least two-digit exponent.
pub fn fmt_e6(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let s = format!("{x:.6e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}
