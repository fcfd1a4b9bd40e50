//! Invariant suite run against one layout.
//!
//! Structural checks are exhaustive over tokens and token pairs; numeric
//! checks draw seeded random inputs. Relative errors are norm-wise:
//! `max|a − b| / max|b|`.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attn::{
    compute_scaling_s, masked_attention_weights, masked_self_attention_blockwise,
    masked_self_attention_naive, relational_cross_weights, standard_attention_weights, AttnConfig,
};
use crate::block::{block_forward_with, BlockDims, BlockOptions, BlockWeights, RelationalContext};
use crate::error::Result;
use crate::flow::{flow_interpolate, FlowSample};
use crate::layout::{Branch, LayoutSpec};
use crate::masks::{build_csam, build_mcam, materialize_blocks, McamMask};
use crate::r2pe::{apply_rotary, assign_positions, Position3, RotaryConfig};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Bound {
    AtMost(f64),
    Above(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub bound: Bound,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, measured: f64, bound: Bound) -> Self {
        let passed = match bound {
            Bound::AtMost(t) => measured <= t,
            Bound::Above(t) => measured > t,
        };
        Self {
            name: name.into(),
            passed: passed && !measured.is_nan(),
            measured,
            bound,
        }
    }

    /// Zero-tolerance structural check measured as a violation count.
    fn count(name: &str, violations: usize) -> Self {
        Self::new(name, violations as f64, Bound::AtMost(0.0))
    }
}

/// `max|a − b| / max|b|` over matching entries.
pub fn rel_error(a: &[f32], b: &[f32]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|y| (*y as f64).abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

/// `max |a − b| / max(1, |b|)`: absolute near zero, relative for large entries.
pub fn mixed_error(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs() / (*y as f64).abs().max(1.0))
        .fold(0.0, f64::max)
}

fn max_abs_rows(a: &Tensor2, b: &Tensor2, rows: impl Iterator<Item = usize>) -> f64 {
    rows.flat_map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).abs() as f64))
        .fold(0.0, f64::max)
}

fn structural(spec: &LayoutSpec) -> Vec<CheckResult> {
    let n = spec.n_tokens();
    let mut out = Vec::new();

    let bad_addr = (0..n)
        .filter(|&f| {
            let a = spec.address_of(f).expect("in range");
            spec.flat_of(&a).ok() != Some(f) || a.flat != f
        })
        .count();
    out.push(CheckResult::count("address_bijection", bad_addr));

    let branches: Vec<Branch> = (0..n).map(|f| spec.branch_of(f).expect("in range")).collect();
    let distinct: HashSet<Branch> = branches.iter().copied().filter(|b| *b != Branch::Video).collect();
    let mut partition_errors = distinct
        .len()
        .abs_diff(spec.n_standalone() + spec.n_groups());
    for b in &distinct {
        let range = spec.branch_tokens(*b).expect("condition branch");
        partition_errors += (0..n)
            .filter(|&f| range.contains(&f) != (branches[f] == *b))
            .count();
    }
    partition_errors += (0..spec.n_video_tokens())
        .filter(|&f| branches[f] != Branch::Video)
        .count();
    out.push(CheckResult::count("branch_partition", partition_errors));

    let mut level_errors = 0;
    for v in 0..n {
        let mut plus = HashSet::new();
        let mut minus = HashSet::new();
        for t in 0..spec.text_len() {
            match spec.text_level_of(v, t) {
                Ok(1) => {
                    plus.insert(t);
                }
                Ok(-1) => {
                    minus.insert(t);
                }
                Ok(0) => {}
                _ => level_errors += 1,
            }
        }
        level_errors += plus.intersection(&minus).count();
    }
    out.push(CheckResult::count("text_level_total_and_disjoint", level_errors));

    let positions = assign_positions(spec);
    let unique: HashSet<Position3> = positions.iter().copied().collect();
    out.push(CheckResult::count("positions_unique", n - unique.len()));
    let (t, nso, ng) = (spec.t(), spec.n_standalone(), spec.n_groups());
    let range_errors = positions
        .iter()
        .enumerate()
        .filter(|&(f, p)| {
            let i = p.i as usize;
            match branches[f] {
                Branch::Video => {
                    !(i < t && (p.j as usize) < spec.w() && (p.k as usize) < spec.h())
                }
                Branch::Standalone(_) => !(t..t + nso).contains(&i),
                Branch::Group(_) => !(t + nso..t + nso + ng).contains(&i),
            }
        })
        .count();
    out.push(CheckResult::count("position_ranges", range_errors));

    let csam = build_csam(spec);
    let nv = spec.n_video_tokens();
    out.push(CheckResult::count(
        "csam_video_rows_full",
        (0..nv).map(|q| (0..n).filter(|&k| !csam.get(q, k)).count()).sum(),
    ));
    out.push(CheckResult::count(
        "csam_condition_blind_to_video",
        (nv..n).map(|q| (0..nv).filter(|&k| csam.get(q, k)).count()).sum(),
    ));
    out.push(CheckResult::count(
        "csam_reflexive",
        (0..n).filter(|&q| !csam.get(q, q)).count(),
    ));
    let asymmetric = (0..n).any(|q| (0..n).any(|k| csam.get(q, k) && !csam.get(k, q)));
    out.push(CheckResult::count(
        "csam_asymmetric",
        usize::from(spec.n_conditions() > 0 && !asymmetric),
    ));
    let painted = materialize_blocks(n, csam.blocks());
    let cover_errors = (0..n)
        .map(|q| (0..n).filter(|&k| painted.get(q, k) != csam.get(q, k)).count())
        .sum::<usize>()
        + (csam.blocks().iter().map(|b| b.area()).sum::<usize>() != csam.bits().count_ones()) as usize;
    out.push(CheckResult::count("csam_block_cover_exact", cover_errors));

    let mcam = build_mcam(spec);
    out.push(CheckResult::count(
        "mcam_levels_valid",
        mcam.levels().iter().filter(|l| !(-1..=1).contains(*l)).count(),
    ));
    out.push(CheckResult::count(
        "mcam_video_rows_zero",
        (0..nv).map(|v| mcam.row(v).iter().filter(|&&l| l != 0).count()).sum(),
    ));
    let mut symmetry_errors = 0;
    for (g, members) in spec.groups().iter().enumerate() {
        let rows: Vec<usize> = members.clone().flat_map(|e| spec.entity_tokens(e)).collect();
        let foreign: Vec<usize> = (0..spec.text_len())
            .filter(|&t| {
                spec.text_owner(t)
                    .is_some_and(|o| matches!(spec.branch_of_entity(o), Branch::Group(h) if h != g))
            })
            .collect();
        for &r in &rows[1..] {
            symmetry_errors += foreign
                .iter()
                .filter(|&&t| mcam.get(r, t) != mcam.get(rows[0], t))
                .count();
        }
    }
    out.push(CheckResult::count("mcam_group_symmetry", symmetry_errors));
    out
}

fn rotary_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let cfg = RotaryConfig::new(24)?;
    let mut positions = Vec::new();
    for _ in 0..16 {
        positions.push(Position3::new(
            rng.gen_range(0..40),
            rng.gen_range(0..40),
            rng.gen_range(0..40),
        ));
    }
    let x = Tensor2::randn(16, 24, 1.0, rng);
    let y = apply_rotary(&x, &positions, &cfg)?;
    let iso = (0..16)
        .map(|r| {
            let a: f64 = x.row(r).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            let b: f64 = y.row(r).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            (a - b).abs() / a
        })
        .fold(0.0, f64::max);

    let q = Tensor2::randn(1, 24, 1.0, rng);
    let k = Tensor2::randn(1, 24, 1.0, rng);
    let p1 = Position3::new(rng.gen_range(0..20), rng.gen_range(0..20), rng.gen_range(0..20));
    let p2 = Position3::new(rng.gen_range(0..20), rng.gen_range(0..20), rng.gen_range(0..20));
    let shifted_dot = |d: (u32, u32, u32)| -> Result<f64> {
        let a = apply_rotary(&q, &[Position3::new(p1.i + d.0, p1.j + d.1, p1.k + d.2)], &cfg)?;
        let b = apply_rotary(&k, &[Position3::new(p2.i + d.0, p2.j + d.1, p2.k + d.2)], &cfg)?;
        Ok(a.row(0).iter().zip(b.row(0)).map(|(x, y)| *x as f64 * *y as f64).sum())
    };
    let norm = |t: &Tensor2| t.row(0).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    let scale = norm(&q) * norm(&k);
    let base = shifted_dot((0, 0, 0))?;
    let mut drift: f64 = 0.0;
    for di in 0..3 {
        for dj in 0..3 {
            for dk in 0..3 {
                drift = drift.max((shifted_dot((di, dj, dk))? - base).abs() / scale);
            }
        }
    }
    Ok(vec![
        CheckResult::new("rotary_isometry", iso, Bound::AtMost(1e-6)),
        CheckResult::new("rotary_relative_shift", drift, Bound::AtMost(1e-5)),
    ])
}

fn attention_checks(spec: &LayoutSpec, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let n = spec.n_tokens();
    let nv = spec.n_video_tokens();
    let hd = 8;
    let csam = build_csam(spec);
    let q = Tensor2::randn(n, hd, 1.0, rng);
    let k = Tensor2::randn(n, hd, 1.0, rng);
    let v = Tensor2::randn(n, hd, 1.0, rng);
    let mut out = Vec::new();

    let naive = masked_self_attention_naive(&q, &k, &v, csam.bits())?;
    let streamed = masked_self_attention_blockwise(&q, &k, &v, csam.blocks())?;
    out.push(CheckResult::new(
        "blockwise_equals_naive",
        rel_error(streamed.data(), naive.data()),
        Bound::AtMost(1e-5),
    ));
    let mut reversed = csam.blocks().to_vec();
    reversed.reverse();
    let permuted = masked_self_attention_blockwise(&q, &k, &v, &reversed)?;
    out.push(CheckResult::new(
        "block_order_invariance",
        permuted.max_abs_diff(&streamed) as f64,
        Bound::AtMost(1e-6),
    ));

    // Replace every video token's key and value.
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    for r in 0..nv {
        k2.row_mut(r).copy_from_slice(Tensor2::randn(1, hd, 3.0, rng).row(0));
        v2.row_mut(r).copy_from_slice(Tensor2::randn(1, hd, 3.0, rng).row(0));
    }
    let after = masked_self_attention_blockwise(&q, &k2, &v2, csam.blocks())?;
    out.push(CheckResult::new(
        "isolation_from_video",
        max_abs_rows(&after, &streamed, nv..n),
        Bound::AtMost(1e-6),
    ));

    let mut group_leak: f64 = 0.0;
    for branch in spec.condition_branches() {
        let own = spec.branch_tokens(branch).expect("condition branch");
        let mut k3 = k.clone();
        let mut v3 = v.clone();
        for r in nv..n {
            if !own.contains(&r) {
                k3.row_mut(r).iter_mut().for_each(|x| *x = -*x + 0.5);
                v3.row_mut(r).iter_mut().for_each(|x| *x = 2.0 * *x - 1.0);
            }
        }
        let res = masked_self_attention_blockwise(&q, &k3, &v3, csam.blocks())?;
        group_leak = group_leak.max(max_abs_rows(&res, &streamed, own));
    }
    out.push(CheckResult::new(
        "isolation_between_branches",
        group_leak,
        Bound::AtMost(1e-6),
    ));

    if spec.n_conditions() > 0 {
        let mut k4 = k.clone();
        let mut v4 = v.clone();
        for r in nv..n {
            k4.row_mut(r).copy_from_slice(Tensor2::randn(1, hd, 1.0, rng).row(0));
            v4.row_mut(r).copy_from_slice(Tensor2::randn(1, hd, 1.0, rng).row(0));
        }
        let res = masked_self_attention_blockwise(&q, &k4, &v4, csam.blocks())?;
        out.push(CheckResult::new(
            "video_sees_conditions",
            max_abs_rows(&res, &streamed, 0..nv),
            Bound::Above(1e-3),
        ));
    }

    let l = spec.text_len();
    let kt = Tensor2::randn(l, hd, 1.0, rng);
    let cfg = AttnConfig::new(hd).with_d(2);
    let s = compute_scaling_s(&q, &kt, spec, cfg.d)?;
    let mcam = build_mcam(spec);
    let row_sum_err = |w: &Tensor2| {
        (0..w.rows())
            .filter(|_| w.cols() > 0)
            .map(|r| (w.row(r).iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    };
    let norm_err = row_sum_err(&masked_attention_weights(&q, &k, csam.bits())?)
        .max(row_sum_err(&standard_attention_weights(&q, &k)?))
        .max(row_sum_err(&relational_cross_weights(&q, &kt, &mcam, &s, &cfg)?));
    out.push(CheckResult::new(
        "weights_normalized",
        norm_err,
        Bound::AtMost(1e-5),
    ));

    let exact = q.matmul_t(&kt)?.map(f32::abs);
    let s1 = compute_scaling_s(&q, &kt, spec, 1)?;
    out.push(CheckResult::new(
        "scaling_unit_pool_exact",
        mixed_error(s1.data(), exact.data()),
        Bound::AtMost(1e-6),
    ));
    // Patch-constant queries: copy each 2×2 patch's first cell.
    let (h, w, hw) = (spec.h(), spec.w(), spec.hw());
    let qc = Tensor2::from_fn(n, hd, |r, c| {
        let (frame, cell) = (r / hw, r % hw);
        let (row, col) = (cell / w, cell % w);
        q.get(frame * hw + (row / 2 * 2).min(h - 1) * w + (col / 2 * 2).min(w - 1), c)
    });
    let sc = compute_scaling_s(&qc, &kt, spec, 2)?;
    let exact_c = qc.matmul_t(&kt)?.map(f32::abs);
    out.push(CheckResult::new(
        "scaling_patch_constant_exact",
        mixed_error(sc.data(), exact_c.data()),
        Bound::AtMost(1e-6),
    ));

    // Raising one level must strictly raise that key's weight.
    let mut violations = 0;
    let mut trials = 0;
    if l > 0 {
        let base_w = relational_cross_weights(&q, &kt, &mcam, &s, &cfg)?;
        for _ in 0..20 {
            let row = rng.gen_range(0..n);
            let t = rng.gen_range(0..l);
            let level = mcam.get(row, t);
            if level == 1 || s.get(row, t) <= 0.0 {
                continue;
            }
            let mut raised = McamMask::from_levels(n, l, mcam.levels().to_vec())?;
            raised.set(row, t, level + 1);
            let w2 = relational_cross_weights(&q, &kt, &raised, &s, &cfg)?;
            trials += 1;
            if w2.get(row, t) <= base_w.get(row, t) {
                violations += 1;
            }
        }
    }
    let _ = trials;
    out.push(CheckResult::count("mcam_monotone", violations));
    Ok(out)
}

fn block_checks(spec: &LayoutSpec, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = BlockDims::default();
    let w = BlockWeights::random(dims, 1.0, &mut rng);
    let z = Tensor2::randn(spec.n_tokens(), dims.channels, 1.0, &mut rng);
    let z0 = Tensor2::randn(spec.n_tokens(), dims.channels, 1.0, &mut rng);
    let text = Tensor2::randn(spec.text_len(), dims.text_channels, 1.0, &mut rng);
    let ctx = RelationalContext::new(spec, dims.head_dim)?;
    let cfg = AttnConfig::new(dims.head_dim);
    let base = block_forward_with(&ctx, &w, &z, &text, &cfg, BlockOptions::default())?;
    let mut z2 = z.clone();
    for r in 0..spec.n_video_tokens() {
        z2.row_mut(r).iter_mut().for_each(|x| *x = 1.0 - 2.0 * *x);
    }
    let after = block_forward_with(&ctx, &w, &z2, &text, &cfg, BlockOptions::default())?;

    let at0 = flow_interpolate(&FlowSample { z: z.clone(), z0: z0.clone(), t: 0.0 })?.0;
    let at1 = flow_interpolate(&FlowSample { z: z.clone(), z0: z0.clone(), t: 1.0 })?.0;
    Ok(vec![
        CheckResult::new(
            "block_isolation_from_video",
            max_abs_rows(&after, &base, spec.n_video_tokens()..spec.n_tokens()),
            Bound::AtMost(1e-6),
        ),
        CheckResult::count(
            "flow_endpoints_exact",
            usize::from(at0 != z0) + usize::from(at1 != z),
        ),
    ])
}

/// Every structural and numeric invariant on one layout.
pub fn run_layout_checks(spec: &LayoutSpec, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = structural(spec);
    out.extend(rotary_checks(&mut rng)?);
    out.extend(attention_checks(spec, &mut rng)?);
    out.extend(block_checks(spec, seed.wrapping_add(1))?);
    Ok(out)
}
