//! Acceptance suite: ten criteria, one PASS/FAIL line each.
//!
//! Every reference value here comes from code written in this file
//! (rule-by-rule mask oracles, a direct position formula, 64-bit attention and
//! pooling, a hand-summed loss), never from the library's own helpers.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relattn::attn::{
    compute_scaling_s, masked_self_attention_blockwise, masked_self_attention_naive,
    relational_cross_attention, relational_cross_weights, standard_attention, AttnConfig,
};
use relattn::block::{BlockDims, BlockWeights, RelationalContext};
use relattn::corpus::{builtin_corpus, showcase_layout};
use relattn::flow::{flow_interpolate, fm_loss, FlowSample};
use relattn::grad::{grad_check, BlockInputs, GradCheckOptions};
use relattn::layout::{EntityKind, LayoutSpec};
use relattn::masks::{build_csam, build_mcam, materialize_blocks, Block, McamMask};
use relattn::r2pe::{apply_rotary, assign_positions, Position3, RotaryConfig};
use relattn::synth::fit_demo;
use relattn::tensor::Tensor2;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn corpus() -> Vec<(String, LayoutSpec)> {
    builtin_corpus()
}

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------- layout oracle ----------

/// Which attention branch a token belongs to, derived from the raw entity list.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum OracleBranch {
    Video,
    Entity(usize),
    Group(u32),
}

struct TokenInfo {
    branch: OracleBranch,
    entity: Option<usize>,
}

fn token_info(spec: &LayoutSpec, flat: usize) -> TokenInfo {
    let hw = spec.h() * spec.w();
    let video = spec.t() * hw;
    if flat < video {
        return TokenInfo {
            branch: OracleBranch::Video,
            entity: None,
        };
    }
    let e = (flat - video) / hw;
    let ent = &spec.entities()[e];
    let branch = match ent.kind {
        EntityKind::Background | EntityKind::Object => OracleBranch::Entity(e),
        EntityKind::Face | EntityKind::Attribute => OracleBranch::Group(ent.group.unwrap()),
    };
    TokenInfo {
        branch,
        entity: Some(e),
    }
}

fn oracle_csam(spec: &LayoutSpec, q: usize, k: usize) -> bool {
    let (bq, bk) = (token_info(spec, q).branch, token_info(spec, k).branch);
    bq == OracleBranch::Video || (bk != OracleBranch::Video && bq == bk)
}

fn oracle_mcam(spec: &LayoutSpec, v: usize, t: usize) -> i8 {
    let Some(e) = token_info(spec, v).entity else {
        return 0;
    };
    let ents = spec.entities();
    let Some(owner) = ents
        .iter()
        .position(|x| x.span.as_ref().is_some_and(|s| s.contains(&t)))
    else {
        return 0;
    };
    if owner == e {
        return 1;
    }
    match (ents[e].group, ents[owner].group) {
        (Some(a), Some(b)) if a == b => 1,
        (Some(_), Some(_)) => -1,
        _ => 0,
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut mismatches = 0usize;
    let mut pairs = 0usize;
    for (_, spec) in corpus() {
        let n = spec.n_tokens();
        let csam = build_csam(&spec);
        let painted = materialize_blocks(n, csam.blocks());
        let mcam = build_mcam(&spec);
        for q in 0..n {
            for k in 0..n {
                let want = oracle_csam(&spec, q, k);
                mismatches += usize::from(csam.get(q, k) != want || painted.get(q, k) != want);
                pairs += 1;
            }
            for t in 0..spec.text_len() {
                mismatches += usize::from(mcam.get(q, t) != oracle_mcam(&spec, q, t));
                pairs += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("{mismatches} mismatches over {pairs} pairs in {:.2} s", elapsed.as_secs_f64()),
    )
}

// ---------- positions ----------

fn oracle_position(spec: &LayoutSpec, flat: usize) -> (u32, u32, u32) {
    let (t, h, w) = (spec.t(), spec.h(), spec.w());
    let hw = h * w;
    let (frame, cell) = (flat / hw, flat % hw);
    let (row, col) = (cell / w, cell % w);
    if frame < t {
        return (frame as u32, col as u32, row as u32);
    }
    let e = frame - t;
    let ents = spec.entities();
    let n_bgobj = ents.iter().filter(|x| x.group.is_none()).count();
    match ents[e].group {
        None => ((e + t) as u32, col as u32, row as u32),
        Some(gid) => {
            let mut order: Vec<u32> = Vec::new();
            for x in ents.iter().filter_map(|x| x.group) {
                if !order.contains(&x) {
                    order.push(x);
                }
            }
            let g = order.iter().position(|&x| x == gid).unwrap();
            let first = ents.iter().position(|x| x.group == Some(gid)).unwrap();
            let m = e - first;
            ((g + t + n_bgobj) as u32, (col + w * m) as u32, (row + h * m) as u32)
        }
    }
}

fn criterion_2() -> Outcome {
    let mut mismatches = 0;
    let mut duplicates = 0;
    let mut tokens = 0;
    for (_, spec) in corpus() {
        let got = assign_positions(&spec);
        let mut seen = HashMap::new();
        for (flat, p) in got.iter().enumerate() {
            mismatches += usize::from((p.i, p.j, p.k) != oracle_position(&spec, flat));
            duplicates += usize::from(seen.insert((p.i, p.j, p.k), flat).is_some());
            tokens += 1;
        }
        mismatches += got.len().abs_diff(spec.n_tokens());
    }
    Outcome::new(
        mismatches == 0 && duplicates == 0,
        format!("{mismatches} mismatches, {duplicates} duplicate triples over {tokens} tokens"),
    )
}

// ---------- attention ----------

fn max_abs_rows(a: &Tensor2, b: &Tensor2, rows: impl IntoIterator<Item = usize>) -> f64 {
    rows.into_iter()
        .flat_map(|r| {
            a.row(r)
                .iter()
                .zip(b.row(r))
                .map(|(x, y)| (*x as f64 - *y as f64).abs())
        })
        .fold(0.0, f64::max)
}

fn perturb_rows(x: &Tensor2, rows: impl IntoIterator<Item = usize>, rng: &mut ChaCha8Rng) -> Tensor2 {
    let mut out = x.clone();
    for r in rows {
        for v in out.row_mut(r) {
            *v += rng.gen_range(-2.0..2.0f32);
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let layouts: Vec<LayoutSpec> = corpus()
        .into_iter()
        .map(|(_, s)| s)
        .filter(|s| s.n_conditions() > 0)
        .collect();
    let mut rng = seeded(3);
    let (mut iso_video, mut iso_group) = (0.0f64, 0.0f64);
    let mut min_response = f64::INFINITY;
    for _ in 0..20 {
        let spec = layouts.choose(&mut rng).unwrap();
        let n = spec.n_tokens();
        let nv = spec.n_video_tokens();
        let hd = 16;
        let csam = build_csam(spec);
        let q = Tensor2::randn(n, hd, 1.0, &mut rng);
        let k = Tensor2::randn(n, hd, 1.0, &mut rng);
        let v = Tensor2::randn(n, hd, 1.0, &mut rng);
        let run = |k: &Tensor2, v: &Tensor2| {
            let a = masked_self_attention_blockwise(&q, k, v, csam.blocks()).unwrap();
            let b = masked_self_attention_naive(&q, k, v, csam.bits()).unwrap();
            (a, b)
        };
        let base = run(&k, &v);

        let k2 = perturb_rows(&k, 0..nv, &mut rng);
        let v2 = perturb_rows(&v, 0..nv, &mut rng);
        let after = run(&k2, &v2);
        iso_video = iso_video
            .max(max_abs_rows(&after.0, &base.0, nv..n))
            .max(max_abs_rows(&after.1, &base.1, nv..n));

        // Perturb every condition token outside one chosen branch.
        let infos: Vec<OracleBranch> = (0..n).map(|f| token_info(spec, f).branch).collect();
        let pick = infos[rng.gen_range(nv..n)];
        let own: Vec<usize> = (nv..n).filter(|&f| infos[f] == pick).collect();
        let others: Vec<usize> = (nv..n).filter(|&f| infos[f] != pick).collect();
        let k3 = perturb_rows(&k, others.clone(), &mut rng);
        let v3 = perturb_rows(&v, others, &mut rng);
        let after = run(&k3, &v3);
        iso_group = iso_group
            .max(max_abs_rows(&after.0, &base.0, own.clone()))
            .max(max_abs_rows(&after.1, &base.1, own));

        let k4 = perturb_rows(&k, nv..n, &mut rng);
        let v4 = perturb_rows(&v, nv..n, &mut rng);
        let after = run(&k4, &v4);
        min_response = min_response.min(max_abs_rows(&after.0, &base.0, 0..nv));
    }
    Outcome::new(
        iso_video <= 1e-6 && iso_group <= 1e-6 && min_response > 1e-3,
        format!(
            "video leak {iso_video:.3e}, cross-branch leak {iso_group:.3e}, min video response {min_response:.3e}"
        ),
    )
}

fn rel_error(a: &Tensor2, b: &Tensor2) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max);
    let scale = b.data().iter().map(|y| (*y as f64).abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn criterion_4() -> Outcome {
    let (mut worst_rel, mut worst_perm) = (0.0f64, 0.0f64);
    let mut runs = 0;
    for (i, (_, spec)) in corpus().iter().enumerate() {
        let csam = build_csam(spec);
        let n = spec.n_tokens();
        for seed in 0..5u64 {
            let mut rng = seeded(400 + 10 * i as u64 + seed);
            let q = Tensor2::randn(n, 16, 1.0, &mut rng);
            let k = Tensor2::randn(n, 16, 1.0, &mut rng);
            let v = Tensor2::randn(n, 12, 1.0, &mut rng);
            let naive = masked_self_attention_naive(&q, &k, &v, csam.bits()).unwrap();
            let streamed = masked_self_attention_blockwise(&q, &k, &v, csam.blocks()).unwrap();
            worst_rel = worst_rel.max(rel_error(&streamed, &naive));
            let mut shuffled: Vec<Block> = csam.blocks().to_vec();
            shuffled.shuffle(&mut rng);
            let permuted = masked_self_attention_blockwise(&q, &k, &v, &shuffled).unwrap();
            shuffled.reverse();
            let reversed = masked_self_attention_blockwise(&q, &k, &v, &shuffled).unwrap();
            worst_perm = worst_perm
                .max(permuted.max_abs_diff(&streamed) as f64)
                .max(reversed.max_abs_diff(&streamed) as f64);
            runs += 1;
        }
    }
    Outcome::new(
        worst_rel <= 1e-5 && worst_perm <= 1e-6,
        format!("{runs} runs, max rel error {worst_rel:.3e}, max permuted-order diff {worst_perm:.3e}"),
    )
}

/// Stepwise pooling: for each query token, average its patch in `f64`, dot
/// with each key, take the magnitude.
fn oracle_s(q: &Tensor2, k: &Tensor2, spec: &LayoutSpec, d: usize) -> Vec<f64> {
    let (h, w) = (spec.h(), spec.w());
    let hw = h * w;
    let mut out = vec![0.0; q.rows() * k.rows()];
    for flat in 0..q.rows() {
        let (frame, cell) = (flat / hw, flat % hw);
        let (row, col) = (cell / w, cell % w);
        let (r0, c0) = (row / d * d, col / d * d);
        let mut pooled = vec![0.0f64; q.cols()];
        let mut count = 0.0;
        for r in r0..(r0 + d).min(h) {
            for c in c0..(c0 + d).min(w) {
                for (p, x) in pooled.iter_mut().zip(q.row(frame * hw + r * w + c)) {
                    *p += *x as f64;
                }
                count += 1.0;
            }
        }
        for t in 0..k.rows() {
            let dot: f64 = pooled
                .iter()
                .zip(k.row(t))
                .map(|(p, y)| p / count * *y as f64)
                .sum();
            out[flat * k.rows() + t] = dot.abs();
        }
    }
    out
}

fn exact_abs_qk(q: &Tensor2, k: &Tensor2) -> Vec<f64> {
    let mut out = Vec::with_capacity(q.rows() * k.rows());
    for r in 0..q.rows() {
        for t in 0..k.rows() {
            let dot: f64 = q.row(r).iter().zip(k.row(t)).map(|(a, b)| *a as f64 * *b as f64).sum();
            out.push(dot.abs());
        }
    }
    out
}

fn mixed_error(got: &Tensor2, want: &[f64]) -> f64 {
    got.data()
        .iter()
        .zip(want)
        .map(|(a, b)| (*a as f64 - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn criterion_5() -> Outcome {
    let layouts = corpus();
    let mut rng = seeded(5);
    let (mut random_err, mut unit_err, mut constant_err) = (0.0f64, 0.0f64, 0.0f64);
    for trial in 0..40 {
        let spec = &layouts[trial % layouts.len()].1;
        let n = spec.n_tokens();
        let hd = 8;
        let q = Tensor2::randn(n, hd, 1.0, &mut rng);
        let k = Tensor2::randn(spec.text_len(), hd, 1.0, &mut rng);
        let d = [2, 3, 4, 8][trial % 4];
        random_err = random_err.max(mixed_error(
            &compute_scaling_s(&q, &k, spec, d).unwrap(),
            &oracle_s(&q, &k, spec, d),
        ));
        unit_err = unit_err.max(mixed_error(
            &compute_scaling_s(&q, &k, spec, 1).unwrap(),
            &exact_abs_qk(&q, &k),
        ));
        // Every patch of side `d` holds copies of one random vector.
        let (h, w) = (spec.h(), spec.w());
        let hw = h * w;
        let anchors = Tensor2::randn(n, hd, 1.0, &mut rng);
        let qc = Tensor2::from_fn(n, hd, |r, c| {
            let (frame, cell) = (r / hw, r % hw);
            let (row, col) = (cell / w, cell % w);
            anchors.get(frame * hw + row / d * d * w + col / d * d, c)
        });
        constant_err = constant_err.max(mixed_error(
            &compute_scaling_s(&qc, &k, spec, d).unwrap(),
            &exact_abs_qk(&qc, &k),
        ));
    }
    Outcome::new(
        random_err <= 1e-6 && unit_err <= 1e-6 && constant_err <= 1e-6,
        format!(
            "vs stepwise oracle {random_err:.3e}, d=1 {unit_err:.3e}, patch-constant {constant_err:.3e}"
        ),
    )
}

fn criterion_6() -> Outcome {
    let layouts: Vec<LayoutSpec> = corpus()
        .into_iter()
        .map(|(_, s)| s)
        .filter(|s| s.text_len() > 0)
        .collect();
    let mut rng = seeded(6);
    let mut identical = true;
    for spec in layouts.iter().take(10) {
        let n = spec.n_tokens();
        let q = Tensor2::randn(n, 8, 1.0, &mut rng);
        let k = Tensor2::randn(spec.text_len(), 8, 1.0, &mut rng);
        let v = Tensor2::randn(spec.text_len(), 8, 1.0, &mut rng);
        let mcam = build_mcam(spec);
        let s = compute_scaling_s(&q, &k, spec, 2).unwrap();
        let relational =
            relational_cross_attention(&q, &k, &v, &mcam, &s, &AttnConfig::new(8).with_r(0.0)).unwrap();
        let plain = standard_attention(&q, &k, &v).unwrap();
        identical &= relational
            .data()
            .iter()
            .zip(plain.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    }

    let mut violations = 0;
    let mut trials = 0;
    while trials < 100 {
        let spec = layouts.choose(&mut rng).unwrap();
        let n = spec.n_tokens();
        let q = Tensor2::randn(n, 8, 1.0, &mut rng);
        let k = Tensor2::randn(spec.text_len(), 8, 1.0, &mut rng);
        let mcam = McamMask::from_levels(
            n,
            spec.text_len(),
            (0..n * spec.text_len()).map(|_| rng.gen_range(-1..=1)).collect(),
        )
        .unwrap();
        let s = compute_scaling_s(&q, &k, spec, 2).unwrap();
        let (row, col) = (rng.gen_range(0..n), rng.gen_range(0..spec.text_len()));
        let level = mcam.get(row, col);
        if level == 1 || s.get(row, col) <= 0.0 {
            continue;
        }
        let cfg = AttnConfig::new(8).with_r(rng.gen_range(0.1..1.0));
        let before = relational_cross_weights(&q, &k, &mcam, &s, &cfg).unwrap();
        let mut raised = mcam.clone();
        raised.set(row, col, level + 1);
        let after = relational_cross_weights(&q, &k, &raised, &s, &cfg).unwrap();
        violations += usize::from(after.get(row, col) <= before.get(row, col));
        trials += 1;
    }
    Outcome::new(
        identical && violations == 0,
        format!("r=0 bit-identical: {identical}, monotonicity violations {violations}/{trials}"),
    )
}

// ---------- rotary ----------

/// Interleaved-pair rotation written out directly, `f64` throughout.
fn oracle_rotate(x: &[f32], pos: Position3, split: [usize; 3]) -> Vec<f64> {
    let mut out: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let axes = [pos.i as f64, pos.j as f64, pos.k as f64];
    let mut offset = 0;
    for (band, &width) in split.iter().enumerate() {
        for p in 0..width / 2 {
            let angle = axes[band] / 10000f64.powf(2.0 * p as f64 / width as f64);
            let (a, b) = (out[offset + 2 * p], out[offset + 2 * p + 1]);
            out[offset + 2 * p] = a * angle.cos() - b * angle.sin();
            out[offset + 2 * p + 1] = a * angle.sin() + b * angle.cos();
        }
        offset += width;
    }
    out
}

fn default_split(head_dim: usize) -> [usize; 3] {
    let side = (head_dim / 3) & !1;
    [head_dim - 2 * side, side, side]
}

fn norm(x: &[f32]) -> f64 {
    x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()
}

fn criterion_7() -> Outcome {
    let (mut iso, mut oracle_err, mut shift) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..5u64 {
        let mut rng = seeded(700 + seed);
        for hd in [8usize, 24, 128] {
            let cfg = RotaryConfig::new(hd).unwrap();
            let positions: Vec<Position3> = (0..32)
                .map(|_| Position3::new(rng.gen_range(0..64), rng.gen_range(0..64), rng.gen_range(0..64)))
                .collect();
            let x = Tensor2::randn(32, hd, 1.0, &mut rng);
            let y = apply_rotary(&x, &positions, &cfg).unwrap();
            for (r, &pos) in positions.iter().enumerate() {
                iso = iso.max((norm(y.row(r)) - norm(x.row(r))).abs() / norm(x.row(r)));
                let want = oracle_rotate(x.row(r), pos, default_split(hd));
                for (a, b) in y.row(r).iter().zip(&want) {
                    oracle_err = oracle_err.max((*a as f64 - b).abs());
                }
            }

            let q = Tensor2::randn(1, hd, 1.0, &mut rng);
            let k = Tensor2::randn(1, hd, 1.0, &mut rng);
            let (pq, pk) = (
                [rng.gen_range(0..16u32), rng.gen_range(0..16), rng.gen_range(0..16)],
                [rng.gen_range(0..16u32), rng.gen_range(0..16), rng.gen_range(0..16)],
            );
            let logit = |o: [u32; 3]| -> f64 {
                let a = apply_rotary(&q, &[Position3::new(pq[0] + o[0], pq[1] + o[1], pq[2] + o[2])], &cfg)
                    .unwrap();
                let b = apply_rotary(&k, &[Position3::new(pk[0] + o[0], pk[1] + o[1], pk[2] + o[2])], &cfg)
                    .unwrap();
                a.row(0).iter().zip(b.row(0)).map(|(x, y)| *x as f64 * *y as f64).sum()
            };
            let base = logit([0, 0, 0]);
            let scale = norm(q.row(0)) * norm(k.row(0));
            for di in 0..3 {
                for dj in 0..3 {
                    for dk in 0..3 {
                        shift = shift.max((logit([di, dj, dk]) - base).abs() / scale);
                    }
                }
            }
        }
    }
    Outcome::new(
        iso <= 1e-6 && shift <= 1e-5 && oracle_err <= 1e-5,
        format!("isometry {iso:.3e}, relative shift {shift:.3e}, vs direct rotation {oracle_err:.3e}"),
    )
}

// ---------- flow and gradients ----------

fn criterion_8() -> Outcome {
    let mut rng = seeded(8);
    let mut endpoints = true;
    let mut loss_err = 0.0f64;
    for _ in 0..10 {
        let (rows, cols) = (rng.gen_range(1..40), rng.gen_range(1..20));
        let z = Tensor2::randn(rows, cols, 1.0, &mut rng);
        let z0 = Tensor2::randn(rows, cols, 1.0, &mut rng);
        let at = |t: f32| flow_interpolate(&FlowSample { z: z.clone(), z0: z0.clone(), t }).unwrap();
        let (zt0, v) = at(0.0);
        let (zt1, _) = at(1.0);
        endpoints &= zt0 == z0 && zt1 == z;
        endpoints &= v
            .data()
            .iter()
            .zip(z.data().iter().zip(z0.data()))
            .all(|(v, (a, b))| *v == a - b);

        let pred = Tensor2::randn(rows, cols, 1.0, &mut rng);
        let mut sum = 0.0f64;
        for r in 0..rows {
            for c in 0..cols {
                let d = pred.get(r, c) as f64 - v.get(r, c) as f64;
                sum += d * d;
            }
        }
        let want = sum / (rows * cols) as f64;
        loss_err = loss_err.max((fm_loss(&pred, &v).unwrap() - want).abs());
    }

    let spec = showcase_layout();
    let dims = BlockDims {
        channels: 8,
        text_channels: 6,
        n_heads: 2,
        head_dim: 6,
        hidden: 12,
    };
    let ctx = RelationalContext::new(&spec, dims.head_dim).unwrap();
    let cfg = AttnConfig::new(dims.head_dim).with_d(2);
    let mut grad_err = 0.0f64;
    let mut coords = 0;
    for seed in 0..5u64 {
        let mut rng = seeded(800 + seed);
        let w = BlockWeights::random(dims, 1.0, &mut rng);
        let inputs = BlockInputs {
            tokens: Tensor2::randn(spec.n_tokens(), dims.channels, 1.0, &mut rng),
            text: Tensor2::randn(spec.text_len(), dims.text_channels, 1.0, &mut rng),
            target: Tensor2::randn(spec.n_tokens(), dims.channels, 1.0, &mut rng),
            loss_rows: None,
        };
        let opts = GradCheckOptions {
            seed,
            ..Default::default()
        };
        let report = grad_check(&ctx, &w, &inputs, &cfg, 1e-4, &opts).unwrap();
        coords += report.entries.len();
        grad_err = grad_err.max(report.max_rel_error);
    }
    Outcome::new(
        endpoints && loss_err <= 1e-7 && grad_err < 1e-3,
        format!(
            "endpoints exact: {endpoints}, loss error {loss_err:.3e}, grad rel error {grad_err:.3e} over {coords} coords"
        ),
    )
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let dims = BlockDims::default();
    let losses = fit_demo(
        &showcase_layout(),
        dims,
        9,
        200,
        1e-2,
        &AttnConfig::new(dims.head_dim),
    )
    .unwrap();
    let elapsed = start.elapsed();
    let (first, last) = (losses[0], *losses.last().unwrap());
    let reduction = 1.0 - last / first;
    Outcome::new(
        losses.len() == 201 && reduction >= 0.5 && elapsed < Duration::from_secs(120),
        format!(
            "loss {first:.4} -> {last:.4} ({:.1}% lower) in {:.2} s",
            100.0 * reduction,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------- CLI ----------

fn layouts_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../layouts")
}

fn relctl(args: &[&std::ffi::OsStr]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_relctl"))
        .args(args)
        .output()
        .expect("relctl runs")
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn criterion_10() -> Outcome {
    let tmp = std::env::temp_dir().join(format!("relctl-acceptance-{}", std::process::id()));
    let mut identical = true;
    let mut compared = 0;
    for name in ["showcase.json", "large.json", "t2v.json", "no_spans.json"] {
        let spec = layouts_dir().join(name);
        let mut outputs = Vec::new();
        for run in 0..2 {
            let dir = tmp.join(format!("{name}-{run}"));
            let out = relctl(&["masks".as_ref(), spec.as_os_str(), "-o".as_ref(), dir.as_os_str()]);
            identical &= out.status.success();
            outputs.push(read_dir_sorted(&dir));
        }
        identical &= outputs[0].len() == 6 && outputs[0] == outputs[1];
        compared += outputs[0].len();

        let forward = |_: usize| {
            relctl(&[
                "forward".as_ref(),
                spec.as_os_str(),
                "--seed".as_ref(),
                "17".as_ref(),
            ])
        };
        let (a, b) = (forward(0), forward(1));
        identical &= a.status.success() && a.stdout == b.stdout && !a.stdout.is_empty();
        compared += 1;
    }
    let _ = std::fs::remove_dir_all(&tmp);
    Outcome::new(identical, format!("{compared} outputs compared across two runs, identical: {identical}"))
}

type Criterion = (&'static str, fn() -> Outcome);

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("mask oracle equivalence", criterion_1),
        ("rotary position assignment", criterion_2),
        ("branch isolation", criterion_3),
        ("block-streaming equivalence", criterion_4),
        ("scaling matrix", criterion_5),
        ("relational cross-attention", criterion_6),
        ("rotary properties", criterion_7),
        ("flow matching and gradients", criterion_8),
        ("demo fit", criterion_9),
        ("CLI determinism", criterion_10),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = run();
        // Straight to the stderr handle: the test harness captures print macros.
        writeln!(
            std::io::stderr(),
            "{} criterion {:>2} {name}: {}",
            if outcome.passed { "PASS" } else { "FAIL" },
            i + 1,
            outcome.detail
        )
        .unwrap();
        if !outcome.passed {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
