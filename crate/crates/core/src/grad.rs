//! Double-precision replica of the relational block with a hand-derived
//! backward pass, a central-difference gradient checker and a small demo fit.
//!
//! The forward here mirrors [`block_forward_with`](crate::block::block_forward_with)
//! operation for operation, but evaluates every attention row densely with
//! the boolean mask applied, so it also serves as the dense reference for the
//! block-streamed `f32` path. The pooled similarity matrix is differentiated
//! through (it depends on the current queries).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attn::AttnConfig;
use crate::block::{gelu, gelu_grad, BlockOptions, BlockWeights, RelationalContext, LN_EPS, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn from_tensor(t: &Tensor2) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: t.to_f64(),
        }
    }

    fn to_tensor(&self) -> Tensor2 {
        Tensor2::from_vec(self.rows, self.cols, self.data.iter().map(|&v| v as f32).collect())
            .expect("consistent shape")
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `a · b`
    fn mm(a: &Mat, b: &Mat) -> Mat {
        debug_assert_eq!(a.cols, b.rows);
        let mut out = Mat::zeros(a.rows, b.cols);
        for r in 0..a.rows {
            for k in 0..a.cols {
                let x = a.at(r, k);
                if x == 0.0 {
                    continue;
                }
                let src = b.row(k);
                for (o, &y) in out.row_mut(r).iter_mut().zip(src) {
                    *o += x * y;
                }
            }
        }
        out
    }

    /// `aᵀ · b`
    fn mm_tn(a: &Mat, b: &Mat) -> Mat {
        debug_assert_eq!(a.rows, b.rows);
        let mut out = Mat::zeros(a.cols, b.cols);
        for k in 0..a.rows {
            let bk = b.row(k);
            for r in 0..a.cols {
                let x = a.at(k, r);
                if x == 0.0 {
                    continue;
                }
                for (o, &y) in out.row_mut(r).iter_mut().zip(bk) {
                    *o += x * y;
                }
            }
        }
        out
    }

    /// `a · bᵀ`
    fn mm_nt(a: &Mat, b: &Mat) -> Mat {
        debug_assert_eq!(a.cols, b.cols);
        let mut out = Mat::zeros(a.rows, b.rows);
        for r in 0..a.rows {
            for c in 0..b.rows {
                out.data[r * b.rows + c] = a.row(r).iter().zip(b.row(c)).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    fn cols_slice(&self, start: usize, width: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    fn set_cols(&mut self, start: usize, src: &Mat) {
        for r in 0..self.rows {
            let w = src.cols;
            self.row_mut(r)[start..start + w].copy_from_slice(src.row(r));
        }
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// Parameters in [`PARAM_NAMES`] order.
#[derive(Debug, Clone)]
pub(crate) struct Params {
    t: Vec<Mat>,
}

impl Params {
    fn from_weights(w: &BlockWeights) -> Self {
        Self {
            t: w.tensors().iter().map(|t| Mat::from_tensor(t)).collect(),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            t: self.t.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect(),
        }
    }

    fn write_into(&self, w: &mut BlockWeights) {
        for (dst, src) in w.tensors_mut().into_iter().zip(&self.t) {
            *dst = src.to_tensor();
        }
    }
}

const SQ: usize = 0;
const SK: usize = 1;
const SV: usize = 2;
const SO: usize = 3;
const CQ: usize = 4;
const CK: usize = 5;
const CV: usize = 6;
const CO: usize = 7;
const W1: usize = 8;
const B1: usize = 9;
const W2: usize = 10;
const B2: usize = 11;

struct LnCache {
    y: Mat,
    inv_std: Vec<f64>,
}

fn ln_forward(x: &Mat) -> LnCache {
    let n = x.cols as f64;
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = y.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        inv_std.push(inv);
    }
    LnCache { y, inv_std }
}

fn ln_backward(cache: &LnCache, dy: &Mat) -> Mat {
    let n = dy.cols as f64;
    let mut dx = Mat::zeros(dy.rows, dy.cols);
    for r in 0..dy.rows {
        let (y, g) = (cache.y.row(r), dy.row(r));
        let mean_g = g.iter().sum::<f64>() / n;
        let mean_gy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
        let inv = cache.inv_std[r];
        for ((o, &gi), &yi) in dx.row_mut(r).iter_mut().zip(g).zip(y) {
            *o = inv * (gi - mean_g - yi * mean_gy);
        }
    }
    dx
}

/// Row softmax of `logits` restricted to `admissible`; rows with no
/// admissible entry stay zero.
fn softmax_rows(logits: &mut Mat, admissible: impl Fn(usize, usize) -> bool) {
    for r in 0..logits.rows {
        let max = (0..logits.cols)
            .filter(|&c| admissible(r, c))
            .map(|c| logits.at(r, c))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..logits.cols {
            let p = if admissible(r, c) {
                (logits.at(r, c) - max).exp()
            } else {
                0.0
            };
            *logits.at_mut(r, c) = p;
            sum += p;
        }
        if sum > 0.0 {
            logits.row_mut(r).iter_mut().for_each(|p| *p /= sum);
        }
    }
}

/// `dL/dlogits` of a row softmax given `dL/dP`.
fn softmax_backward(p: &Mat, dp: &Mat) -> Mat {
    let mut out = Mat::zeros(p.rows, p.cols);
    for r in 0..p.rows {
        let dot: f64 = p.row(r).iter().zip(dp.row(r)).map(|(a, b)| a * b).sum();
        for ((o, &pi), &gi) in out.row_mut(r).iter_mut().zip(p.row(r)).zip(dp.row(r)) {
            *o = pi * (gi - dot);
        }
    }
    out
}

fn rotate(ctx: &RelationalContext, m: &Mat, inverse: bool) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows {
        ctx.rotary.rotate_row_f64(r, out.row_mut(r), inverse);
    }
    out
}

/// `d×d` spatial patches of every frame, as token lists.
fn patches(ctx: &RelationalContext, d: usize) -> Vec<Vec<usize>> {
    let spec = &ctx.spec;
    let (h, w, hw) = (spec.h(), spec.w(), spec.hw());
    let mut out = Vec::new();
    for frame in 0..spec.n_frames() {
        for r0 in (0..h).step_by(d) {
            for c0 in (0..w).step_by(d) {
                let mut cells = Vec::new();
                for r in r0..(r0 + d).min(h) {
                    for c in c0..(c0 + d).min(w) {
                        cells.push(frame * hw + r * w + c);
                    }
                }
                out.push(cells);
            }
        }
    }
    out
}

struct SelfHead {
    q: Mat,
    k: Mat,
    v: Mat,
    p: Mat,
}

struct CrossHead {
    q: Mat,
    k: Mat,
    v: Mat,
    p: Mat,
    pooled: Mat,
    sim: Mat,
}

struct Cache {
    ln1: Option<LnCache>,
    self_heads: Vec<SelfHead>,
    self_o: Mat,
    ln2: Option<LnCache>,
    cross_heads: Vec<CrossHead>,
    cross_o: Mat,
    ln3: LnCache,
    pre_act: Mat,
    act: Mat,
}

/// Inputs of one block evaluation in double precision.
#[derive(Debug, Clone)]
pub struct BlockInputs {
    pub tokens: Tensor2,
    pub text: Tensor2,
    /// Velocity target of the loss.
    pub target: Tensor2,
    /// Rows that enter the loss; `None` means every row.
    pub loss_rows: Option<Vec<usize>>,
}

struct Evaluator<'a> {
    ctx: &'a RelationalContext,
    cfg: AttnConfig,
    opts: BlockOptions,
    n_heads: usize,
    head_dim: usize,
    patches: Vec<Vec<usize>>,
    patch_of: Vec<usize>,
    text: Mat,
    target: Mat,
    loss_rows: Vec<usize>,
}

impl<'a> Evaluator<'a> {
    fn new(
        ctx: &'a RelationalContext,
        w: &BlockWeights,
        inputs: &BlockInputs,
        cfg: &AttnConfig,
        opts: BlockOptions,
    ) -> Result<Self> {
        w.validate()?;
        let spec = &ctx.spec;
        let d = &w.dims;
        if inputs.tokens.shape() != (spec.n_tokens(), d.channels)
            || inputs.target.shape() != inputs.tokens.shape()
            || inputs.text.shape() != (spec.text_len(), d.text_channels)
        {
            return Err(Error::shape("block inputs do not match the layout and weights"));
        }
        if cfg.d == 0 {
            return Err(Error::Param("d must be at least 1".into()));
        }
        let loss_rows = match &inputs.loss_rows {
            Some(rows) => {
                if let Some(&bad) = rows.iter().find(|&&r| r >= spec.n_tokens()) {
                    return Err(Error::OutOfRange {
                        index: bad,
                        limit: spec.n_tokens(),
                    });
                }
                rows.clone()
            }
            None => (0..spec.n_tokens()).collect(),
        };
        let patches = patches(ctx, cfg.d);
        let mut patch_of = vec![0; spec.n_tokens()];
        for (p, cells) in patches.iter().enumerate() {
            for &c in cells {
                patch_of[c] = p;
            }
        }
        Ok(Self {
            ctx,
            cfg: *cfg,
            opts,
            n_heads: d.n_heads,
            head_dim: d.head_dim,
            patches,
            patch_of,
            text: Mat::from_tensor(&inputs.text),
            target: Mat::from_tensor(&inputs.target),
            loss_rows,
        })
    }

    fn forward(&self, p: &Params, x0: &Mat) -> (Mat, Cache) {
        let hd = self.head_dim;
        let sc = 1.0 / (hd as f64).sqrt();
        let n = x0.rows;
        let inner = self.n_heads * hd;
        let mut x = x0.clone();

        let mut ln1 = None;
        let mut self_heads = Vec::new();
        let mut self_o = Mat::zeros(n, inner);
        if self.opts.self_attention {
            let ln = ln_forward(&x);
            let q = Mat::mm(&ln.y, &p.t[SQ]);
            let k = Mat::mm(&ln.y, &p.t[SK]);
            let v = Mat::mm(&ln.y, &p.t[SV]);
            for h in 0..self.n_heads {
                let qh = rotate(self.ctx, &q.cols_slice(h * hd, hd), false);
                let kh = rotate(self.ctx, &k.cols_slice(h * hd, hd), false);
                let vh = v.cols_slice(h * hd, hd);
                let mut logits = Mat::mm_nt(&qh, &kh);
                logits.data.iter_mut().for_each(|l| *l *= sc);
                softmax_rows(&mut logits, |r, c| self.ctx.csam.get(r, c));
                self_o.set_cols(h * hd, &Mat::mm(&logits, &vh));
                self_heads.push(SelfHead {
                    q: qh,
                    k: kh,
                    v: vh,
                    p: logits,
                });
            }
            x.add_assign(&Mat::mm(&self_o, &p.t[SO]));
            ln1 = Some(ln);
        }

        let mut ln2 = None;
        let mut cross_heads = Vec::new();
        let mut cross_o = Mat::zeros(n, inner);
        if self.opts.cross_attention {
            let ln = ln_forward(&x);
            let q = Mat::mm(&ln.y, &p.t[CQ]);
            let k = Mat::mm(&self.text, &p.t[CK]);
            let v = Mat::mm(&self.text, &p.t[CV]);
            let r = self.cfg.r as f64;
            let scale = self.cfg.scale as f64;
            for h in 0..self.n_heads {
                let qh = q.cols_slice(h * hd, hd);
                let kh = k.cols_slice(h * hd, hd);
                let vh = v.cols_slice(h * hd, hd);
                let mut pooled = Mat::zeros(self.patches.len(), hd);
                for (pi, cells) in self.patches.iter().enumerate() {
                    for &c in cells {
                        for (o, &val) in pooled.row_mut(pi).iter_mut().zip(qh.row(c)) {
                            *o += val;
                        }
                    }
                    let inv = 1.0 / cells.len() as f64;
                    pooled.row_mut(pi).iter_mut().for_each(|o| *o *= inv);
                }
                let sim = Mat::mm_nt(&pooled, &kh);
                let mut logits = Mat::mm_nt(&qh, &kh);
                for row in 0..n {
                    let prow = self.patch_of[row];
                    for t in 0..logits.cols {
                        let level = self.ctx.mcam.get(row, t) as f64;
                        let a = logits.at(row, t) + level * sim.at(prow, t).abs() * r;
                        *logits.at_mut(row, t) = a * scale;
                    }
                }
                softmax_rows(&mut logits, |_, _| true);
                cross_o.set_cols(h * hd, &Mat::mm(&logits, &vh));
                cross_heads.push(CrossHead {
                    q: qh,
                    k: kh,
                    v: vh,
                    p: logits,
                    pooled,
                    sim,
                });
            }
            x.add_assign(&Mat::mm(&cross_o, &p.t[CO]));
            ln2 = Some(ln);
        }

        let ln3 = ln_forward(&x);
        let mut pre_act = Mat::mm(&ln3.y, &p.t[W1]);
        for r in 0..n {
            for (v, &b) in pre_act.row_mut(r).iter_mut().zip(p.t[B1].row(0)) {
                *v += b;
            }
        }
        let mut act = pre_act.clone();
        act.data.iter_mut().for_each(|v| *v = gelu(*v));
        let mut m = Mat::mm(&act, &p.t[W2]);
        for r in 0..n {
            for (v, &b) in m.row_mut(r).iter_mut().zip(p.t[B2].row(0)) {
                *v += b;
            }
        }
        x.add_assign(&m);

        let cache = Cache {
            ln1,
            self_heads,
            self_o,
            ln2,
            cross_heads,
            cross_o,
            ln3,
            pre_act,
            act,
        };
        (x, cache)
    }

    fn loss(&self, out: &Mat) -> f64 {
        let count = (self.loss_rows.len() * out.cols).max(1) as f64;
        let mut sum = 0.0;
        for &r in &self.loss_rows {
            for (a, b) in out.row(r).iter().zip(self.target.row(r)) {
                sum += (a - b) * (a - b);
            }
        }
        sum / count
    }

    /// Gradients with respect to parameters and input tokens.
    fn backward(&self, p: &Params, cache: &Cache, out: &Mat) -> (Params, Mat) {
        let hd = self.head_dim;
        let n = out.rows;
        let mut g = p.zeros_like();
        let count = (self.loss_rows.len() * out.cols).max(1) as f64;

        let mut dx = Mat::zeros(n, out.cols);
        for &r in &self.loss_rows {
            for ((d, a), b) in dx.row_mut(r).iter_mut().zip(out.row(r)).zip(self.target.row(r)) {
                *d = 2.0 * (a - b) / count;
            }
        }

        // MLP
        let dm = &dx;
        g.t[W2] = Mat::mm_tn(&cache.act, dm);
        for r in 0..n {
            for (o, &v) in g.t[B2].row_mut(0).iter_mut().zip(dm.row(r)) {
                *o += v;
            }
        }
        let mut da = Mat::mm_nt(dm, &p.t[W2]);
        for (d, &a) in da.data.iter_mut().zip(&cache.pre_act.data) {
            *d *= gelu_grad(a);
        }
        g.t[W1] = Mat::mm_tn(&cache.ln3.y, &da);
        for r in 0..n {
            for (o, &v) in g.t[B1].row_mut(0).iter_mut().zip(da.row(r)) {
                *o += v;
            }
        }
        let dh3 = Mat::mm_nt(&da, &p.t[W1]);
        dx.add_assign(&ln_backward(&cache.ln3, &dh3));

        // cross-attention
        if let Some(ln2) = &cache.ln2 {
            g.t[CO] = Mat::mm_tn(&cache.cross_o, &dx);
            let d_o = Mat::mm_nt(&dx, &p.t[CO]);
            let inner = self.n_heads * hd;
            let mut dq = Mat::zeros(n, inner);
            let mut dk = Mat::zeros(self.text.rows, inner);
            let mut dv = Mat::zeros(self.text.rows, inner);
            let r = self.cfg.r as f64;
            let scale = self.cfg.scale as f64;
            for (h, head) in cache.cross_heads.iter().enumerate() {
                let doh = d_o.cols_slice(h * hd, hd);
                let dp = Mat::mm_nt(&doh, &head.v);
                let dvh = Mat::mm_tn(&head.p, &doh);
                let mut dlog = softmax_backward(&head.p, &dp);
                dlog.data.iter_mut().for_each(|v| *v *= scale);
                let mut dqh = Mat::mm(&dlog, &head.k);
                let mut dkh = Mat::mm_tn(&dlog, &head.q);
                let mut dsim = Mat::zeros(head.sim.rows, head.sim.cols);
                for row in 0..n {
                    let prow = self.patch_of[row];
                    for t in 0..dlog.cols {
                        let level = self.ctx.mcam.get(row, t) as f64;
                        if level != 0.0 {
                            *dsim.at_mut(prow, t) += dlog.at(row, t) * level * r;
                        }
                    }
                }
                for (d, &s) in dsim.data.iter_mut().zip(&head.sim.data) {
                    *d *= s.signum() * f64::from(s != 0.0);
                }
                let dpooled = Mat::mm(&dsim, &head.k);
                dkh.add_assign(&Mat::mm_tn(&dsim, &head.pooled));
                for (pi, cells) in self.patches.iter().enumerate() {
                    let inv = 1.0 / cells.len() as f64;
                    for &c in cells {
                        for (o, &v) in dqh.row_mut(c).iter_mut().zip(dpooled.row(pi)) {
                            *o += v * inv;
                        }
                    }
                }
                dq.set_cols(h * hd, &dqh);
                dk.set_cols(h * hd, &dkh);
                dv.set_cols(h * hd, &dvh);
            }
            g.t[CQ] = Mat::mm_tn(&ln2.y, &dq);
            g.t[CK] = Mat::mm_tn(&self.text, &dk);
            g.t[CV] = Mat::mm_tn(&self.text, &dv);
            let dh2 = Mat::mm_nt(&dq, &p.t[CQ]);
            dx.add_assign(&ln_backward(ln2, &dh2));
        }

        // self-attention
        if let Some(ln1) = &cache.ln1 {
            g.t[SO] = Mat::mm_tn(&cache.self_o, &dx);
            let d_o = Mat::mm_nt(&dx, &p.t[SO]);
            let inner = self.n_heads * hd;
            let mut dq = Mat::zeros(n, inner);
            let mut dk = Mat::zeros(n, inner);
            let mut dv = Mat::zeros(n, inner);
            let sc = 1.0 / (hd as f64).sqrt();
            for (h, head) in cache.self_heads.iter().enumerate() {
                let doh = d_o.cols_slice(h * hd, hd);
                let dp = Mat::mm_nt(&doh, &head.v);
                let dvh = Mat::mm_tn(&head.p, &doh);
                let mut dlog = softmax_backward(&head.p, &dp);
                dlog.data.iter_mut().for_each(|v| *v *= sc);
                let dqh = rotate(self.ctx, &Mat::mm(&dlog, &head.k), true);
                let dkh = rotate(self.ctx, &Mat::mm_tn(&dlog, &head.q), true);
                dq.set_cols(h * hd, &dqh);
                dk.set_cols(h * hd, &dkh);
                dv.set_cols(h * hd, &dvh);
            }
            g.t[SQ] = Mat::mm_tn(&ln1.y, &dq);
            g.t[SK] = Mat::mm_tn(&ln1.y, &dk);
            g.t[SV] = Mat::mm_tn(&ln1.y, &dv);
            let mut dh1 = Mat::mm_nt(&dq, &p.t[SQ]);
            dh1.add_assign(&Mat::mm_nt(&dk, &p.t[SK]));
            dh1.add_assign(&Mat::mm_nt(&dv, &p.t[SV]));
            dx.add_assign(&ln_backward(ln1, &dh1));
        }

        (g, dx)
    }
}

/// Double-precision block output, the reference for the `f32` forward.
pub fn block_forward_f64(
    ctx: &RelationalContext,
    w: &BlockWeights,
    tokens: &Tensor2,
    text: &Tensor2,
    cfg: &AttnConfig,
    opts: BlockOptions,
) -> Result<Vec<f64>> {
    let inputs = BlockInputs {
        tokens: tokens.clone(),
        text: text.clone(),
        target: tokens.clone(),
        loss_rows: None,
    };
    let ev = Evaluator::new(ctx, w, &inputs, cfg, opts)?;
    let (out, _) = ev.forward(&Params::from_weights(w), &Mat::from_tensor(tokens));
    Ok(out.data)
}

/// Analytic loss gradient for every parameter tensor (in [`PARAM_NAMES`]
/// order, row-major) and for the input tokens.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub params: Vec<Vec<f64>>,
    pub tokens: Vec<f64>,
}

pub fn loss_and_gradients(
    ctx: &RelationalContext,
    w: &BlockWeights,
    inputs: &BlockInputs,
    cfg: &AttnConfig,
    opts: BlockOptions,
) -> Result<Gradients> {
    let ev = Evaluator::new(ctx, w, inputs, cfg, opts)?;
    let p = Params::from_weights(w);
    let x = Mat::from_tensor(&inputs.tokens);
    let (out, cache) = ev.forward(&p, &x);
    let (g, dx) = ev.backward(&p, &cache, &out);
    let grads = Gradients {
        loss: ev.loss(&out),
        params: g.t.into_iter().map(|m| m.data).collect(),
        tokens: dx.data,
    };
    if !grads.params.iter().flatten().chain(&grads.tokens).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(grads)
}

/// One checked coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coord {
    Param { tensor: usize, index: usize },
    Token { index: usize },
}

impl std::fmt::Display for Coord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Coord::Param { tensor, index } => write!(f, "{}[{index}]", PARAM_NAMES[*tensor]),
            Coord::Token { index } => write!(f, "tokens[{index}]"),
        }
    }
}

/// Which coordinates a gradient check samples from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckScope {
    /// Every parameter tensor.
    AllParams,
    /// Named parameter tensors only.
    Params(Vec<&'static str>),
    /// Input token entries.
    Tokens,
    /// Explicit coordinates.
    Coords(Vec<Coord>),
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub scope: CheckScope,
    pub max_coords: usize,
    pub seed: u64,
    pub block: BlockOptions,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            scope: CheckScope::AllParams,
            max_coords: 10_000,
            seed: 0,
            block: BlockOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradEntry {
    pub coord: Coord,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradEntry {
    /// `|a − n| / max(|a|, |n|)`, zero when both vanish.
    pub fn rel_error(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs());
        if denom == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / denom
        }
    }

    pub fn abs_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub loss: f64,
    pub entries: Vec<GradEntry>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Compares analytic gradients with central differences
/// `(L(θ+ε) − L(θ−ε)) / 2ε`, all in double precision, on at most
/// `max_coords` coordinates sampled without replacement.
pub fn grad_check(
    ctx: &RelationalContext,
    w: &BlockWeights,
    inputs: &BlockInputs,
    cfg: &AttnConfig,
    epsilon: f64,
    opts: &GradCheckOptions,
) -> Result<GradReport> {
    if !(1e-5..=1e-2).contains(&epsilon) {
        return Err(Error::Param(format!("epsilon {epsilon} outside [1e-5, 1e-2]")));
    }
    let grads = loss_and_gradients(ctx, w, inputs, cfg, opts.block)?;
    let ev = Evaluator::new(ctx, w, inputs, cfg, opts.block)?;
    let base = Params::from_weights(w);
    let x = Mat::from_tensor(&inputs.tokens);

    let pool: Vec<Coord> = match &opts.scope {
        CheckScope::Coords(c) => c.clone(),
        CheckScope::Tokens => (0..x.data.len()).map(|index| Coord::Token { index }).collect(),
        CheckScope::AllParams => all_param_coords(&base, |_| true),
        CheckScope::Params(names) => {
            for name in names {
                if !PARAM_NAMES.contains(name) {
                    return Err(Error::Param(format!("unknown parameter tensor {name}")));
                }
            }
            all_param_coords(&base, |t| names.contains(&PARAM_NAMES[t]))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let take = pool.len().min(opts.max_coords);
    let mut picked: Vec<usize> = sample(&mut rng, pool.len(), take).into_vec();
    picked.sort_unstable();

    let eval = |coord: Coord, delta: f64| -> f64 {
        let mut p = base.clone();
        let mut xs = x.clone();
        match coord {
            Coord::Param { tensor, index } => p.t[tensor].data[index] += delta,
            Coord::Token { index } => xs.data[index] += delta,
        }
        ev.loss(&ev.forward(&p, &xs).0)
    };

    let mut entries = Vec::with_capacity(take);
    for idx in picked {
        let coord = pool[idx];
        let analytic = match coord {
            Coord::Param { tensor, index } => grads.params[tensor][index],
            Coord::Token { index } => grads.tokens[index],
        };
        let numeric = (eval(coord, epsilon) - eval(coord, -epsilon)) / (2.0 * epsilon);
        if !numeric.is_finite() {
            return Err(Error::NonFinite("finite-difference gradient"));
        }
        entries.push(GradEntry {
            coord,
            analytic,
            numeric,
        });
    }
    let max_rel_error = entries.iter().map(GradEntry::rel_error).fold(0.0, f64::max);
    let max_abs_error = entries.iter().map(GradEntry::abs_error).fold(0.0, f64::max);
    Ok(GradReport {
        loss: grads.loss,
        entries,
        max_rel_error,
        max_abs_error,
    })
}

fn all_param_coords(p: &Params, keep: impl Fn(usize) -> bool) -> Vec<Coord> {
    p.t.iter()
        .enumerate()
        .filter(|(t, _)| keep(*t))
        .flat_map(|(tensor, m)| (0..m.data.len()).map(move |index| Coord::Param { tensor, index }))
        .collect()
}

/// Adam on the block parameters against a fixed target, returning the loss
/// before each step and after the last one.
pub fn fit(
    ctx: &RelationalContext,
    w: &mut BlockWeights,
    inputs: &BlockInputs,
    cfg: &AttnConfig,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let ev = Evaluator::new(ctx, w, inputs, cfg, BlockOptions::default())?;
    let x = Mat::from_tensor(&inputs.tokens);
    let mut p = Params::from_weights(w);
    let mut m1 = p.zeros_like();
    let mut m2 = p.zeros_like();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 1..=steps {
        let (out, cache) = ev.forward(&p, &x);
        losses.push(ev.loss(&out));
        let (g, _) = ev.backward(&p, &cache, &out);
        let c1 = 1.0 - BETA1.powi(step as i32);
        let c2 = 1.0 - BETA2.powi(step as i32);
        for ((param, grad), (a, b)) in p
            .t
            .iter_mut()
            .zip(&g.t)
            .zip(m1.t.iter_mut().zip(m2.t.iter_mut()))
        {
            for i in 0..param.data.len() {
                let gi = grad.data[i];
                a.data[i] = BETA1 * a.data[i] + (1.0 - BETA1) * gi;
                b.data[i] = BETA2 * b.data[i] + (1.0 - BETA2) * gi * gi;
                let step = lr * (a.data[i] / c1) / ((b.data[i] / c2).sqrt() + EPS);
                param.data[i] -= step;
            }
        }
    }
    losses.push(ev.loss(&ev.forward(&p, &x).0));
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("training loss"));
    }
    p.write_into(w);
    Ok(losses)
}
