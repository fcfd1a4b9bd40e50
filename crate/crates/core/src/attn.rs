//! Attention kernels.
//!
//! * dense reference kernels (unmasked, boolean-masked, additive three-level bias)
//! * a block-streaming masked kernel with an online softmax
//! * the pooled similarity estimate that scales the cross-attention bias
//!
//! The cross-attention bias follows `softmax((QKᵀ + M·s·r) · scale)`: the
//! bias is added before the logit scale is applied, so the effective bias
//! strength shrinks with `1/sqrt(d_K)` like the logits do. Scaling only the
//! logits would be the other common convention.

use crate::error::{Error, Result};
use crate::layout::LayoutSpec;
use crate::masks::{BitMatrix, Block, McamMask};
use crate::tensor::{dot, Tensor2};

/// Cross-attention hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnConfig {
    /// Bias strength `r`.
    pub r: f32,
    /// Spatial pooling factor of the similarity estimate.
    pub d: usize,
    /// Logit scale, normally `1/sqrt(d_K)`.
    pub scale: f32,
}

impl AttnConfig {
    pub const DEFAULT_R: f32 = 0.5;
    pub const DEFAULT_D: usize = 8;

    pub fn new(head_dim: usize) -> Self {
        Self {
            r: Self::DEFAULT_R,
            d: Self::DEFAULT_D,
            scale: logit_scale(head_dim),
        }
    }

    pub fn with_r(mut self, r: f32) -> Self {
        self.r = r;
        self
    }

    pub fn with_d(mut self, d: usize) -> Self {
        self.d = d;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.r.is_finite() && self.r >= 0.0) {
            return Err(Error::Param(format!("r must be finite and >= 0, got {}", self.r)));
        }
        if self.d == 0 {
            return Err(Error::Param("d must be at least 1".into()));
        }
        if !self.scale.is_finite() {
            return Err(Error::NonFinite("logit scale"));
        }
        Ok(())
    }
}

pub fn logit_scale(key_dim: usize) -> f32 {
    (key_dim as f32).sqrt().recip()
}

struct Bias<'a> {
    mcam: &'a McamMask,
    s: &'a Tensor2,
    r: f32,
}

fn check_qkv(q: &Tensor2, k: &Tensor2, v: Option<&Tensor2>) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::shape(format!(
            "query width {} != key width {}",
            q.cols(),
            k.cols()
        )));
    }
    if let Some(v) = v {
        if v.rows() != k.rows() {
            return Err(Error::shape(format!(
                "{} keys but {} values",
                k.rows(),
                v.rows()
            )));
        }
    }
    q.ensure_finite("queries")?;
    k.ensure_finite("keys")?;
    if let Some(v) = v {
        v.ensure_finite("values")?;
    }
    Ok(())
}

fn for_each_row(out: &mut Tensor2, f: impl Fn(usize, &mut [f32]) + Sync + Send) {
    let cols = out.cols();
    if cols == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.data_mut()
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(r, row)| f(r, row));
    }
    #[cfg(not(feature = "parallel"))]
    out.data_mut()
        .chunks_mut(cols)
        .enumerate()
        .for_each(|(r, row)| f(r, row));
}

/// Dense softmax weights. Masked entries get exactly zero weight.
fn dense_weights(
    q: &Tensor2,
    k: &Tensor2,
    scale: f32,
    mask: Option<&BitMatrix>,
    bias: Option<&Bias<'_>>,
) -> Tensor2 {
    let mut w = Tensor2::zeros(q.rows(), k.rows());
    for_each_row(&mut w, |row, out| {
        let qr = q.row(row);
        for (key, o) in out.iter_mut().enumerate() {
            let mut logit = dot(qr, k.row(key));
            if let Some(b) = bias {
                logit += f32::from(b.mcam.get(row, key)) * b.s.get(row, key) * b.r;
            }
            *o = logit * scale;
        }
        let admissible = |key: usize| mask.is_none_or(|m| m.get(row, key));
        let max = out
            .iter()
            .enumerate()
            .filter(|&(key, _)| admissible(key))
            .map(|(_, &l)| l)
            .fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for (key, o) in out.iter_mut().enumerate() {
            let shifted = if admissible(key) { *o - max } else { f32::MIN };
            *o = shifted.exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    });
    w
}

/// Unmasked scaled dot-product attention weights, `softmax(QKᵀ/sqrt(d_K))`.
pub fn standard_attention_weights(q: &Tensor2, k: &Tensor2) -> Result<Tensor2> {
    check_qkv(q, k, None)?;
    Ok(dense_weights(q, k, logit_scale(k.cols()), None, None))
}

/// Unmasked scaled dot-product attention.
pub fn standard_attention(q: &Tensor2, k: &Tensor2, v: &Tensor2) -> Result<Tensor2> {
    check_qkv(q, k, Some(v))?;
    dense_weights(q, k, logit_scale(k.cols()), None, None).matmul(v)
}

fn check_mask(q: &Tensor2, k: &Tensor2, mask: &BitMatrix) -> Result<()> {
    if mask.rows() != q.rows() || mask.cols() != k.rows() {
        return Err(Error::shape(format!(
            "mask is {}x{} for {} queries and {} keys",
            mask.rows(),
            mask.cols(),
            q.rows(),
            k.rows()
        )));
    }
    if let Some(row) = (0..mask.rows()).find(|&r| mask.row_runs(r).is_empty()) {
        return Err(Error::EmptyMaskRow { row });
    }
    Ok(())
}

/// Boolean-masked attention weights over the dense logit matrix.
pub fn masked_attention_weights(q: &Tensor2, k: &Tensor2, mask: &BitMatrix) -> Result<Tensor2> {
    check_qkv(q, k, None)?;
    check_mask(q, k, mask)?;
    Ok(dense_weights(q, k, logit_scale(k.cols()), Some(mask), None))
}

/// Reference masked self-attention: all logits are computed, masked ones
/// receive zero weight.
pub fn masked_self_attention_naive(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    mask: &BitMatrix,
) -> Result<Tensor2> {
    check_qkv(q, k, Some(v))?;
    check_mask(q, k, mask)?;
    dense_weights(q, k, logit_scale(k.cols()), Some(mask), None).matmul(v)
}

/// Checks that `blocks` tile a subset of `queries × keys` without overlap
/// and cover every query row.
pub fn validate_blocks(queries: usize, keys: usize, blocks: &[Block]) -> Result<()> {
    let mut covered = BitMatrix::new(queries, keys);
    for (index, b) in blocks.iter().enumerate() {
        if b.queries.is_empty()
            || b.keys.is_empty()
            || b.queries.end > queries
            || b.keys.end > keys
        {
            return Err(Error::BadBlock {
                index,
                n: queries.max(keys),
            });
        }
        for q in b.queries.clone() {
            for k in b.keys.clone() {
                if covered.get(q, k) {
                    return Err(Error::OverlappingBlocks { query: q, key: k });
                }
                covered.set(q, k, true);
            }
        }
    }
    let mut has_block = vec![false; queries];
    for b in blocks {
        has_block[b.queries.clone()].iter_mut().for_each(|h| *h = true);
    }
    match has_block.iter().position(|h| !h) {
        Some(row) => Err(Error::UncoveredRow(row)),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy)]
struct RunningSoftmax {
    max: f32,
    sum: f32,
}

/// Masked self-attention evaluated block by block with a running max and
/// normalizer per query. Only admissible logits are ever computed.
pub fn masked_self_attention_blockwise(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    blocks: &[Block],
) -> Result<Tensor2> {
    check_qkv(q, k, Some(v))?;
    validate_blocks(q.rows(), k.rows(), blocks)?;
    let scale = logit_scale(k.cols());
    let dv = v.cols();
    if dv == 0 {
        return Ok(Tensor2::zeros(q.rows(), 0));
    }
    let mut acc = Tensor2::zeros(q.rows(), dv);
    let mut state = vec![
        RunningSoftmax {
            max: f32::NEG_INFINITY,
            sum: 0.0
        };
        q.rows()
    ];

    for block in blocks {
        let rows = block.queries.clone();
        let keys = block.keys.clone();
        let update = |(offset, (out, st)): (usize, (&mut [f32], &mut RunningSoftmax))| {
            let qr = q.row(rows.start + offset);
            let logits: Vec<f32> = keys.clone().map(|key| dot(qr, k.row(key)) * scale).collect();
            let block_max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let new_max = st.max.max(block_max);
            let correction = (st.max - new_max).exp();
            st.sum *= correction;
            out.iter_mut().for_each(|o| *o *= correction);
            for (key, &l) in keys.clone().zip(&logits) {
                let p = (l - new_max).exp();
                st.sum += p;
                for (o, &val) in out.iter_mut().zip(v.row(key)) {
                    *o += p * val;
                }
            }
            st.max = new_max;
        };
        let acc_rows = &mut acc.data_mut()[rows.start * dv..rows.end * dv];
        let st_rows = &mut state[rows.clone()];
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            acc_rows
                .par_chunks_mut(dv)
                .zip(st_rows.par_iter_mut())
                .enumerate()
                .for_each(update);
        }
        #[cfg(not(feature = "parallel"))]
        acc_rows
            .chunks_mut(dv)
            .zip(st_rows.iter_mut())
            .enumerate()
            .for_each(update);
    }

    for (r, st) in state.iter().enumerate() {
        let inv = st.sum.recip();
        acc.row_mut(r).iter_mut().for_each(|o| *o *= inv);
    }
    Ok(acc)
}

/// Pooled similarity magnitude `s` for the cross-attention bias.
///
/// Queries are laid out frame by frame (`H×W` per frame) as in the
/// concatenated sequence. Each frame is average-pooled over `d×d` spatial
/// patches (edge patches average over the cells they actually contain), the
/// pooled queries are dotted with every text key, and each pooled row of
/// `|Q_pool·Kᵀ|` is repeated over all tokens of its patch. Pooling never
/// crosses frames.
pub fn compute_scaling_s(q: &Tensor2, k_text: &Tensor2, spec: &LayoutSpec, d: usize) -> Result<Tensor2> {
    if d == 0 {
        return Err(Error::Param("pooling factor d must be at least 1".into()));
    }
    if q.rows() != spec.n_tokens() {
        return Err(Error::shape(format!(
            "{} query rows for a layout of {} tokens",
            q.rows(),
            spec.n_tokens()
        )));
    }
    if q.cols() != k_text.cols() {
        return Err(Error::shape(format!(
            "query width {} != text key width {}",
            q.cols(),
            k_text.cols()
        )));
    }
    let (h, w, hw) = (spec.h(), spec.w(), spec.hw());
    let channels = q.cols();
    let mut s = Tensor2::zeros(q.rows(), k_text.rows());
    let mut pooled = vec![0.0f64; channels];
    for frame in 0..spec.n_frames() {
        let base = frame * hw;
        for r0 in (0..h).step_by(d) {
            for c0 in (0..w).step_by(d) {
                let rows = r0..(r0 + d).min(h);
                let cols = c0..(c0 + d).min(w);
                let cells = (rows.len() * cols.len()) as f64;
                pooled.iter_mut().for_each(|p| *p = 0.0);
                for r in rows.clone() {
                    for c in cols.clone() {
                        for (p, &x) in pooled.iter_mut().zip(q.row(base + r * w + c)) {
                            *p += x as f64;
                        }
                    }
                }
                pooled.iter_mut().for_each(|p| *p /= cells);
                let sim: Vec<f32> = (0..k_text.rows())
                    .map(|t| {
                        let dp: f64 = pooled
                            .iter()
                            .zip(k_text.row(t))
                            .map(|(a, &b)| a * b as f64)
                            .sum();
                        dp.abs() as f32
                    })
                    .collect();
                for r in rows.clone() {
                    for c in cols.clone() {
                        s.row_mut(base + r * w + c).copy_from_slice(&sim);
                    }
                }
            }
        }
    }
    Ok(s)
}

fn check_cross(
    q: &Tensor2,
    k: &Tensor2,
    mcam: &McamMask,
    s: &Tensor2,
    cfg: &AttnConfig,
) -> Result<()> {
    cfg.validate()?;
    if mcam.rows() != q.rows() || mcam.cols() != k.rows() {
        return Err(Error::shape(format!(
            "level mask is {}x{} for {} queries and {} keys",
            mcam.rows(),
            mcam.cols(),
            q.rows(),
            k.rows()
        )));
    }
    if s.shape() != (q.rows(), k.rows()) {
        return Err(Error::shape(format!(
            "scaling matrix is {:?}, expected {:?}",
            s.shape(),
            (q.rows(), k.rows())
        )));
    }
    s.ensure_finite("scaling matrix")
}

/// Cross-attention weights with the three-level bias injected.
pub fn relational_cross_weights(
    q: &Tensor2,
    k: &Tensor2,
    mcam: &McamMask,
    s: &Tensor2,
    cfg: &AttnConfig,
) -> Result<Tensor2> {
    check_qkv(q, k, None)?;
    check_cross(q, k, mcam, s, cfg)?;
    let bias = Bias { mcam, s, r: cfg.r };
    Ok(dense_weights(q, k, cfg.scale, None, Some(&bias)))
}

/// `softmax((QKᵀ + M·s·r) · scale) · V`. With no text keys the output is zero.
pub fn relational_cross_attention(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    mcam: &McamMask,
    s: &Tensor2,
    cfg: &AttnConfig,
) -> Result<Tensor2> {
    check_qkv(q, k, Some(v))?;
    check_cross(q, k, mcam, s, cfg)?;
    if k.rows() == 0 {
        return Ok(Tensor2::zeros(q.rows(), v.cols()));
    }
    let bias = Bias { mcam, s, r: cfg.r };
    dense_weights(q, k, cfg.scale, None, Some(&bias)).matmul(v)
}
