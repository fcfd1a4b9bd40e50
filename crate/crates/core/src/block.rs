//! Toy relational transformer block.
//!
//! Pre-norm residual layout, no adaptive norm or time conditioning:
//!
//! ```text
//! x1  = x  + SelfAttn(LN(x))      rotary on Q/K, block-masked
//! x2  = x1 + CrossAttn(LN(x1))    three-level text bias scaled by pooled similarity
//! out = x2 + MLP(LN(x2))          GELU (tanh form)
//! ```
//!
//! Layer norms carry no affine parameters.

use rand::Rng;

use crate::attn::{
    compute_scaling_s, masked_self_attention_blockwise, relational_cross_attention,
    standard_attention, AttnConfig,
};
use crate::error::{Error, Result};
use crate::layout::LayoutSpec;
use crate::masks::{build_csam, build_mcam, CsamMask, McamMask};
use crate::r2pe::{assign_positions, Position3, RotaryConfig, RotaryTable};
use crate::tensor::Tensor2;

pub(crate) const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub channels: usize,
    pub text_channels: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
}

impl BlockDims {
    pub fn inner(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

impl Default for BlockDims {
    fn default() -> Self {
        Self {
            channels: 16,
            text_channels: 12,
            n_heads: 2,
            head_dim: 8,
            hidden: 32,
        }
    }
}

/// All parameters of the block. Projection matrices are stored input-major
/// (`in × out`); the columns `[h·head_dim, (h+1)·head_dim)` of a Q/K/V
/// projection belong to head `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub dims: BlockDims,
    pub self_q: Tensor2,
    pub self_k: Tensor2,
    pub self_v: Tensor2,
    pub self_o: Tensor2,
    pub cross_q: Tensor2,
    pub cross_k: Tensor2,
    pub cross_v: Tensor2,
    pub cross_o: Tensor2,
    pub mlp_in: Tensor2,
    pub mlp_in_bias: Tensor2,
    pub mlp_out: Tensor2,
    pub mlp_out_bias: Tensor2,
}

pub const PARAM_NAMES: [&str; 12] = [
    "self_q",
    "self_k",
    "self_v",
    "self_o",
    "cross_q",
    "cross_k",
    "cross_v",
    "cross_o",
    "mlp_in",
    "mlp_in_bias",
    "mlp_out",
    "mlp_out_bias",
];

impl BlockWeights {
    fn shapes(d: &BlockDims) -> [(usize, usize); 12] {
        let (c, ct, inner, hid) = (d.channels, d.text_channels, d.inner(), d.hidden);
        [
            (c, inner),
            (c, inner),
            (c, inner),
            (inner, c),
            (c, inner),
            (ct, inner),
            (ct, inner),
            (inner, c),
            (c, hid),
            (1, hid),
            (hid, c),
            (1, c),
        ]
    }

    pub fn zeros(dims: BlockDims) -> Self {
        let t = Self::shapes(&dims).map(|(r, c)| Tensor2::zeros(r, c));
        Self::from_tensors(dims, t)
    }

    /// Gaussian init with variance `gain² / fan_in`; biases start at zero.
    pub fn random<R: Rng + ?Sized>(dims: BlockDims, gain: f32, rng: &mut R) -> Self {
        let t = Self::shapes(&dims).map(|(r, c)| {
            if r == 1 {
                Tensor2::zeros(r, c)
            } else {
                Tensor2::randn(r, c, gain / (r as f32).sqrt(), rng)
            }
        });
        Self::from_tensors(dims, t)
    }

    pub fn from_tensors(dims: BlockDims, t: [Tensor2; 12]) -> Self {
        let [self_q, self_k, self_v, self_o, cross_q, cross_k, cross_v, cross_o, mlp_in, mlp_in_bias, mlp_out, mlp_out_bias] =
            t;
        Self {
            dims,
            self_q,
            self_k,
            self_v,
            self_o,
            cross_q,
            cross_k,
            cross_v,
            cross_o,
            mlp_in,
            mlp_in_bias,
            mlp_out,
            mlp_out_bias,
        }
    }

    /// Tensors in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor2; 12] {
        [
            &self.self_q,
            &self.self_k,
            &self.self_v,
            &self.self_o,
            &self.cross_q,
            &self.cross_k,
            &self.cross_v,
            &self.cross_o,
            &self.mlp_in,
            &self.mlp_in_bias,
            &self.mlp_out,
            &self.mlp_out_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor2; 12] {
        [
            &mut self.self_q,
            &mut self.self_k,
            &mut self.self_v,
            &mut self.self_o,
            &mut self.cross_q,
            &mut self.cross_k,
            &mut self.cross_v,
            &mut self.cross_o,
            &mut self.mlp_in,
            &mut self.mlp_in_bias,
            &mut self.mlp_out,
            &mut self.mlp_out_bias,
        ]
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if d.n_heads == 0 || d.head_dim == 0 {
            return Err(Error::Param("block needs at least one head".into()));
        }
        for ((name, t), shape) in PARAM_NAMES
            .iter()
            .zip(self.tensors())
            .zip(Self::shapes(d))
        {
            if t.shape() != shape {
                return Err(Error::shape(format!(
                    "{name} is {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite("block weights"));
            }
        }
        Ok(())
    }
}

/// Which sub-layers run. Disabled sub-layers contribute nothing to the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockOptions {
    pub self_attention: bool,
    pub cross_attention: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            self_attention: true,
            cross_attention: true,
        }
    }
}

impl BlockOptions {
    pub fn mlp_only() -> Self {
        Self {
            self_attention: false,
            cross_attention: false,
        }
    }
}

/// Layout-derived structures shared by every forward pass on one layout.
#[derive(Debug, Clone)]
pub struct RelationalContext {
    pub spec: LayoutSpec,
    pub positions: Vec<Position3>,
    pub rotary: RotaryTable,
    pub csam: CsamMask,
    pub mcam: McamMask,
}

impl RelationalContext {
    pub fn new(spec: &LayoutSpec, head_dim: usize) -> Result<Self> {
        let positions = assign_positions(spec);
        let rotary = RotaryTable::new(&positions, &RotaryConfig::new(head_dim)?);
        Ok(Self {
            spec: spec.clone(),
            positions,
            rotary,
            csam: build_csam(spec),
            mcam: build_mcam(spec),
        })
    }

    /// Replaces the self-attention mask.
    pub fn with_csam(mut self, csam: CsamMask) -> Result<Self> {
        if csam.n() != self.spec.n_tokens() {
            return Err(Error::shape(format!(
                "mask covers {} tokens, layout has {}",
                csam.n(),
                self.spec.n_tokens()
            )));
        }
        self.csam = csam;
        Ok(self)
    }

    pub fn with_mcam(mut self, mcam: McamMask) -> Result<Self> {
        if (mcam.rows(), mcam.cols()) != (self.spec.n_tokens(), self.spec.text_len()) {
            return Err(Error::shape("level mask does not match the layout"));
        }
        self.mcam = mcam;
        Ok(self)
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn layer_norm(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    let n = x.cols() as f64;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.iter_mut()
            .for_each(|v| *v = ((*v as f64 - mean) * inv) as f32);
    }
    out
}

fn mlp(w: &BlockWeights, x: &Tensor2) -> Result<Tensor2> {
    let mut a = x.matmul(&w.mlp_in)?;
    for r in 0..a.rows() {
        for (v, &b) in a.row_mut(r).iter_mut().zip(w.mlp_in_bias.row(0)) {
            *v = gelu((*v + b) as f64) as f32;
        }
    }
    let mut m = a.matmul(&w.mlp_out)?;
    for r in 0..m.rows() {
        for (v, &b) in m.row_mut(r).iter_mut().zip(w.mlp_out_bias.row(0)) {
            *v += b;
        }
    }
    Ok(m)
}

fn check_inputs(w: &BlockWeights, z: &Tensor2, text: &Tensor2, spec: &LayoutSpec) -> Result<()> {
    w.validate()?;
    if z.shape() != (spec.n_tokens(), w.dims.channels) {
        return Err(Error::shape(format!(
            "tokens are {:?}, layout needs ({}, {})",
            z.shape(),
            spec.n_tokens(),
            w.dims.channels
        )));
    }
    if text.shape() != (spec.text_len(), w.dims.text_channels) {
        return Err(Error::shape(format!(
            "text is {:?}, layout needs ({}, {})",
            text.shape(),
            spec.text_len(),
            w.dims.text_channels
        )));
    }
    z.ensure_finite("tokens")?;
    text.ensure_finite("text tokens")
}

/// Relational block forward on the tokens of `spec`.
pub fn block_forward(
    weights: &BlockWeights,
    z_tokens: &Tensor2,
    text: &Tensor2,
    spec: &LayoutSpec,
    cfg: &AttnConfig,
) -> Result<Tensor2> {
    let ctx = RelationalContext::new(spec, weights.dims.head_dim)?;
    block_forward_with(&ctx, weights, z_tokens, text, cfg, BlockOptions::default())
}

pub fn block_forward_with(
    ctx: &RelationalContext,
    w: &BlockWeights,
    z: &Tensor2,
    text: &Tensor2,
    cfg: &AttnConfig,
    opts: BlockOptions,
) -> Result<Tensor2> {
    check_inputs(w, z, text, &ctx.spec)?;
    let hd = w.dims.head_dim;
    let mut x = z.clone();

    if opts.self_attention {
        let h = layer_norm(&x);
        let (q, k, v) = (h.matmul(&w.self_q)?, h.matmul(&w.self_k)?, h.matmul(&w.self_v)?);
        let mut o = Tensor2::zeros(x.rows(), w.dims.inner());
        for head in 0..w.dims.n_heads {
            let c0 = head * hd;
            let qh = ctx.rotary.apply(&q.column_slice(c0, hd))?;
            let kh = ctx.rotary.apply(&k.column_slice(c0, hd))?;
            let vh = v.column_slice(c0, hd);
            let oh = masked_self_attention_blockwise(&qh, &kh, &vh, ctx.csam.blocks())?;
            o.set_column_slice(c0, &oh);
        }
        x = x.add(&o.matmul(&w.self_o)?)?;
    }

    if opts.cross_attention {
        let h = layer_norm(&x);
        let q = h.matmul(&w.cross_q)?;
        let (k, v) = (text.matmul(&w.cross_k)?, text.matmul(&w.cross_v)?);
        let mut o = Tensor2::zeros(x.rows(), w.dims.inner());
        for head in 0..w.dims.n_heads {
            let c0 = head * hd;
            let qh = q.column_slice(c0, hd);
            let kh = k.column_slice(c0, hd);
            let vh = v.column_slice(c0, hd);
            let s = compute_scaling_s(&qh, &kh, &ctx.spec, cfg.d)?;
            let oh = relational_cross_attention(&qh, &kh, &vh, &ctx.mcam, &s, cfg)?;
            o.set_column_slice(c0, &oh);
        }
        x = x.add(&o.matmul(&w.cross_o)?)?;
    }

    let m = mlp(w, &layer_norm(&x))?;
    x.add(&m)
}

/// Same block without relational structure: unmasked self-attention and
/// unbiased cross-attention, rotary positions kept.
pub fn plain_block_forward(
    w: &BlockWeights,
    z: &Tensor2,
    text: &Tensor2,
    positions: &[Position3],
) -> Result<Tensor2> {
    w.validate()?;
    if positions.len() != z.rows() || z.cols() != w.dims.channels {
        return Err(Error::shape("tokens do not match positions or channels"));
    }
    let hd = w.dims.head_dim;
    let rotary = RotaryTable::new(positions, &RotaryConfig::new(hd)?);
    let mut x = z.clone();

    let h = layer_norm(&x);
    let (q, k, v) = (h.matmul(&w.self_q)?, h.matmul(&w.self_k)?, h.matmul(&w.self_v)?);
    let mut o = Tensor2::zeros(x.rows(), w.dims.inner());
    for head in 0..w.dims.n_heads {
        let c0 = head * hd;
        let qh = rotary.apply(&q.column_slice(c0, hd))?;
        let kh = rotary.apply(&k.column_slice(c0, hd))?;
        o.set_column_slice(c0, &standard_attention(&qh, &kh, &v.column_slice(c0, hd))?);
    }
    x = x.add(&o.matmul(&w.self_o)?)?;

    let h = layer_norm(&x);
    let q = h.matmul(&w.cross_q)?;
    let (k, v) = (text.matmul(&w.cross_k)?, text.matmul(&w.cross_v)?);
    let mut o = Tensor2::zeros(x.rows(), w.dims.inner());
    if text.rows() > 0 {
        for head in 0..w.dims.n_heads {
            let c0 = head * hd;
            let oh = standard_attention(
                &q.column_slice(c0, hd),
                &k.column_slice(c0, hd),
                &v.column_slice(c0, hd),
            )?;
            o.set_column_slice(c0, &oh);
        }
    }
    x = x.add(&o.matmul(&w.cross_o)?)?;

    let m = mlp(w, &layer_norm(&x))?;
    x.add(&m)
}
