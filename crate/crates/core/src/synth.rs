//! Seeded synthetic instances for the forward report and the demo fit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attn::AttnConfig;
use crate::block::{block_forward_with, BlockDims, BlockOptions, BlockWeights, RelationalContext};
use crate::error::Result;
use crate::flow::{flow_interpolate, fm_loss, sample_logit_normal, FlowSample};
use crate::grad::{fit, BlockInputs};
use crate::layout::LayoutSpec;
use crate::tensor::Tensor2;

#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    pub weights: BlockWeights,
    pub sample: FlowSample,
    pub text: Tensor2,
}

impl SyntheticInstance {
    /// Weights, latents, noise, time (logit-normal, mean 0, scale 1) and
    /// text tokens, all drawn from one seeded stream.
    pub fn new(spec: &LayoutSpec, dims: BlockDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = BlockWeights::random(dims, 1.0, &mut rng);
        let z = Tensor2::randn(spec.n_tokens(), dims.channels, 1.0, &mut rng);
        let z0 = Tensor2::randn(spec.n_tokens(), dims.channels, 1.0, &mut rng);
        let t = sample_logit_normal(&mut rng, 0.0, 1.0) as f32;
        let text = Tensor2::randn(spec.text_len(), dims.text_channels, 1.0, &mut rng);
        Self {
            weights,
            sample: FlowSample { z, z0, t },
            text,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSummary {
    pub t: f32,
    pub loss: f64,
    /// Largest change of any condition-token output when every video token is replaced.
    pub condition_residual: f64,
    /// Largest change of any video-token output when every condition token is replaced.
    pub video_response: f64,
}

fn max_row_change(a: &Tensor2, b: &Tensor2, rows: std::ops::Range<usize>) -> f64 {
    rows.flat_map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).abs() as f64))
        .fold(0.0, f64::max)
}

fn replace_rows(x: &Tensor2, rows: std::ops::Range<usize>, rng: &mut impl Rng) -> Tensor2 {
    let mut out = x.clone();
    for r in rows {
        let fresh = Tensor2::randn(1, x.cols(), 1.0, rng);
        out.row_mut(r).copy_from_slice(fresh.row(0));
    }
    out
}

/// One block forward on `z_t`, its velocity loss and branch-isolation residuals.
pub fn seeded_forward(
    spec: &LayoutSpec,
    dims: BlockDims,
    seed: u64,
    cfg: &AttnConfig,
) -> Result<ForwardSummary> {
    let inst = SyntheticInstance::new(spec, dims, seed);
    let ctx = RelationalContext::new(spec, dims.head_dim)?;
    let (z_t, v_t) = flow_interpolate(&inst.sample)?;
    let run = |x: &Tensor2| {
        block_forward_with(&ctx, &inst.weights, x, &inst.text, cfg, BlockOptions::default())
    };
    let pred = run(&z_t)?;
    let loss = fm_loss(&pred, &v_t)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_7e57);
    let n_video = spec.n_video_tokens();
    let n = spec.n_tokens();
    let video_swapped = run(&replace_rows(&z_t, 0..n_video, &mut rng))?;
    let cond_swapped = run(&replace_rows(&z_t, n_video..n, &mut rng))?;
    Ok(ForwardSummary {
        t: inst.sample.t,
        loss,
        condition_residual: max_row_change(&pred, &video_swapped, n_video..n),
        video_response: max_row_change(&pred, &cond_swapped, 0..n_video),
    })
}

/// Fits a fresh block to the velocity target of one fixed sample; returns
/// the loss trace (`steps + 1` entries).
pub fn fit_demo(
    spec: &LayoutSpec,
    dims: BlockDims,
    seed: u64,
    steps: usize,
    lr: f64,
    cfg: &AttnConfig,
) -> Result<Vec<f64>> {
    let mut inst = SyntheticInstance::new(spec, dims, seed);
    let ctx = RelationalContext::new(spec, dims.head_dim)?;
    let (z_t, v_t) = flow_interpolate(&inst.sample)?;
    let inputs = BlockInputs {
        tokens: z_t,
        text: inst.text.clone(),
        target: v_t,
        loss_rows: None,
    };
    fit(&ctx, &mut inst.weights, &inputs, cfg, steps, lr)
}
