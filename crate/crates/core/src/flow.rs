//! Rectified-flow interpolation and the velocity regression loss.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// One training sample: data latent `z`, noise `z0` and time `t ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub z: Tensor2,
    pub z0: Tensor2,
    pub t: f32,
}

/// Returns `(z_t, v_t)` with `z_t = (1 − t)·z0 + t·z` and `v_t = z − z0`.
pub fn flow_interpolate(sample: &FlowSample) -> Result<(Tensor2, Tensor2)> {
    let FlowSample { z, z0, t } = sample;
    if z.shape() != z0.shape() {
        return Err(Error::shape(format!(
            "data latent {:?} vs noise {:?}",
            z.shape(),
            z0.shape()
        )));
    }
    if !(0.0..=1.0).contains(t) {
        return Err(Error::Param(format!("t = {t} outside [0, 1]")));
    }
    let (rows, cols) = z.shape();
    let mix = z0
        .data()
        .iter()
        .zip(z.data())
        .map(|(&a, &b)| (1.0 - t) * a + t * b)
        .collect();
    let vel = z.data().iter().zip(z0.data()).map(|(&b, &a)| b - a).collect();
    Ok((
        Tensor2::from_vec(rows, cols, mix)?,
        Tensor2::from_vec(rows, cols, vel)?,
    ))
}

/// Mean squared error between predicted and target velocity, accumulated in `f64`.
pub fn fm_loss(pred: &Tensor2, v_t: &Tensor2) -> Result<f64> {
    if pred.shape() != v_t.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            v_t.shape()
        )));
    }
    let n = pred.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(v_t.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

/// `sigmoid(mean + scale·ε)` with `ε ~ N(0, 1)`.
pub fn sample_logit_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, scale: f64) -> f64 {
    let eps: f64 = rng.sample(StandardNormal);
    1.0 / (1.0 + (-(mean + scale * eps)).exp())
}
