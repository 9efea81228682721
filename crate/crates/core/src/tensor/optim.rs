use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter #{index}")]
    NonFiniteGradient { index: usize },
    #[error("{params} parameters but {grads} gradients")]
    CountMismatch { params: usize, grads: usize },
    #[error("gradient #{index} has shape {grad:?}, parameter has {param:?}")]
    ShapeMismatch {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 4e-7,
        }
    }
}

/// First and second moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R> {
    pub step: u64,
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(params: &[&Tensor<R>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One adaptive-moment update with decoupled weight decay:
/// `p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)`.
///
/// All gradients are validated before any parameter is touched, so a
/// non-finite gradient leaves parameters and moments unchanged.
pub fn adam_step<R: Real>(
    params: &mut [&mut Tensor<R>],
    grads: &[Tensor<R>],
    state: &mut AdamState<R>,
    cfg: &AdamConfig,
) -> Result<(), OptimError> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(OptimError::CountMismatch {
            params: params.len(),
            grads: grads.len(),
        });
    }
    for (index, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(OptimError::ShapeMismatch {
                index,
                param: p.shape().to_vec(),
                grad: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(OptimError::NonFiniteGradient { index });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (R::of(cfg.beta1), R::of(cfg.beta2));
    let bc1 = R::one() - R::of(cfg.beta1.powi(t));
    let bc2 = R::one() - R::of(cfg.beta2.powi(t));
    let lr = R::of(cfg.lr);
    let decay = R::of(cfg.lr * cfg.weight_decay);
    let eps = R::of(cfg.eps);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = b1 * md[i] + (R::one() - b1) * gi;
            vd[i] = b2 * vd[i] + (R::one() - b2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] = pd[i] - decay * pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<R: Real>(grads: &mut [Tensor<R>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.squared_norm().f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = R::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}
