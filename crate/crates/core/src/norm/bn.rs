//! Batch normalization: per-channel standardization with mini-batch
//! statistics in training and exponential running averages at inference,
//! plus the exact backward pass through the batch moments.

use crate::error::{Error, Result};
use crate::tensor::ActivationTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics and hyperparameters of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub epsilon: f64,
    pub momentum: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    /// Fresh state: running mean 0, running variance 1 per channel.
    pub fn new(channels: usize, epsilon: f64, momentum: f64) -> Self {
        Self {
            epsilon,
            momentum,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct BnCache {
    normalized: ActivationTensor,
    inv_std: Vec<f64>,
    trained: bool,
}

/// Standardize per channel. Train mode uses the batch moments and updates the
/// running averages; eval mode uses the stored running statistics.
pub fn bn_forward(
    x: &ActivationTensor,
    state: &mut BnState,
    mode: Mode,
) -> Result<(ActivationTensor, BnCache)> {
    let (n, c, l) = x.shape().ncl();
    if c != state.channels() {
        return Err(Error::Shape(format!(
            "batch norm over {} channels fed a {c}-channel tensor",
            state.channels()
        )));
    }
    let (mean, var) = match mode {
        Mode::Train => {
            if n * l < 2 {
                return Err(Error::Domain(
                    "batch normalization in train mode needs at least 2 positions per channel"
                        .into(),
                ));
            }
            let m = x.channel_moments()?;
            for ch in 0..c {
                state.running_mean[ch] =
                    (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * m.mean[ch];
                state.running_var[ch] =
                    (1.0 - state.momentum) * state.running_var[ch] + state.momentum * m.var[ch];
            }
            (m.mean, m.var)
        }
        Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
    };
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v + state.epsilon).sqrt())
        .collect();
    let shift: Vec<f64> = mean.iter().map(|m| -m).collect();
    let normalized = x.elementwise_affine(&inv_std, &shift)?;
    let cache = BnCache {
        normalized: normalized.clone(),
        inv_std,
        trained: mode == Mode::Train,
    };
    Ok((normalized, cache))
}

/// Gradient of the train-mode transform with respect to its input, including
/// the dependence of the batch mean and variance on the input:
/// `dx = inv_std * (g - mean(g) - xhat * mean(g * xhat))` per channel.
/// For an eval-mode cache the statistics are constants and `dx = g * inv_std`.
pub fn bn_backward(grad_out: &ActivationTensor, cache: &BnCache) -> Result<ActivationTensor> {
    if grad_out.shape() != cache.normalized.shape() {
        return Err(Error::Internal(format!(
            "bn_backward cache shape {} does not match gradient shape {}",
            cache.normalized.shape(),
            grad_out.shape()
        )));
    }
    let (n, c, l) = grad_out.shape().ncl();
    let m = (n * l) as f64;
    let mut grad_in = ActivationTensor::zeros(grad_out.shape());
    for ch in 0..c {
        let istd = cache.inv_std[ch];
        if !cache.trained {
            for ni in 0..n {
                for li in 0..l {
                    *grad_in.at_mut(ni, ch, li) = grad_out.at(ni, ch, li) * istd;
                }
            }
            continue;
        }
        let mut g_sum = 0.0;
        let mut gx_sum = 0.0;
        for ni in 0..n {
            for li in 0..l {
                let g = grad_out.at(ni, ch, li);
                g_sum += g;
                gx_sum += g * cache.normalized.at(ni, ch, li);
            }
        }
        let g_mean = g_sum / m;
        let gx_mean = gx_sum / m;
        for ni in 0..n {
            for li in 0..l {
                let g = grad_out.at(ni, ch, li);
                let xh = cache.normalized.at(ni, ch, li);
                *grad_in.at_mut(ni, ch, li) = istd * (g - g_mean - xh * gx_mean);
            }
        }
    }
    Ok(grad_in)
}
