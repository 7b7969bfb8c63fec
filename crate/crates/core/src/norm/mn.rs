//! Mixture normalization: each `(n, l)` position carries a channel vector
//! whose mixture responsibilities weight per-component batch statistics; each
//! position is normalized against every component's statistics and the
//! results are aggregated with responsibility weights.
//!
//! The backward pass is exact: it differentiates through the aggregation,
//! the weighted moments, the normalized contributions, and the
//! responsibilities themselves (the mixture parameters stay frozen).

use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::tensor::ActivationTensor;

/// Forward state retained for the backward pass.
#[derive(Debug, Clone)]
pub struct MnCache {
    x: ActivationTensor,
    /// M x K responsibilities (M = N*L positions).
    tau: Vec<f64>,
    /// M x K normalized contributions (zero columns for dropped components).
    tau_hat: Vec<f64>,
    /// Total responsibility mass per component.
    mass: Vec<f64>,
    /// K x C component means of the weighted batch statistics.
    mu: Vec<f64>,
    /// K x C weighted second central moments.
    s2: Vec<f64>,
    /// K x C, `1 / sqrt(s2 + eps)`.
    inv_std: Vec<f64>,
    /// Per-component aggregation scale (`1/sqrt(lambda_k)` or `sqrt(T)`).
    scale: Vec<f64>,
    active: Vec<bool>,
    model: GmmModel,
}

impl MnCache {
    /// Components whose term was dropped for having zero responsibility mass
    /// in this batch.
    pub fn dropped_components(&self) -> Vec<usize> {
        self.active
            .iter()
            .enumerate()
            .filter_map(|(k, active)| (!active).then_some(k))
            .collect()
    }
}

/// Normalize with the pre-fitted mixture; per-batch normalized contributions.
pub fn mn_forward(
    x: &ActivationTensor,
    model: &GmmModel,
    epsilon: f64,
) -> Result<ActivationTensor> {
    let scale: Vec<f64> = model.weights().iter().map(|w| 1.0 / w.sqrt()).collect();
    mixture_normalize(x, model, &scale, epsilon).map(|(y, _)| y)
}

/// [`mn_forward`] keeping the cache needed by [`mn_backward`].
pub fn mn_forward_cached(
    x: &ActivationTensor,
    model: &GmmModel,
    epsilon: f64,
) -> Result<(ActivationTensor, MnCache)> {
    let scale: Vec<f64> = model.weights().iter().map(|w| 1.0 / w.sqrt()).collect();
    mixture_normalize(x, model, &scale, epsilon)
}

/// Shared kernel for mixture normalization and collective inference; the two
/// differ only in the per-component aggregation scale.
pub(crate) fn mixture_normalize(
    x: &ActivationTensor,
    model: &GmmModel,
    scale: &[f64],
    epsilon: f64,
) -> Result<(ActivationTensor, MnCache)> {
    let (n, c, l) = x.shape().ncl();
    if model.d() != c {
        return Err(Error::Shape(format!(
            "mixture dimension {} does not match channel count {c}",
            model.d()
        )));
    }
    let m = n * l;
    if m == 0 {
        return Err(Error::Shape(
            "mixture normalization on an empty tensor".into(),
        ));
    }
    let k = model.k();

    // Rows of channel vectors, one per (n, l) position.
    let mut rows = vec![0.0; m * c];
    for ni in 0..n {
        for ch in 0..c {
            for li in 0..l {
                rows[(ni * l + li) * c + ch] = x.at(ni, ch, li);
            }
        }
    }
    let resp = model.responsibilities(&rows, m)?;

    let mut mass = vec![0.0; k];
    for i in 0..m {
        for ki in 0..k {
            mass[ki] += resp.tau[i * k + ki];
        }
    }
    let mut active = vec![true; k];
    for ki in 0..k {
        if mass[ki].is_nan() || mass[ki] <= 0.0 {
            active[ki] = false;
            log::warn!(
                "mixture component {ki} has zero responsibility mass in this batch; dropping its term"
            );
        }
    }

    let mut tau_hat = vec![0.0; m * k];
    for i in 0..m {
        for ki in 0..k {
            if active[ki] {
                tau_hat[i * k + ki] = resp.tau[i * k + ki] / mass[ki];
            }
        }
    }

    // Responsibility-weighted per-channel statistics of each component.
    let mut mu = vec![0.0; k * c];
    let mut s2 = vec![0.0; k * c];
    for ki in 0..k {
        if !active[ki] {
            continue;
        }
        for i in 0..m {
            let th = tau_hat[i * k + ki];
            for ch in 0..c {
                mu[ki * c + ch] += th * rows[i * c + ch];
            }
        }
        for i in 0..m {
            let th = tau_hat[i * k + ki];
            for ch in 0..c {
                let v = rows[i * c + ch] - mu[ki * c + ch];
                s2[ki * c + ch] += th * v * v;
            }
        }
    }
    let mut inv_std = vec![0.0; k * c];
    for ki in 0..k {
        for ch in 0..c {
            inv_std[ki * c + ch] = 1.0 / (s2[ki * c + ch] + epsilon).sqrt();
        }
    }

    let mut out = ActivationTensor::zeros(x.shape());
    for ni in 0..n {
        for li in 0..l {
            let i = ni * l + li;
            for ch in 0..c {
                let mut acc = 0.0;
                for ki in 0..k {
                    if !active[ki] {
                        continue;
                    }
                    let v = rows[i * c + ch] - mu[ki * c + ch];
                    acc += scale[ki] * resp.tau[i * k + ki] * v * inv_std[ki * c + ch];
                }
                *out.at_mut(ni, ch, li) = acc;
            }
        }
    }
    out.check_finite()?;
    let cache = MnCache {
        x: x.clone(),
        tau: resp.tau,
        tau_hat,
        mass,
        mu,
        s2,
        inv_std,
        scale: scale.to_vec(),
        active,
        model: model.clone(),
    };
    Ok((out, cache))
}

/// Exact input gradient of the mixture transform.
///
/// Paths, per position i, component k, channel c (A = scale_k * tau,
/// v = x - mu_k, w = inv_std_k):
/// - direct: `g * sum_k A w`
/// - component mean (`mu_k[c] = sum_i tau_hat x_i[c]`): `dL/dmu = -w * sum_i g A`
/// - second moment (`s2_k[c] = sum_i tau_hat v^2`): `dL/ds2 = -w^3/2 * sum_i g A v`
/// - responsibilities: `tau = softmax_k(log lambda_k + log p(x_i | k))`,
///   reaching the output through A, tau_hat, mu and s2.
pub fn mn_backward(grad_out: &ActivationTensor, cache: &MnCache) -> Result<ActivationTensor> {
    if grad_out.shape() != cache.x.shape() {
        return Err(Error::Internal(format!(
            "mn_backward cache shape {} does not match gradient shape {}",
            cache.x.shape(),
            grad_out.shape()
        )));
    }
    let (n, c, l) = cache.x.shape().ncl();
    let m = n * l;
    let k = cache.model.k();

    // Flattened views, one row per (n, l) position.
    let mut rows = vec![0.0; m * c];
    let mut g = vec![0.0; m * c];
    for ni in 0..n {
        for ch in 0..c {
            for li in 0..l {
                rows[(ni * l + li) * c + ch] = cache.x.at(ni, ch, li);
                g[(ni * l + li) * c + ch] = grad_out.at(ni, ch, li);
            }
        }
    }

    // G1_k[c] = sum_i g[i,c] A[i,k]; G2_k[c] = sum_i g[i,c] A[i,k] v_k[i,c].
    let mut g1 = vec![0.0; k * c];
    let mut g2 = vec![0.0; k * c];
    for i in 0..m {
        for ki in 0..k {
            if !cache.active[ki] {
                continue;
            }
            let a = cache.scale[ki] * cache.tau[i * k + ki];
            if a == 0.0 {
                continue;
            }
            for ch in 0..c {
                let v = rows[i * c + ch] - cache.mu[ki * c + ch];
                g1[ki * c + ch] += g[i * c + ch] * a;
                g2[ki * c + ch] += g[i * c + ch] * a * v;
            }
        }
    }

    // Loss partials with respect to the component statistics.
    let mut d_mu = vec![0.0; k * c];
    let mut d_s2 = vec![0.0; k * c];
    for ki in 0..k {
        if !cache.active[ki] {
            continue;
        }
        for ch in 0..c {
            let w = cache.inv_std[ki * c + ch];
            d_mu[ki * c + ch] = -w * g1[ki * c + ch];
            d_s2[ki * c + ch] = -0.5 * w * w * w * g2[ki * c + ch];
        }
    }

    let mut grad_in = ActivationTensor::zeros(cache.x.shape());
    let mut d_tau = vec![0.0; k];
    for i in 0..m {
        // dL/dtau_ki = scale_k * dL/dA + statistics paths through tau_hat
        // (d tau_hat_j / d tau_i has the 1/mass factor; the -tau_hat_j/mass
        // correction vanishes because sum_i tau_hat v = 0 and
        // sum_i tau_hat (v^2 - s2) = 0 by construction of the moments).
        for ki in 0..k {
            d_tau[ki] = 0.0;
            if !cache.active[ki] {
                continue;
            }
            let mut s_agg = 0.0;
            let mut s_stats = 0.0;
            for ch in 0..c {
                let v = rows[i * c + ch] - cache.mu[ki * c + ch];
                let w = cache.inv_std[ki * c + ch];
                s_agg += g[i * c + ch] * v * w;
                s_stats +=
                    d_mu[ki * c + ch] * v + d_s2[ki * c + ch] * (v * v - cache.s2[ki * c + ch]);
            }
            d_tau[ki] = cache.scale[ki] * s_agg + s_stats / cache.mass[ki];
        }

        // Softmax Jacobian: dL/deta_k = tau_k (d_tau_k - sum_q tau_q d_tau_q).
        let mut inner = 0.0;
        for ki in 0..k {
            inner += cache.tau[i * k + ki] * d_tau[ki];
        }

        for ch in 0..c {
            let mut acc = 0.0;
            for ki in 0..k {
                if !cache.active[ki] {
                    continue;
                }
                let a = cache.scale[ki] * cache.tau[i * k + ki];
                let v = rows[i * c + ch] - cache.mu[ki * c + ch];
                let w = cache.inv_std[ki * c + ch];
                let th = cache.tau_hat[i * k + ki];
                acc += g[i * c + ch] * a * w; // direct
                acc += d_mu[ki * c + ch] * th; // through the mean
                acc += d_s2[ki * c + ch] * 2.0 * th * v; // through the moment
            }
            // Through the responsibilities: eta_k = log lambda_k + log p, and
            // d log p / dx[c] = -(x[c] - model_mean) / model_var.
            for ki in 0..k {
                let t = cache.tau[i * k + ki];
                if t == 0.0 {
                    continue;
                }
                let d_eta = t * (d_tau[ki] - inner);
                let z =
                    (rows[i * c + ch] - cache.model.mean(ki)[ch]) / cache.model.variance(ki)[ch];
                acc += d_eta * (-z);
            }
            *grad_in.at_mut(i / l, ch, i % l) = acc;
        }
    }
    Ok(grad_in)
}
