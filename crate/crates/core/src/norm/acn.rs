//! Context normalization: every sample carries a context id `r`, and its
//! activations are standardized per channel with learned parameters
//! `(mu_r, sigma2_r)` belonging to that context. The parameters train by
//! backpropagation like any other weight.
//!
//! The variance is stored through an unconstrained parameter `s` with
//! `sigma2 = softplus(s) + floor`, so it stays positive under arbitrary
//! optimizer steps; the gradient with respect to `sigma2` is chain-ruled
//! through the softplus when it is accumulated.
//!
//! Inference either reuses the per-context transform with frozen parameters
//! or treats the contexts collectively as mixture components with uniform
//! priors (see [`acn_inference_aggregate`]).

use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::norm::{sigmoid, softplus, softplus_inv};
use crate::tensor::ActivationTensor;
use serde::{Deserialize, Serialize};

/// Additive floor under the softplus so the effective variance never reaches
/// zero exactly.
pub const VAR_FLOOR: f64 = 1e-8;

/// Per-sample context labels, aligned with the batch axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextIds(Vec<usize>);

impl ContextIds {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn validate(&self, n: usize, t: usize) -> Result<()> {
        if self.0.len() != n {
            return Err(Error::Shape(format!(
                "{} context labels for a batch of {n}",
                self.0.len()
            )));
        }
        for &r in &self.0 {
            if r >= t {
                return Err(Error::Domain(format!(
                    "context label {r} out of range (table has {t} contexts)"
                )));
            }
        }
        Ok(())
    }
}

/// Learned per-context, per-channel normalization parameters with their
/// gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextParamTable {
    t: usize,
    channels: usize,
    pub epsilon: f64,
    /// T x C learned means.
    mu: Vec<f64>,
    /// T x C unconstrained variance parameters.
    s: Vec<f64>,
    grad_mu: Vec<f64>,
    grad_s: Vec<f64>,
}

impl ContextParamTable {
    /// Identity-like start: mu = 0 and sigma2 = 1 for every context.
    pub fn new(t: usize, channels: usize, epsilon: f64) -> Self {
        let s0 = softplus_inv(1.0 - VAR_FLOOR);
        Self {
            t,
            channels,
            epsilon,
            mu: vec![0.0; t * channels],
            s: vec![s0; t * channels],
            grad_mu: vec![0.0; t * channels],
            grad_s: vec![0.0; t * channels],
        }
    }

    /// Table with explicit means and effective variances (each > [`VAR_FLOOR`]).
    pub fn from_params(mu: Vec<Vec<f64>>, sigma2: Vec<Vec<f64>>, epsilon: f64) -> Result<Self> {
        let t = mu.len();
        if t == 0 || sigma2.len() != t {
            return Err(Error::Shape("mu/sigma2 row count mismatch".into()));
        }
        let channels = mu[0].len();
        let mut table = Self::new(t, channels, epsilon);
        for r in 0..t {
            if mu[r].len() != channels || sigma2[r].len() != channels {
                return Err(Error::Shape("ragged parameter table".into()));
            }
            for c in 0..channels {
                table.mu[r * channels + c] = mu[r][c];
                table.set_sigma2(r, c, sigma2[r][c])?;
            }
        }
        Ok(table)
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn mu(&self, r: usize, c: usize) -> f64 {
        self.mu[r * self.channels + c]
    }

    /// Effective variance `softplus(s) + floor`; always positive.
    pub fn sigma2(&self, r: usize, c: usize) -> f64 {
        softplus(self.s[r * self.channels + c]) + VAR_FLOOR
    }

    pub fn set_mu(&mut self, r: usize, c: usize, value: f64) {
        self.mu[r * self.channels + c] = value;
    }

    pub fn set_sigma2(&mut self, r: usize, c: usize, value: f64) -> Result<()> {
        if value.is_nan() || value <= VAR_FLOOR {
            return Err(Error::Domain(format!(
                "effective variance must exceed the floor {VAR_FLOOR} (got {value})"
            )));
        }
        self.s[r * self.channels + c] = softplus_inv(value - VAR_FLOOR);
        Ok(())
    }

    pub fn mu_row(&self, r: usize) -> &[f64] {
        &self.mu[r * self.channels..(r + 1) * self.channels]
    }

    pub fn sigma2_row(&self, r: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.sigma2(r, c)).collect()
    }

    /// Fold a backward result into the accumulators; the sigma2 gradient is
    /// chain-ruled through the softplus onto the raw parameter.
    pub fn accumulate(&mut self, grads: &AcnGrads) -> Result<()> {
        if grads.grad_mu.len() != self.mu.len() || grads.grad_var.len() != self.s.len() {
            return Err(Error::Internal("gradient block size mismatch".into()));
        }
        for i in 0..self.mu.len() {
            self.grad_mu[i] += grads.grad_mu[i];
            self.grad_s[i] += grads.grad_var[i] * sigmoid(self.s[i]);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.grad_mu.iter_mut().for_each(|g| *g = 0.0);
        self.grad_s.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Raw trainable parameters in a fixed order: all of mu, then all of s.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.mu.iter().chain(self.s.iter()).copied()
    }

    pub fn grads(&self) -> impl Iterator<Item = f64> + '_ {
        self.grad_mu.iter().chain(self.grad_s.iter()).copied()
    }

    pub fn param_count(&self) -> usize {
        2 * self.t * self.channels
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Internal("parameter block size mismatch".into()));
        }
        let half = self.mu.len();
        self.mu.copy_from_slice(&values[..half]);
        self.s.copy_from_slice(&values[half..]);
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        let doc = ContextParamTableJson {
            t: self.t,
            channels: self.channels,
            epsilon: self.epsilon,
            mu: (0..self.t).map(|r| self.mu_row(r).to_vec()).collect(),
            s: (0..self.t)
                .map(|r| self.s[r * self.channels..(r + 1) * self.channels].to_vec())
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: ContextParamTableJson = serde_json::from_str(text)?;
        if doc.mu.len() != doc.t || doc.s.len() != doc.t {
            return Err(Error::Format(
                "context table document is inconsistent".into(),
            ));
        }
        let mut table = Self::new(doc.t, doc.channels, doc.epsilon);
        for r in 0..doc.t {
            if doc.mu[r].len() != doc.channels || doc.s[r].len() != doc.channels {
                return Err(Error::Format("context table document is ragged".into()));
            }
            for c in 0..doc.channels {
                table.mu[r * doc.channels + c] = doc.mu[r][c];
                table.s[r * doc.channels + c] = doc.s[r][c];
            }
        }
        Ok(table)
    }
}

/// Serialized form: the unconstrained `s` is stored and the effective
/// variance recomputed on load.
#[derive(Serialize, Deserialize)]
struct ContextParamTableJson {
    t: usize,
    channels: usize,
    epsilon: f64,
    mu: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
}

/// Forward state retained for [`acn_backward`].
#[derive(Debug, Clone)]
pub struct AcnCache {
    normalized: ActivationTensor,
    /// T x C `1/sqrt(sigma2 + eps)` at forward time.
    inv_std: Vec<f64>,
    ctx: ContextIds,
    t: usize,
}

/// Gradient blocks of one backward call. `grad_var` is with respect to the
/// effective variance; the table applies the softplus chain rule when
/// accumulating.
#[derive(Debug, Clone)]
pub struct AcnGrads {
    pub grad_in: ActivationTensor,
    /// T x C.
    pub grad_mu: Vec<f64>,
    /// T x C.
    pub grad_var: Vec<f64>,
}

fn context_normalize(
    x: &ActivationTensor,
    ctx: &ContextIds,
    table: &ContextParamTable,
) -> Result<(ActivationTensor, Vec<f64>)> {
    let (n, c, l) = x.shape().ncl();
    if c != table.channels {
        return Err(Error::Shape(format!(
            "table has {} channels, tensor has {c}",
            table.channels
        )));
    }
    ctx.validate(n, table.t)?;
    let mut inv_std = vec![0.0; table.t * c];
    for r in 0..table.t {
        for ch in 0..c {
            inv_std[r * c + ch] = 1.0 / (table.sigma2(r, ch) + table.epsilon).sqrt();
        }
    }
    let mut out = ActivationTensor::zeros(x.shape());
    for ni in 0..n {
        let r = ctx.labels()[ni];
        for ch in 0..c {
            let mu = table.mu(r, ch);
            let w = inv_std[r * c + ch];
            for li in 0..l {
                *out.at_mut(ni, ch, li) = (x.at(ni, ch, li) - mu) * w;
            }
        }
    }
    out.check_finite()?;
    Ok((out, inv_std))
}

/// `xhat = (x - mu_r) / sqrt(sigma2_r + eps)` per channel, using each
/// sample's context parameters.
pub fn acn_forward(
    x: &ActivationTensor,
    ctx: &ContextIds,
    table: &ContextParamTable,
) -> Result<(ActivationTensor, AcnCache)> {
    let (normalized, inv_std) = context_normalize(x, ctx, table)?;
    let cache = AcnCache {
        normalized: normalized.clone(),
        inv_std,
        ctx: ctx.clone(),
        t: table.t,
    };
    Ok((normalized, cache))
}

/// Same transform with frozen parameters and no cache.
pub fn per_context_inference(
    x: &ActivationTensor,
    ctx: &ContextIds,
    table: &ContextParamTable,
) -> Result<ActivationTensor> {
    context_normalize(x, ctx, table).map(|(y, _)| y)
}

/// Gradients of the context transform:
/// `dx = g / sqrt(sigma2 + eps)`,
/// `dmu_r[c] = -sum g / sqrt(sigma2 + eps)` over positions with context r,
/// `dsigma2_r[c] = sum g (mu - x) / (2 (sigma2 + eps)^{3/2})`.
pub fn acn_backward(grad_out: &ActivationTensor, cache: &AcnCache) -> Result<AcnGrads> {
    if grad_out.shape() != cache.normalized.shape() {
        return Err(Error::Internal(format!(
            "acn_backward cache shape {} does not match gradient shape {}",
            cache.normalized.shape(),
            grad_out.shape()
        )));
    }
    let (n, c, l) = grad_out.shape().ncl();
    let mut grad_in = ActivationTensor::zeros(grad_out.shape());
    let mut grad_mu = vec![0.0; cache.t * c];
    let mut grad_var = vec![0.0; cache.t * c];
    for ni in 0..n {
        let r = cache.ctx.labels()[ni];
        for ch in 0..c {
            let w = cache.inv_std[r * c + ch];
            let mut g_sum = 0.0;
            let mut gx_sum = 0.0;
            for li in 0..l {
                let g = grad_out.at(ni, ch, li);
                *grad_in.at_mut(ni, ch, li) = g * w;
                g_sum += g;
                gx_sum += g * cache.normalized.at(ni, ch, li);
            }
            grad_mu[r * c + ch] -= g_sum * w;
            // (mu - x) / (2 (sigma2+eps)^{3/2}) = -xhat * w^2 / 2
            grad_var[r * c + ch] -= 0.5 * gx_sum * w * w;
        }
    }
    Ok(AcnGrads {
        grad_in,
        grad_mu,
        grad_var,
    })
}

/// One-hot context id through two dense maps: the first emits the mean, the
/// second the variance through a softplus.
pub fn acn_base_forward(
    ctx_one_hot: &[f64],
    embed_mu: &DenseEmbed,
    embed_var: &DenseEmbed,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let r = one_hot_index(ctx_one_hot)?;
    if embed_mu.t() != ctx_one_hot.len() || embed_var.t() != ctx_one_hot.len() {
        return Err(Error::Shape(
            "one-hot length does not match embedding table".into(),
        ));
    }
    let mu = embed_mu.lookup(r);
    let sigma2: Vec<f64> = embed_var.lookup(r).iter().map(|z| softplus(*z)).collect();
    Ok((mu, sigma2))
}

fn one_hot_index(v: &[f64]) -> Result<usize> {
    let mut idx = None;
    for (i, &x) in v.iter().enumerate() {
        if x == 1.0 {
            if idx.is_some() {
                return Err(Error::Domain("more than one hot entry".into()));
            }
            idx = Some(i);
        } else if x != 0.0 {
            return Err(Error::Domain(format!("entry {i} = {x} is neither 0 nor 1")));
        }
    }
    idx.ok_or_else(|| Error::Domain("no hot entry in context encoding".into()))
}

/// Dense map from a context id to a per-channel vector: `row(r) + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseEmbed {
    /// T x C.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    t: usize,
    channels: usize,
}

impl DenseEmbed {
    pub fn zeros(t: usize, channels: usize) -> Self {
        Self {
            w: vec![0.0; t * channels],
            b: vec![0.0; channels],
            t,
            channels,
        }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn lookup(&self, r: usize) -> Vec<f64> {
        (0..self.channels)
            .map(|c| self.w[r * self.channels + c] + self.b[c])
            .collect()
    }
}

/// The embedding-based context layer: two dense maps estimate the context
/// parameters from the one-hot id; normalization is then the usual context
/// transform, and the backward pass trains both maps.
#[derive(Debug, Clone, PartialEq)]
pub struct AcnBaseNet {
    pub mu_net: DenseEmbed,
    pub var_net: DenseEmbed,
    pub epsilon: f64,
    pub grad_w_mu: Vec<f64>,
    pub grad_b_mu: Vec<f64>,
    pub grad_w_var: Vec<f64>,
    pub grad_b_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AcnBaseCache {
    normalized: ActivationTensor,
    /// Per-sample inverse std, N x C.
    inv_std: Vec<f64>,
    /// Per-sample pre-softplus variance input, N x C.
    z_var: Vec<f64>,
    ctx: ContextIds,
}

impl AcnBaseNet {
    pub fn new(t: usize, channels: usize, epsilon: f64) -> Self {
        Self {
            mu_net: DenseEmbed::zeros(t, channels),
            var_net: DenseEmbed::zeros(t, channels),
            epsilon,
            grad_w_mu: vec![0.0; t * channels],
            grad_b_mu: vec![0.0; channels],
            grad_w_var: vec![0.0; t * channels],
            grad_b_var: vec![0.0; channels],
        }
    }

    pub fn t(&self) -> usize {
        self.mu_net.t()
    }

    pub fn channels(&self) -> usize {
        self.mu_net.channels()
    }

    pub fn forward(
        &self,
        x: &ActivationTensor,
        ctx: &ContextIds,
    ) -> Result<(ActivationTensor, AcnBaseCache)> {
        let (n, c, l) = x.shape().ncl();
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "embedding has {} channels, tensor has {c}",
                self.channels()
            )));
        }
        ctx.validate(n, self.t())?;
        let mut out = ActivationTensor::zeros(x.shape());
        let mut inv_std = vec![0.0; n * c];
        let mut z_var = vec![0.0; n * c];
        for ni in 0..n {
            let r = ctx.labels()[ni];
            let mu = self.mu_net.lookup(r);
            let z = self.var_net.lookup(r);
            for ch in 0..c {
                let sigma2 = softplus(z[ch]);
                let w = 1.0 / (sigma2 + self.epsilon).sqrt();
                inv_std[ni * c + ch] = w;
                z_var[ni * c + ch] = z[ch];
                for li in 0..l {
                    *out.at_mut(ni, ch, li) = (x.at(ni, ch, li) - mu[ch]) * w;
                }
            }
        }
        out.check_finite()?;
        let cache = AcnBaseCache {
            normalized: out.clone(),
            inv_std,
            z_var,
            ctx: ctx.clone(),
        };
        Ok((out, cache))
    }

    /// Input gradient plus accumulation into both embedding tables.
    pub fn backward(
        &mut self,
        grad_out: &ActivationTensor,
        cache: &AcnBaseCache,
    ) -> Result<ActivationTensor> {
        if grad_out.shape() != cache.normalized.shape() {
            return Err(Error::Internal(
                "acn-base backward fed a mismatched cache".into(),
            ));
        }
        let (n, c, l) = grad_out.shape().ncl();
        let mut grad_in = ActivationTensor::zeros(grad_out.shape());
        for ni in 0..n {
            let r = cache.ctx.labels()[ni];
            for ch in 0..c {
                let w = cache.inv_std[ni * c + ch];
                let mut g_sum = 0.0;
                let mut gx_sum = 0.0;
                for li in 0..l {
                    let g = grad_out.at(ni, ch, li);
                    *grad_in.at_mut(ni, ch, li) = g * w;
                    g_sum += g;
                    gx_sum += g * cache.normalized.at(ni, ch, li);
                }
                let d_mu = -g_sum * w;
                let d_sigma2 = -0.5 * gx_sum * w * w;
                let d_z = d_sigma2 * sigmoid(cache.z_var[ni * c + ch]);
                self.grad_w_mu[r * c + ch] += d_mu;
                self.grad_b_mu[ch] += d_mu;
                self.grad_w_var[r * c + ch] += d_z;
                self.grad_b_var[ch] += d_z;
            }
        }
        Ok(grad_in)
    }

    pub fn zero_grads(&mut self) {
        for g in self
            .grad_w_mu
            .iter_mut()
            .chain(self.grad_b_mu.iter_mut())
            .chain(self.grad_w_var.iter_mut())
            .chain(self.grad_b_var.iter_mut())
        {
            *g = 0.0;
        }
    }
}

/// Collective inference: treat the T context parameter pairs as mixture
/// components with uniform priors and aggregate as
/// `xhat_i = sqrt(T) * sum_r tau_r(x_i) xhat_i^r`, where each `xhat^r` is the
/// responsibility-weighted per-component normalization of the batch.
pub fn acn_inference_aggregate(
    x: &ActivationTensor,
    table: &ContextParamTable,
) -> Result<ActivationTensor> {
    let t = table.t();
    let weights = vec![1.0 / t as f64; t];
    let means: Vec<Vec<f64>> = (0..t).map(|r| table.mu_row(r).to_vec()).collect();
    let vars: Vec<Vec<f64>> = (0..t).map(|r| table.sigma2_row(r)).collect();
    let model = GmmModel::new(weights, means, vars)?;
    let scale = vec![(t as f64).sqrt(); t];
    crate::norm::mn::mixture_normalize(x, &model, &scale, table.epsilon).map(|(y, _)| y)
}
