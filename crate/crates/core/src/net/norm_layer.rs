//! Normalization as a network layer: wraps one of the transforms, an
//! optional learned per-channel affine pair for ablations (off by default),
//! and an identity switch used by the plumbing-isolation checks.

use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::norm::{
    acn_backward, acn_forward, bn_backward, bn_forward, mn_backward, mn_forward_cached,
    per_context_inference, AcnBaseCache, AcnBaseNet, AcnCache, BnCache, BnState, ContextIds,
    ContextParamTable, MnCache, Mode,
};
use crate::tensor::ActivationTensor;

/// How a context-table layer normalizes at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AcnEvalMode {
    /// Look up each sample's context parameters (labels known at test time).
    #[default]
    PerContext,
    /// Treat the contexts collectively as mixture components with uniform
    /// priors (labels unknown at test time).
    Aggregate,
}

#[derive(Debug, Clone)]
pub enum NormKind {
    Identity,
    Bn(BnState),
    Mn {
        channels: usize,
        epsilon: f64,
        model: Option<GmmModel>,
    },
    Acn {
        table: ContextParamTable,
        eval_mode: AcnEvalMode,
    },
    AcnBase {
        net: AcnBaseNet,
        eval_mode: AcnEvalMode,
    },
}

/// Optional learned scale/shift applied after normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePair {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
}

impl AffinePair {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            grad_gamma: vec![0.0; channels],
            grad_beta: vec![0.0; channels],
        }
    }
}

#[derive(Debug, Clone)]
pub struct NormLayer {
    pub kind: NormKind,
    pub affine: Option<AffinePair>,
    /// When set the layer passes activations through unchanged.
    pub force_identity: bool,
}

#[derive(Debug, Clone)]
pub enum InnerNormCache {
    Passthrough,
    Bn(BnCache),
    Mn(MnCache),
    Acn(AcnCache),
    AcnBase(AcnBaseCache),
}

#[derive(Debug, Clone)]
pub struct NormLayerCache {
    pub inner: InnerNormCache,
    /// Normalized activations before the affine pair (only kept when the
    /// affine pair is on).
    pub pre_affine: Option<ActivationTensor>,
}

impl NormLayer {
    pub fn channels(&self) -> usize {
        match &self.kind {
            NormKind::Identity => 0,
            NormKind::Bn(state) => state.channels(),
            NormKind::Mn { channels, .. } => *channels,
            NormKind::Acn { table, .. } => table.channels(),
            NormKind::AcnBase { net, .. } => net.channels(),
        }
    }

    pub fn consumes_context(&self) -> bool {
        matches!(self.kind, NormKind::Acn { .. } | NormKind::AcnBase { .. })
    }

    pub fn forward(
        &mut self,
        x: &ActivationTensor,
        ctx: Option<&ContextIds>,
        mode: Mode,
    ) -> Result<(ActivationTensor, NormLayerCache)> {
        if self.force_identity {
            return Ok((
                x.clone(),
                NormLayerCache {
                    inner: InnerNormCache::Passthrough,
                    pre_affine: None,
                },
            ));
        }
        let (normalized, inner) = match &mut self.kind {
            NormKind::Identity => (x.clone(), InnerNormCache::Passthrough),
            NormKind::Bn(state) => {
                let (y, cache) = bn_forward(x, state, mode)?;
                (y, InnerNormCache::Bn(cache))
            }
            NormKind::Mn { epsilon, model, .. } => {
                let model = model.as_ref().ok_or_else(|| {
                    Error::Config("mixture normalization layer has no fitted model".into())
                })?;
                let (y, cache) = mn_forward_cached(x, model, *epsilon)?;
                (y, InnerNormCache::Mn(cache))
            }
            NormKind::Acn { table, eval_mode } => {
                let needs_ctx = mode == Mode::Train || *eval_mode == AcnEvalMode::PerContext;
                if needs_ctx {
                    let ctx = ctx.ok_or_else(|| {
                        Error::Config("context normalization needs context ids".into())
                    })?;
                    match mode {
                        Mode::Train => {
                            let (y, cache) = acn_forward(x, ctx, table)?;
                            (y, InnerNormCache::Acn(cache))
                        }
                        Mode::Eval => {
                            let y = per_context_inference(x, ctx, table)?;
                            (y, InnerNormCache::Passthrough)
                        }
                    }
                } else {
                    let y = crate::norm::acn_inference_aggregate(x, table)?;
                    (y, InnerNormCache::Passthrough)
                }
            }
            NormKind::AcnBase { net, eval_mode } => {
                let collectively = mode == Mode::Eval && *eval_mode == AcnEvalMode::Aggregate;
                if collectively {
                    let t = net.t();
                    let means: Vec<Vec<f64>> = (0..t).map(|r| net.mu_net.lookup(r)).collect();
                    let vars: Vec<Vec<f64>> = (0..t)
                        .map(|r| {
                            net.var_net
                                .lookup(r)
                                .iter()
                                .map(|z| crate::norm::softplus(*z))
                                .collect()
                        })
                        .collect();
                    let model = GmmModel::new(vec![1.0 / t as f64; t], means, vars)?;
                    let scale = vec![(t as f64).sqrt(); t];
                    let (y, _) =
                        crate::norm::mn::mixture_normalize(x, &model, &scale, net.epsilon)?;
                    (y, InnerNormCache::Passthrough)
                } else {
                    let ctx = ctx.ok_or_else(|| {
                        Error::Config("context normalization needs context ids".into())
                    })?;
                    let (y, cache) = net.forward(x, ctx)?;
                    (y, InnerNormCache::AcnBase(cache))
                }
            }
        };
        if let Some(affine) = &self.affine {
            let (n, c, l) = normalized.shape().ncl();
            let mut out = normalized.clone();
            for ni in 0..n {
                for ch in 0..c {
                    let start = (ni * c + ch) * l;
                    for v in &mut out.data_mut()[start..start + l] {
                        *v = *v * affine.gamma[ch] + affine.beta[ch];
                    }
                }
            }
            Ok((
                out,
                NormLayerCache {
                    inner,
                    pre_affine: Some(normalized),
                },
            ))
        } else {
            Ok((
                normalized,
                NormLayerCache {
                    inner,
                    pre_affine: None,
                },
            ))
        }
    }

    pub fn backward(
        &mut self,
        grad_out: &ActivationTensor,
        cache: &NormLayerCache,
    ) -> Result<ActivationTensor> {
        if self.force_identity {
            return Ok(grad_out.clone());
        }
        // Affine pair first: d gamma = sum g * xhat, d beta = sum g,
        // and the normalization sees g * gamma.
        let mut owned;
        let grad_norm: &ActivationTensor = if let Some(affine) = &mut self.affine {
            let pre = cache
                .pre_affine
                .as_ref()
                .ok_or_else(|| Error::Internal("affine cache missing".into()))?;
            let (n, c, l) = grad_out.shape().ncl();
            owned = ActivationTensor::zeros(grad_out.shape());
            for ni in 0..n {
                for ch in 0..c {
                    for li in 0..l {
                        let g = grad_out.at(ni, ch, li);
                        affine.grad_gamma[ch] += g * pre.at(ni, ch, li);
                        affine.grad_beta[ch] += g;
                        *owned.at_mut(ni, ch, li) = g * affine.gamma[ch];
                    }
                }
            }
            &owned
        } else {
            grad_out
        };
        match (&mut self.kind, &cache.inner) {
            (NormKind::Identity, InnerNormCache::Passthrough) => Ok(grad_norm.clone()),
            (NormKind::Bn(_), InnerNormCache::Bn(c)) => bn_backward(grad_norm, c),
            (NormKind::Mn { .. }, InnerNormCache::Mn(c)) => mn_backward(grad_norm, c),
            (NormKind::Acn { table, .. }, InnerNormCache::Acn(c)) => {
                let grads = acn_backward(grad_norm, c)?;
                table.accumulate(&grads)?;
                Ok(grads.grad_in)
            }
            (NormKind::AcnBase { net, .. }, InnerNormCache::AcnBase(c)) => {
                net.backward(grad_norm, c)
            }
            _ => Err(Error::Internal(
                "normalization backward fed a cache from a different kind".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::acn_inference_aggregate;
    use rand::Rng;

    fn random_tensor(seed: u64, n: usize, c: usize, l: usize) -> ActivationTensor {
        let mut rng = crate::rng::stream(seed, "nl-test", 0);
        ActivationTensor::new_ncl(
            n,
            c,
            l,
            (0..n * c * l).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    fn acn_layer(seed: u64, t: usize, c: usize, eval_mode: AcnEvalMode) -> NormLayer {
        let mut rng = crate::rng::stream(seed, "nl-table", 0);
        let mu = (0..t)
            .map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let s2 = (0..t)
            .map(|_| (0..c).map(|_| rng.gen_range(0.5..2.0)).collect())
            .collect();
        NormLayer {
            kind: NormKind::Acn {
                table: ContextParamTable::from_params(mu, s2, 1e-5).unwrap(),
                eval_mode,
            },
            affine: None,
            force_identity: false,
        }
    }

    #[test]
    fn forced_identity_passes_through_both_ways() {
        let mut layer = acn_layer(1, 2, 3, AcnEvalMode::PerContext);
        layer.force_identity = true;
        let x = random_tensor(2, 4, 3, 2);
        let ctx = ContextIds::new(vec![0, 1, 0, 1]);
        let (y, cache) = layer.forward(&x, Some(&ctx), Mode::Train).unwrap();
        assert_eq!(y.data(), x.data());
        let g = random_tensor(3, 4, 3, 2);
        let gin = layer.backward(&g, &cache).unwrap();
        assert_eq!(gin.data(), g.data());
    }

    #[test]
    fn aggregate_eval_matches_collective_inference() {
        let layer_table = match &acn_layer(5, 3, 2, AcnEvalMode::Aggregate).kind {
            NormKind::Acn { table, .. } => table.clone(),
            _ => unreachable!(),
        };
        let mut layer = acn_layer(5, 3, 2, AcnEvalMode::Aggregate);
        let x = random_tensor(6, 5, 2, 2);
        let ctx = ContextIds::new(vec![0, 1, 2, 0, 1]);
        // Aggregate mode ignores the labels at eval time.
        let (y, _) = layer.forward(&x, Some(&ctx), Mode::Eval).unwrap();
        let expect = acn_inference_aggregate(&x, &layer_table).unwrap();
        assert_eq!(y.data(), expect.data());
        // Train mode still uses the per-context transform.
        let (y_train, _) = layer.forward(&x, Some(&ctx), Mode::Train).unwrap();
        assert_ne!(y_train.data(), y.data());
    }

    #[test]
    fn affine_pair_gradients_match_finite_differences() {
        let t = 2;
        let c = 3;
        let make_layer = |gamma: &[f64], beta: &[f64]| -> NormLayer {
            let mut layer = acn_layer(7, t, c, AcnEvalMode::PerContext);
            let mut affine = AffinePair::new(c);
            affine.gamma.copy_from_slice(gamma);
            affine.beta.copy_from_slice(beta);
            layer.affine = Some(affine);
            layer
        };
        let gamma = [1.2, 0.8, -0.5];
        let beta = [0.1, -0.3, 0.7];
        let x = random_tensor(8, 4, c, 2);
        let ctx = ContextIds::new(vec![0, 1, 1, 0]);
        let coef = random_tensor(9, 4, c, 2);
        let loss = |gamma: &[f64], beta: &[f64]| -> f64 {
            let mut layer = make_layer(gamma, beta);
            let (y, _) = layer.forward(&x, Some(&ctx), Mode::Train).unwrap();
            y.data().iter().zip(coef.data()).map(|(a, b)| a * b).sum()
        };

        let mut layer = make_layer(&gamma, &beta);
        let (_, cache) = layer.forward(&x, Some(&ctx), Mode::Train).unwrap();
        let _ = layer.backward(&coef, &cache).unwrap();
        let affine = layer.affine.as_ref().unwrap();

        let h = 1e-6;
        for ch in 0..c {
            let mut gp = gamma;
            gp[ch] += h;
            let mut gm = gamma;
            gm[ch] -= h;
            let num = (loss(&gp, &beta) - loss(&gm, &beta)) / (2.0 * h);
            assert!(
                (num - affine.grad_gamma[ch]).abs() < 1e-6,
                "gamma[{ch}]: {num} vs {}",
                affine.grad_gamma[ch]
            );
            let mut bp = beta;
            bp[ch] += h;
            let mut bm = beta;
            bm[ch] -= h;
            let num = (loss(&gamma, &bp) - loss(&gamma, &bm)) / (2.0 * h);
            assert!(
                (num - affine.grad_beta[ch]).abs() < 1e-6,
                "beta[{ch}]: {num} vs {}",
                affine.grad_beta[ch]
            );
        }
    }

    #[test]
    fn mismatched_cache_kind_is_an_internal_error() {
        let mut bn_layer = NormLayer {
            kind: NormKind::Bn(BnState::new(2, 1e-5, 0.1)),
            affine: None,
            force_identity: false,
        };
        let mut acn = acn_layer(11, 2, 2, AcnEvalMode::PerContext);
        let x = random_tensor(12, 3, 2, 2);
        let ctx = ContextIds::new(vec![0, 1, 0]);
        let (_, acn_cache) = acn.forward(&x, Some(&ctx), Mode::Train).unwrap();
        let g = random_tensor(13, 3, 2, 2);
        assert!(matches!(
            bn_layer.backward(&g, &acn_cache),
            Err(Error::Internal(_))
        ));
    }
}
