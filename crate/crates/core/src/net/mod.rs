//! Minimal trainable network stack: an ordered list of layers with
//! hand-written backward passes, flat parameter/gradient views for the
//! optimizer, presets, checkpoints, and a finite-difference gradient checker.

pub mod adamw;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod norm_layer;
pub mod presets;

pub use adamw::{adamw_step, AdamWHyper, AdamWState};
pub use checkpoint::{
    load_checkpoint, read_checkpoint_file, save_checkpoint, write_checkpoint_file, Checkpoint,
};
pub use gradcheck::{
    finite_diff_check, kink_free_fixture, relu_margin, FdReport, LossKind, ParamSelector,
};
pub use loss::{softmax_cross_entropy, sum_squares};
pub use norm_layer::{AcnEvalMode, AffinePair, NormKind, NormLayer, NormLayerCache};
pub use presets::{build_preset, InputShape, NormChoice, PresetName, PresetSpec};

use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::norm::ContextIds;
pub use crate::norm::Mode;
use crate::tensor::{ActivationTensor, Shape};
use layers::{ConvLayer, DenseLayer};

/// One training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: ActivationTensor,
    pub labels: Vec<usize>,
    pub ctx: Option<ContextIds>,
    /// Regression targets for the sum-squares loss (gradient checks only).
    pub targets: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub enum LayerKind {
    Dense(DenseLayer),
    Conv3x3(ConvLayer),
    Relu,
    MeanPool2,
    Flatten,
    Norm(NormLayer),
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Input(ActivationTensor),
    Shape(Shape),
    Norm(NormLayerCache),
    None,
}

/// Caches from one training-mode forward pass, one entry per layer.
pub struct ForwardCaches(Vec<LayerCache>);

/// A parameter block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub len: usize,
    /// Logical dimensions (product equals `len`).
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Net {
    pub layers: Vec<Layer>,
    /// Layer indices of the normalization slots, in network order.
    pub norm_slots: Vec<usize>,
}

impl Net {
    pub fn requires_context(&self) -> bool {
        self.layers.iter().any(|layer| match &layer.kind {
            LayerKind::Norm(n) => n.consumes_context(),
            _ => false,
        })
    }

    fn check_context(&self, ctx: Option<&ContextIds>) -> Result<()> {
        match (self.requires_context(), ctx) {
            (true, None) => Err(Error::Config(
                "network contains a context-consuming layer; context ids are required".into(),
            )),
            (false, Some(_)) => Err(Error::Config(
                "context ids provided but no layer consumes them".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Sequential layer application. Caches are retained in train mode only.
    pub fn forward(
        &mut self,
        x: &ActivationTensor,
        ctx: Option<&ContextIds>,
        mode: Mode,
    ) -> Result<(ActivationTensor, ForwardCaches)> {
        self.check_context(ctx)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            let (next, cache) = match &mut layer.kind {
                LayerKind::Dense(dense) => {
                    let y = dense.forward(&cur)?;
                    (y, LayerCache::Input(cur))
                }
                LayerKind::Conv3x3(conv) => {
                    let y = conv.forward(&cur)?;
                    (y, LayerCache::Input(cur))
                }
                LayerKind::Relu => {
                    let y = layers::relu_forward(&cur);
                    (y, LayerCache::Input(cur))
                }
                LayerKind::MeanPool2 => {
                    let y = layers::meanpool2_forward(&cur)?;
                    (y, LayerCache::Shape(cur.shape()))
                }
                LayerKind::Flatten => {
                    let y = layers::flatten_forward(&cur);
                    (y, LayerCache::Shape(cur.shape()))
                }
                LayerKind::Norm(norm) => {
                    let (y, cache) = norm.forward(&cur, ctx, mode)?;
                    (y, LayerCache::Norm(cache))
                }
            };
            caches.push(if mode == Mode::Train {
                cache
            } else {
                LayerCache::None
            });
            cur = next;
        }
        if mode != Mode::Train {
            caches.clear();
        }
        Ok((cur, ForwardCaches(caches)))
    }

    /// Reverse traversal, accumulating into every parameter gradient buffer
    /// (dense/conv weights, context tables, embeddings, affine pairs).
    pub fn backward(
        &mut self,
        grad_logits: &ActivationTensor,
        caches: &ForwardCaches,
    ) -> Result<()> {
        if caches.0.len() != self.layers.len() {
            return Err(Error::Internal(format!(
                "{} caches for {} layers (was forward run in train mode?)",
                caches.0.len(),
                self.layers.len()
            )));
        }
        let mut grad = grad_logits.clone();
        for (layer, cache) in self.layers.iter_mut().zip(caches.0.iter()).rev() {
            grad = match (&mut layer.kind, cache) {
                (LayerKind::Dense(dense), LayerCache::Input(input)) => {
                    dense.backward(&grad, input)?
                }
                (LayerKind::Conv3x3(conv), LayerCache::Input(input)) => {
                    conv.backward(&grad, input)?
                }
                (LayerKind::Relu, LayerCache::Input(input)) => layers::relu_backward(&grad, input)?,
                (LayerKind::MeanPool2, LayerCache::Shape(shape)) => {
                    layers::meanpool2_backward(&grad, *shape)?
                }
                (LayerKind::Flatten, LayerCache::Shape(shape)) => {
                    layers::flatten_backward(&grad, *shape)?
                }
                (LayerKind::Norm(norm), LayerCache::Norm(cache)) => norm.backward(&grad, cache)?,
                _ => {
                    return Err(Error::Internal(format!(
                        "cache kind does not match layer {}",
                        layer.name
                    )))
                }
            };
        }
        Ok(())
    }

    /// Activation entering `layer_idx` (for EM taps). Only the layers that
    /// actually execute need context ids; a context-consuming layer at or
    /// after the tap is fine without them.
    pub fn activation_at(
        &mut self,
        x: &ActivationTensor,
        ctx: Option<&ContextIds>,
        layer_idx: usize,
        mode: Mode,
    ) -> Result<ActivationTensor> {
        if layer_idx > self.layers.len() {
            return Err(Error::Config(format!(
                "layer index {layer_idx} out of range"
            )));
        }
        let mut cur = x.clone();
        for layer in self.layers.iter_mut().take(layer_idx) {
            cur = match &mut layer.kind {
                LayerKind::Dense(dense) => dense.forward(&cur)?,
                LayerKind::Conv3x3(conv) => conv.forward(&cur)?,
                LayerKind::Relu => layers::relu_forward(&cur),
                LayerKind::MeanPool2 => layers::meanpool2_forward(&cur)?,
                LayerKind::Flatten => layers::flatten_forward(&cur),
                LayerKind::Norm(norm) => norm.forward(&cur, ctx, mode)?.0,
            };
        }
        Ok(cur)
    }

    /// Mixture-normalization slots as `(layer index, channel count)`.
    pub fn mn_slots(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, layer)| match &layer.kind {
                LayerKind::Norm(NormLayer {
                    kind: NormKind::Mn { channels, .. },
                    ..
                }) => Some((i, *channels)),
                _ => None,
            })
            .collect()
    }

    /// Attach a fitted mixture to the single MN slot.
    pub fn attach_mn_model(&mut self, model: GmmModel) -> Result<()> {
        let slots = self.mn_slots();
        if slots.len() != 1 {
            return Err(Error::Config(format!(
                "expected exactly one mixture-normalization slot, found {}",
                slots.len()
            )));
        }
        let (idx, channels) = slots[0];
        if model.d() != channels {
            return Err(Error::Config(format!(
                "fitted mixture dimension {} does not match slot channels {channels}",
                model.d()
            )));
        }
        if let LayerKind::Norm(NormLayer {
            kind: NormKind::Mn { model: slot, .. },
            ..
        }) = &mut self.layers[idx].kind
        {
            *slot = Some(model);
        }
        Ok(())
    }

    /// Set the evaluation mode of every context-table layer.
    pub fn set_acn_eval_mode(&mut self, mode: AcnEvalMode) {
        for layer in &mut self.layers {
            match &mut layer.kind {
                LayerKind::Norm(NormLayer {
                    kind: NormKind::Acn { eval_mode, .. },
                    ..
                })
                | LayerKind::Norm(NormLayer {
                    kind: NormKind::AcnBase { eval_mode, .. },
                    ..
                }) => {
                    *eval_mode = mode;
                }
                _ => {}
            }
        }
    }

    /// Parameter blocks in a fixed traversal order.
    pub fn param_blocks(&self) -> Vec<ParamBlock> {
        let mut blocks = Vec::new();
        for layer in &self.layers {
            let mut push = |suffix: &str, shape: Vec<usize>| {
                blocks.push(ParamBlock {
                    name: format!("{}.{}", layer.name, suffix),
                    len: shape.iter().product(),
                    shape,
                });
            };
            match &layer.kind {
                LayerKind::Dense(d) => {
                    push("w", vec![d.out_dim, d.in_dim]);
                    push("b", vec![d.out_dim]);
                }
                LayerKind::Conv3x3(c) => {
                    push("w", vec![c.c_out, c.c_in, 3, 3]);
                    push("b", vec![c.c_out]);
                }
                LayerKind::Norm(norm) => {
                    match &norm.kind {
                        NormKind::Acn { table, .. } => {
                            push("mu", vec![table.t(), table.channels()]);
                            push("s", vec![table.t(), table.channels()]);
                        }
                        NormKind::AcnBase { net, .. } => {
                            push("w_mu", vec![net.t(), net.channels()]);
                            push("b_mu", vec![net.channels()]);
                            push("w_var", vec![net.t(), net.channels()]);
                            push("b_var", vec![net.channels()]);
                        }
                        _ => {}
                    }
                    if let Some(affine) = &norm.affine {
                        push("gamma", vec![affine.gamma.len()]);
                        push("beta", vec![affine.beta.len()]);
                    }
                }
                _ => {}
            }
        }
        blocks
    }

    pub fn param_count(&self) -> usize {
        self.param_blocks().iter().map(|b| b.len).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            match &layer.kind {
                LayerKind::Dense(d) => {
                    out.extend_from_slice(&d.w);
                    out.extend_from_slice(&d.b);
                }
                LayerKind::Conv3x3(c) => {
                    out.extend_from_slice(&c.w);
                    out.extend_from_slice(&c.b);
                }
                LayerKind::Norm(norm) => {
                    match &norm.kind {
                        NormKind::Acn { table, .. } => out.extend(table.params()),
                        NormKind::AcnBase { net, .. } => {
                            out.extend_from_slice(&net.mu_net.w);
                            out.extend_from_slice(&net.mu_net.b);
                            out.extend_from_slice(&net.var_net.w);
                            out.extend_from_slice(&net.var_net.b);
                        }
                        _ => {}
                    }
                    if let Some(affine) = &norm.affine {
                        out.extend_from_slice(&affine.gamma);
                        out.extend_from_slice(&affine.beta);
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn grads_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            match &layer.kind {
                LayerKind::Dense(d) => {
                    out.extend_from_slice(&d.grad_w);
                    out.extend_from_slice(&d.grad_b);
                }
                LayerKind::Conv3x3(c) => {
                    out.extend_from_slice(&c.grad_w);
                    out.extend_from_slice(&c.grad_b);
                }
                LayerKind::Norm(norm) => {
                    match &norm.kind {
                        NormKind::Acn { table, .. } => out.extend(table.grads()),
                        NormKind::AcnBase { net, .. } => {
                            out.extend_from_slice(&net.grad_w_mu);
                            out.extend_from_slice(&net.grad_b_mu);
                            out.extend_from_slice(&net.grad_w_var);
                            out.extend_from_slice(&net.grad_b_var);
                        }
                        _ => {}
                    }
                    if let Some(affine) = &norm.affine {
                        out.extend_from_slice(&affine.grad_gamma);
                        out.extend_from_slice(&affine.grad_beta);
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Internal(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut offset = 0;
        let mut take = |len: usize| {
            let s = &values[offset..offset + len];
            offset += len;
            s
        };
        for layer in &mut self.layers {
            match &mut layer.kind {
                LayerKind::Dense(d) => {
                    let len = d.w.len();
                    d.w.copy_from_slice(take(len));
                    let len = d.b.len();
                    d.b.copy_from_slice(take(len));
                }
                LayerKind::Conv3x3(c) => {
                    let len = c.w.len();
                    c.w.copy_from_slice(take(len));
                    let len = c.b.len();
                    c.b.copy_from_slice(take(len));
                }
                LayerKind::Norm(norm) => {
                    match &mut norm.kind {
                        NormKind::Acn { table, .. } => {
                            let len = table.param_count();
                            table.set_params(take(len))?;
                        }
                        NormKind::AcnBase { net, .. } => {
                            let len = net.mu_net.w.len();
                            net.mu_net.w.copy_from_slice(take(len));
                            let len = net.mu_net.b.len();
                            net.mu_net.b.copy_from_slice(take(len));
                            let len = net.var_net.w.len();
                            net.var_net.w.copy_from_slice(take(len));
                            let len = net.var_net.b.len();
                            net.var_net.b.copy_from_slice(take(len));
                        }
                        _ => {}
                    }
                    if let Some(affine) = &mut norm.affine {
                        let len = affine.gamma.len();
                        affine.gamma.copy_from_slice(take(len));
                        let len = affine.beta.len();
                        affine.beta.copy_from_slice(take(len));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            match &mut layer.kind {
                LayerKind::Dense(d) => {
                    d.grad_w.iter_mut().for_each(|g| *g = 0.0);
                    d.grad_b.iter_mut().for_each(|g| *g = 0.0);
                }
                LayerKind::Conv3x3(c) => {
                    c.grad_w.iter_mut().for_each(|g| *g = 0.0);
                    c.grad_b.iter_mut().for_each(|g| *g = 0.0);
                }
                LayerKind::Norm(norm) => {
                    match &mut norm.kind {
                        NormKind::Acn { table, .. } => table.zero_grads(),
                        NormKind::AcnBase { net, .. } => net.zero_grads(),
                        _ => {}
                    }
                    if let Some(affine) = &mut norm.affine {
                        affine.grad_gamma.iter_mut().for_each(|g| *g = 0.0);
                        affine.grad_beta.iter_mut().for_each(|g| *g = 0.0);
                    }
                }
                _ => {}
            }
        }
    }
}
