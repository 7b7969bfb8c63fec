//! Finite-difference verification of the hand-written gradients: central
//! differences on the training loss versus the analytic backward pass, over
//! any selection of parameters.

use crate::error::{Error, Result};
use crate::net::{loss, Batch, Mode, Net};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    /// Quadratic in the logits; finite differences are exact to roundoff.
    SumSquares,
}

/// Which parameter blocks to check.
#[derive(Debug, Clone)]
pub enum ParamSelector {
    All,
    /// Blocks whose name contains the pattern (e.g. "norm", "layer2.dense.w").
    Contains(String),
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Train-mode loss at the given flat parameters; BN running-average updates
/// happen on a clone and are discarded.
fn loss_at(net: &Net, params: &[f64], batch: &Batch, loss_kind: LossKind) -> Result<f64> {
    let mut net = net.clone();
    net.set_params_flat(params)?;
    let (logits, _) = net.forward(&batch.x, batch.ctx.as_ref(), Mode::Train)?;
    let (n, classes, _) = logits.shape().ncl();
    match loss_kind {
        LossKind::SoftmaxCrossEntropy => {
            let (l, _) = loss::softmax_cross_entropy(logits.data(), n, classes, &batch.labels)?;
            Ok(l)
        }
        LossKind::SumSquares => {
            let targets = batch
                .targets
                .as_ref()
                .ok_or_else(|| Error::Config("sum-squares check needs targets".into()))?;
            let (l, _) = loss::sum_squares(logits.data(), targets)?;
            Ok(l)
        }
    }
}

/// Analytic flat gradient of the training loss.
pub fn analytic_gradients(net: &Net, batch: &Batch, loss_kind: LossKind) -> Result<Vec<f64>> {
    let mut net = net.clone();
    net.zero_grads();
    let (logits, caches) = net.forward(&batch.x, batch.ctx.as_ref(), Mode::Train)?;
    let (n, classes, _) = logits.shape().ncl();
    let grad = match loss_kind {
        LossKind::SoftmaxCrossEntropy => {
            loss::softmax_cross_entropy(logits.data(), n, classes, &batch.labels)?.1
        }
        LossKind::SumSquares => {
            let targets = batch
                .targets
                .as_ref()
                .ok_or_else(|| Error::Config("sum-squares check needs targets".into()))?;
            loss::sum_squares(logits.data(), targets)?.1
        }
    };
    let grad_logits = crate::tensor::ActivationTensor::new(logits.shape(), grad)?;
    net.backward(&grad_logits, &caches)?;
    Ok(net.grads_flat())
}

/// Relative error with an absolute floor so parameters whose true gradient
/// sits at finite-difference noise level do not dominate.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Flat indices selected by the pattern, with their block names.
fn selected_indices(net: &Net, selector: &ParamSelector) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    let mut offset = 0;
    for block in net.param_blocks() {
        let keep = match selector {
            ParamSelector::All => true,
            ParamSelector::Contains(pat) => block.name.contains(pat.as_str()),
        };
        if keep {
            for i in 0..block.len {
                out.push((offset + i, format!("{}[{}]", block.name, i)));
            }
        }
        offset += block.len;
    }
    out
}

/// Compare central differences `(f(p+h) - f(p-h)) / 2h` against the analytic
/// gradient over the selected parameters; returns the worst relative error.
pub fn finite_diff_check(
    net: &Net,
    batch: &Batch,
    selector: &ParamSelector,
    h: f64,
    loss_kind: LossKind,
) -> Result<FdReport> {
    let analytic = analytic_gradients(net, batch, loss_kind)?;
    let params = net.params_flat();
    let selected = selected_indices(net, selector);
    if selected.is_empty() {
        return Err(Error::Config("parameter selector matched nothing".into()));
    }
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    let mut scratch = params.clone();
    for (idx, name) in selected {
        scratch[idx] = params[idx] + h;
        let fp = loss_at(net, &scratch, batch, loss_kind)?;
        scratch[idx] = params[idx] - h;
        let fm = loss_at(net, &scratch, batch, loss_kind)?;
        scratch[idx] = params[idx];
        let numeric = (fp - fm) / (2.0 * h);
        let err = rel_err(numeric, analytic[idx]);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_param = name;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Random net + batch for gradient checking, re-drawn until every ReLU
/// pre-activation is at least 1e-3 from zero: a central difference with
/// h = 1e-5 then provably stays on one side of every kink.
pub fn kink_free_fixture(
    preset: crate::net::PresetName,
    choice: crate::net::NormChoice,
    base_seed: u64,
) -> Result<(Net, Batch)> {
    use crate::net::{build_preset, InputShape, NormChoice, PresetName, PresetSpec};
    use crate::norm::ContextIds;
    use rand::Rng;

    for attempt in 0..50 {
        let seed = base_seed.wrapping_add(1000 * attempt);
        let (spec, input, batch_n) = match preset {
            PresetName::Convnet4 => (
                PresetSpec {
                    name: preset,
                    widths: vec![3, 4, 4, 5],
                    norm_choice: choice,
                    norm_position: 3,
                    affine: false,
                    force_identity: false,
                    epsilon: 1e-5,
                },
                InputShape::Image { c: 1, h: 8, w: 8 },
                2usize,
            ),
            _ => (
                PresetSpec {
                    name: preset,
                    widths: vec![6],
                    norm_choice: choice,
                    norm_position: 1,
                    affine: false,
                    force_identity: false,
                    epsilon: 1e-5,
                },
                InputShape::Features { d: 5 },
                6usize,
            ),
        };
        let t = 3;
        let classes = 3;
        let mut net = build_preset(&spec, input, classes, t, seed)?;
        if choice == NormChoice::Mn {
            let mut rng = crate::rng::stream(seed, "gc-mn-model", 0);
            let (_, channels) = net.mn_slots()[0];
            let means = (0..2)
                .map(|_| (0..channels).map(|_| rng.gen_range(-0.5..0.5)).collect())
                .collect();
            let vars = (0..2)
                .map(|_| (0..channels).map(|_| rng.gen_range(0.5..1.5)).collect())
                .collect();
            net.attach_mn_model(crate::gmm::GmmModel::new(vec![0.5, 0.5], means, vars)?)?;
        }
        let mut rng = crate::rng::stream(seed, "gc-batch", 0);
        let elems = match input {
            InputShape::Image { c, h, w } => batch_n * c * h * w,
            InputShape::Features { d } => batch_n * d,
        };
        let data: Vec<f64> = (0..elems).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = match input {
            InputShape::Image { c, h, w } => {
                crate::tensor::ActivationTensor::new_nchw(batch_n, c, h, w, data)?
            }
            InputShape::Features { d } => {
                crate::tensor::ActivationTensor::new_ncl(batch_n, d, 1, data)?
            }
        };
        let labels: Vec<usize> = (0..batch_n).map(|i| i % classes).collect();
        let ctx = net
            .requires_context()
            .then(|| ContextIds::new((0..batch_n).map(|i| i % t).collect()));
        let batch = Batch {
            x,
            labels,
            ctx,
            targets: None,
        };
        if relu_margin(&net, &batch)? > 1e-3 {
            return Ok((net, batch));
        }
    }
    Err(Error::Numerical(
        "could not draw a gradient-check fixture clear of ReLU kinks".into(),
    ))
}

/// Smallest absolute ReLU pre-activation seen in a train-mode forward pass.
/// Central differences are meaningless when the perturbation crosses a ReLU
/// kink, so check fixtures re-draw until this margin is comfortable.
pub fn relu_margin(net: &Net, batch: &Batch) -> Result<f64> {
    let mut net = net.clone();
    let mut margin = f64::INFINITY;
    let mut cur = batch.x.clone();
    let ctx = batch.ctx.as_ref();
    for layer in &mut net.layers {
        if matches!(layer.kind, crate::net::LayerKind::Relu) {
            for v in cur.data() {
                margin = margin.min(v.abs());
            }
        }
        cur = match &mut layer.kind {
            crate::net::LayerKind::Dense(d) => d.forward(&cur)?,
            crate::net::LayerKind::Conv3x3(c) => c.forward(&cur)?,
            crate::net::LayerKind::Relu => crate::net::layers::relu_forward(&cur),
            crate::net::LayerKind::MeanPool2 => crate::net::layers::meanpool2_forward(&cur)?,
            crate::net::LayerKind::Flatten => crate::net::layers::flatten_forward(&cur),
            crate::net::LayerKind::Norm(n) => n.forward(&cur, ctx, Mode::Train)?.0,
        };
    }
    Ok(margin)
}
