//! Network presets with a swappable normalization slot.
//!
//! `convnet4` mirrors the four-conv-block comparison topology: each block is
//! conv -> norm -> relu with 2x2 mean pooling between blocks, and the slot at
//! `norm_position` carries the chosen transform while the remaining slots
//! stay batch normalization. `mlp2` is dense -> norm -> relu -> dense, and
//! `domain_clf` normalizes the raw features before a two-layer classifier.

use crate::error::{Error, Result};
use crate::net::layers::{ConvLayer, DenseLayer};
use crate::net::norm_layer::{AcnEvalMode, AffinePair, NormKind, NormLayer};
use crate::net::{Layer, LayerKind, Net};
use crate::norm::{AcnBaseNet, BnState, ContextParamTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetName {
    Convnet4,
    Mlp2,
    DomainClf,
}

impl std::str::FromStr for PresetName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convnet4" => Ok(Self::Convnet4),
            "mlp2" => Ok(Self::Mlp2),
            "domain_clf" => Ok(Self::DomainClf),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormChoice {
    Bn,
    Mn,
    Acn,
    AcnBase,
    Identity,
}

impl std::str::FromStr for NormChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bn" => Ok(Self::Bn),
            "mn" => Ok(Self::Mn),
            "acn" => Ok(Self::Acn),
            "acn_base" => Ok(Self::AcnBase),
            "identity" => Ok(Self::Identity),
            other => Err(Error::Config(format!(
                "unknown normalization choice '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for NormChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Bn => "bn",
            Self::Mn => "mn",
            Self::Acn => "acn",
            Self::AcnBase => "acn_base",
            Self::Identity => "identity",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InputShape {
    Image { c: usize, h: usize, w: usize },
    Features { d: usize },
}

#[derive(Debug, Clone)]
pub struct PresetSpec {
    pub name: PresetName,
    /// Hidden widths: 4 conv channel counts for convnet4, one hidden width
    /// for mlp2/domain_clf.
    pub widths: Vec<usize>,
    pub norm_choice: NormChoice,
    /// 1-based slot index carrying `norm_choice`; other slots get BN.
    pub norm_position: usize,
    /// Learn a per-channel scale/shift pair after each normalization.
    pub affine: bool,
    /// Force every normalization layer to pass activations through unchanged.
    pub force_identity: bool,
    pub epsilon: f64,
}

const BN_MOMENTUM: f64 = 0.1;

fn norm_layer(
    choice: NormChoice,
    channels: usize,
    t_contexts: usize,
    spec: &PresetSpec,
) -> Result<NormLayer> {
    if matches!(choice, NormChoice::Acn | NormChoice::AcnBase) && t_contexts == 0 {
        return Err(Error::Config(
            "context normalization requires at least one context".into(),
        ));
    }
    let kind = match choice {
        NormChoice::Identity => NormKind::Identity,
        NormChoice::Bn => NormKind::Bn(BnState::new(channels, spec.epsilon, BN_MOMENTUM)),
        NormChoice::Mn => NormKind::Mn {
            channels,
            epsilon: spec.epsilon,
            model: None,
        },
        NormChoice::Acn => NormKind::Acn {
            table: ContextParamTable::new(t_contexts, channels, spec.epsilon),
            eval_mode: AcnEvalMode::PerContext,
        },
        NormChoice::AcnBase => NormKind::AcnBase {
            net: AcnBaseNet::new(t_contexts, channels, spec.epsilon),
            eval_mode: AcnEvalMode::PerContext,
        },
    };
    Ok(NormLayer {
        kind,
        affine: if spec.affine {
            Some(AffinePair::new(channels))
        } else {
            None
        },
        force_identity: spec.force_identity,
    })
}

/// Build a preset network. Dense/conv weights draw from per-layer seed
/// streams, so swapping the normalization choice cannot perturb them.
pub fn build_preset(
    spec: &PresetSpec,
    input: InputShape,
    n_classes: usize,
    t_contexts: usize,
    seed: u64,
) -> Result<Net> {
    if n_classes < 2 {
        return Err(Error::Config("need at least two classes".into()));
    }
    let slot_count = match spec.name {
        PresetName::Convnet4 => 4,
        PresetName::Mlp2 | PresetName::DomainClf => 1,
    };
    if spec.norm_position == 0 || spec.norm_position > slot_count {
        return Err(Error::Config(format!(
            "norm position {} out of range for a {slot_count}-slot preset",
            spec.norm_position
        )));
    }
    let slot_choice = |slot: usize| -> NormChoice {
        if slot == spec.norm_position {
            spec.norm_choice
        } else {
            NormChoice::Bn
        }
    };

    let mut net = Net::default();
    fn push(net: &mut Net, kind: LayerKind, tag: &str) {
        let idx = net.layers.len();
        net.layers.push(Layer {
            name: format!("layer{idx}.{tag}"),
            kind,
        });
    }

    match spec.name {
        PresetName::Convnet4 => {
            let (c_in, mut h, mut w) = match input {
                InputShape::Image { c, h, w } => (c, h, w),
                InputShape::Features { .. } => {
                    return Err(Error::Config("convnet4 requires image input".into()))
                }
            };
            if spec.widths.len() != 4 {
                return Err(Error::Config(format!(
                    "convnet4 needs 4 channel widths, got {}",
                    spec.widths.len()
                )));
            }
            let mut prev_c = c_in;
            for (block, &width) in spec.widths.iter().enumerate() {
                let mut rng = crate::rng::stream(seed, "init-conv", block as u64);
                push(
                    &mut net,
                    LayerKind::Conv3x3(ConvLayer::new_seeded(prev_c, width, &mut rng)),
                    "conv",
                );
                net.norm_slots.push(net.layers.len());
                push(
                    &mut net,
                    LayerKind::Norm(norm_layer(slot_choice(block + 1), width, t_contexts, spec)?),
                    "norm",
                );
                push(&mut net, LayerKind::Relu, "relu");
                if block < 3 {
                    if h / 2 == 0 || w / 2 == 0 {
                        return Err(Error::Config(format!(
                            "input {h}x{w} too small for convnet4 pooling"
                        )));
                    }
                    push(&mut net, LayerKind::MeanPool2, "pool");
                    h /= 2;
                    w /= 2;
                }
                prev_c = width;
            }
            push(&mut net, LayerKind::Flatten, "flatten");
            let feat = prev_c * h * w;
            let mut rng = crate::rng::stream(seed, "init-head", 0);
            push(
                &mut net,
                LayerKind::Dense(DenseLayer::new_seeded(feat, n_classes, &mut rng)),
                "dense",
            );
        }
        PresetName::Mlp2 => {
            if spec.widths.len() != 1 {
                return Err(Error::Config(format!(
                    "mlp2 needs one hidden width, got {}",
                    spec.widths.len()
                )));
            }
            let hidden = spec.widths[0];
            let d = match input {
                InputShape::Features { d } => d,
                InputShape::Image { c, h, w } => {
                    push(&mut net, LayerKind::Flatten, "flatten");
                    c * h * w
                }
            };
            let mut rng = crate::rng::stream(seed, "init-dense", 0);
            push(
                &mut net,
                LayerKind::Dense(DenseLayer::new_seeded(d, hidden, &mut rng)),
                "dense",
            );
            net.norm_slots.push(net.layers.len());
            push(
                &mut net,
                LayerKind::Norm(norm_layer(slot_choice(1), hidden, t_contexts, spec)?),
                "norm",
            );
            push(&mut net, LayerKind::Relu, "relu");
            let mut rng = crate::rng::stream(seed, "init-dense", 1);
            push(
                &mut net,
                LayerKind::Dense(DenseLayer::new_seeded(hidden, n_classes, &mut rng)),
                "dense",
            );
        }
        PresetName::DomainClf => {
            if spec.widths.len() != 1 {
                return Err(Error::Config(format!(
                    "domain_clf needs one hidden width, got {}",
                    spec.widths.len()
                )));
            }
            let hidden = spec.widths[0];
            let d = match input {
                InputShape::Features { d } => d,
                InputShape::Image { c, h, w } => {
                    push(&mut net, LayerKind::Flatten, "flatten");
                    c * h * w
                }
            };
            net.norm_slots.push(net.layers.len());
            push(
                &mut net,
                LayerKind::Norm(norm_layer(slot_choice(1), d, t_contexts, spec)?),
                "norm",
            );
            let mut rng = crate::rng::stream(seed, "init-dense", 0);
            push(
                &mut net,
                LayerKind::Dense(DenseLayer::new_seeded(d, hidden, &mut rng)),
                "dense",
            );
            push(&mut net, LayerKind::Relu, "relu");
            let mut rng = crate::rng::stream(seed, "init-dense", 1);
            push(
                &mut net,
                LayerKind::Dense(DenseLayer::new_seeded(hidden, n_classes, &mut rng)),
                "dense",
            );
        }
    }
    Ok(net)
}
