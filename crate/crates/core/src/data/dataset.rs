//! Labeled datasets with per-sample context labels, context (re)assignment
//! strategies, and seeded batching.

use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::norm::ContextIds;
use crate::tensor::{ActivationTensor, Shape};
use rand::seq::SliceRandom;
use serde::Deserialize;
use std::collections::BTreeMap;

/// Features with class labels, context labels, and row provenance.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    /// `(M, C, H, W)` images or `(M, D, 1)` feature vectors.
    pub features: ActivationTensor,
    pub class_labels: Vec<usize>,
    pub context_labels: Vec<usize>,
    pub n_classes: usize,
    pub t_contexts: usize,
    /// Which source dataset each row came from (0 for a single source).
    pub origin: Vec<usize>,
    /// File path or generator seed, for report headers.
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(
        features: ActivationTensor,
        class_labels: Vec<usize>,
        n_classes: usize,
        provenance: String,
    ) -> Result<Self> {
        let m = features.n();
        if class_labels.len() != m {
            return Err(Error::Shape(format!(
                "{} class labels for {m} rows",
                class_labels.len()
            )));
        }
        if let Some(&bad) = class_labels.iter().find(|&&c| c >= n_classes) {
            return Err(Error::Domain(format!(
                "class label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Self {
            features,
            class_labels,
            context_labels: vec![0; m],
            n_classes,
            t_contexts: 1,
            origin: vec![0; m],
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.features.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-row flattened feature dimension.
    pub fn feature_dim(&self) -> usize {
        let (_, c, l) = self.features.shape().ncl();
        c * l
    }

    /// Concatenate two datasets with the same feature shape and class count;
    /// rows remember their origin (0 = first, 1 = second).
    pub fn merge(a: &LabeledDataset, b: &LabeledDataset) -> Result<LabeledDataset> {
        let (sa, sb) = (a.features.shape(), b.features.shape());
        let compatible = match (sa, sb) {
            (
                Shape::Nchw { c, h, w, .. },
                Shape::Nchw {
                    c: c2,
                    h: h2,
                    w: w2,
                    ..
                },
            ) => c == c2 && h == h2 && w == w2,
            (Shape::Ncl { c, l, .. }, Shape::Ncl { c: c2, l: l2, .. }) => c == c2 && l == l2,
            _ => false,
        };
        if !compatible || a.n_classes != b.n_classes {
            return Err(Error::Shape(
                "cannot merge datasets with different row shapes".into(),
            ));
        }
        let mut data = a.features.data().to_vec();
        data.extend_from_slice(b.features.data());
        let shape = match sa {
            Shape::Nchw { c, h, w, .. } => Shape::Nchw {
                n: a.len() + b.len(),
                c,
                h,
                w,
            },
            Shape::Ncl { c, l, .. } => Shape::Ncl {
                n: a.len() + b.len(),
                c,
                l,
            },
        };
        let mut class_labels = a.class_labels.clone();
        class_labels.extend_from_slice(&b.class_labels);
        let mut context_labels = a.context_labels.clone();
        context_labels.extend_from_slice(&b.context_labels);
        let mut origin = vec![0; a.len()];
        origin.extend(std::iter::repeat_n(1, b.len()));
        Ok(LabeledDataset {
            features: ActivationTensor::new(shape, data)?,
            class_labels,
            context_labels,
            n_classes: a.n_classes,
            t_contexts: a.t_contexts.max(b.t_contexts),
            origin,
            provenance: format!("{}+{}", a.provenance, b.provenance),
        })
    }

    /// Rows at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let (_, c, l) = self.features.shape().ncl();
        let row_len = c * l;
        let mut data = Vec::with_capacity(indices.len() * row_len);
        let mut class_labels = Vec::with_capacity(indices.len());
        let mut context_labels = Vec::with_capacity(indices.len());
        let mut origin = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Domain(format!("row {i} out of range")));
            }
            data.extend_from_slice(&self.features.data()[i * row_len..(i + 1) * row_len]);
            class_labels.push(self.class_labels[i]);
            context_labels.push(self.context_labels[i]);
            origin.push(self.origin[i]);
        }
        let shape = match self.features.shape() {
            Shape::Nchw { c, h, w, .. } => Shape::Nchw {
                n: indices.len(),
                c,
                h,
                w,
            },
            Shape::Ncl { c, l, .. } => Shape::Ncl {
                n: indices.len(),
                c,
                l,
            },
        };
        Ok(LabeledDataset {
            features: ActivationTensor::new(shape, data)?,
            class_labels,
            context_labels,
            n_classes: self.n_classes,
            t_contexts: self.t_contexts,
            origin,
            provenance: self.provenance.clone(),
        })
    }

    /// One row's features as a flat vector.
    pub fn feature_row(&self, i: usize) -> &[f64] {
        let d = self.feature_dim();
        &self.features.data()[i * d..(i + 1) * d]
    }
}

/// Class -> superclass mapping loaded from JSON:
/// `{"t": <count>, "map": {"<class>": <context>, ...}}`.
#[derive(Debug, Clone)]
pub struct SuperclassMap {
    pub t: usize,
    pub map: BTreeMap<usize, usize>,
}

#[derive(Deserialize)]
struct SuperclassMapJson {
    t: usize,
    map: BTreeMap<String, usize>,
}

impl SuperclassMap {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: SuperclassMapJson = serde_json::from_str(text)?;
        let mut map = BTreeMap::new();
        for (k, v) in doc.map {
            let class: usize = k.parse().map_err(|_| {
                Error::Format(format!("superclass map key '{k}' is not a class id"))
            })?;
            if v >= doc.t {
                return Err(Error::Format(format!(
                    "superclass id {v} out of range for t = {}",
                    doc.t
                )));
            }
            map.insert(class, v);
        }
        // Superclass ids must be dense in 0..t.
        let mut seen = vec![false; doc.t];
        for &v in map.values() {
            seen[v] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!(
                "superclass {missing} has no classes mapped to it"
            )));
        }
        Ok(Self { t: doc.t, map })
    }
}

/// How to derive per-sample context labels.
pub enum ContextStrategy<'a> {
    /// Class -> superclass lookup; every dataset class must be mapped.
    SuperclassMap(&'a SuperclassMap),
    /// Row origin after a merge: first dataset 0, second 1.
    DomainTag,
    /// Hard mixture assignment of each sample's feature vector.
    Gmm(&'a GmmModel),
}

/// Rewrite context labels (and T); features and class labels are untouched.
pub fn assign_contexts(
    dataset: &LabeledDataset,
    strategy: ContextStrategy,
) -> Result<LabeledDataset> {
    let mut out = dataset.clone();
    match strategy {
        ContextStrategy::SuperclassMap(map) => {
            let mut labels = Vec::with_capacity(dataset.len());
            for &class in &dataset.class_labels {
                let ctx = map.map.get(&class).ok_or_else(|| {
                    Error::Config(format!("class {class} is not in the superclass map"))
                })?;
                labels.push(*ctx);
            }
            out.context_labels = labels;
            out.t_contexts = map.t;
        }
        ContextStrategy::DomainTag => {
            out.context_labels = dataset.origin.clone();
            out.t_contexts = dataset.origin.iter().copied().max().unwrap_or(0) + 1;
        }
        ContextStrategy::Gmm(model) => {
            let labels = assign_contexts_by_features(dataset, model)?;
            out.context_labels = labels;
            out.t_contexts = model.k();
        }
    }
    Ok(out)
}

/// Hard-assign each row by its feature vector. The mixture either matches the
/// flattened feature dimension or, for image/tensor rows, the channel count
/// (rows are then summarized by their spatial-mean channel vector).
pub fn assign_contexts_by_features(
    dataset: &LabeledDataset,
    model: &GmmModel,
) -> Result<Vec<usize>> {
    let (_, c, l) = dataset.features.shape().ncl();
    let d = model.d();
    let mut labels = Vec::with_capacity(dataset.len());
    if d == c * l {
        for i in 0..dataset.len() {
            labels.push(model.assign_component(dataset.feature_row(i))?);
        }
    } else if d == c {
        let mut mean = vec![0.0; c];
        for i in 0..dataset.len() {
            for (ch, m) in mean.iter_mut().enumerate() {
                let row = dataset.features.row(i, ch);
                *m = row.iter().sum::<f64>() / l as f64;
            }
            labels.push(model.assign_component(&mean)?);
        }
    } else {
        return Err(Error::Shape(format!(
            "mixture dimension {d} matches neither features ({}) nor channels ({c})",
            c * l
        )));
    }
    Ok(labels)
}

/// Summarize net activations per sample: `(N, C, L)` rows collapse to their
/// spatial-mean channel vector.
pub fn spatial_mean_rows(acts: &ActivationTensor) -> Vec<f64> {
    let (n, c, l) = acts.shape().ncl();
    let mut out = vec![0.0; n * c];
    for ni in 0..n {
        for ch in 0..c {
            let row = acts.row(ni, ch);
            out[ni * c + ch] = row.iter().sum::<f64>() / l as f64;
        }
    }
    out
}

/// One mini-batch: features, class labels, context labels.
#[derive(Debug, Clone)]
pub struct DataBatch {
    pub x: ActivationTensor,
    pub labels: Vec<usize>,
    pub ctx: ContextIds,
    /// Dataset row indices backing this batch.
    pub rows: Vec<usize>,
}

/// Seeded batches over one epoch. With `shuffle` the row order is a seeded
/// permutation; the final partial batch is kept.
pub fn batch_iter(
    dataset: &LabeledDataset,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<DataBatch>> {
    if batch_size == 0 {
        return Err(Error::Domain("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        let mut rng = crate::rng::stream(seed, "shuffle", 0);
        order.shuffle(&mut rng);
    }
    let mut batches = Vec::with_capacity(dataset.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let sub = dataset.subset(chunk)?;
        batches.push(DataBatch {
            x: sub.features,
            labels: sub.class_labels,
            ctx: ContextIds::new(sub.context_labels),
            rows: chunk.to_vec(),
        });
    }
    Ok(batches)
}
