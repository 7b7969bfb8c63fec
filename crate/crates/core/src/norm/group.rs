//! The grouped transform shared by all normalization variants: within each
//! group of `(n, l)` positions, subtract the group mean and divide by the
//! square root of the group second moment plus epsilon, independently per
//! channel.

use crate::error::{Error, Result};
use crate::tensor::ActivationTensor;

/// A partition of the `(n, l)` positions of a tensor, applied identically to
/// every channel. `labels[n * l + li]` is the group id of position `(n, li)`.
///
/// The classic variants are groupings of this transform: one group spanning
/// everything is the batch partition, one group per sample is the instance
/// partition, and arbitrary labels cover grouped partitions. Layer-wise
/// normalization (per sample across channels) is the per-sample partition
/// applied to the `(N, 1, C*L)` view of the same row-major data.
#[derive(Debug, Clone)]
pub struct Groups {
    labels: Vec<usize>,
    n_groups: usize,
}

impl Groups {
    /// One group spanning every position (the batch-norm partition).
    pub fn single(n: usize, l: usize) -> Self {
        Self {
            labels: vec![0; n * l],
            n_groups: 1,
        }
    }

    /// One group per sample (the instance-norm partition).
    pub fn per_sample(n: usize, l: usize) -> Self {
        let mut labels = Vec::with_capacity(n * l);
        for ni in 0..n {
            labels.extend(std::iter::repeat_n(ni, l));
        }
        Self {
            labels,
            n_groups: n,
        }
    }

    /// Arbitrary labels; ids must be dense in `0..n_groups` and every group
    /// non-empty.
    pub fn from_labels(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Domain("empty group labeling".into()));
        }
        let n_groups = labels.iter().copied().max().unwrap() + 1;
        let mut seen = vec![false; n_groups];
        for &g in &labels {
            seen[g] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Domain(format!("group {missing} is empty")));
        }
        Ok(Self { labels, n_groups })
    }

    /// Explicit index sets; they must be disjoint, non-empty, and cover
    /// `0..positions`.
    pub fn from_sets(sets: &[Vec<usize>], positions: usize) -> Result<Self> {
        let mut labels = vec![usize::MAX; positions];
        for (g, set) in sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Domain(format!("group {g} is empty")));
            }
            for &i in set {
                if i >= positions {
                    return Err(Error::Domain(format!(
                        "position {i} out of range (have {positions})"
                    )));
                }
                if labels[i] != usize::MAX {
                    return Err(Error::Domain(format!("position {i} assigned twice")));
                }
                labels[i] = g;
            }
        }
        if labels.iter().any(|&g| g == usize::MAX) {
            return Err(Error::Domain("groups do not cover all positions".into()));
        }
        Ok(Self {
            labels,
            n_groups: sets.len(),
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }
}

/// Within each group `B`: `v_i = x_i - E_B(x)`, `xhat_i = v_i /
/// sqrt(E_B(v^2) + eps)`, per channel.
pub fn general_transform(
    x: &ActivationTensor,
    groups: &Groups,
    epsilon: f64,
) -> Result<ActivationTensor> {
    let (n, c, l) = x.shape().ncl();
    if groups.labels.len() != n * l {
        return Err(Error::Shape(format!(
            "group labeling covers {} positions, tensor has {}",
            groups.labels.len(),
            n * l
        )));
    }
    let g = groups.n_groups;
    let mut counts = vec![0usize; g];
    for &gi in &groups.labels {
        counts[gi] += 1;
    }

    let mut out = ActivationTensor::zeros(x.shape());
    let mut mean = vec![0.0; g];
    let mut second = vec![0.0; g];
    for ch in 0..c {
        mean.iter_mut().for_each(|v| *v = 0.0);
        second.iter_mut().for_each(|v| *v = 0.0);
        for ni in 0..n {
            for li in 0..l {
                mean[groups.labels[ni * l + li]] += x.at(ni, ch, li);
            }
        }
        for (gi, m) in mean.iter_mut().enumerate() {
            *m /= counts[gi] as f64;
        }
        for ni in 0..n {
            for li in 0..l {
                let gi = groups.labels[ni * l + li];
                let v = x.at(ni, ch, li) - mean[gi];
                second[gi] += v * v;
            }
        }
        for (gi, s) in second.iter_mut().enumerate() {
            *s /= counts[gi] as f64;
        }
        for ni in 0..n {
            for li in 0..l {
                let gi = groups.labels[ni * l + li];
                let v = x.at(ni, ch, li) - mean[gi];
                *out.at_mut(ni, ch, li) = v / (second[gi] + epsilon).sqrt();
            }
        }
    }
    out.check_finite()?;
    Ok(out)
}
