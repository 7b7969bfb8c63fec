//! Confusion-matrix metrics and per-parameter gradient-variance tracking.

use crate::error::{Error, Result};

/// Accuracy plus macro-averaged precision/recall/F1. Classes that are never
/// predicted and never present contribute 0 to the macro averages and are
/// flagged in `absent_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub absent_classes: Vec<usize>,
}

/// `confusion[true_class][predicted_class]` counts.
pub fn compute_metrics(confusion: &[Vec<u64>]) -> Result<MetricsSummary> {
    let k = confusion.len();
    if k == 0 {
        return Err(Error::Domain("empty confusion matrix".into()));
    }
    if confusion.iter().any(|row| row.len() != k) {
        return Err(Error::Shape("confusion matrix must be square".into()));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Domain("confusion matrix has no samples".into()));
    }
    let mut trace = 0u64;
    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut absent = Vec::new();
    for c in 0..k {
        let tp = confusion[c][c];
        trace += tp;
        let actual: u64 = confusion[c].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
        if actual == 0 && predicted == 0 {
            absent.push(c);
        }
        // 0 substituted when a denominator is 0.
        let p = if predicted > 0 {
            tp as f64 / predicted as f64
        } else {
            0.0
        };
        let r = if actual > 0 {
            tp as f64 / actual as f64
        } else {
            0.0
        };
        let f1 = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        precision_sum += p;
        recall_sum += r;
        f1_sum += f1;
    }
    Ok(MetricsSummary {
        accuracy: trace as f64 / total as f64,
        precision: precision_sum / k as f64,
        recall: recall_sum / k as f64,
        f1: f1_sum / k as f64,
        absent_classes: absent,
    })
}

/// Streaming per-parameter variance of gradients across an epoch's steps
/// (Welford in each coordinate). Reports the max and mean over parameters of
/// the population variance; undefined below two steps.
#[derive(Debug, Clone)]
pub struct GradVarTracker {
    steps: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl GradVarTracker {
    pub fn new(param_count: usize) -> Self {
        Self {
            steps: 0,
            mean: vec![0.0; param_count],
            m2: vec![0.0; param_count],
        }
    }

    pub fn add_step(&mut self, grads: &[f64]) -> Result<()> {
        if grads.len() != self.mean.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match tracked {}",
                grads.len(),
                self.mean.len()
            )));
        }
        self.steps += 1;
        let n = self.steps as f64;
        for i in 0..grads.len() {
            let delta = grads[i] - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (grads[i] - self.mean[i]);
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `(max, mean)` of per-parameter gradient variance, or `None` with
    /// fewer than two steps.
    pub fn finish(&self) -> Option<(f64, f64)> {
        if self.steps < 2 || self.mean.is_empty() {
            return None;
        }
        let n = self.steps as f64;
        let mut max = 0.0;
        let mut sum = 0.0;
        for &m2 in &self.m2 {
            let var = m2 / n;
            if var > max {
                max = var;
            }
            sum += var;
        }
        Some((max, sum / self.mean.len() as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_diagonal_scores_one() {
        let confusion = vec![vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 7]];
        let m = compute_metrics(&confusion).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.f1, 1.0);
        assert!(m.absent_classes.is_empty());
    }

    #[test]
    fn hand_confusion_oracle() {
        // [[1,1],[0,2]]: accuracy 3/4, precision (1/1 + 2/3)/2 = 5/6,
        // recall (1/2 + 1)/2 = 3/4.
        let confusion = vec![vec![1, 1], vec![0, 2]];
        let m = compute_metrics(&confusion).unwrap();
        assert!((m.accuracy - 0.75).abs() < 1e-15);
        assert!((m.precision - 5.0 / 6.0).abs() < 1e-15);
        assert!((m.recall - 0.75).abs() < 1e-15);
        let f1_0 = 2.0 * 1.0 * 0.5 / 1.5;
        let f1_1 = 2.0 * (2.0 / 3.0) * 1.0 / (2.0 / 3.0 + 1.0);
        assert!((m.f1 - (f1_0 + f1_1) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_contributes_zero_and_is_flagged() {
        let confusion = vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 0]];
        let m = compute_metrics(&confusion).unwrap();
        assert_eq!(m.absent_classes, vec![2]);
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(matches!(compute_metrics(&[]), Err(Error::Domain(_))));
        assert!(matches!(
            compute_metrics(&[vec![0, 0], vec![0, 0]]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            compute_metrics(&[vec![1, 0]]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn grad_variance_constant_and_two_point() {
        let mut t = GradVarTracker::new(3);
        for _ in 0..5 {
            t.add_step(&[0.5, -1.0, 2.0]).unwrap();
        }
        let (max, mean) = t.finish().unwrap();
        assert!(max < 1e-30);
        assert!(mean < 1e-30);

        // Sequence {1, -1}: population variance 1.0 dominates the max.
        let mut t = GradVarTracker::new(2);
        t.add_step(&[1.0, 0.1]).unwrap();
        t.add_step(&[-1.0, 0.1]).unwrap();
        let (max, mean) = t.finish().unwrap();
        assert!((max - 1.0).abs() < 1e-12);
        assert!((mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn grad_variance_scales_quadratically() {
        let seqs = [[0.3, -0.7, 1.1], [0.9, 0.2, -0.4]];
        let mut a = GradVarTracker::new(3);
        let mut b = GradVarTracker::new(3);
        for s in &seqs {
            a.add_step(s).unwrap();
            let scaled: Vec<f64> = s.iter().map(|v| 3.0 * v).collect();
            b.add_step(&scaled).unwrap();
        }
        let (amax, amean) = a.finish().unwrap();
        let (bmax, bmean) = b.finish().unwrap();
        assert!((bmax - 9.0 * amax).abs() < 1e-12);
        assert!((bmean - 9.0 * amean).abs() < 1e-12);
    }

    #[test]
    fn single_step_is_undefined() {
        let mut t = GradVarTracker::new(2);
        t.add_step(&[1.0, 2.0]).unwrap();
        assert!(t.finish().is_none());
    }
}
