//! Diagonal-covariance Gaussian mixtures: stable log-space densities,
//! responsibilities, normalized contributions, and EM fitting.
//!
//! Mixture normalization needs a fitted mixture before training starts; the
//! collective inference rule reuses the same machinery with learned context
//! parameters as components and uniform priors.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Variance floor applied by every M-step and by the model constructor.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837877066409345483560659472811; // ln(2*pi)

/// Mixture weights, per-component means and diagonal variances over R^D.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    weights: Vec<f64>,
    /// K x D, row-major.
    means: Vec<f64>,
    /// K x D, row-major, strictly positive.
    variances: Vec<f64>,
    d: usize,
    /// Mean log-likelihood reported by the last fit (0 for hand-built models).
    pub loglik: f64,
    /// EM iterations used by the last fit (0 for hand-built models).
    pub iters: usize,
}

/// Per-row responsibilities tau (M x K, row-stochastic).
#[derive(Debug, Clone)]
pub struct Responsibilities {
    pub tau: Vec<f64>,
    pub m: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Relative mean log-likelihood improvement below which EM stops.
    pub tol: f64,
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
            seed: 0,
        }
    }
}

/// Per-iteration fit diagnostics.
#[derive(Debug, Clone, Default)]
pub struct EmTrace {
    pub loglik_history: Vec<f64>,
    /// Iterations at which a collapsed component was re-seeded.
    pub reseeds: Vec<usize>,
}

impl GmmModel {
    /// Build a model from explicit parameters. Weights must form a simplex
    /// within 1e-12; variances must be positive and are raised to the floor.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(Error::Shape(format!(
                "component count mismatch: {} weights, {} means, {} variances",
                k,
                means.len(),
                variances.len()
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::Shape("zero-dimensional mixture".into()));
        }
        let mut wsum = 0.0;
        for &w in &weights {
            if w.is_nan() || w < 0.0 || !w.is_finite() {
                return Err(Error::Domain(format!("invalid mixture weight {w}")));
            }
            wsum += w;
        }
        if (wsum - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "mixture weights must sum to 1 (got {wsum})"
            )));
        }
        let mut mf = Vec::with_capacity(k * d);
        let mut vf = Vec::with_capacity(k * d);
        for (mu, var) in means.iter().zip(&variances) {
            if mu.len() != d || var.len() != d {
                return Err(Error::Shape("ragged means/variances".into()));
            }
            for &x in mu {
                if !x.is_finite() {
                    return Err(Error::Numerical("non-finite mean entry".into()));
                }
                mf.push(x);
            }
            for &v in var {
                if !v.is_finite() || v <= 0.0 {
                    return Err(Error::Domain(format!("non-positive variance {v}")));
                }
                vf.push(v.max(VARIANCE_FLOOR));
            }
        }
        Ok(Self {
            weights,
            means: mf,
            variances: vf,
            d,
            loglik: 0.0,
            iters: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.d..(k + 1) * self.d]
    }

    pub fn variance(&self, k: usize) -> &[f64] {
        &self.variances[k * self.d..(k + 1) * self.d]
    }

    /// Log density of the k-th diagonal Gaussian at `x`, computed in log
    /// space.
    pub fn log_component_density(&self, x: &[f64], k: usize) -> Result<f64> {
        if k >= self.k() {
            return Err(Error::Domain(format!("component {k} out of range")));
        }
        if x.len() != self.d {
            return Err(Error::Shape(format!(
                "point dimension {} does not match model dimension {}",
                x.len(),
                self.d
            )));
        }
        Ok(log_diag_gaussian(x, self.mean(k), self.variance(k)))
    }

    /// Posterior responsibilities `tau_k(x) = lambda_k p(x|k) / sum_j ...`
    /// for each row of `xs` (M x D, row-major), via log-sum-exp.
    pub fn responsibilities(&self, xs: &[f64], m: usize) -> Result<Responsibilities> {
        if xs.len() != m * self.d {
            return Err(Error::Shape(format!(
                "expected {} values for {} rows of dimension {}, got {}",
                m * self.d,
                m,
                self.d,
                xs.len()
            )));
        }
        let k = self.k();
        let log_w: Vec<f64> = self
            .weights
            .iter()
            .map(|w| w.max(f64::MIN_POSITIVE).ln())
            .collect();
        let mut tau = vec![0.0; m * k];
        let mut scratch = vec![0.0; k];
        for i in 0..m {
            let x = &xs[i * self.d..(i + 1) * self.d];
            for ki in 0..k {
                scratch[ki] = log_w[ki] + log_diag_gaussian(x, self.mean(ki), self.variance(ki));
            }
            softmax_in_place(&mut scratch);
            tau[i * k..(i + 1) * k].copy_from_slice(&scratch);
        }
        Ok(Responsibilities { tau, m, k })
    }

    /// Hard assignment: argmax_k of the responsibility, ties broken by the
    /// lowest index.
    pub fn assign_component(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.d {
            return Err(Error::Shape(format!(
                "point dimension {} does not match model dimension {}",
                x.len(),
                self.d
            )));
        }
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for k in 0..self.k() {
            let score = self.weights[k].max(f64::MIN_POSITIVE).ln()
                + log_diag_gaussian(x, self.mean(k), self.variance(k));
            if score > best_score {
                best_score = score;
                best = k;
            }
        }
        Ok(best)
    }

    /// Mean per-row log-likelihood of `xs` under the mixture.
    pub fn mean_log_likelihood(&self, xs: &[f64], m: usize) -> Result<f64> {
        if xs.len() != m * self.d || m == 0 {
            return Err(Error::Shape("bad data for log-likelihood".into()));
        }
        let k = self.k();
        let log_w: Vec<f64> = self
            .weights
            .iter()
            .map(|w| w.max(f64::MIN_POSITIVE).ln())
            .collect();
        let mut scratch = vec![0.0; k];
        let mut total = 0.0;
        for i in 0..m {
            let x = &xs[i * self.d..(i + 1) * self.d];
            for ki in 0..k {
                scratch[ki] = log_w[ki] + log_diag_gaussian(x, self.mean(ki), self.variance(ki));
            }
            total += log_sum_exp(&scratch);
        }
        Ok(total / m as f64)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let doc = GmmModelJson {
            k: self.k(),
            d: self.d,
            weights: self.weights.clone(),
            means: (0..self.k()).map(|k| self.mean(k).to_vec()).collect(),
            variances: (0..self.k()).map(|k| self.variance(k).to_vec()).collect(),
            loglik: self.loglik,
            iters: self.iters,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: GmmModelJson = serde_json::from_str(s)?;
        if doc.weights.len() != doc.k || doc.means.len() != doc.k {
            return Err(Error::Format("mixture document is inconsistent".into()));
        }
        if doc.means.iter().any(|m| m.len() != doc.d) {
            return Err(Error::Format(
                "mixture document has a ragged means table".into(),
            ));
        }
        let mut model = Self::new(doc.weights, doc.means, doc.variances)?;
        model.loglik = doc.loglik;
        model.iters = doc.iters;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct GmmModelJson {
    k: usize,
    d: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    loglik: f64,
    iters: usize,
}

#[inline]
fn log_diag_gaussian(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for d in 0..x.len() {
        let diff = x[d] - mean[d];
        acc += LN_2PI + var[d].ln() + diff * diff / var[d];
    }
    -0.5 * acc
}

#[inline]
pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    let s: f64 = v.iter().map(|x| (x - mx).exp()).sum();
    mx + s.ln()
}

#[inline]
fn softmax_in_place(v: &mut [f64]) {
    let lse = log_sum_exp(v);
    for x in v.iter_mut() {
        *x = (*x - lse).exp();
    }
}

/// Normalized contributions `tau_hat_k(x_i) = tau_k(x_i) / sum_{j in group}
/// tau_k(x_j)`, per group. `groups[i]` is row i's group id; every component
/// must keep positive mass in every group it appears in.
pub fn normalized_contributions(resp: &Responsibilities, groups: &[usize]) -> Result<Vec<f64>> {
    if groups.len() != resp.m {
        return Err(Error::Shape(format!(
            "expected {} group labels, got {}",
            resp.m,
            groups.len()
        )));
    }
    let n_groups = groups.iter().copied().max().map_or(0, |g| g + 1);
    let k = resp.k;
    let mut totals = vec![0.0; n_groups * k];
    for (i, &g) in groups.iter().enumerate() {
        for ki in 0..k {
            totals[g * k + ki] += resp.tau[i * k + ki];
        }
    }
    for g in 0..n_groups {
        for ki in 0..k {
            let t = totals[g * k + ki];
            if t.is_nan() || t <= 0.0 {
                return Err(Error::DegenerateComponent(format!(
                    "component {ki} has zero responsibility mass in group {g}"
                )));
            }
        }
    }
    let mut tau_hat = vec![0.0; resp.m * k];
    for (i, &g) in groups.iter().enumerate() {
        for ki in 0..k {
            tau_hat[i * k + ki] = resp.tau[i * k + ki] / totals[g * k + ki];
        }
    }
    Ok(tau_hat)
}

/// Fit a diagonal GMM by EM, k-means++-style mean seeding, uniform initial
/// weights and global variance as the initial diagonal. Deterministic given
/// `(xs, k, opts.seed)`.
pub fn em_fit(xs: &[f64], m: usize, d: usize, k: usize, opts: &EmOptions) -> Result<GmmModel> {
    em_fit_traced(xs, m, d, k, opts).map(|(model, _)| model)
}

/// [`em_fit`] plus the per-iteration mean log-likelihood history.
pub fn em_fit_traced(
    xs: &[f64],
    m: usize,
    d: usize,
    k: usize,
    opts: &EmOptions,
) -> Result<(GmmModel, EmTrace)> {
    if k == 0 {
        return Err(Error::Domain("component count must be >= 1".into()));
    }
    if m < k {
        return Err(Error::Domain(format!(
            "need at least as many rows as components ({m} rows < {k} components)"
        )));
    }
    if xs.len() != m * d || d == 0 {
        return Err(Error::Shape(format!(
            "expected {} values for {m} rows of dimension {d}, got {}",
            m * d,
            xs.len()
        )));
    }
    for v in xs {
        if !v.is_finite() {
            return Err(Error::Numerical("non-finite training value".into()));
        }
    }

    // Global per-dimension population variance, used for seeding and reseeds.
    let mut global_mean = vec![0.0; d];
    for i in 0..m {
        for j in 0..d {
            global_mean[j] += xs[i * d + j];
        }
    }
    for g in &mut global_mean {
        *g /= m as f64;
    }
    let mut global_var = vec![0.0; d];
    for i in 0..m {
        for j in 0..d {
            let diff = xs[i * d + j] - global_mean[j];
            global_var[j] += diff * diff;
        }
    }
    for g in &mut global_var {
        *g = (*g / m as f64).max(VARIANCE_FLOOR);
    }

    let mut rng = crate::rng::stream(opts.seed, "em-seed", 0);
    let mut means = kmeans_pp_seed(xs, m, d, k, &mut rng);
    let mut weights = vec![1.0 / k as f64; k];
    let mut variances: Vec<f64> = (0..k).flat_map(|_| global_var.clone()).collect();

    let mut trace = EmTrace::default();
    let mut prev_ll = f64::NEG_INFINITY;
    let mut tau = vec![0.0; m * k];
    let mut iters = 0;

    for iter in 0..opts.max_iters {
        // E-step with the running log-likelihood.
        let mut ll = 0.0;
        {
            let log_w: Vec<f64> = weights
                .iter()
                .map(|w| w.max(f64::MIN_POSITIVE).ln())
                .collect();
            let mut scratch = vec![0.0; k];
            for i in 0..m {
                let x = &xs[i * d..(i + 1) * d];
                for ki in 0..k {
                    scratch[ki] = log_w[ki]
                        + log_diag_gaussian(
                            x,
                            &means[ki * d..(ki + 1) * d],
                            &variances[ki * d..(ki + 1) * d],
                        );
                }
                let lse = log_sum_exp(&scratch);
                ll += lse;
                for ki in 0..k {
                    tau[i * k + ki] = (scratch[ki] - lse).exp();
                }
            }
            ll /= m as f64;
        }
        trace.loglik_history.push(ll);
        iters = iter + 1;

        if ll - prev_ll < opts.tol * (1.0 + prev_ll.abs()) && iter > 0 {
            break;
        }
        prev_ll = ll;

        // M-step.
        let mut mass = vec![0.0; k];
        for i in 0..m {
            for ki in 0..k {
                mass[ki] += tau[i * k + ki];
            }
        }

        // Re-seed collapsed components from the worst-explained row.
        for ki in 0..k {
            if mass[ki] < 1e-8 {
                let row = worst_explained_row(xs, m, d, &weights, &means, &variances);
                log::warn!(
                    "EM component {ki} collapsed at iteration {iter}; re-seeding from row {row}"
                );
                means[ki * d..(ki + 1) * d].copy_from_slice(&xs[row * d..(row + 1) * d]);
                variances[ki * d..(ki + 1) * d].copy_from_slice(&global_var);
                mass[ki] = 1.0;
                trace.reseeds.push(iter);
            }
        }
        let mass_total: f64 = mass.iter().sum();
        for ki in 0..k {
            weights[ki] = mass[ki] / mass_total;
        }
        for ki in 0..k {
            if trace.reseeds.last() == Some(&iter) && mass[ki] == 1.0 {
                continue; // freshly re-seeded this iteration
            }
            let mk = &mut means[ki * d..(ki + 1) * d];
            for v in mk.iter_mut() {
                *v = 0.0;
            }
            for i in 0..m {
                let t = tau[i * k + ki];
                for j in 0..d {
                    means[ki * d + j] += t * xs[i * d + j];
                }
            }
            for j in 0..d {
                means[ki * d + j] /= mass[ki];
            }
            for j in 0..d {
                variances[ki * d + j] = 0.0;
            }
            for i in 0..m {
                let t = tau[i * k + ki];
                for j in 0..d {
                    let diff = xs[i * d + j] - means[ki * d + j];
                    variances[ki * d + j] += t * diff * diff;
                }
            }
            for j in 0..d {
                variances[ki * d + j] = (variances[ki * d + j] / mass[ki]).max(VARIANCE_FLOOR);
            }
        }
    }

    let final_ll = *trace.loglik_history.last().unwrap();
    let model = GmmModel {
        weights,
        means,
        variances,
        d,
        loglik: final_ll,
        iters,
    };
    Ok((model, trace))
}

fn kmeans_pp_seed(
    xs: &[f64],
    m: usize,
    d: usize,
    k: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<f64> {
    let mut means = Vec::with_capacity(k * d);
    let first = rng.gen_range(0..m);
    means.extend_from_slice(&xs[first * d..(first + 1) * d]);
    let mut dist2 = vec![f64::INFINITY; m];
    for chosen in 1..k {
        let last = &means[(chosen - 1) * d..chosen * d];
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..d {
                let diff = xs[i * d + j] - last[j];
                acc += diff * diff;
            }
            if acc < dist2[i] {
                dist2[i] = acc;
            }
        }
        let total: f64 = dist2.iter().sum();
        let row = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = m - 1;
            for (i, &d2) in dist2.iter().enumerate() {
                if target < d2 {
                    pick = i;
                    break;
                }
                target -= d2;
            }
            pick
        } else {
            rng.gen_range(0..m) // all rows identical
        };
        means.extend_from_slice(&xs[row * d..(row + 1) * d]);
    }
    means
}

fn worst_explained_row(
    xs: &[f64],
    m: usize,
    d: usize,
    weights: &[f64],
    means: &[f64],
    variances: &[f64],
) -> usize {
    let k = weights.len();
    let log_w: Vec<f64> = weights
        .iter()
        .map(|w| w.max(f64::MIN_POSITIVE).ln())
        .collect();
    let mut worst = 0;
    let mut worst_ll = f64::INFINITY;
    let mut scratch = vec![0.0; k];
    for i in 0..m {
        let x = &xs[i * d..(i + 1) * d];
        for ki in 0..k {
            scratch[ki] = log_w[ki]
                + log_diag_gaussian(
                    x,
                    &means[ki * d..(ki + 1) * d],
                    &variances[ki * d..(ki + 1) * d],
                );
        }
        let ll = log_sum_exp(&scratch);
        if ll < worst_ll {
            worst_ll = ll;
            worst = i;
        }
    }
    worst
}
