//! Dense activation tensors with batch/channel/spatial axis semantics and the
//! per-channel reductions every normalization variant is built from.
//!
//! Layout is always row-major `f64`. A rank-4 tensor `(N, C, H, W)` and its
//! rank-3 spatially flattened view `(N, C, H*W)` share the same byte layout,
//! so reductions are defined on the `(N, C, L)` view and accept either rank.
//! All reductions run in a fixed left-to-right order; results are
//! bit-reproducible across runs.

use crate::error::{Error, Result};

/// Tensor shape: batch N, channels C, and either explicit spatial axes or a
/// flattened spatial length L.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Nchw {
        n: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    Ncl {
        n: usize,
        c: usize,
        l: usize,
    },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Nchw { n, c, h, w } => n * c * h * w,
            Shape::Ncl { n, c, l } => n * c * l,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(n, c, l)` of the flattened-spatial view.
    pub fn ncl(&self) -> (usize, usize, usize) {
        match *self {
            Shape::Nchw { n, c, h, w } => (n, c, h * w),
            Shape::Ncl { n, c, l } => (n, c, l),
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Shape::Nchw { n, c, h, w } => write!(f, "({n},{c},{h},{w})"),
            Shape::Ncl { n, c, l } => write!(f, "({n},{c},{l})"),
        }
    }
}

/// Dense activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    shape: Shape,
    data: Vec<f64>,
}

/// Per-channel first and second moments (population variance) together with
/// the number of positions they aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl ActivationTensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {} (= {} entries)",
                data.len(),
                shape,
                shape.len()
            )));
        }
        let t = Self { shape, data };
        t.check_finite()?;
        Ok(t)
    }

    pub fn new_nchw(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Shape::Nchw { n, c, h, w }, data)
    }

    pub fn new_ncl(n: usize, c: usize, l: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Shape::Ncl { n, c, l }, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Batch size.
    pub fn n(&self) -> usize {
        self.shape.ncl().0
    }

    /// Channel count.
    pub fn c(&self) -> usize {
        self.shape.ncl().1
    }

    /// Spatial length of the flattened view (H*W for rank-4 input).
    pub fn l(&self) -> usize {
        self.shape.ncl().2
    }

    pub fn is_rank4(&self) -> bool {
        matches!(self.shape, Shape::Nchw { .. })
    }

    /// Value at `(n, c, l)` in the flattened-spatial view.
    #[inline]
    pub fn at(&self, n: usize, c: usize, l: usize) -> f64 {
        let (_, cs, ls) = self.shape.ncl();
        self.data[(n * cs + c) * ls + l]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, l: usize) -> &mut f64 {
        let (_, cs, ls) = self.shape.ncl();
        &mut self.data[(n * cs + c) * ls + l]
    }

    /// Contiguous spatial row for `(n, c)`.
    #[inline]
    pub fn row(&self, n: usize, c: usize) -> &[f64] {
        let (_, cs, ls) = self.shape.ncl();
        let start = (n * cs + c) * ls;
        &self.data[start..start + ls]
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite value {v} at flat index {i} in tensor {}",
                    self.shape
                )));
            }
        }
        Ok(())
    }

    /// Reinterpret `(N, C, H, W)` as `(N, C, H*W)`. Element `(n, c, h, w)`
    /// lands at `(n, c, h*W + w)`; values are unchanged.
    pub fn flatten_spatial(&self) -> Result<ActivationTensor> {
        match self.shape {
            Shape::Nchw { n, c, h, w } => Ok(ActivationTensor {
                shape: Shape::Ncl { n, c, l: h * w },
                data: self.data.clone(),
            }),
            Shape::Ncl { .. } => Err(Error::Shape(
                "flatten_spatial requires a rank-4 (N,C,H,W) tensor".into(),
            )),
        }
    }

    /// Inverse of [`Self::flatten_spatial`]: reinterpret `(N, C, L)` as
    /// `(N, C, h, w)` with `h * w = L`.
    pub fn to_nchw(&self, h: usize, w: usize) -> Result<ActivationTensor> {
        match self.shape {
            Shape::Ncl { n, c, l } if l == h * w => Ok(ActivationTensor {
                shape: Shape::Nchw { n, c, h, w },
                data: self.data.clone(),
            }),
            Shape::Ncl { l, .. } => Err(Error::Shape(format!(
                "cannot reshape spatial length {l} into {h}x{w}"
            ))),
            Shape::Nchw { .. } => Err(Error::Shape("tensor is already rank-4".into())),
        }
    }

    /// Mean and population variance per channel over all `(n, l)` positions.
    pub fn channel_moments(&self) -> Result<ChannelMoments> {
        let (n, c, l) = self.shape.ncl();
        let m = n * l;
        if m == 0 {
            return Err(Error::Shape("channel_moments on an empty tensor".into()));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for ni in 0..n {
                for v in self.row(ni, ch) {
                    sum += v;
                }
            }
            let mu = sum / m as f64;
            let mut acc = 0.0;
            for ni in 0..n {
                for v in self.row(ni, ch) {
                    let d = v - mu;
                    acc += d * d;
                }
            }
            mean[ch] = mu;
            var[ch] = acc / m as f64;
        }
        Ok(ChannelMoments {
            mean,
            var,
            count: m,
        })
    }

    /// Weighted per-channel moments with one nonnegative weight per `(n, l)`
    /// position. Weights must already be normalized to sum to 1 (the
    /// normalized-contribution convention): `mean = Σ w_i x_i`,
    /// `var = Σ w_i (x_i - mean)^2`.
    pub fn weighted_channel_moments(&self, weights: &[f64]) -> Result<ChannelMoments> {
        let (n, c, l) = self.shape.ncl();
        let m = n * l;
        if weights.len() != m {
            return Err(Error::Shape(format!(
                "expected {m} weights (one per (n,l) position), got {}",
                weights.len()
            )));
        }
        let mut wsum = 0.0;
        for &w in weights {
            if w.is_nan() || w < 0.0 {
                return Err(Error::Domain(format!("negative weight {w}")));
            }
            wsum += w;
        }
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("weights must sum to 1 (got {wsum})")));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut mu = 0.0;
            for ni in 0..n {
                let row = self.row(ni, ch);
                let wrow = &weights[ni * l..(ni + 1) * l];
                for (x, w) in row.iter().zip(wrow) {
                    mu += w * x;
                }
            }
            let mut acc = 0.0;
            for ni in 0..n {
                let row = self.row(ni, ch);
                let wrow = &weights[ni * l..(ni + 1) * l];
                for (x, w) in row.iter().zip(wrow) {
                    let d = x - mu;
                    acc += w * d * d;
                }
            }
            mean[ch] = mu;
            var[ch] = acc;
        }
        Ok(ChannelMoments {
            mean,
            var,
            count: m,
        })
    }

    /// `out[n,c,l] = (x[n,c,l] + shift[c]) * scale[c]` — the shared kernel for
    /// every `(x - mu) / sigma` application.
    pub fn elementwise_affine(&self, scale: &[f64], shift: &[f64]) -> Result<ActivationTensor> {
        let (n, c, l) = self.shape.ncl();
        if scale.len() != c || shift.len() != c {
            return Err(Error::Shape(format!(
                "scale/shift length must equal channel count {c} (got {}/{})",
                scale.len(),
                shift.len()
            )));
        }
        let mut out = self.clone();
        for ni in 0..n {
            for ch in 0..c {
                let s = scale[ch];
                let t = shift[ch];
                let start = (ni * c + ch) * l;
                for v in &mut out.data[start..start + l] {
                    *v = (*v + t) * s;
                }
            }
        }
        out.check_finite()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn arange_tensor(shape: Shape) -> ActivationTensor {
        let data: Vec<f64> = (0..shape.len()).map(|i| i as f64).collect();
        ActivationTensor::new(shape, data).unwrap()
    }

    #[test]
    fn flatten_spatial_shapes() {
        let t = arange_tensor(Shape::Nchw {
            n: 2,
            c: 3,
            h: 4,
            w: 5,
        });
        let f = t.flatten_spatial().unwrap();
        assert_eq!(f.shape(), Shape::Ncl { n: 2, c: 3, l: 20 });

        let one = ActivationTensor::new_nchw(1, 1, 1, 1, vec![7.0]).unwrap();
        let f = one.flatten_spatial().unwrap();
        assert_eq!(f.shape(), Shape::Ncl { n: 1, c: 1, l: 1 });
        assert_eq!(f.data(), &[7.0]);
    }

    #[test]
    fn flatten_spatial_matches_triple_loop_enumeration() {
        // Oracle: enumerate (n,c,h,w) with a naive loop nest and place each
        // element at l = h*W + w independently of the implementation.
        let (n, c, h, w) = (2, 2, 2, 2);
        let mut rng = crate::rng::stream(11, "flatten", 0);
        let data: Vec<f64> = (0..n * c * h * w)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let t = ActivationTensor::new_nchw(n, c, h, w, data.clone()).unwrap();
        let f = t.flatten_spatial().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        let src = ((ni * c + ci) * h + hi) * w + wi;
                        assert_eq!(f.at(ni, ci, hi * w + wi), data[src]);
                    }
                }
            }
        }
        // Round-trip restores the exact value sequence.
        let back = f.to_nchw(h, w).unwrap();
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn flatten_spatial_rejects_rank3() {
        let t = arange_tensor(Shape::Ncl { n: 1, c: 1, l: 4 });
        assert!(matches!(t.flatten_spatial(), Err(Error::Shape(_))));
    }

    #[test]
    fn channel_moments_constant_input() {
        let t = ActivationTensor::new_ncl(2, 3, 4, vec![5.0; 24]).unwrap();
        let m = t.channel_moments().unwrap();
        assert_eq!(m.count, 8);
        for ch in 0..3 {
            assert_eq!(m.mean[ch], 5.0);
            assert_eq!(m.var[ch], 0.0);
        }
    }

    #[test]
    fn channel_moments_two_pass_oracle() {
        // Oracle: explicit two-pass mean/variance arithmetic on {1,2,3}.
        let t = ActivationTensor::new_ncl(3, 1, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let m = t.channel_moments().unwrap();
        assert!((m.mean[0] - 2.0).abs() < 1e-15);
        assert!((m.var[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn channel_moments_permutation_invariant() {
        let t = ActivationTensor::new_ncl(4, 1, 1, vec![0.5, -2.0, 3.25, 1.0]).unwrap();
        let p = ActivationTensor::new_ncl(4, 1, 1, vec![3.25, 1.0, 0.5, -2.0]).unwrap();
        let (a, b) = (t.channel_moments().unwrap(), p.channel_moments().unwrap());
        assert!((a.mean[0] - b.mean[0]).abs() < 1e-12);
        assert!((a.var[0] - b.var[0]).abs() < 1e-12);
    }

    #[test]
    fn channel_moments_empty_tensor_errors() {
        let t = ActivationTensor::zeros(Shape::Ncl { n: 0, c: 2, l: 3 });
        assert!(matches!(t.channel_moments(), Err(Error::Shape(_))));
    }

    #[test]
    fn weighted_moments_uniform_reduces_to_unweighted() {
        let mut rng = crate::rng::stream(3, "wmom", 0);
        let t =
            ActivationTensor::new_ncl(3, 2, 4, (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .unwrap();
        let w = vec![1.0 / 12.0; 12];
        let a = t.weighted_channel_moments(&w).unwrap();
        let b = t.channel_moments().unwrap();
        for ch in 0..2 {
            assert!((a.mean[ch] - b.mean[ch]).abs() < 1e-12);
            assert!((a.var[ch] - b.var[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_moments_point_mass_and_direct_sum() {
        let t = ActivationTensor::new_ncl(2, 1, 1, vec![0.0, 4.0]).unwrap();
        // Point mass on the second position.
        let m = t.weighted_channel_moments(&[0.0, 1.0]).unwrap();
        assert_eq!(m.mean[0], 4.0);
        assert_eq!(m.var[0], 0.0);
        // Oracle: direct weighted sums. mean = .25*0 + .75*4 = 3,
        // var = .25*9 + .75*1 = 3.
        let m = t.weighted_channel_moments(&[0.25, 0.75]).unwrap();
        assert!((m.mean[0] - 3.0).abs() < 1e-15);
        assert!((m.var[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_moments_rejects_bad_weights() {
        let t = ActivationTensor::new_ncl(2, 1, 1, vec![0.0, 4.0]).unwrap();
        assert!(matches!(
            t.weighted_channel_moments(&[-0.1, 1.1]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            t.weighted_channel_moments(&[0.4, 0.4]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn affine_identity_and_direct_arithmetic() {
        let t = ActivationTensor::new_ncl(1, 1, 1, vec![3.0]).unwrap();
        let id = t.elementwise_affine(&[1.0], &[0.0]).unwrap();
        assert_eq!(id.data(), t.data());
        // (3 - 1) * 0.5 = 1.0
        let y = t.elementwise_affine(&[0.5], &[-1.0]).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn affine_inverse_pair_recovers_input() {
        let mut rng = crate::rng::stream(9, "affine", 0);
        let t =
            ActivationTensor::new_ncl(2, 3, 2, (0..12).map(|_| rng.gen_range(-5.0..5.0)).collect())
                .unwrap();
        let scale = [2.0, 0.5, 3.0];
        let shift = [1.0, -4.0, 0.25];
        let fwd = t.elementwise_affine(&scale, &shift).unwrap();
        let inv_scale: Vec<f64> = scale.iter().map(|s| 1.0 / s).collect();
        let inv_shift: Vec<f64> = scale.iter().zip(&shift).map(|(s, t)| -t * s).collect();
        let back = fwd.elementwise_affine(&inv_scale, &inv_shift).unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_with_own_moments_gives_zero_mean() {
        let mut rng = crate::rng::stream(17, "norm", 0);
        let t =
            ActivationTensor::new_ncl(4, 3, 5, (0..60).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .unwrap();
        let eps = 1e-5;
        let m = t.channel_moments().unwrap();
        let scale: Vec<f64> = m.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let shift: Vec<f64> = m.mean.iter().map(|mu| -mu).collect();
        let y = t.elementwise_affine(&scale, &shift).unwrap();
        let my = y.channel_moments().unwrap();
        for ch in 0..3 {
            assert!(my.mean[ch].abs() <= 1e-9);
            let expect = m.var[ch] / (m.var[ch] + eps);
            assert!((my.var[ch] - expect).abs() < 1e-6);
        }
    }
}
