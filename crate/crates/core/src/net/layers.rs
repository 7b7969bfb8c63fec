//! Dense, 3x3 convolution, ReLU, 2x2 mean-pool and flatten layers with
//! hand-written backward passes.
//!
//! Convolution is stride 1 with zero padding 1 (spatial size preserved) and
//! is evaluated through im2col plus a small matrix multiply.

use crate::error::{Error, Result};
use crate::tensor::{ActivationTensor, Shape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Fully connected layer on `(N, C, 1)` tensors: `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// out_dim x in_dim, row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub grad_w: Vec<f64>,
    pub grad_b: Vec<f64>,
}

impl DenseLayer {
    /// Uniform fan-in init: `U(-1/sqrt(in), 1/sqrt(in))` for weights and bias.
    pub fn new_seeded(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = (0..out_dim * in_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let b = (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            in_dim,
            out_dim,
            w,
            b,
            grad_w: vec![0.0; out_dim * in_dim],
            grad_b: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Self {
            in_dim: dim,
            out_dim: dim,
            w,
            b: vec![0.0; dim],
            grad_w: vec![0.0; dim * dim],
            grad_b: vec![0.0; dim],
        }
    }

    pub fn forward(&self, x: &ActivationTensor) -> Result<ActivationTensor> {
        let (n, c, l) = x.shape().ncl();
        if l != 1 {
            return Err(Error::Shape(format!(
                "dense layer needs flattened input (got spatial length {l})"
            )));
        }
        if c != self.in_dim {
            return Err(Error::Shape(format!(
                "dense layer expects {} inputs, got {c}",
                self.in_dim
            )));
        }
        let mut out = ActivationTensor::zeros(Shape::Ncl {
            n,
            c: self.out_dim,
            l: 1,
        });
        for ni in 0..n {
            let xin = &x.data()[ni * c..(ni + 1) * c];
            for o in 0..self.out_dim {
                let wrow = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = self.b[o];
                for (wi, xi) in wrow.iter().zip(xin) {
                    acc += wi * xi;
                }
                *out.at_mut(ni, o, 0) = acc;
            }
        }
        Ok(out)
    }

    pub fn backward(
        &mut self,
        grad_out: &ActivationTensor,
        input: &ActivationTensor,
    ) -> Result<ActivationTensor> {
        let (n, c_in, _) = input.shape().ncl();
        let (gn, c_out, _) = grad_out.shape().ncl();
        if gn != n || c_out != self.out_dim || c_in != self.in_dim {
            return Err(Error::Internal(
                "dense backward fed a mismatched cache".into(),
            ));
        }
        let mut grad_in = ActivationTensor::zeros(input.shape());
        for ni in 0..n {
            let xin = &input.data()[ni * c_in..(ni + 1) * c_in];
            for o in 0..self.out_dim {
                let g = grad_out.at(ni, o, 0);
                self.grad_b[o] += g;
                let wrow = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                let gw = &mut self.grad_w[o * self.in_dim..(o + 1) * self.in_dim];
                for i in 0..self.in_dim {
                    gw[i] += g * xin[i];
                    *grad_in.at_mut(ni, i, 0) += g * wrow[i];
                }
            }
        }
        Ok(grad_in)
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    /// c_out x (c_in * 9), row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub grad_w: Vec<f64>,
    pub grad_b: Vec<f64>,
}

impl ConvLayer {
    pub fn new_seeded(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = c_in * 9;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..c_out * fan_in)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let b = (0..c_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            c_in,
            c_out,
            w,
            b,
            grad_w: vec![0.0; c_out * fan_in],
            grad_b: vec![0.0; c_out],
        }
    }

    /// im2col for one sample: columns matrix `(c_in * 9) x (h * w)`.
    fn im2col(x: &ActivationTensor, ni: usize, h: usize, w: usize, cols: &mut [f64]) {
        let c_in = x.c();
        let hw = h * w;
        for ci in 0..c_in {
            let plane = x.row(ni, ci);
            for kh in 0..3usize {
                for kw in 0..3usize {
                    let row_base = ((ci * 3 + kh) * 3 + kw) * hw;
                    for oh in 0..h {
                        let ih = oh as isize + kh as isize - 1;
                        if ih < 0 || ih >= h as isize {
                            for ow in 0..w {
                                cols[row_base + oh * w + ow] = 0.0;
                            }
                            continue;
                        }
                        let irow = ih as usize * w;
                        for ow in 0..w {
                            let iw = ow as isize + kw as isize - 1;
                            cols[row_base + oh * w + ow] = if iw < 0 || iw >= w as isize {
                                0.0
                            } else {
                                plane[irow + iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &ActivationTensor) -> Result<ActivationTensor> {
        let (n, c, h, w) = match x.shape() {
            Shape::Nchw { n, c, h, w } => (n, c, h, w),
            Shape::Ncl { .. } => {
                return Err(Error::Shape(
                    "convolution needs a rank-4 (N,C,H,W) input".into(),
                ))
            }
        };
        if c != self.c_in {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {c}",
                self.c_in
            )));
        }
        let hw = h * w;
        let kdim = self.c_in * 9;
        let mut cols = vec![0.0; kdim * hw];
        let mut out = ActivationTensor::zeros(Shape::Nchw {
            n,
            c: self.c_out,
            h,
            w,
        });
        for ni in 0..n {
            Self::im2col(x, ni, h, w, &mut cols);
            for o in 0..self.c_out {
                let dst_start = (ni * self.c_out + o) * hw;
                let dst = &mut out.data_mut()[dst_start..dst_start + hw];
                for v in dst.iter_mut() {
                    *v = self.b[o];
                }
                let wrow = &self.w[o * kdim..(o + 1) * kdim];
                for k in 0..kdim {
                    let wk = wrow[k];
                    if wk == 0.0 {
                        continue;
                    }
                    let col_row = &cols[k * hw..(k + 1) * hw];
                    for (d, cv) in dst.iter_mut().zip(col_row) {
                        *d += wk * cv;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(
        &mut self,
        grad_out: &ActivationTensor,
        input: &ActivationTensor,
    ) -> Result<ActivationTensor> {
        let (n, _, h, w) = match input.shape() {
            Shape::Nchw { n, c, h, w } => (n, c, h, w),
            Shape::Ncl { .. } => return Err(Error::Internal("conv cache is not rank-4".into())),
        };
        if grad_out.shape()
            != (Shape::Nchw {
                n,
                c: self.c_out,
                h,
                w,
            })
        {
            return Err(Error::Internal(
                "conv backward fed a mismatched cache".into(),
            ));
        }
        let hw = h * w;
        let kdim = self.c_in * 9;
        let mut cols = vec![0.0; kdim * hw];
        let mut grad_cols = vec![0.0; kdim * hw];
        let mut grad_in = ActivationTensor::zeros(input.shape());
        for ni in 0..n {
            Self::im2col(input, ni, h, w, &mut cols);
            grad_cols.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..self.c_out {
                let g_start = (ni * self.c_out + o) * hw;
                let g = &grad_out.data()[g_start..g_start + hw];
                let mut gb = 0.0;
                for gv in g {
                    gb += gv;
                }
                self.grad_b[o] += gb;
                let wrow = &self.w[o * kdim..(o + 1) * kdim];
                let gwrow = &mut self.grad_w[o * kdim..(o + 1) * kdim];
                for k in 0..kdim {
                    let col_row = &cols[k * hw..(k + 1) * hw];
                    let mut acc = 0.0;
                    for (gv, cv) in g.iter().zip(col_row) {
                        acc += gv * cv;
                    }
                    gwrow[k] += acc;
                    let wk = wrow[k];
                    if wk != 0.0 {
                        let gcol = &mut grad_cols[k * hw..(k + 1) * hw];
                        for (gc, gv) in gcol.iter_mut().zip(g) {
                            *gc += wk * gv;
                        }
                    }
                }
            }
            // col2im: scatter column gradients back onto the padded input.
            for ci in 0..self.c_in {
                for kh in 0..3usize {
                    for kw in 0..3usize {
                        let row_base = ((ci * 3 + kh) * 3 + kw) * hw;
                        for oh in 0..h {
                            let ih = oh as isize + kh as isize - 1;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for ow in 0..w {
                                let iw = ow as isize + kw as isize - 1;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let g = grad_cols[row_base + oh * w + ow];
                                if g != 0.0 {
                                    *grad_in.at_mut(ni, ci, ih as usize * w + iw as usize) += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }
}

/// ReLU; the gradient at exactly zero is zero.
pub fn relu_forward(x: &ActivationTensor) -> ActivationTensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub fn relu_backward(
    grad_out: &ActivationTensor,
    input: &ActivationTensor,
) -> Result<ActivationTensor> {
    if grad_out.shape() != input.shape() {
        return Err(Error::Internal(
            "relu backward fed a mismatched cache".into(),
        ));
    }
    let mut grad_in = grad_out.clone();
    for (g, x) in grad_in.data_mut().iter_mut().zip(input.data()) {
        if *x <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(grad_in)
}

/// 2x2 mean pooling with stride 2; trailing odd rows/columns are dropped.
pub fn meanpool2_forward(x: &ActivationTensor) -> Result<ActivationTensor> {
    let (n, c, h, w) = match x.shape() {
        Shape::Nchw { n, c, h, w } => (n, c, h, w),
        Shape::Ncl { .. } => return Err(Error::Shape("mean pooling needs a rank-4 input".into())),
    };
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::Shape(format!("input {h}x{w} too small to pool 2x2")));
    }
    let mut out = ActivationTensor::zeros(Shape::Nchw { n, c, h: ho, w: wo });
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.row(ni, ci);
            for oh in 0..ho {
                for ow in 0..wo {
                    let base = (2 * oh) * w + 2 * ow;
                    let s = plane[base] + plane[base + 1] + plane[base + w] + plane[base + w + 1];
                    *out.at_mut(ni, ci, oh * wo + ow) = 0.25 * s;
                }
            }
        }
    }
    Ok(out)
}

pub fn meanpool2_backward(
    grad_out: &ActivationTensor,
    in_shape: Shape,
) -> Result<ActivationTensor> {
    let (n, c, h, w) = match in_shape {
        Shape::Nchw { n, c, h, w } => (n, c, h, w),
        Shape::Ncl { .. } => return Err(Error::Internal("pool cache is not rank-4".into())),
    };
    let (ho, wo) = (h / 2, w / 2);
    if grad_out.shape() != (Shape::Nchw { n, c, h: ho, w: wo }) {
        return Err(Error::Internal(
            "pool backward fed a mismatched cache".into(),
        ));
    }
    let mut grad_in = ActivationTensor::zeros(in_shape);
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = 0.25 * grad_out.at(ni, ci, oh * wo + ow);
                    let base = (2 * oh) * w + 2 * ow;
                    let plane_start = (ni * c + ci) * h * w;
                    let data = grad_in.data_mut();
                    data[plane_start + base] += g;
                    data[plane_start + base + 1] += g;
                    data[plane_start + base + w] += g;
                    data[plane_start + base + w + 1] += g;
                }
            }
        }
    }
    Ok(grad_in)
}

/// Collapse channels and spatial axes into a feature vector `(N, C*L, 1)`.
pub fn flatten_forward(x: &ActivationTensor) -> ActivationTensor {
    let (n, c, l) = x.shape().ncl();
    ActivationTensor::new_ncl(n, c * l, 1, x.data().to_vec()).expect("same length")
}

pub fn flatten_backward(grad_out: &ActivationTensor, in_shape: Shape) -> Result<ActivationTensor> {
    if grad_out.data().len() != in_shape.len() {
        return Err(Error::Internal(
            "flatten backward fed a mismatched cache".into(),
        ));
    }
    ActivationTensor::new(in_shape, grad_out.data().to_vec())
}
