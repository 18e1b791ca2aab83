//! Neural layers with hand-derived backward passes.
//!
//! Each layer caches exactly what its backward pass needs and nothing more.
//! Gradients accumulate into `Parameter::grad`, so callers zero grads at
//! step boundaries and may run several backward passes per step. Tensors
//! flow through layers as stacks of rows: any shape [..., F] is treated as
//! [numel/F, F].

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Parameter, Tensor};

/// Fully connected layer, y = x W + b with W stored [in, out].
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Parameter,
    pub b: Option<Parameter>,
}

impl Linear {
    /// Kaiming-style uniform init in [-1/sqrt(in), 1/sqrt(in)].
    pub fn new(name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w_data = (0..in_dim * out_dim)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        let w = Parameter::new(
            format!("{name}.w"),
            Tensor::new(vec![in_dim, out_dim], w_data).expect("init shape"),
        );
        let b = bias.then(|| {
            let b_data = (0..out_dim).map(|_| rng.uniform(-bound, bound)).collect();
            Parameter::new(
                format!("{name}.b"),
                Tensor::new(vec![out_dim], b_data).expect("init shape"),
            )
        });
        Linear { w, b }
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.shape[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.shape[1]
    }

    /// x: [R, in] -> [R, out].
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, &self.w.value)?;
        if let Some(b) = &self.b {
            let out = self.out_dim();
            for r in 0..y.shape[0] {
                for (v, &bv) in y.row_mut(r).iter_mut().zip(&b.value.data[..out]) {
                    *v += bv;
                }
            }
        }
        Ok(y)
    }

    /// Accumulates dW and db, returns dx. `x` must be the forward input.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let dw = matmul_tn(x, dy)?;
        self.w.grad.add_scaled(&dw, 1.0)?;
        if let Some(b) = &mut self.b {
            let db = dy.col_sum()?;
            b.grad.add_scaled(&db, 1.0)?;
        }
        matmul_nt(dy, &self.w.value)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match &self.b {
            Some(b) => vec![&self.w, b],
            None => vec![&self.w],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match &mut self.b {
            Some(b) => vec![&mut self.w, b],
            None => vec![&mut self.w],
        }
    }
}

/// Per-row normalization over the last axis with learnable gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub eps: f64,
}

/// Forward cache: normalized rows and each row's reciprocal std.
#[derive(Debug, Clone)]
pub struct LnCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(name: &str, width: usize) -> Result<Self> {
        if width < 2 {
            return Err(CoreError::Config(format!(
                "layer norm over axis of width {width} is degenerate"
            )));
        }
        Ok(LayerNorm {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::filled(&[width], 1.0)),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[width])),
            eps: 1e-5,
        })
    }

    pub fn width(&self) -> usize {
        self.gamma.value.numel()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LnCache)> {
        let f = self.width();
        if x.last_dim() != f {
            return Err(CoreError::Shape(format!(
                "layer norm width {} but input last axis {}",
                f,
                x.last_dim()
            )));
        }
        let rows = x.n_rows();
        let mut x_hat = Tensor::zeros(&x.shape);
        let mut y = Tensor::zeros(&x.shape);
        let mut inv_std = vec![0.0; rows];
        let g = &self.gamma.value.data;
        let bv = &self.beta.value.data;
        for r in 0..rows {
            let xr = x.row(r);
            let mean = xr.iter().sum::<f64>() / f as f64;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std[r] = inv;
            let xh = x_hat.row_mut(r);
            let yr = y.row_mut(r);
            for j in 0..f {
                let h = (xr[j] - mean) * inv;
                xh[j] = h;
                yr[j] = g[j] * h + bv[j];
            }
        }
        Ok((y, LnCache { x_hat, inv_std }))
    }

    pub fn backward(&mut self, cache: &LnCache, dy: &Tensor) -> Result<Tensor> {
        let f = self.width();
        if dy.shape != cache.x_hat.shape {
            return Err(CoreError::Shape(format!(
                "layer norm backward shapes differ: {:?} vs {:?}",
                dy.shape, cache.x_hat.shape
            )));
        }
        let rows = dy.n_rows();
        let g = &self.gamma.value.data;
        let mut dx = Tensor::zeros(&dy.shape);
        for r in 0..rows {
            let dyr = dy.row(r);
            let xh = cache.x_hat.row(r);
            let inv = cache.inv_std[r];
            // Accumulate parameter grads and the two row means needed for dx.
            let mut mean_dxh = 0.0;
            let mut mean_dxh_xh = 0.0;
            for j in 0..f {
                let dxh = dyr[j] * g[j];
                self.gamma.grad.data[j] += dyr[j] * xh[j];
                self.beta.grad.data[j] += dyr[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
            }
            mean_dxh /= f as f64;
            mean_dxh_xh /= f as f64;
            let dxr = dx.row_mut(r);
            for j in 0..f {
                let dxh = dyr[j] * g[j];
                dxr[j] = inv * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        Ok(dx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// dL/dx given the pre-activation input.
pub fn relu_backward(x_pre: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x_pre.zip_map(dy, |x, d| if x > 0.0 { d } else { 0.0 })
}

/// Exact GELU, x * Phi(x) with the Gaussian CDF via erf.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn gelu_backward(x_pre: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x_pre.zip_map(dy, |x, d| gelu_grad_scalar(x) * d)
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_grad_scalar(y: f64) -> f64 {
    y * (1.0 - y)
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let f = x.last_dim();
    let rows = x.n_rows();
    let mut y = Tensor::zeros(&x.shape);
    for r in 0..rows {
        let xr = x.row(r);
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let yr = y.row_mut(r);
        let mut sum = 0.0;
        for j in 0..f {
            let e = (xr[j] - max).exp();
            yr[j] = e;
            sum += e;
        }
        for v in yr.iter_mut() {
            *v /= sum;
        }
    }
    y
}

/// dL/dx from dL/dy and the softmax output y.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.shape != dy.shape {
        return Err(CoreError::Shape(format!(
            "softmax backward shapes differ: {:?} vs {:?}",
            y.shape, dy.shape
        )));
    }
    let f = y.last_dim();
    let rows = y.n_rows();
    let mut dx = Tensor::zeros(&y.shape);
    for r in 0..rows {
        let yr = y.row(r);
        let dyr = dy.row(r);
        let dot: f64 = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        let dxr = dx.row_mut(r);
        for j in 0..f {
            dxr[j] = yr[j] * (dyr[j] - dot);
        }
    }
    Ok(dx)
}

/// Inverted dropout. Returns the output and, in training mode with p > 0,
/// the kept-scale mask needed by the backward pass. Inference mode and
/// p = 0 are bit-exact identities.
pub fn dropout(x: &Tensor, p: f64, training: bool, rng: &mut Rng) -> Result<(Tensor, Option<Tensor>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(CoreError::Config(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if !training || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep_scale = 1.0 / (1.0 - p);
    let mut mask = Tensor::zeros(&x.shape);
    for m in &mut mask.data {
        if rng.next_f64() >= p {
            *m = keep_scale;
        }
    }
    let y = x.zip_map(&mask, |v, m| v * m)?;
    Ok((y, Some(mask)))
}

pub fn dropout_backward(dy: &Tensor, mask: &Option<Tensor>) -> Result<Tensor> {
    match mask {
        None => Ok(dy.clone()),
        Some(m) => dy.zip_map(m, |d, s| d * s),
    }
}
