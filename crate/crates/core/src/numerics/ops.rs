//! Forward kernels and their hand-written adjoints.
//!
//! Every function here is pure. The tape in [`super::graph`] calls the
//! `*_backward` companions when propagating gradients.

use super::Tensor;
use crate::error::{Error, Result};

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s * (1.0 + x * (1.0 - s))
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

/// `y[..., j] = sum_i x[..., i] * w[i, j] + b[j]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (d_in, d_out) = match *w.shape() {
        [i, o] => (i, o),
        _ => return Err(Error::dim("linear", x.shape(), w.shape())),
    };
    if x.rank() == 0 || x.last_dim() != d_in {
        return Err(Error::dim("linear", x.shape(), w.shape()));
    }
    if let Some(b) = b {
        if b.shape() != [d_out] {
            return Err(Error::dim("linear bias", w.shape(), b.shape()));
        }
    }
    let rows = x.numel() / d_in;
    let mut out = vec![0.0; rows * d_out];
    let (xd, wd) = (x.data(), w.data());
    for r in 0..rows {
        let xr = &xd[r * d_in..(r + 1) * d_in];
        let yr = &mut out[r * d_out..(r + 1) * d_out];
        if let Some(b) = b {
            yr.copy_from_slice(b.data());
        }
        for (i, &xi) in xr.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wrow = &wd[i * d_out..(i + 1) * d_out];
            for (y, &wij) in yr.iter_mut().zip(wrow) {
                *y += xi * wij;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(&shape, out)
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, gy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / d_in;
    let (xd, wd) = (x.data(), w.data());
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; d_out];
    for r in 0..rows {
        let xr = &xd[r * d_in..(r + 1) * d_in];
        let gyr = &gy[r * d_out..(r + 1) * d_out];
        let gxr = &mut gx[r * d_in..(r + 1) * d_in];
        for (b, &g) in gb.iter_mut().zip(gyr) {
            *b += g;
        }
        for i in 0..d_in {
            let wrow = &wd[i * d_out..(i + 1) * d_out];
            let gwrow = &mut gw[i * d_out..(i + 1) * d_out];
            let mut acc = 0.0;
            for j in 0..d_out {
                acc += gyr[j] * wrow[j];
                gwrow[j] += xr[i] * gyr[j];
            }
            gxr[i] = acc;
        }
    }
    (gx, gw, gb)
}

/// Normalize each row over the last axis (population variance), then scale and shift.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if d == 0 || gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::dim("layer_norm", x.shape(), gamma.shape()));
    }
    let mut out = vec![0.0; x.numel()];
    for (xr, yr) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let (mean, inv) = row_stats(xr, eps);
        for j in 0..d {
            yr[j] = gamma.data()[j] * (xr[j] - mean) * inv + beta.data()[j];
        }
    }
    Tensor::new(x.shape(), out)
}

fn row_stats(xr: &[f64], eps: f64) -> (f64, f64) {
    let n = xr.len() as f64;
    let mean = xr.iter().sum::<f64>() / n;
    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn layer_norm_backward(x: &Tensor, gamma: &Tensor, eps: f64, gy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = x.last_dim();
    let mut gx = vec![0.0; x.numel()];
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut gxhat = vec![0.0; d];
    for ((xr, gyr), gxr) in x.data().chunks(d).zip(gy.chunks(d)).zip(gx.chunks_mut(d)) {
        let (mean, inv) = row_stats(xr, eps);
        let (mut m1, mut m2) = (0.0, 0.0);
        for j in 0..d {
            xhat[j] = (xr[j] - mean) * inv;
            gxhat[j] = gyr[j] * gamma.data()[j];
            gg[j] += gyr[j] * xhat[j];
            gb[j] += gyr[j];
            m1 += gxhat[j];
            m2 += gxhat[j] * xhat[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for j in 0..d {
            gxr[j] = inv * (gxhat[j] - m1 - xhat[j] * m2);
        }
    }
    (gx, gg, gb)
}

/// Depthwise causal convolution over the token axis of `x: [B, M, E]` with
/// `kernel: [E, W]`, left-padding `W - 1` zeros.
pub fn causal_depthwise_conv1d(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, m, e) = x.dims3()?;
    let w = match *kernel.shape() {
        [ke, w] if ke == e && w >= 1 => w,
        _ => return Err(Error::dim("causal_depthwise_conv1d", x.shape(), kernel.shape())),
    };
    if bias.shape() != [e] {
        return Err(Error::dim("causal_depthwise_conv1d bias", kernel.shape(), bias.shape()));
    }
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        for t in 0..m {
            let yrow = &mut out[(bi * m + t) * e..(bi * m + t + 1) * e];
            yrow.copy_from_slice(bias.data());
            for k in 0..w {
                // source position t - (w - 1) + k
                let Some(s) = (t + k + 1).checked_sub(w) else {
                    continue;
                };
                let xrow = &xd[(bi * m + s) * e..(bi * m + s + 1) * e];
                for c in 0..e {
                    yrow[c] += kd[c * w + k] * xrow[c];
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Returns `(grad_x, grad_kernel, grad_bias)`.
pub fn causal_depthwise_conv1d_backward(x: &Tensor, kernel: &Tensor, gy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, m, e) = x.dims3().expect("conv input rank");
    let w = kernel.shape()[1];
    let (xd, kd) = (x.data(), kernel.data());
    let mut gx = vec![0.0; x.numel()];
    let mut gk = vec![0.0; kernel.numel()];
    let mut gb = vec![0.0; e];
    for bi in 0..b {
        for t in 0..m {
            let gyrow = &gy[(bi * m + t) * e..(bi * m + t + 1) * e];
            for c in 0..e {
                gb[c] += gyrow[c];
            }
            for k in 0..w {
                let Some(s) = (t + k + 1).checked_sub(w) else {
                    continue;
                };
                let base = (bi * m + s) * e;
                for c in 0..e {
                    gx[base + c] += kd[c * w + k] * gyrow[c];
                    gk[c * w + k] += xd[base + c] * gyrow[c];
                }
            }
        }
    }
    (gx, gk, gb)
}
