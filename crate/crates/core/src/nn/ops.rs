//! Differentiable building blocks composed from primitive tensor ops.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{geometry, Result};

/// Row softmax over the last dimension (max-shifted).
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Max over non-overlapping 2x2 blocks of `[B, C, H, W]`; H and W even.
pub fn max_pool_2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(geometry!("2x2 max pooling needs even dims, got {h}x{w}"));
    }
    Ok(x.reshape((b, c, h / 2, 2, w / 2, 2))?.max(5)?.max(3)?)
}

/// 3x3 max pooling with stride 2 and padding 1 for non-negative inputs
/// (zero padding then equals -inf padding). H and W even.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(geometry!("3x3/2 max pooling needs even dims, got {h}x{w}"));
    }
    let rows = pool_axis_3s2(x, 2)?;
    pool_axis_3s2(&rows, 3)
}

/// Output `i` = max(x[2i-1], x[2i], x[2i+1]) along `dim` with zero outside.
fn pool_axis_3s2(x: &Tensor, dim: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    let half = n / 2;
    let padded = x.pad_with_zeros(dim, 1, 1)?;
    let split = |t: &Tensor| -> Result<Tensor> {
        let mut shape = t.dims().to_vec();
        shape[dim] = half;
        shape.insert(dim + 1, 2);
        Ok(t.reshape(shape)?)
    };
    // Positions (2i, 2i+1) of the padded axis, i.e. x[2i-1], x[2i].
    let pairs = split(&padded.narrow(dim, 0, n)?)?.max(dim + 1)?;
    // Position 2i+2 of the padded axis, i.e. x[2i+1].
    let third = split(&padded.narrow(dim, 2, n)?)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)?;
    Ok(pairs.maximum(&third)?)
}

/// `[out x in]` linear interpolation matrix, half-pixel centers, clamped at
/// the borders (the usual `align_corners = false` convention).
pub fn interpolation_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - frac;
        m[o * n_in + i1] += frac;
    }
    m
}

fn matrix(n_in: usize, n_out: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(interpolation_matrix(n_in, n_out), (n_out, n_in), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of `[B, C, H, W]` as two matrix products.
pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let mw = matrix(w, out_w, x.dtype(), x.device())?;
    let mh = matrix(h, out_h, x.dtype(), x.device())?;
    let y = x.broadcast_matmul(&mw.t()?)?;
    Ok(mh.broadcast_matmul(&y)?)
}

/// Nearest-neighbour repeat of each cell into a `factor x factor` block.
pub fn upsample_repeat(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .repeat((1, 1, 1, factor, 1, factor))?
        .reshape((b, c, h * factor, w * factor))?)
}
