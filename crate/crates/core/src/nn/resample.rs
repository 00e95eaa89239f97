//! Separable spatial resampling expressed as matrix products, so that pooling
//! and resizing stay differentiable without dedicated backward kernels.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// `(out_len, in_len)` averaging matrix for adaptive average pooling.
///
/// Output cell `i` averages the input range
/// `[⌊i·in/out⌋, ⌈(i+1)·in/out⌉)`.
pub fn adaptive_pool_matrix(in_len: usize, out_len: usize) -> Result<Vec<f64>> {
    if in_len == 0 || out_len == 0 {
        return Err(Error::InvalidArgument("pooling sizes must be positive".into()));
    }
    let mut m = vec![0.0; out_len * in_len];
    for i in 0..out_len {
        let start = (i * in_len) / out_len;
        let end = ((i + 1) * in_len).div_ceil(out_len);
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            m[i * in_len + j] = w;
        }
    }
    Ok(m)
}

/// `(out_len, in_len)` linear interpolation matrix with half-pixel centers
/// (the `align_corners = false` convention).
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Result<Vec<f64>> {
    if in_len == 0 || out_len == 0 {
        return Err(Error::InvalidArgument("resize sizes must be positive".into()));
    }
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[i * in_len + i0] += 1.0 - frac;
        m[i * in_len + i1] += frac;
    }
    Ok(m)
}

/// Applies `rows · X · colsᵀ` to every `(H, W)` plane of a `(B, C, H, W)` tensor.
pub fn resample_2d(
    x: &Tensor,
    rows: &[f64],
    out_h: usize,
    cols: &[f64],
    out_w: usize,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if rows.len() != out_h * h || cols.len() != out_w * w {
        return Err(Error::shape(
            "resample matrices",
            (out_h * h, out_w * w),
            (rows.len(), cols.len()),
        ));
    }
    let dev: &Device = x.device();
    let dtype: DType = x.dtype();
    let r = Tensor::from_slice(rows, (out_h, h), dev)?.to_dtype(dtype)?;
    let ct = Tensor::from_slice(cols, (out_w, w), dev)?
        .to_dtype(dtype)?
        .t()?
        .contiguous()?;
    // (B*C*H, W) x (W, out_w)
    let y = x.reshape((b * c * h, w))?.matmul(&ct)?;
    // (B*C, H, out_w) -> rows applied from the left
    let y = y.reshape((b * c, h, out_w))?;
    let r = r.unsqueeze(0)?.broadcast_as((b * c, out_h, h))?.contiguous()?;
    let y = r.matmul(&y)?;
    Ok(y.reshape((b, c, out_h, out_w))?)
}
