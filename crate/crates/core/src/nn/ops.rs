//! Differentiable tensor helpers composed from candle primitives.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;
use crate::imaging::reflect_index;

/// Logistic function via `tanh`, whose gradient stays finite when saturated.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Numerically stable softmax along `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

fn index_tensor(idx: Vec<u32>, device: &Device) -> Result<Tensor> {
    let n = idx.len();
    Ok(Tensor::from_vec(idx, n, device)?)
}

/// Reflect-101 padding of the two trailing spatial axes of an NCHW tensor.
pub fn reflect_pad2d(x: &Tensor, pad_y: usize, pad_x: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let axis = |n: usize, p: usize| -> Vec<u32> {
        (-(p as isize)..(n + p) as isize).map(|i| reflect_index(i, n) as u32).collect()
    };
    let mut out = x.clone();
    if pad_y > 0 {
        out = out.index_select(&index_tensor(axis(h, pad_y), x.device())?, 2)?;
    }
    if pad_x > 0 {
        out = out.index_select(&index_tensor(axis(w, pad_x), x.device())?, 3)?;
    }
    Ok(out)
}

/// Nearest-neighbour resize of an NCHW tensor with pixel-centre mapping.
pub fn resize_nearest(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let axis = |n: usize, m: usize| -> Vec<u32> {
        (0..m)
            .map(|i| (((i as f64 + 0.5) * n as f64 / m as f64) as usize).min(n - 1) as u32)
            .collect()
    };
    let mut out = x.clone();
    if oh != h {
        out = out.index_select(&index_tensor(axis(h, oh), x.device())?, 2)?;
    }
    if ow != w {
        out = out.index_select(&index_tensor(axis(w, ow), x.device())?, 3)?;
    }
    Ok(out)
}

/// Mean over the spatial axes, keeping an `(n, c)` shape.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.max(D::Minus1)?.max(D::Minus1)?)
}

/// Separable Gaussian smoothing of every channel with reflect borders.
pub fn gaussian_blur(x: &Tensor, kernel_size: usize, sigma: f64) -> Result<Tensor> {
    let taps = crate::imaging::gaussian_kernel_1d(kernel_size, sigma)?;
    let c = x.dim(1)?;
    let r = kernel_size / 2;
    let dtype = x.dtype();
    let taps_t = Tensor::from_vec(taps.clone(), kernel_size, x.device())?.to_dtype(dtype)?;
    let ky = taps_t.reshape((1, 1, kernel_size, 1))?.repeat((c, 1, 1, 1))?;
    let kx = taps_t.reshape((1, 1, 1, kernel_size))?.repeat((c, 1, 1, 1))?;
    let depthwise = super::ConvGeom {
        groups: c,
        ..Default::default()
    };
    let padded = reflect_pad2d(x, r, r)?;
    let v = super::conv2d(&padded, &ky, depthwise)?;
    Ok(super::conv2d(&v, &kx, depthwise)?)
}

/// Single-channel image to a `(1, 1, h, w)` tensor.
pub fn image_to_tensor(img: &crate::imaging::Image, dtype: DType, device: &Device) -> Result<Tensor> {
    img.ensure_single_channel()?;
    let t = Tensor::from_vec(img.data().to_vec(), (1, 1, img.height(), img.width()), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Stacks equally sized single-channel images into `(n, 1, h, w)`.
pub fn images_to_batch(imgs: &[&crate::imaging::Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let ts = imgs
        .iter()
        .map(|img| image_to_tensor(img, dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

/// Channel `c` of batch item `n` of an NCHW tensor as an image.
pub fn tensor_to_image(t: &Tensor, n: usize, c: usize) -> Result<crate::imaging::Image> {
    let (_, _, h, w) = t.dims4()?;
    let data = t.get(n)?.get(c)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    crate::imaging::Image::from_vec(h, w, 1, data)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
