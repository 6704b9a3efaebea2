//! 2-D convolution as an im2col + GEMM custom op.
//!
//! Candle's reference convolution backward pass is several times slower than
//! its forward pass on CPU; this op keeps both directions on blocked GEMM
//! kernels and supports strides, zero padding and channel groups.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl ConvGeom {
    pub fn same(kernel: usize) -> Self {
        Self {
            padding: kernel / 2,
            ..Default::default()
        }
    }

    fn out_len(&self, len: usize, k: usize) -> usize {
        (len + 2 * self.padding - k) / self.stride + 1
    }
}

/// Convolves `x` of shape `(b, c_in, h, w)` with `weight` of shape
/// `(c_out, c_in / groups, kh, kw)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let (_, c_in, h, w) = x.dims4()?;
    let (c_out, c_in_g, kh, kw) = weight.dims4()?;
    if geom.groups == 0 || c_in % geom.groups != 0 || c_out % geom.groups != 0 || c_in / geom.groups != c_in_g {
        return Err(Error::shape(
            format!("weight with {} input channels per group", c_in / geom.groups.max(1)),
            format!("{:?}", weight.dims()),
        ));
    }
    if geom.stride == 0 || h + 2 * geom.padding < kh || w + 2 * geom.padding < kw {
        return Err(Error::param(format!(
            "convolution kernel {kh}x{kw} does not fit input {h}x{w} with padding {}",
            geom.padding
        )));
    }
    Ok(x.contiguous()?.apply_op2(&weight.contiguous()?, Conv2dOp { geom })?)
}

/// Dense matrix kernels for the two float widths the networks run in.
trait Gemm: Copy + Default + std::ops::AddAssign + 'static {
    /// `c = a * b + beta * c` for row-major `a (m x k)` and `b (k x n)`;
    /// `a_t` / `b_t` read the operand transposed from its stored layout.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]);
    fn zero() -> Self;
    fn one() -> Self;
}

macro_rules! impl_gemm {
    ($t:ty, $f:path) => {
        impl Gemm for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[$t], a_t: bool, b: &[$t], b_t: bool, beta: $t, c: &mut [$t]) {
                let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
                debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // SAFETY: the slices cover the strided extents asserted above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
        }
    };
}

impl_gemm!(f32, matrixmultiply::sgemm);
impl_gemm!(f64, matrixmultiply::dgemm);

#[derive(Clone, Copy)]
struct Dims {
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl Dims {
    fn new(geom: &ConvGeom, x: &[usize], wt: &[usize]) -> Self {
        let (kh, kw) = (wt[2], wt[3]);
        Self {
            b: x[0],
            c_in: x[1],
            h: x[2],
            w: x[3],
            c_out: wt[0],
            kh,
            kw,
            oh: geom.out_len(x[2], kh),
            ow: geom.out_len(x[3], kw),
        }
    }

    fn is_pointwise(&self, geom: &ConvGeom) -> bool {
        self.kh == 1 && self.kw == 1 && geom.stride == 1 && geom.padding == 0
    }
}

/// Unfolds one group of one image into `(c * kh * kw, oh * ow)` columns.
fn im2col<T: Gemm>(src: &[T], c: usize, d: &Dims, geom: &ConvGeom, cols: &mut [T]) {
    let n = d.oh * d.ow;
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    for ci in 0..c {
        let plane = &src[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &mut cols[((ci * d.kh + ky) * d.kw + kx) * n..][..n];
                for oy in 0..d.oh {
                    let iy = oy as isize * s + ky as isize - p;
                    let dst = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let line = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the image planes.
fn col2im<T: Gemm>(cols: &[T], c: usize, d: &Dims, geom: &ConvGeom, dst: &mut [T]) {
    let n = d.oh * d.ow;
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    for ci in 0..c {
        let plane = &mut dst[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &cols[((ci * d.kh + ky) * d.kw + kx) * n..][..n];
                for oy in 0..d.oh {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < d.w as isize {
                            line[ix as usize] += row[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: Gemm>(x: &[T], wt: &[T], d: &Dims, geom: &ConvGeom) -> Vec<T> {
    let g = geom.groups;
    let (cig, cog) = (d.c_in / g, d.c_out / g);
    let kk = cig * d.kh * d.kw;
    let n = d.oh * d.ow;
    let mut out = vec![T::zero(); d.b * d.c_out * n];
    let mut cols = vec![T::zero(); kk * n];
    for bi in 0..d.b {
        for gi in 0..g {
            let src = &x[(bi * d.c_in + gi * cig) * d.h * d.w..][..cig * d.h * d.w];
            let a = &wt[gi * cog * kk..][..cog * kk];
            let c = &mut out[(bi * d.c_out + gi * cog) * n..][..cog * n];
            if d.is_pointwise(geom) {
                T::gemm(cog, kk, n, a, false, src, false, T::zero(), c);
            } else {
                im2col(src, cig, d, geom, &mut cols);
                T::gemm(cog, kk, n, a, false, &cols, false, T::zero(), c);
            }
        }
    }
    out
}

fn backward_input<T: Gemm>(gout: &[T], wt: &[T], d: &Dims, geom: &ConvGeom) -> Vec<T> {
    let g = geom.groups;
    let (cig, cog) = (d.c_in / g, d.c_out / g);
    let kk = cig * d.kh * d.kw;
    let n = d.oh * d.ow;
    let mut dx = vec![T::zero(); d.b * d.c_in * d.h * d.w];
    let mut cols = vec![T::zero(); kk * n];
    for bi in 0..d.b {
        for gi in 0..g {
            let go = &gout[(bi * d.c_out + gi * cog) * n..][..cog * n];
            let a = &wt[gi * cog * kk..][..cog * kk];
            let dst = &mut dx[(bi * d.c_in + gi * cig) * d.h * d.w..][..cig * d.h * d.w];
            if d.is_pointwise(geom) {
                T::gemm(kk, cog, n, a, true, go, false, T::zero(), dst);
            } else {
                T::gemm(kk, cog, n, a, true, go, false, T::zero(), &mut cols);
                col2im(&cols, cig, d, geom, dst);
            }
        }
    }
    dx
}

fn backward_weight<T: Gemm>(x: &[T], gout: &[T], d: &Dims, geom: &ConvGeom) -> Vec<T> {
    let g = geom.groups;
    let (cig, cog) = (d.c_in / g, d.c_out / g);
    let kk = cig * d.kh * d.kw;
    let n = d.oh * d.ow;
    let mut dw = vec![T::zero(); d.c_out * kk];
    let mut cols = vec![T::zero(); kk * n];
    for bi in 0..d.b {
        for gi in 0..g {
            let src = &x[(bi * d.c_in + gi * cig) * d.h * d.w..][..cig * d.h * d.w];
            let go = &gout[(bi * d.c_out + gi * cog) * n..][..cog * n];
            let c = &mut dw[gi * cog * kk..][..cog * kk];
            let cols_ref: &[T] = if d.is_pointwise(geom) {
                src
            } else {
                im2col(src, cig, d, geom, &mut cols);
                &cols
            };
            T::gemm(cog, n, kk, go, false, cols_ref, true, T::one(), c);
        }
    }
    dw
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d expects contiguous operands"),
    }
}

/// Dispatches a binary kernel on matching f32/f64 storages.
macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let ($a, $b) = (contiguous(a, $l1)?, contiguous(b, $l2)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let ($a, $b) = (contiguous(a, $l1)?, contiguous(b, $l2)?);
                CpuStorage::F64($body)
            }
            (a, b) => candle_core::bail!("conv2d: unsupported dtypes {:?} / {:?}", a.dtype(), b.dtype()),
        }
    };
}

struct Conv2dOp {
    geom: ConvGeom,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = Dims::new(&self.geom, l1.dims(), l2.dims());
        let out = dispatch!(s1, l1, s2, l2, |x, w| forward(x, w, &d, &self.geom));
        Ok((out, Shape::from((d.b, d.c_out, d.oh, d.ow))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dims = Dims::new(&self.geom, x.dims(), w.dims());
        let dx = grad.apply_op2_no_bwd(w, &InputGradOp { geom: self.geom, dims })?;
        let dw = x.apply_op2_no_bwd(&grad, &WeightGradOp { geom: self.geom, dims })?;
        Ok((Some(dx), Some(dw)))
    }
}

struct InputGradOp {
    geom: ConvGeom,
    dims: Dims,
}

impl CustomOp2 for InputGradOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.dims;
        let out = dispatch!(s1, l1, s2, l2, |g, w| backward_input(g, w, &d, &self.geom));
        Ok((out, Shape::from((d.b, d.c_in, d.h, d.w))))
    }
}

struct WeightGradOp {
    geom: ConvGeom,
    dims: Dims,
}

impl CustomOp2 for WeightGradOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.dims;
        let out = dispatch!(s1, l1, s2, l2, |x, g| backward_weight(x, g, &d, &self.geom));
        Ok((out, Shape::from((d.c_out, d.c_in / self.geom.groups, d.kh, d.kw))))
    }
}
