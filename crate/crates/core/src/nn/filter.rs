//! Fixed 1-D filters applied along one spatial axis with reflect-101
//! borders, as a custom op whose backward pass is the exact adjoint.
//!
//! Depthwise and few-channel separable filters map poorly onto im2col +
//! GEMM; direct loops stay linear in the tap count.

use std::ops::{AddAssign, Mul};

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::{Error, Result};
use crate::imaging::reflect_index;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Along the height axis.
    Rows,
    /// Along the width axis.
    Cols,
}

/// Output channel `j` correlates input channel `sources[j]` with the
/// centred odd-length `taps[j]`; sizes are preserved.
#[derive(Clone, Debug)]
pub struct AxisFilter {
    axis: Axis,
    sources: Vec<usize>,
    taps: Vec<Vec<f64>>,
}

impl AxisFilter {
    pub fn new(axis: Axis, sources: Vec<usize>, taps: Vec<Vec<f64>>) -> Result<Self> {
        if sources.len() != taps.len() || sources.is_empty() {
            return Err(Error::shape(format!("{} tap sets", sources.len()), taps.len()));
        }
        if taps.iter().any(|t| t.len() % 2 == 0) {
            return Err(Error::param("filter taps must have odd length"));
        }
        Ok(Self { axis, sources, taps })
    }

    /// The same taps on every channel of a `channels`-channel input.
    pub fn depthwise(axis: Axis, channels: usize, taps: Vec<f64>) -> Result<Self> {
        Self::new(axis, (0..channels).collect(), vec![taps; channels])
    }

    /// Filters an `(n, c, h, w)` tensor into `(n, outputs, h, w)`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if self.sources.iter().any(|&s| s >= c) {
            return Err(Error::shape(format!("more than {} input channels", self.sources.iter().max().unwrap_or(&0)), c));
        }
        Ok(x.contiguous()?.apply_op1(FilterOp {
            filter: self.clone(),
            c_in: c,
            adjoint: false,
        })?)
    }
}

struct FilterOp {
    filter: AxisFilter,
    c_in: usize,
    adjoint: bool,
}

/// Reflected source index of every (position, tap) pair on an axis.
fn index_table(n: usize, k: usize) -> Vec<usize> {
    let r = (k / 2) as isize;
    (0..n as isize)
        .flat_map(|i| (0..k as isize).map(move |t| reflect_index(i + t - r, n)))
        .collect()
}

fn run<T>(f: &AxisFilter, adjoint: bool, c_in: usize, x: &[T], dims: (usize, usize, usize, usize), cast: fn(f64) -> T) -> Vec<T>
where
    T: Copy + Default + AddAssign + Mul<Output = T>,
{
    let (b, c_x, h, w) = dims;
    let c_out = f.sources.len();
    let (c_src, c_dst) = if adjoint { (c_out, c_in) } else { (c_in, c_out) };
    debug_assert_eq!(c_x, c_src);
    let mut out = vec![T::default(); b * c_dst * h * w];
    let plane = h * w;
    let n_axis = if f.axis == Axis::Rows { h } else { w };
    let mut tables: Vec<(usize, Vec<usize>)> = Vec::new();
    for (j, taps) in f.taps.iter().enumerate() {
        let k = taps.len();
        if !tables.iter().any(|(len, _)| *len == k) {
            tables.push((k, index_table(n_axis, k)));
        }
        let table = &tables.iter().find(|(len, _)| *len == k).expect("inserted above").1;
        let taps: Vec<T> = taps.iter().map(|&v| cast(v)).collect();
        let s = f.sources[j];
        for bi in 0..b {
            // forward reads channel s and writes j; the adjoint reverses both
            let (src_c, dst_c) = if adjoint { (j, s) } else { (s, j) };
            let src = &x[(bi * c_src + src_c) * plane..][..plane];
            let dst = &mut out[(bi * c_dst + dst_c) * plane..][..plane];
            match (f.axis, adjoint) {
                (Axis::Rows, false) => {
                    for y in 0..h {
                        for (t, &kv) in taps.iter().enumerate() {
                            let sy = table[y * k + t];
                            let (d, s) = (&mut dst[y * w..][..w], &src[sy * w..][..w]);
                            for (o, &v) in d.iter_mut().zip(s) {
                                *o += kv * v;
                            }
                        }
                    }
                }
                (Axis::Rows, true) => {
                    for y in 0..h {
                        for (t, &kv) in taps.iter().enumerate() {
                            let sy = table[y * k + t];
                            let (d, s) = (&mut dst[sy * w..][..w], &src[y * w..][..w]);
                            for (o, &v) in d.iter_mut().zip(s) {
                                *o += kv * v;
                            }
                        }
                    }
                }
                (Axis::Cols, false) => {
                    for y in 0..h {
                        let (d, s) = (&mut dst[y * w..][..w], &src[y * w..][..w]);
                        for (xo, o) in d.iter_mut().enumerate() {
                            let idx = &table[xo * k..][..k];
                            let mut acc = T::default();
                            for (&kv, &sx) in taps.iter().zip(idx) {
                                acc += kv * s[sx];
                            }
                            *o += acc;
                        }
                    }
                }
                (Axis::Cols, true) => {
                    for y in 0..h {
                        let (d, s) = (&mut dst[y * w..][..w], &src[y * w..][..w]);
                        for (xo, &g) in s.iter().enumerate() {
                            let idx = &table[xo * k..][..k];
                            for (&kv, &sx) in taps.iter().zip(idx) {
                                d[sx] += kv * g;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("axis filter expects a contiguous operand"),
    }
}

impl CustomOp1 for FilterOp {
    fn name(&self) -> &'static str {
        if self.adjoint {
            "axis-filter-adjoint"
        } else {
            "axis-filter"
        }
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        let dims = (b, c, h, w);
        let c_out = if self.adjoint { self.c_in } else { self.filter.sources.len() };
        let out = match storage {
            CpuStorage::F32(x) => CpuStorage::F32(run(&self.filter, self.adjoint, self.c_in, contiguous(x, layout)?, dims, |v| v as f32)),
            CpuStorage::F64(x) => CpuStorage::F64(run(&self.filter, self.adjoint, self.c_in, contiguous(x, layout)?, dims, |v| v)),
            other => candle_core::bail!("axis filter: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, Shape::from((b, c_out, h, w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let adjoint = FilterOp {
            filter: self.filter.clone(),
            c_in: self.c_in,
            adjoint: !self.adjoint,
        };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&adjoint)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::reflect_pad2d;
    use crate::nn::{conv2d, ConvGeom};
    use candle_core::{DType, Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|i| (((i as u64 + 1) * (seed * 2 + 1) * 2654435761) % 1000) as f64 / 500.0 - 1.0).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_padded_grouped_convolution() {
        let x = rand(&[2, 3, 7, 9], 1);
        let taps = [vec![0.2, -0.5, 1.0, 0.3, 0.1], vec![1.0, 2.0, -1.0], vec![0.5, 0.5, 0.5, 0.5, 0.5]];
        for axis in [Axis::Rows, Axis::Cols] {
            let f = AxisFilter::new(axis, vec![2, 0, 0], taps.to_vec()).unwrap();
            let got = f.apply(&x).unwrap();
            for (j, (t, src)) in taps.iter().zip([2, 0, 0]).enumerate() {
                let r = t.len() / 2;
                let xs = x.narrow(1, src, 1).unwrap().contiguous().unwrap();
                let (padded, kshape) = match axis {
                    Axis::Rows => (reflect_pad2d(&xs, r, 0).unwrap(), (1, 1, t.len(), 1)),
                    Axis::Cols => (reflect_pad2d(&xs, 0, r).unwrap(), (1, 1, 1, t.len())),
                };
                let k = Tensor::from_vec(t.clone(), kshape, &Device::Cpu).unwrap();
                let want = conv2d(&padded, &k, ConvGeom::default()).unwrap();
                assert!(max_diff(&got.narrow(1, j, 1).unwrap(), &want) < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_the_adjoint() {
        for axis in [Axis::Rows, Axis::Cols] {
            let f = AxisFilter::new(axis, vec![1, 0, 1], vec![vec![0.3, -1.0, 2.0], vec![1.5], vec![0.1, 0.2, 0.3, 0.4, 0.5]]).unwrap();
            let x = Var::from_tensor(&rand(&[1, 2, 5, 6], 3)).unwrap();
            let g = rand(&[1, 3, 5, 6], 4);
            let y = f.apply(x.as_tensor()).unwrap();
            let grads = (y * &g).unwrap().sum_all().unwrap().backward().unwrap();
            let dx = grads.get(x.as_tensor()).unwrap();
            // <f(x), g> is linear in x, so its gradient probes each input unit
            let mut want = vec![0.0; 60];
            for (i, slot) in want.iter_mut().enumerate() {
                let mut e = vec![0.0; 60];
                e[i] = 1.0;
                let unit = Tensor::from_vec(e, (1, 2, 5, 6), &Device::Cpu).unwrap();
                *slot = (f.apply(&unit).unwrap() * &g).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            }
            let want = Tensor::from_vec(want, (1, 2, 5, 6), &Device::Cpu).unwrap();
            assert!(max_diff(dx, &want) < 1e-12);
            assert_eq!(dx.dtype(), DType::F64);
        }
    }
}
