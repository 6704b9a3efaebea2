//! Smooth four-channel screentone descriptor Φ, the superpixel partitioner
//! built on it, and the Φ-space similarity metric.
//!
//! Φ pools the magnitudes of a complex Gabor bank (8 orientations by 4
//! periods) together with local intensity over a window wider than any
//! screentone period and standardizes the 33 pooled features. Channel 0 is
//! the standardized intensity; channels 1 to 3 are the leading principal
//! axes of the Gabor magnitudes, fitted once over a bank of rendered
//! screentones.

mod slic;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use slic::{superpixels, SlicOptions, SuperpixelPartition};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::ops::image_to_tensor;
use crate::nn::{Axis, AxisFilter};
use crate::screentone::{render_screentone, ScreentoneKind, ScreentoneSpec};

pub const EMBED_CHANNELS: usize = 4;
pub const ORIENTATIONS: usize = 8;
pub const PERIODS: [f64; 4] = [2.5, 4.0, 6.5, 10.5];
/// Gabor envelope standard deviation as a fraction of the carrier period.
pub const SIGMA_PER_PERIOD: f64 = 0.5;
/// Pooling window; twice the largest synthesized screentone period, made odd.
pub const POOL_WINDOW: usize = 25;
pub const RAW_FEATURES: usize = ORIENTATIONS * PERIODS.len() + 1;
const MAGNITUDE_EPS: f64 = 1e-6;
const ASSET_VERSION: u32 = 1;

const BUNDLED_ASSET: &str = include_str!("../../assets/screen_projection.json");

/// Feature standardization and projection fitted over the screentone bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionAsset {
    pub version: u32,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// `EMBED_CHANNELS` rows of `RAW_FEATURES` weights.
    pub projection: Vec<Vec<f64>>,
    /// Root-mean-square pairwise distance between per-screentone mean
    /// embeddings of the bank; the unit of [`svae_distance`].
    pub bank_scale: f64,
}

impl ProjectionAsset {
    pub fn validate(&self) -> Result<()> {
        if self.version != ASSET_VERSION {
            return Err(Error::param(format!("unsupported projection asset version {}", self.version)));
        }
        let ok = self.feature_mean.len() == RAW_FEATURES
            && self.feature_std.len() == RAW_FEATURES
            && self.feature_std.iter().all(|&s| s > 0.0)
            && self.projection.len() == EMBED_CHANNELS
            && self.projection.iter().all(|r| r.len() == RAW_FEATURES)
            && self.bank_scale > 0.0;
        if !ok {
            return Err(Error::param("malformed projection asset"));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let asset: Self = serde_json::from_str(s)?;
        asset.validate()?;
        Ok(asset)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// The Φ operator. Cheap to clone; holds only the fitted constants.
#[derive(Clone, Debug)]
pub struct ScreenEmbedding {
    asset: ProjectionAsset,
}

impl Default for ScreenEmbedding {
    fn default() -> Self {
        Self::bundled()
    }
}

impl ScreenEmbedding {
    pub fn bundled() -> Self {
        Self {
            asset: ProjectionAsset::from_json(BUNDLED_ASSET).expect("bundled projection asset is valid"),
        }
    }

    pub fn from_asset(asset: ProjectionAsset) -> Result<Self> {
        asset.validate()?;
        Ok(Self { asset })
    }

    pub fn asset(&self) -> &ProjectionAsset {
        &self.asset
    }

    /// Φ of a single-channel image as a 4-channel image.
    pub fn embed(&self, img: &Image) -> Result<Image> {
        let x = image_to_tensor(img, DType::F32, &Device::Cpu)?;
        let phi = self.embed_tensor(&x)?.to_dtype(DType::F64)?;
        let data = phi.get(0)?.permute((1, 2, 0))?.flatten_all()?.to_vec1::<f64>()?;
        Image::from_vec(img.height(), img.width(), EMBED_CHANNELS, data)
    }

    /// Differentiable Φ for a `(n, 1, h, w)` batch, giving `(n, 4, h, w)`.
    pub fn embed_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let raw = raw_features(x)?;
        let (n, c, h, w) = raw.dims4()?;
        let dtype = x.dtype();
        let dev = x.device();
        let mean = Tensor::from_vec(self.asset.feature_mean.clone(), (1, c, 1, 1), dev)?.to_dtype(dtype)?;
        let std = Tensor::from_vec(self.asset.feature_std.clone(), (1, c, 1, 1), dev)?.to_dtype(dtype)?;
        let z = raw.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let proj: Vec<f64> = self.asset.projection.iter().flatten().copied().collect();
        let proj = Tensor::from_vec(proj, (EMBED_CHANNELS, c), dev)?.to_dtype(dtype)?;
        let flat = z.reshape((n, c, h * w))?;
        let out = proj.unsqueeze(0)?.broadcast_as((n, EMBED_CHANNELS, c))?.contiguous()?.matmul(&flat)?;
        Ok(out.reshape((n, EMBED_CHANNELS, h, w))?)
    }
}

fn gauss_taps(sigma: f64) -> (Vec<f64>, isize) {
    let r = (2.5 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    (taps.into_iter().map(|t| t / s).collect(), r)
}

/// Horizontal `(2 * ORIENTATIONS, 1, 1, k)` and grouped vertical
/// `(2 * ORIENTATIONS, 2, k, 1)` kernels for one period. The horizontal pass
/// yields (real, imaginary) pairs per orientation; the vertical pass completes
/// the complex product of the separable carrier.
fn gabor_kernels(period: f64) -> (Vec<f64>, Vec<f64>, usize) {
    let (g, r) = gauss_taps(SIGMA_PER_PERIOD * period);
    let k = g.len();
    let mut horiz = Vec::with_capacity(2 * ORIENTATIONS * k);
    let mut vert = Vec::with_capacity(4 * ORIENTATIONS * k);
    for o in 0..ORIENTATIONS {
        let theta = o as f64 * std::f64::consts::PI / ORIENTATIONS as f64;
        let a = 2.0 * std::f64::consts::PI * theta.cos() / period;
        let b = 2.0 * std::f64::consts::PI * theta.sin() / period;
        let ramp = |freq: f64, f: fn(f64) -> f64| -> Vec<f64> {
            (-r..=r).zip(&g).map(|(i, &gi)| gi * f(freq * i as f64)).collect()
        };
        horiz.extend(ramp(a, f64::cos));
        horiz.extend(ramp(a, f64::sin));
        let (vr, vi) = (ramp(b, f64::cos), ramp(b, f64::sin));
        // real = hr * vr - hi * vi ; imag = hr * vi + hi * vr
        vert.extend(&vr);
        vert.extend(vi.iter().map(|v| -v));
        vert.extend(&vi);
        vert.extend(&vr);
    }
    (horiz, vert, k)
}

/// Separable box mean with reflect padding.
fn box_pool(x: &Tensor, window: usize) -> Result<Tensor> {
    let c = x.dim(1)?;
    let taps = vec![1.0 / window as f64; window];
    let rows = AxisFilter::depthwise(Axis::Rows, c, taps.clone())?.apply(x)?;
    AxisFilter::depthwise(Axis::Cols, c, taps)?.apply(&rows)
}

/// Splits the flat kernels of [`gabor_kernels`] into one horizontal filter
/// and the two vertical filters whose sum completes the complex product.
fn gabor_filters(period: f64) -> Result<(AxisFilter, [AxisFilter; 2])> {
    let (horiz, vert, k) = gabor_kernels(period);
    let n = 2 * ORIENTATIONS;
    let h = AxisFilter::new(Axis::Cols, vec![0; n], horiz.chunks(k).map(<[f64]>::to_vec).collect())?;
    let v = |m: usize| {
        let sources = (0..n).map(|j| 2 * (j / 2) + m).collect();
        let taps = (0..n).map(|j| vert[(2 * j + m) * k..][..k].to_vec()).collect();
        AxisFilter::new(Axis::Rows, sources, taps)
    };
    Ok((h, [v(0)?, v(1)?]))
}

/// Pooled Gabor magnitudes and intensity, `(n, RAW_FEATURES, h, w)`.
pub fn raw_features(x: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if c != 1 {
        return Err(Error::shape("1 channel", c));
    }
    let centered = (x - 0.5)?;
    let mut feats = Vec::with_capacity(RAW_FEATURES);
    for &period in &PERIODS {
        let (horiz, [va, vb]) = gabor_filters(period)?;
        let h = horiz.apply(&centered)?;
        let resp = (va.apply(&h)? + vb.apply(&h)?)?;
        let (n, _, hh, ww) = resp.dims4()?;
        let pairs = resp.reshape((n, ORIENTATIONS, 2, hh, ww))?;
        let mag = (pairs.sqr()?.sum(2)? + MAGNITUDE_EPS)?.sqrt()?;
        feats.push(mag);
    }
    feats.push(x.clone());
    let stacked = Tensor::cat(&feats, 1)?;
    box_pool(&stacked, POOL_WINDOW)
}

/// Screentones the projection is fitted over.
pub fn screentone_bank() -> Vec<ScreentoneSpec> {
    let mut bank = Vec::new();
    for kind in ScreentoneKind::ALL {
        for &period in &[2.0, 3.0, 4.0, 6.0, 8.0, 12.0] {
            for &tone in &[0.2, 0.4, 0.6, 0.8] {
                let angles: &[f64] = if kind == ScreentoneKind::Stochastic { &[0.0] } else { &[0.0, 45.0] };
                for &angle in angles {
                    bank.push(ScreentoneSpec::new(kind, period, angle, tone).with_seed(bank.len() as u64));
                }
            }
        }
    }
    bank
}

/// Side of the rendered bank tiles and the border dropped before sampling.
const BANK_TILE: usize = 72;
const BANK_MARGIN: usize = 12;

/// Fits standardization and principal axes over `bank`.
pub fn fit_projection(bank: &[ScreentoneSpec]) -> Result<ProjectionAsset> {
    if bank.len() < 2 {
        return Err(Error::param("screentone bank needs at least two entries"));
    }
    let inner = BANK_TILE - 2 * BANK_MARGIN;
    let mut samples: Vec<Vec<f64>> = Vec::new();
    let mut per_tile_mean: Vec<Vec<f64>> = Vec::new();
    for spec in bank {
        let img = render_screentone(spec, BANK_TILE, BANK_TILE)?;
        let raw = raw_features(&image_to_tensor(&img, DType::F64, &Device::Cpu)?)?
            .narrow(2, BANK_MARGIN, inner)?
            .narrow(3, BANK_MARGIN, inner)?;
        let v = raw.get(0)?.reshape((RAW_FEATURES, inner * inner))?.t()?.to_vec2::<f64>()?;
        // sparse grid keeps the covariance fit cheap
        let tile: Vec<Vec<f64>> = v.into_iter().step_by(7).collect();
        let mut mean = vec![0.0; RAW_FEATURES];
        for s in &tile {
            for (m, x) in mean.iter_mut().zip(s) {
                *m += x / tile.len() as f64;
            }
        }
        per_tile_mean.push(mean);
        samples.extend(tile);
    }

    let n = samples.len() as f64;
    let mut mean = vec![0.0; RAW_FEATURES];
    for s in &samples {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x / n;
        }
    }
    let mut std = vec![0.0; RAW_FEATURES];
    for s in &samples {
        for ((sd, x), m) in std.iter_mut().zip(s).zip(&mean) {
            *sd += (x - m).powi(2) / n;
        }
    }
    let std: Vec<f64> = std.into_iter().map(|v| v.sqrt().max(1e-8)).collect();

    // texture axes: principal components of the Gabor magnitudes alone
    let texture = RAW_FEATURES - 1;
    let mut cov = nalgebra::DMatrix::<f64>::zeros(texture, texture);
    for s in &samples {
        let z = nalgebra::DVector::from_iterator(texture, (0..texture).map(|i| (s[i] - mean[i]) / std[i]));
        cov += &z * z.transpose();
    }
    cov /= n;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..texture).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut intensity = vec![0.0; RAW_FEATURES];
    intensity[texture] = 1.0;
    let mut projection = vec![intensity];
    for &i in &order[..EMBED_CHANNELS - 1] {
        let mut col: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        // deterministic orientation: largest-magnitude weight positive
        let pivot = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
        col.iter_mut().for_each(|v| *v *= pivot.signum());
        col.push(0.0);
        projection.push(col);
    }

    let embed_mean = |raw: &[f64]| -> Vec<f64> {
        projection
            .iter()
            .map(|row| row.iter().zip(raw).zip(&mean).zip(&std).map(|(((w, x), m), d)| w * (x - m) / d).sum())
            .collect()
    };
    let centers: Vec<Vec<f64>> = per_tile_mean.iter().map(|m| embed_mean(m)).collect();
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            acc += centers[i].iter().zip(&centers[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            pairs += 1;
        }
    }
    Ok(ProjectionAsset {
        version: ASSET_VERSION,
        feature_mean: mean,
        feature_std: std,
        projection,
        bank_scale: (acc / pairs as f64).sqrt(),
    })
}

/// Mean per-pixel Φ distance between two same-size images, in units of the
/// bank's typical between-screentone distance.
pub fn svae_distance(emb: &ScreenEmbedding, a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    svae_distance_masked(emb, a, b, None)
}

/// As [`svae_distance`], averaging only where `mask` is set.
pub fn svae_distance_masked(
    emb: &ScreenEmbedding,
    a: &Image,
    b: &Image,
    mask: Option<&crate::imaging::BitonalMask>,
) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (pa, pb) = (emb.embed(a)?, emb.embed(b)?);
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if mask.is_some_and(|m| !m.get(y, x)) {
                continue;
            }
            let d2: f64 = (0..EMBED_CHANNELS).map(|c| (pa.get_c(y, x, c) - pb.get_c(y, x, c)).powi(2)).sum();
            acc += d2.sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(acc / count as f64 / emb.asset.bank_scale)
}
