//! Blur, downsample, noise and JPEG degradation of clean pages, plus the
//! randomized sampler used to build paired training data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{decode_jpeg, encode_jpeg, gaussian_blur, resample, round_half_up, Image, ResampleFilter};

/// Smallest degraded raster accepted on either axis.
pub const MIN_DEGRADED_SIZE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub blur_kernel_size: usize,
    /// Gaussian blur sigma; 0 disables blurring.
    pub blur_sigma: f64,
    /// Downsampling factor, at least 1.
    pub scale: f64,
    pub jpeg_quality: Option<u8>,
    /// Additive Gaussian noise in 8-bit units.
    pub noise_sigma: f64,
    #[serde(default)]
    pub filter: ResampleFilter,
}

impl DegradationParams {
    /// Pure downsampling by `scale` with the area filter.
    pub fn downsample_only(scale: f64) -> Self {
        Self {
            blur_kernel_size: 5,
            blur_sigma: 0.0,
            scale,
            jpeg_quality: None,
            noise_sigma: 0.0,
            filter: ResampleFilter::Area,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 1.0) || !self.scale.is_finite() {
            return Err(Error::param(format!("scale must be >= 1, got {}", self.scale)));
        }
        if let Some(q) = self.jpeg_quality {
            if !(50..=100).contains(&q) {
                return Err(Error::param(format!("jpeg quality must lie in [50, 100], got {q}")));
            }
        }
        if !(self.noise_sigma >= 0.0) || !(self.blur_sigma >= 0.0) {
            return Err(Error::param("noise and blur sigmas must be non-negative"));
        }
        if self.blur_sigma > 0.0 && self.blur_kernel_size % 2 == 0 {
            return Err(Error::param("blur kernel size must be odd"));
        }
        Ok(())
    }

    /// Degraded raster size for a `h x w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (round_half_up(h as f64 / self.scale), round_half_up(w as f64 / self.scale))
    }
}

/// Applies blur, downsampling, additive noise and a JPEG round-trip, in that
/// order. Noise is the only seeded stage.
pub fn degrade(gt: &Image, p: &DegradationParams, seed: u64) -> Result<Image> {
    p.validate()?;
    gt.ensure_single_channel()?;
    let (oh, ow) = p.output_dims(gt.height(), gt.width());
    if oh < MIN_DEGRADED_SIZE || ow < MIN_DEGRADED_SIZE {
        return Err(Error::ImageTooSmall {
            height: oh,
            width: ow,
            min: MIN_DEGRADED_SIZE,
        });
    }

    let blurred;
    let src = if p.blur_sigma > 0.0 {
        blurred = gaussian_blur(gt, p.blur_kernel_size, p.blur_sigma)?;
        &blurred
    } else {
        gt
    };
    let mut out = resample(src, oh, ow, p.filter)?;

    if p.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, p.noise_sigma / 255.0).expect("finite positive sigma");
        for v in out.data_mut() {
            *v += normal.sample(&mut rng);
        }
        out.clamp_unit();
    }
    if let Some(q) = p.jpeg_quality {
        out = decode_jpeg(&encode_jpeg(&out, q)?)?;
    }
    out.clamp_unit();
    Ok(out)
}

/// Draws a random degradation: scale uniform on `[1, 4]`; blur, noise and
/// JPEG each applied with probability one half.
pub fn sample_params(seed: u64) -> DegradationParams {
    sample_params_in(seed, (1.0, 4.0))
}

/// As [`sample_params`] with a custom scale interval.
pub fn sample_params_in(seed: u64, scale_range: (f64, f64)) -> DegradationParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = if scale_range.1 > scale_range.0 {
        rng.random_range(scale_range.0..=scale_range.1)
    } else {
        scale_range.0
    };
    let blur_sigma = if rng.random_bool(0.5) {
        rng.random_range(0.5..=1.5)
    } else {
        0.0
    };
    let noise_sigma = if rng.random_bool(0.5) {
        rng.random_range(5.0..=15.0)
    } else {
        0.0
    };
    let jpeg_quality = if rng.random_bool(0.5) {
        Some(rng.random_range(50..=100u8))
    } else {
        None
    };
    DegradationParams {
        blur_kernel_size: 5,
        blur_sigma,
        scale,
        jpeg_quality,
        noise_sigma,
        filter: ResampleFilter::Area,
    }
}
