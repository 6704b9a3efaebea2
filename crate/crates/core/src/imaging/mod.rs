//! Raster containers and the handful of pixel operations every other
//! module leans on: Gaussian blur, resampling and binarization.
//!
//! Pixel convention: 0 is black ink, 1 is white paper. All borders are
//! handled by mirror reflection without edge repetition (`dcb|abcd|cba`).

mod io;

pub use io::{decode_jpeg, encode_jpeg, load_image, save_image, save_jpeg};

use crate::error::{Error, Result};

/// Dense row-major raster with interleaved channels.
///
/// Single-channel images carry manga intensities in `[0, 1]`; multi-channel
/// images are used for screentone embeddings and are unbounded.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height >= 1 && width >= 1 && channels >= 1, "empty image");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::param(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(height * width * channels, data.len()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a single-channel image from a per-pixel function of `(y, x)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut img = Self::new(height, width, 1);
        for y in 0..height {
            for x in 0..width {
                img.data[y * width + x] = f(y, x);
            }
        }
        img
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels]
    }

    #[inline]
    pub fn get_c(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels] = v;
    }

    #[inline]
    pub fn set_c(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Fraction of black ink, `1 - mean`, for a single-channel page.
    pub fn black_coverage(&self) -> f64 {
        1.0 - self.mean()
    }

    pub fn is_in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn is_bitonal(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> Image {
        assert!(c < self.channels);
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || y0 + height > self.height || x0 + width > self.width {
            return Err(Error::param(format!(
                "crop {height}x{width}+{y0}+{x0} outside {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in y0..y0 + height {
            let row = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[row..row + width * c]);
        }
        Ok(Image {
            height,
            width,
            channels: c,
            data,
        })
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub(crate) fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                format!("{}x{}x{}", self.height, self.width, self.channels),
                format!("{}x{}x{}", other.height, other.width, other.channels),
            ))
        }
    }

    pub(crate) fn ensure_single_channel(&self) -> Result<()> {
        if self.channels == 1 {
            Ok(())
        } else {
            Err(Error::param(format!(
                "expected a single-channel image, got {} channels",
                self.channels
            )))
        }
    }
}

/// Binary raster, every value exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitonalMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BitonalMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x) as u8;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count_ones() == 0
    }

    /// Converts to an image with 1.0 where the mask is set.
    pub fn to_image(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Mirror-reflects an index into `0..n` without repeating the edge sample.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Normalized 1-D Gaussian taps of odd length.
pub fn gaussian_kernel_1d(kernel_size: usize, sigma: f64) -> Result<Vec<f64>> {
    if kernel_size % 2 == 0 {
        return Err(Error::param(format!("kernel size must be odd, got {kernel_size}")));
    }
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::param(format!("sigma must be positive, got {sigma}")));
    }
    let r = (kernel_size / 2) as isize;
    let mut taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    Ok(taps)
}

/// Convolves every channel with a separable kernel under reflect padding.
pub fn convolve_separable(img: &Image, taps_y: &[f64], taps_x: &[f64]) -> Image {
    let (h, w, c) = (img.height, img.width, img.channels);
    let ry = (taps_y.len() / 2) as isize;
    let rx = (taps_x.len() / 2) as isize;
    let mut tmp = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, t) in taps_x.iter().enumerate() {
                    let xs = reflect_index(x as isize + k as isize - rx, w);
                    acc += t * img.data[(y * w + xs) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, t) in taps_y.iter().enumerate() {
                    let ys = reflect_index(y as isize + k as isize - ry, h);
                    acc += t * tmp[(ys * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    Image { data: out, ..*img }
}

/// 2-D Gaussian blur with a normalized `kernel_size x kernel_size` kernel.
pub fn gaussian_blur(img: &Image, kernel_size: usize, sigma: f64) -> Result<Image> {
    let taps = gaussian_kernel_1d(kernel_size, sigma)?;
    Ok(convolve_separable(img, &taps, &taps))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleFilter {
    /// Exact box integration over each destination pixel's footprint.
    #[default]
    Area,
    /// Keys cubic convolution, `a = -0.5`.
    Bicubic,
    Nearest,
}

/// Per-destination-sample list of `(source index, weight)`.
fn axis_weights(n_in: usize, n_out: usize, filter: ResampleFilter) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| match filter {
            ResampleFilter::Area => {
                let a = i as f64 * scale;
                let b = (i + 1) as f64 * scale;
                let mut taps = Vec::new();
                let mut j = a.floor() as usize;
                while (j as f64) < b && j < n_in {
                    let cover = b.min(j as f64 + 1.0) - a.max(j as f64);
                    if cover > 0.0 {
                        taps.push((j, cover / scale));
                    }
                    j += 1;
                }
                taps
            }
            ResampleFilter::Nearest => {
                let j = (((i as f64 + 0.5) * scale).floor() as usize).min(n_in - 1);
                vec![(j, 1.0)]
            }
            ResampleFilter::Bicubic => {
                let src = (i as f64 + 0.5) * scale - 0.5;
                let base = src.floor();
                let t = src - base;
                if t == 0.0 {
                    return vec![(reflect_index(base as isize, n_in), 1.0)];
                }
                (-1..=2)
                    .map(|k| {
                        let j = reflect_index(base as isize + k, n_in);
                        (j, cubic_weight(k as f64 - t))
                    })
                    .collect()
            }
        })
        .collect()
}

fn cubic_weight(d: f64) -> f64 {
    const A: f64 = -0.5;
    let d = d.abs();
    if d <= 1.0 {
        ((A + 2.0) * d - (A + 3.0)) * d * d + 1.0
    } else if d < 2.0 {
        ((A * d - 5.0 * A) * d + 8.0 * A) * d - 4.0 * A
    } else {
        0.0
    }
}

/// Resamples to `target_h x target_w`. Single-channel (manga) images are
/// clamped to `[0, 1]`; multi-channel embeddings are left unbounded.
pub fn resample(img: &Image, target_h: usize, target_w: usize, filter: ResampleFilter) -> Result<Image> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::param(format!(
            "target size must be positive, got {target_h}x{target_w}"
        )));
    }
    let (h, w, c) = (img.height, img.width, img.channels);
    let wy = axis_weights(h, target_h, filter);
    let wx = axis_weights(w, target_w, filter);

    let mut tmp = vec![0.0; h * target_w * c];
    for y in 0..h {
        for (x, taps) in wx.iter().enumerate() {
            for ch in 0..c {
                tmp[(y * target_w + x) * c + ch] = taps
                    .iter()
                    .map(|&(j, wt)| wt * img.data[(y * w + j) * c + ch])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; target_h * target_w * c];
    for (y, taps) in wy.iter().enumerate() {
        for x in 0..target_w {
            for ch in 0..c {
                out[(y * target_w + x) * c + ch] = taps
                    .iter()
                    .map(|&(j, wt)| wt * tmp[(j * target_w + x) * c + ch])
                    .sum();
            }
        }
    }
    let mut res = Image {
        height: target_h,
        width: target_w,
        channels: c,
        data: out,
    };
    if c == 1 {
        res.clamp_unit();
    }
    Ok(res)
}

/// 1 where `v >= threshold`, else 0.
pub fn binarize(img: &Image, threshold: f64) -> BitonalMask {
    BitonalMask {
        height: img.height,
        width: img.width,
        data: img
            .data
            .iter()
            .step_by(img.channels)
            .map(|&v| (v >= threshold) as u8)
            .collect(),
    }
}

/// Rounds half up, the convention used for every fractional raster size.
#[inline]
pub fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor().max(0.0) as usize
}
