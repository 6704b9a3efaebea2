//! Parametric bitonal screentones and region-labelled synthetic pages.
//!
//! Regular screens threshold a rotated periodic carrier; the threshold is
//! taken from the carrier's continuous value distribution so coverage tracks
//! `tone` independently of raster size. Pixels straddling a dot edge are
//! resolved by error diffusion of their covered area.
//! Stochastic screens threshold band-passed hash noise at its empirical
//! quantile.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{convolve_separable, gaussian_kernel_1d, Image};

pub use crate::imaging::BitonalMask;

/// Label reserved for structural line pixels in a [`RegionLabels`] raster.
pub const LINE_LABEL: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScreentoneKind {
    Dot,
    Line,
    Checker,
    Stochastic,
}

impl ScreentoneKind {
    pub const ALL: [ScreentoneKind; 4] = [
        ScreentoneKind::Dot,
        ScreentoneKind::Line,
        ScreentoneKind::Checker,
        ScreentoneKind::Stochastic,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreentoneSpec {
    pub kind: ScreentoneKind,
    /// Pattern period in pixels (grain size for stochastic screens).
    pub period: f64,
    /// Screen angle in degrees.
    pub angle: f64,
    /// Target black coverage.
    pub tone: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ScreentoneSpec {
    pub fn new(kind: ScreentoneKind, period: f64, angle: f64, tone: f64) -> Self {
        Self {
            kind,
            period,
            angle,
            tone,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.period >= 2.0) || !self.period.is_finite() {
            return Err(Error::param(format!(
                "screentone period must be >= 2, got {}",
                self.period
            )));
        }
        if !(0.0..=1.0).contains(&self.tone) {
            return Err(Error::param(format!("tone must lie in [0, 1], got {}", self.tone)));
        }
        if !self.angle.is_finite() {
            return Err(Error::param("angle must be finite"));
        }
        Ok(())
    }

    /// Fundamental spatial frequency in cycles per pixel.
    pub fn frequency(&self) -> f64 {
        1.0 / self.period
    }
}

/// Renders a strictly bitonal screentone over a `h x w` canvas whose origin
/// is the canvas' top-left corner.
pub fn render_screentone(spec: &ScreentoneSpec, h: usize, w: usize) -> Result<Image> {
    spec.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::param("canvas must be non-empty"));
    }
    if spec.tone <= 0.0 {
        return Ok(Image::filled(h, w, 1, 1.0));
    }
    if spec.tone >= 1.0 {
        return Ok(Image::filled(h, w, 1, 0.0));
    }
    if spec.kind == ScreentoneKind::Stochastic {
        return Ok(render_stochastic(spec, h, w));
    }

    let threshold = carrier_threshold(spec.kind, spec.tone);
    let theta = spec.angle.to_radians();
    let (sin, cos) = theta.sin_cos();
    let k = 2.0 * std::f64::consts::PI / spec.period;
    let ss = ((16.0 / spec.period).ceil() as usize).max(4);
    let covered = Image::from_fn(h, w, |y, x| {
        let mut inside = 0usize;
        for sy in 0..ss {
            for sx in 0..ss {
                // stratified jitter breaks the ties a regular subsample grid
                // has with short periods
                let cell = (sy * ss + sx) as u64;
                let jy = hash_unit(cell, y & 7, x & 7);
                let jx = hash_unit(cell ^ 0xa5a5, y & 7, x & 7);
                let py = y as f64 + (sy as f64 + jy) / ss as f64;
                let px = x as f64 + (sx as f64 + jx) / ss as f64;
                let u = k * (px * cos + py * sin);
                let v = k * (-px * sin + py * cos);
                if carrier(spec.kind, u, v) > threshold {
                    inside += 1;
                }
            }
        }
        inside as f64 / (ss * ss) as f64
    });
    Ok(error_diffuse(&covered))
}

/// Floyd-Steinberg binarization of a black-coverage field. Fully covered or
/// empty pixels pass through unchanged; partially covered ones turn black in
/// proportion to their area, so coverage stays on target for periods of only
/// a few pixels. Errors only travel forward in raster order, so the top rows
/// of a taller render equal a shorter render of the same pattern.
fn error_diffuse(covered: &Image) -> Image {
    let (h, w) = covered.dims();
    let mut acc = covered.data().to_vec();
    let mut out = Image::filled(h, w, 1, 1.0);
    for y in 0..h {
        for x in 0..w {
            let v = acc[y * w + x];
            let black = v >= 0.5;
            if black {
                out.set(y, x, 0.0);
            }
            let err = v - if black { 1.0 } else { 0.0 };
            if err == 0.0 {
                continue;
            }
            // the rightward share continues along raster order, wrapping to
            // the start of the next row
            if y * w + x + 1 < h * w {
                acc[y * w + x + 1] += err * 7.0 / 16.0;
            }
            if y + 1 < h {
                if x > 0 {
                    acc[(y + 1) * w + x - 1] += err * 3.0 / 16.0;
                }
                acc[(y + 1) * w + x] += err * 5.0 / 16.0;
                if x + 1 < w {
                    acc[(y + 1) * w + x + 1] += err / 16.0;
                }
            }
        }
    }
    out
}

fn carrier(kind: ScreentoneKind, u: f64, v: f64) -> f64 {
    match kind {
        ScreentoneKind::Line => u.cos(),
        ScreentoneKind::Dot => 0.5 * (u.cos() + v.cos()),
        ScreentoneKind::Checker => u.sin() * v.sin(),
        ScreentoneKind::Stochastic => unreachable!("stochastic screens have no carrier"),
    }
}

/// Carrier level above which a fraction `tone` of one period cell lies.
fn carrier_threshold(kind: ScreentoneKind, tone: f64) -> f64 {
    if kind == ScreentoneKind::Line {
        return (std::f64::consts::PI * tone).cos();
    }
    const GRID: usize = 256;
    let step = 2.0 * std::f64::consts::PI / GRID as f64;
    let mut values = Vec::with_capacity(GRID * GRID);
    for i in 0..GRID {
        for j in 0..GRID {
            let u = (i as f64 + 0.5) * step;
            let v = (j as f64 + 0.5) * step;
            values.push(carrier(kind, u, v));
        }
    }
    quantile(&mut values, 1.0 - tone)
}

fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let idx = ((values.len() as f64 * q).round() as usize).min(values.len() - 1);
    if idx == 0 {
        values[0] - 1.0
    } else {
        0.5 * (values[idx - 1] + values[idx])
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_unit(seed: u64, y: usize, x: usize) -> f64 {
    let h = splitmix64(splitmix64(seed ^ (y as u64).wrapping_mul(0x1000_0000_01b3)) ^ x as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn render_stochastic(spec: &ScreentoneSpec, h: usize, w: usize) -> Image {
    let noise = Image::from_fn(h, w, |y, x| hash_unit(spec.seed, y, x));
    let band = |sigma: f64| {
        let size = 2 * (3.0 * sigma).ceil() as usize + 1;
        let taps = gaussian_kernel_1d(size, sigma).expect("odd size, positive sigma");
        convolve_separable(&noise, &taps, &taps)
    };
    let fine = band(spec.period / 6.0);
    let coarse = band(spec.period / 3.0);
    let field: Vec<f64> = fine.data().iter().zip(coarse.data()).map(|(a, b)| a - b).collect();
    let mut sorted = field.clone();
    let threshold = quantile(&mut sorted, 1.0 - spec.tone);
    let data = field.iter().map(|&v| if v > threshold { 0.0 } else { 1.0 }).collect();
    Image::from_vec(h, w, 1, data).expect("same dims")
}

/// Per-pixel region index; structural lines carry [`LINE_LABEL`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionLabels {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RegionLabels {
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(height * width, data.len()));
        }
        Ok(Self { height, width, data })
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
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::param("label crop out of bounds"));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    /// Nearest-neighbour resize, used to carry labels to another resolution.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            let ys = (((y as f64 + 0.5) * self.height as f64 / h as f64) as usize).min(self.height - 1);
            for x in 0..w {
                let xs = (((x as f64 + 0.5) * self.width as f64 / w as f64) as usize).min(self.width - 1);
                data.push(self.data[ys * self.width + xs]);
            }
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }

    /// Distinct labels present, ascending (the line label last).
    pub fn present_labels(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| seen[v as usize]).collect()
    }

    pub fn to_image(&self) -> Image {
        let data = self.data.iter().map(|&v| v as f64 / 255.0).collect();
        Image::from_vec(self.height, self.width, 1, data).expect("same dims")
    }

    pub fn from_image(img: &Image) -> Self {
        Self {
            height: img.height(),
            width: img.width(),
            data: img.data().iter().map(|&v| (v * 255.0).round() as u8).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Region {
    pub mask: BitonalMask,
    pub spec: ScreentoneSpec,
}

#[derive(Clone, Debug)]
pub struct PageLayout {
    pub height: usize,
    pub width: usize,
    pub regions: Vec<Region>,
    pub line_mask: BitonalMask,
}

impl PageLayout {
    pub fn specs(&self) -> Vec<ScreentoneSpec> {
        self.regions.iter().map(|r| r.spec.clone()).collect()
    }
}

/// Paints every region with its screentone, then draws the line mask in
/// black on top.
pub fn compose_page(layout: &PageLayout) -> Result<(Image, RegionLabels)> {
    let (h, w) = (layout.height, layout.width);
    if layout.regions.len() >= LINE_LABEL as usize {
        return Err(Error::Layout(format!("too many regions: {}", layout.regions.len())));
    }
    if layout.line_mask.dims() != (h, w) {
        return Err(Error::Layout("line mask size differs from page".into()));
    }
    let mut owner: Vec<Option<u8>> = vec![None; h * w];
    for (i, region) in layout.regions.iter().enumerate() {
        if region.mask.dims() != (h, w) {
            return Err(Error::Layout(format!("region {i} mask size differs from page")));
        }
        region.spec.validate()?;
        for (p, &on) in region.mask.data().iter().enumerate() {
            if on != 0 {
                if let Some(j) = owner[p] {
                    return Err(Error::Layout(format!("regions {j} and {i} overlap")));
                }
                owner[p] = Some(i as u8);
            }
        }
    }

    let mut page = Image::filled(h, w, 1, 1.0);
    let mut labels = vec![LINE_LABEL; h * w];
    for (i, region) in layout.regions.iter().enumerate() {
        let tone = render_screentone(&region.spec, h, w)?;
        for p in 0..h * w {
            if owner[p] == Some(i as u8) {
                page.data_mut()[p] = tone.data()[p];
                labels[p] = i as u8;
            }
        }
    }
    for (p, &line) in layout.line_mask.data().iter().enumerate() {
        if line != 0 {
            page.data_mut()[p] = 0.0;
            labels[p] = LINE_LABEL;
        } else if owner[p].is_none() {
            return Err(Error::Layout(format!(
                "pixel ({}, {}) is covered by neither a region nor a line",
                p / w,
                p % w
            )));
        }
    }
    Ok((page, RegionLabels::from_vec(h, w, labels)?))
}

/// How region screentones are drawn by [`random_layout_with`].
#[derive(Clone, Debug)]
pub enum SpecSampler {
    /// Kind uniform over all four, period in `[2, 12]`, any angle, tone in
    /// `[0.1, 0.9]`.
    Uniform,
    /// Each region picks one entry of a fixed palette.
    Palette(Vec<ScreentoneSpec>),
}

#[derive(Clone, Debug)]
pub struct LayoutOptions {
    pub n_regions: (usize, usize),
    /// Width of region boundary strokes in pixels.
    pub line_width: usize,
    pub sampler: SpecSampler,
}

impl Default for LayoutOptions {
    fn default() -> Self {
        Self {
            n_regions: (2, 6),
            line_width: 2,
            sampler: SpecSampler::Uniform,
        }
    }
}

pub fn random_layout(h: usize, w: usize, seed: u64, n_regions: (usize, usize)) -> Result<PageLayout> {
    random_layout_with(
        h,
        w,
        seed,
        &LayoutOptions {
            n_regions,
            ..Default::default()
        },
    )
}

/// Voronoi partition of the page into screentone regions, with region
/// boundaries drawn as structural lines. Deterministic in `seed`.
pub fn random_layout_with(h: usize, w: usize, seed: u64, opts: &LayoutOptions) -> Result<PageLayout> {
    if h < 64 || w < 64 {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min: 64,
        });
    }
    let (lo, hi) = opts.n_regions;
    if lo == 0 || lo > hi || hi >= LINE_LABEL as usize {
        return Err(Error::param(format!("invalid region count range ({lo}, {hi})")));
    }
    if let SpecSampler::Palette(p) = &opts.sampler {
        if p.is_empty() {
            return Err(Error::param("empty screentone palette"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(lo..=hi);
    let sites: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)))
        .collect();
    let specs: Vec<ScreentoneSpec> = (0..n)
        .map(|_| match &opts.sampler {
            SpecSampler::Uniform => ScreentoneSpec {
                kind: ScreentoneKind::ALL[rng.random_range(0..4)],
                period: rng.random_range(2.0..=12.0),
                angle: rng.random_range(0.0..180.0),
                tone: rng.random_range(0.1..=0.9),
                seed: rng.random(),
            },
            SpecSampler::Palette(p) => {
                let mut s = p[rng.random_range(0..p.len())].clone();
                s.seed = rng.random();
                s
            }
        })
        .collect();

    let mut cell = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (yc, xc) = (y as f64 + 0.5, x as f64 + 0.5);
            let best = sites
                .iter()
                .enumerate()
                .map(|(i, &(sy, sx))| (i, (yc - sy).powi(2) + (xc - sx).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .unwrap();
            cell[y * w + x] = best as u8;
        }
    }

    let r = (opts.line_width / 2).max(if opts.line_width > 0 { 1 } else { 0 }) as isize;
    let line_mask = BitonalMask::from_fn(h, w, |y, x| {
        if r == 0 {
            return false;
        }
        let own = cell[y * w + x];
        // a boundary sits between differing neighbours; mark pixels within
        // `r` of one on the low side and `r - 1` on the high side
        for dy in -(r - 1)..=r {
            for dx in -(r - 1)..=r {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                if cell[ny as usize * w + nx as usize] != own {
                    return true;
                }
            }
        }
        false
    });

    let regions = specs
        .into_iter()
        .enumerate()
        .map(|(i, spec)| Region {
            mask: BitonalMask::from_fn(h, w, |y, x| cell[y * w + x] == i as u8 && !line_mask.get(y, x)),
            spec,
        })
        .collect();
    Ok(PageLayout {
        height: h,
        width: w,
        regions,
        line_mask,
    })
}
