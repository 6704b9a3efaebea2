//! Evaluation: scale accuracy statistics and masked restoration quality.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, BitonalMask, Image};
use crate::screen_embedding::{svae_distance_masked, ScreenEmbedding};
use crate::screentone::{RegionLabels, ScreentoneKind, ScreentoneSpec, LINE_LABEL};

pub const PSNR_CAP: f64 = 100.0;
const MSE_FLOOR: f64 = 1e-10;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Relative error regarded as a hit.
pub const HIT_THRESHOLD: f64 = 0.02;
/// Largest scale at which stochastic screens stay identifiable.
pub const STOCHASTIC_MAX_SCALE: f64 = 2.0;

fn check_pair(a: &Image, b: &Image, mask: Option<&BitonalMask>) -> Result<()> {
    a.ensure_same_shape(b)?;
    a.ensure_single_channel()?;
    if let Some(m) = mask {
        if m.dims() != a.dims() {
            return Err(Error::shape(format!("mask {:?}", a.dims()), format!("{:?}", m.dims())));
        }
        if m.is_empty() {
            return Err(Error::EmptyMask);
        }
    }
    Ok(())
}

fn selected(mask: Option<&BitonalMask>, p: usize) -> bool {
    mask.is_none_or(|m| m.data()[p] != 0)
}

/// Peak signal-to-noise ratio in dB for unit-range images over `mask`.
pub fn psnr(a: &Image, b: &Image, mask: Option<&BitonalMask>) -> Result<f64> {
    check_pair(a, b, mask)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if selected(mask, p) {
            sum += (x - y).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mse = sum / n as f64;
    if mse < MSE_FLOOR {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Per-pixel structural similarity map with Gaussian local statistics.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Image> {
    check_pair(a, b, None)?;
    let blur = |img: &Image| gaussian_blur(img, SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &Image, q: &Image| Image::from_fn(p.height(), p.width(), |y, x| p.get(y, x) * q.get(y, x));
    let (ma, mb) = (blur(a)?, blur(b)?);
    let (saa, sbb, sab) = (blur(&prod(a, a))?, blur(&prod(b, b))?, blur(&prod(a, b))?);
    Ok(Image::from_fn(a.height(), a.width(), |y, x| {
        let (ua, ub) = (ma.get(y, x), mb.get(y, x));
        let va = saa.get(y, x) - ua * ua;
        let vb = sbb.get(y, x) - ub * ub;
        let cov = sab.get(y, x) - ua * ub;
        ((2.0 * ua * ub + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ua * ua + ub * ub + SSIM_C1) * (va + vb + SSIM_C2))
    }))
}

/// Mean of the SSIM map over windows centred on `mask`.
pub fn ssim(a: &Image, b: &Image, mask: Option<&BitonalMask>) -> Result<f64> {
    check_pair(a, b, mask)?;
    let map = ssim_map(a, b)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, v) in map.data().iter().enumerate() {
        if selected(mask, p) {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Whether a screen survives downscaling by `s` with its fundamental below
/// the Nyquist limit.
pub fn spec_identifiable(spec: &ScreentoneSpec, s: f64) -> bool {
    match spec.kind {
        ScreentoneKind::Stochastic => s <= STOCHASTIC_MAX_SCALE,
        _ => 1.0 / spec.period < 0.5 / s,
    }
}

/// Pixels whose region stays identifiable at scale `s_gt`; label `i` refers
/// to `specs[i]` and line pixels are always kept.
pub fn identifiability_mask(labels: &RegionLabels, specs: &[ScreentoneSpec], s_gt: f64) -> Result<BitonalMask> {
    let mut keep = [false; 256];
    keep[LINE_LABEL as usize] = true;
    for l in labels.present_labels() {
        if l == LINE_LABEL {
            continue;
        }
        let spec = specs
            .get(l as usize)
            .ok_or_else(|| Error::param(format!("no screentone for region label {l}")))?;
        keep[l as usize] = spec_identifiable(spec, s_gt);
    }
    let (h, w) = labels.dims();
    Ok(BitonalMask::from_fn(h, w, |y, x| keep[labels.get(y, x) as usize]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleBucket {
    pub name: String,
    pub count: usize,
    pub mean_relative_error: Option<f64>,
    pub accuracy: Option<f64>,
    pub hit_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeStats {
    pub volume: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleEvalReport {
    pub buckets: Vec<ScaleBucket>,
    pub volumes: Vec<VolumeStats>,
    /// Upper bin edges of the relative-error histogram; the last bin is open.
    pub histogram_edges: Vec<f64>,
    pub histogram_counts: Vec<usize>,
}

impl ScaleEvalReport {
    pub fn bucket(&self, name: &str) -> Option<&ScaleBucket> {
        self.buckets.iter().find(|b| b.name == name)
    }

    /// The bucket covering all samples.
    pub fn overall(&self) -> &ScaleBucket {
        self.bucket("[1,4]").expect("overall bucket is always present")
    }
}

pub const SCALE_BUCKETS: [&str; 4] = ["[1,2]", "(2,3]", "(3,4]", "[1,4]"];

fn in_bucket(i: usize, s: f64) -> bool {
    match i {
        0 => s <= 2.0,
        1 => s > 2.0 && s <= 3.0,
        2 => s > 3.0,
        _ => true,
    }
}

/// Accuracy `1 - mean relative error` per ground-truth scale range, the
/// fraction of relative errors below 2%, an error histogram, and the mean
/// and population deviation of predictions per volume.
pub fn scale_eval(preds: &[f64], gts: &[f64], volume_ids: &[String]) -> Result<ScaleEvalReport> {
    if preds.is_empty() {
        return Err(Error::param("no predictions"));
    }
    if preds.len() != gts.len() || preds.len() != volume_ids.len() {
        return Err(Error::shape(format!("{} entries", preds.len()), format!("{} / {}", gts.len(), volume_ids.len())));
    }
    if gts.iter().any(|&g| !(g > 0.0)) {
        return Err(Error::param("ground-truth scales must be positive"));
    }
    let rel: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| (p - g).abs() / g).collect();
    let buckets = SCALE_BUCKETS
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let errs: Vec<f64> = rel.iter().zip(gts).filter(|(_, &g)| in_bucket(i, g)).map(|(&e, _)| e).collect();
            let n = errs.len();
            let mre = (n > 0).then(|| errs.iter().sum::<f64>() / n as f64);
            ScaleBucket {
                name: name.to_string(),
                count: n,
                mean_relative_error: mre,
                accuracy: mre.map(|m| (1.0 - m).max(0.0)),
                hit_fraction: (n > 0).then(|| errs.iter().filter(|&&e| e < HIT_THRESHOLD).count() as f64 / n as f64),
            }
        })
        .collect();
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (p, v) in preds.iter().zip(volume_ids) {
        groups.entry(v.as_str()).or_default().push(*p);
    }
    let volumes = groups
        .into_iter()
        .map(|(v, ps)| {
            let n = ps.len() as f64;
            let mean = ps.iter().sum::<f64>() / n;
            let std = (ps.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt();
            VolumeStats {
                volume: v.to_string(),
                count: ps.len(),
                mean,
                std,
            }
        })
        .collect();
    let histogram_edges: Vec<f64> = (1..=10).map(|i| i as f64 * 0.01).chain([f64::INFINITY]).collect();
    let mut histogram_counts = vec![0; histogram_edges.len()];
    for e in &rel {
        let bin = histogram_edges.iter().position(|&edge| *e < edge).unwrap_or(histogram_edges.len() - 1);
        histogram_counts[bin] += 1;
    }
    Ok(ScaleEvalReport {
        buckets,
        volumes,
        histogram_edges,
        histogram_counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub svae: f64,
    pub mask_coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestoreEvalReport {
    pub images: Vec<ImageScores>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_svae: f64,
    pub mean_mask_coverage: f64,
}

/// One restored image with its reference and evaluation mask.
pub struct RestoreSample<'a> {
    pub id: String,
    pub restored: &'a Image,
    pub gt: &'a Image,
    pub mask: &'a BitonalMask,
}

/// Masked PSNR, SSIM and SVAE per image and their means. Images whose mask
/// is empty are skipped.
pub fn restore_eval(samples: &[RestoreSample<'_>], emb: &ScreenEmbedding) -> Result<RestoreEvalReport> {
    let mut images = Vec::new();
    for s in samples {
        if s.mask.is_empty() {
            continue;
        }
        let mask = Some(s.mask);
        images.push(ImageScores {
            id: s.id.clone(),
            psnr: psnr(s.restored, s.gt, mask)?,
            ssim: ssim(s.restored, s.gt, mask)?,
            svae: svae_distance_masked(emb, s.restored, s.gt, mask)?,
            mask_coverage: s.mask.count_ones() as f64 / (s.gt.height() * s.gt.width()) as f64,
        });
    }
    if images.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = images.len() as f64;
    let avg = |f: fn(&ImageScores) -> f64| images.iter().map(f).sum::<f64>() / n;
    Ok(RestoreEvalReport {
        mean_psnr: avg(|i| i.psnr),
        mean_ssim: avg(|i| i.ssim),
        mean_svae: avg(|i| i.svae),
        mean_mask_coverage: avg(|i| i.mask_coverage),
        images,
    })
}
