//! Scale estimation network: strided residual blocks with channel and
//! spatial attention, global pooling, and a bounded scalar head. Per-patch
//! estimates are fused by confidence-weighted voting.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::ops::{global_avg_pool, global_max_pool, image_to_tensor, leaky_relu, sigmoid};
use crate::nn::{Checkpoint, Conv2d, ConvGeom, Linear, ParamStore};

pub const CHECKPOINT_KIND: &str = "se-net";
const SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeNetConfig {
    pub n_downsample: usize,
    pub base_channels: usize,
    pub cbam_reduction: usize,
    pub s_min: f64,
    pub s_max: f64,
}

impl Default for SeNetConfig {
    fn default() -> Self {
        Self {
            n_downsample: 4,
            base_channels: 32,
            cbam_reduction: 8,
            s_min: 1.0,
            s_max: 4.0,
        }
    }
}

impl SeNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_downsample == 0 || self.base_channels == 0 || self.cbam_reduction == 0 {
            return Err(Error::param("network sizes must be positive"));
        }
        if !(self.s_min >= 1.0 && self.s_min < self.s_max) {
            return Err(Error::param(format!("invalid scale bounds [{}, {}]", self.s_min, self.s_max)));
        }
        Ok(())
    }

    /// Channels after downsample module `i`; doubling twice, then flat.
    pub fn channels(&self, i: usize) -> usize {
        self.base_channels << i.min(2)
    }

    pub fn min_input(&self) -> usize {
        1 << self.n_downsample
    }
}

/// Channel attention from pooled statistics followed by spatial attention
/// from channel-pooled maps.
struct Cbam {
    fc1: Linear,
    fc2: Linear,
    spatial: Conv2d,
}

impl Cbam {
    fn new(ps: &mut ParamStore, name: &str, c: usize, reduction: usize) -> Result<Self> {
        let hidden = (c / reduction).max(1);
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), c, hidden)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, c)?,
            spatial: Conv2d::new(ps, &format!("{name}.spatial"), 2, 1, 7, ConvGeom::same(7))?,
        })
    }

    /// Returns the attended features and the spatial attention map.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, c, _, _) = x.dims4()?;
        let mlp = |v: &Tensor| -> Result<Tensor> { self.fc2.forward(&self.fc1.forward(v)?.relu()?) };
        let gate = sigmoid(&(mlp(&global_avg_pool(x)?)? + mlp(&global_max_pool(x)?)?)?)?;
        let x = x.broadcast_mul(&gate.reshape((n, c, 1, 1))?)?;
        let pooled = Tensor::cat(&[x.mean_keepdim(1)?, x.max_keepdim(1)?], 1)?;
        let att = sigmoid(&self.spatial.forward(&pooled)?)?;
        Ok((x.broadcast_mul(&att)?, att))
    }
}

struct DownModule {
    down: Conv2d,
    conv1: Conv2d,
    conv2: Conv2d,
    cbam: Cbam,
}

impl DownModule {
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = leaky_relu(&self.down.forward(x)?, SLOPE)?;
        let body = self.conv2.forward(&leaky_relu(&self.conv1.forward(&d)?, SLOPE)?)?;
        let (att, map) = self.cbam.forward(&body)?;
        Ok((leaky_relu(&(d + att)?, SLOPE)?, map))
    }
}

/// Batched output: one scale and one confidence per input.
pub struct SeOutput {
    pub scale: Tensor,
    pub confidence: Tensor,
}

pub struct SeNet {
    config: SeNetConfig,
    ps: ParamStore,
    downs: Vec<DownModule>,
    head: Linear,
}

impl SeNet {
    pub fn new(config: SeNetConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(dtype, seed);
        let mut downs = Vec::with_capacity(config.n_downsample);
        let mut c_prev = 1;
        for i in 0..config.n_downsample {
            let c = config.channels(i);
            let p = format!("down{i}");
            downs.push(DownModule {
                down: Conv2d::new(&mut ps, &format!("{p}.down"), c_prev, c, 3, ConvGeom { stride: 2, padding: 1, groups: 1 })?,
                conv1: Conv2d::new(&mut ps, &format!("{p}.conv1"), c, c, 3, ConvGeom::same(3))?,
                conv2: Conv2d::new(&mut ps, &format!("{p}.conv2"), c, c, 3, ConvGeom::same(3))?,
                cbam: Cbam::new(&mut ps, &format!("{p}.cbam"), c, config.cbam_reduction)?,
            });
            c_prev = c;
        }
        let head = Linear::new(&mut ps, "head", c_prev, 1)?;
        Ok(Self { config, ps, downs, head })
    }

    pub fn config(&self) -> &SeNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    pub fn dtype(&self) -> DType {
        self.ps.dtype()
    }

    /// Zeroes the head so every input maps to the centre of the scale range.
    pub fn zero_head(&self) -> Result<()> {
        for name in ["head.weight", "head.bias"] {
            let v = self.ps.get(name).expect("head parameters exist");
            v.set(&v.as_tensor().zeros_like()?)?;
        }
        Ok(())
    }

    /// `x` is an `(n, 1, h, w)` batch in `[0, 1]`.
    pub fn forward(&self, x: &Tensor) -> Result<SeOutput> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 {
            return Err(Error::shape("1 channel", c));
        }
        let min = self.config.min_input();
        if h < min || w < min {
            return Err(Error::ImageTooSmall { height: h, width: w, min });
        }
        let mut f = (x - 0.5)?;
        let mut map = None;
        for m in &self.downs {
            let (next, att) = m.forward(&f)?;
            f = next;
            map = Some(att);
        }
        let logit = self.head.forward(&global_avg_pool(&f)?)?.squeeze(1)?;
        let span = self.config.s_max - self.config.s_min;
        let scale = ((sigmoid(&logit)? * span)? + self.config.s_min)?;
        let confidence = map.expect("at least one module").flatten_from(1)?.mean(D::Minus1)?;
        Ok(SeOutput { scale, confidence })
    }

    /// Scale and confidence for one image.
    pub fn predict(&self, img: &Image) -> Result<(f64, f64)> {
        let x = image_to_tensor(img, self.dtype(), &Device::Cpu)?;
        let out = self.forward(&x)?;
        let s = out.scale.to_dtype(DType::F64)?.to_vec1::<f64>()?[0];
        let c = out.confidence.to_dtype(DType::F64)?.to_vec1::<f64>()?[0];
        Ok((s, c))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.to_string(),
            config: serde_json::to_value(&self.config)?,
            params: self.ps.snapshot(),
            train_state: None,
            optimizer: Default::default(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: SeNetConfig = serde_json::from_value(ck.config.clone())?;
        let net = Self::new(config, dtype, 0)?;
        net.ps.load(&ck.params)?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, DType::F32)
    }
}

/// `|s_y - s_gt|`.
pub fn scale_loss(s_y: f64, s_gt: f64) -> f64 {
    (s_y - s_gt).abs()
}

/// Mean absolute deviation of patch scales from their mean.
pub fn consistency_loss(patch_scales: &[f64]) -> Result<f64> {
    if patch_scales.len() < 2 {
        return Err(Error::param("consistency needs at least two patches"));
    }
    let m = patch_scales.iter().sum::<f64>() / patch_scales.len() as f64;
    Ok(patch_scales.iter().map(|s| (s - m).abs()).sum::<f64>() / patch_scales.len() as f64)
}

/// Weight of the consistency term.
pub const CONSISTENCY_WEIGHT: f64 = 0.1;

/// Supervised objective `L_scl + 0.1 L_cons`, or `0.1 L_cons` without a
/// ground-truth scale.
pub fn se_total_loss(s_y: f64, s_gt: Option<f64>, patch_scales: &[f64]) -> Result<f64> {
    let cons = CONSISTENCY_WEIGHT * consistency_loss(patch_scales)?;
    Ok(s_gt.map_or(0.0, |g| scale_loss(s_y, g)) + cons)
}

/// Batched scale loss: mean over `(pages, patches)` of `|s - s_gt(page)|`.
pub fn scale_loss_t(scales: &Tensor, s_gt: &Tensor) -> Result<Tensor> {
    Ok(scales.broadcast_sub(&s_gt.unsqueeze(1)?)?.abs()?.mean_all()?)
}

/// Batched consistency loss over a `(pages, patches)` tensor.
pub fn consistency_loss_t(scales: &Tensor) -> Result<Tensor> {
    if scales.dim(1)? < 2 {
        return Err(Error::param("consistency needs at least two patches"));
    }
    let mean = scales.mean_keepdim(1)?;
    Ok(scales.broadcast_sub(&mean)?.abs()?.mean_all()?)
}

/// Batched total loss on a `(pages, patches)` scale tensor.
pub fn se_total_loss_t(scales: &Tensor, s_gt: Option<&Tensor>, alpha: f64) -> Result<Tensor> {
    let cons = (consistency_loss_t(scales)? * alpha)?;
    match s_gt {
        Some(g) => Ok((scale_loss_t(scales, g)? + cons)?),
        None => Ok(cons),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchVote {
    pub origin: (usize, usize),
    pub scale: f64,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleEstimate {
    pub scale: f64,
    pub per_patch: Vec<PatchVote>,
}

/// Confidences closer than this count as uninformative.
const CONFIDENCE_TIE: f64 = 1e-3;

/// Confidence-weighted mean, or the median when confidences carry no
/// information.
pub fn vote(votes: &[(f64, f64)]) -> Result<f64> {
    if votes.is_empty() {
        return Err(Error::param("no votes"));
    }
    let (lo, hi) = votes
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, c)| (lo.min(c), hi.max(c)));
    let total: f64 = votes.iter().map(|&(_, c)| c).sum();
    if hi - lo <= CONFIDENCE_TIE || total <= 0.0 {
        let mut s: Vec<f64> = votes.iter().map(|&(s, _)| s).collect();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        return Ok(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) });
    }
    Ok(votes.iter().map(|&(s, c)| s * c).sum::<f64>() / total)
}

/// Patch origins on a near-square grid with seeded jitter of up to an
/// eighth of the patch side.
pub fn patch_origins(h: usize, w: usize, m: usize, patch: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if h < patch || w < patch {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min: patch,
        });
    }
    if m == 0 {
        return Err(Error::param("patch count must be positive"));
    }
    let gx = (m as f64).sqrt().ceil() as usize;
    let gy = m.div_ceil(gx);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = (patch / 8) as i64;
    let place = |i: usize, g: usize, span: usize, rng: &mut ChaCha8Rng| -> usize {
        let base = if g <= 1 {
            span / 2
        } else {
            (i as f64 * span as f64 / (g - 1) as f64).round() as usize
        };
        let j = if jitter > 0 { rng.random_range(-jitter..=jitter) } else { 0 };
        (base as i64 + j).clamp(0, span as i64) as usize
    };
    Ok((0..m)
        .map(|i| {
            let y = place(i / gx, gy, h - patch, &mut rng);
            let x = place(i % gx, gx, w - patch, &mut rng);
            (y, x)
        })
        .collect())
}

/// Runs the network on `m` patches and fuses them by [`vote`].
pub fn estimate_scale_voted(net: &SeNet, img: &Image, m: usize, patch: usize, seed: u64) -> Result<ScaleEstimate> {
    img.ensure_single_channel()?;
    let origins = patch_origins(img.height(), img.width(), m, patch, seed)?;
    let crops = origins
        .iter()
        .map(|&(y, x)| img.crop(y, x, patch, patch))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Image> = crops.iter().collect();
    let batch = crate::nn::ops::images_to_batch(&refs, net.dtype(), &Device::Cpu)?;
    let out = net.forward(&batch)?;
    let scales = out.scale.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let confs = out.confidence.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let per_patch: Vec<PatchVote> = origins
        .into_iter()
        .zip(scales.iter().zip(&confs))
        .map(|(origin, (&scale, &confidence))| PatchVote {
            origin,
            scale,
            confidence,
        })
        .collect();
    let votes: Vec<(f64, f64)> = per_patch.iter().map(|p| (p.scale, p.confidence)).collect();
    Ok(ScaleEstimate {
        scale: vote(&votes)?,
        per_patch,
    })
}
