//! Restoration network: residual attention features, a confidence map that
//! gates injected noise, and convex-interpolation upsampling to an arbitrary
//! target scale. Also holds the restoration objectives.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{reflect_index, round_half_up, Image};
use crate::nn::ops::{gaussian_blur, image_to_tensor, leaky_relu, resize_nearest, sigmoid, softmax, tensor_to_image};
use crate::nn::{Checkpoint, Conv2d, ConvGeom, ParamStore};
use crate::screen_embedding::{ScreenEmbedding, SuperpixelPartition};

pub const CHECKPOINT_KIND: &str = "mr-net";
pub const MIN_INPUT: usize = 16;
pub const SCALE_MIN: f64 = 1.0;
const SLOPE: f64 = 0.2;
/// Intensity blur window and width.
pub const ITN_KERNEL: usize = 11;
pub const ITN_SIGMA: f64 = 11.0 / 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrNetConfig {
    pub base_channels: usize,
    pub n_ram_blocks: usize,
    pub noise_channels: usize,
    pub upsample_neighborhood: usize,
    pub s_max: f64,
}

impl Default for MrNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            n_ram_blocks: 2,
            noise_channels: 4,
            upsample_neighborhood: 9,
            s_max: 4.0,
        }
    }
}

impl MrNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.noise_channels == 0 {
            return Err(Error::param("channel counts must be positive"));
        }
        if self.n_ram_blocks < 2 {
            return Err(Error::param("at least two attention blocks are required"));
        }
        if self.upsample_neighborhood != 9 {
            return Err(Error::param("only a 3x3 upsampling neighborhood is supported"));
        }
        if !(self.s_max > SCALE_MIN) {
            return Err(Error::param("s_max must exceed 1"));
        }
        Ok(())
    }
}

/// Residual block whose trunk is modulated by a downsampled mask branch.
struct Ram {
    trunk1: Conv2d,
    trunk2: Conv2d,
    mask_down: Conv2d,
    mask_up: Conv2d,
}

impl Ram {
    fn new(ps: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let same = ConvGeom::same(3);
        Ok(Self {
            trunk1: Conv2d::new(ps, &format!("{name}.trunk1"), c, c, 3, same)?,
            trunk2: Conv2d::new(ps, &format!("{name}.trunk2"), c, c, 3, same)?,
            mask_down: Conv2d::new(ps, &format!("{name}.mask_down"), c, c, 3, ConvGeom { stride: 2, padding: 1, groups: 1 })?,
            mask_up: Conv2d::new(ps, &format!("{name}.mask_up"), c, c, 3, same)?,
        })
    }

    /// Returns the block output and its pre-sigmoid attention features.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = x.dims4()?;
        let t = self.trunk2.forward(&leaky_relu(&self.trunk1.forward(x)?, SLOPE)?)?;
        let m = leaky_relu(&self.mask_down.forward(x)?, SLOPE)?;
        let att = self.mask_up.forward(&resize_nearest(&m, h, w)?)?;
        let gated = t.mul(&(sigmoid(&att)? + 1.0)?)?;
        Ok(((x + gated)?, att))
    }
}

/// Per-pixel confidence at input resolution, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap(Image);

impl ConfidenceMap {
    pub fn new(img: Image) -> Result<Self> {
        img.ensure_single_channel()?;
        if !img.is_in_unit_range() {
            return Err(Error::param("confidence values must lie in [0, 1]"));
        }
        Ok(Self(img))
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.0.get(y, x)
    }

    pub fn image(&self) -> &Image {
        &self.0
    }
}

#[derive(Clone, Debug)]
pub struct RestorationOutput {
    pub restored: Image,
    pub confidence: ConfidenceMap,
    pub effective_scale: f64,
}

/// Batched network output.
pub struct MrOutput {
    pub restored: Tensor,
    pub confidence: Tensor,
}

pub struct MrNet {
    config: MrNetConfig,
    ps: ParamStore,
    stem: Conv2d,
    rams: Vec<Ram>,
    conf_head: Conv2d,
    mix: Conv2d,
    logits: Conv2d,
    out1: Conv2d,
    out2: Conv2d,
}

/// Target raster for an input side and scale, rounding halves up.
pub fn target_size(h: usize, w: usize, s: f64) -> (usize, usize) {
    (round_half_up(h as f64 * s), round_half_up(w as f64 * s))
}

impl MrNet {
    pub fn new(config: MrNetConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(dtype, seed);
        let c = config.base_channels;
        let same = ConvGeom::same(3);
        let stem = Conv2d::new(&mut ps, "stem", 2, c, 3, same)?;
        let rams = (0..config.n_ram_blocks)
            .map(|i| Ram::new(&mut ps, &format!("ram{i}"), c))
            .collect::<Result<Vec<_>>>()?;
        let conf_head = Conv2d::new(&mut ps, "conf", c, 1, 1, ConvGeom::default())?;
        let mix = Conv2d::new(&mut ps, "mix", c + config.noise_channels, c, 3, same)?;
        let logits = Conv2d::new(&mut ps, "logits", c, config.upsample_neighborhood, 3, same)?;
        let out1 = Conv2d::new(&mut ps, "out1", c, c, 3, same)?;
        let out2 = Conv2d::new(&mut ps, "out2", c, 1, 3, same)?;
        Ok(Self {
            config,
            ps,
            stem,
            rams,
            conf_head,
            mix,
            logits,
            out1,
            out2,
        })
    }

    pub fn config(&self) -> &MrNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    pub fn dtype(&self) -> DType {
        self.ps.dtype()
    }

    fn check_input(&self, x: &Tensor, s: f64) -> Result<(usize, usize, usize)> {
        if !(SCALE_MIN..=self.config.s_max).contains(&s) {
            return Err(Error::param(format!("scale {s} outside [{SCALE_MIN}, {}]", self.config.s_max)));
        }
        let (n, c, h, w) = x.dims4()?;
        if c != 1 {
            return Err(Error::shape("1 channel", c));
        }
        if h < MIN_INPUT || w < MIN_INPUT {
            return Err(Error::ImageTooSmall {
                height: h,
                width: w,
                min: MIN_INPUT,
            });
        }
        Ok((n, h, w))
    }

    /// Standard normal noise for a batch, drawn from `seed`.
    fn noise(&self, n: usize, h: usize, w: usize, seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * self.config.noise_channels * h * w;
        let z: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Tensor::from_vec(z, (n, self.config.noise_channels, h, w), self.ps.device())?.to_dtype(self.dtype())?)
    }

    /// `x` is an `(n, 1, h, w)` batch in `[0, 1]` restored at scale `s`.
    pub fn forward(&self, x: &Tensor, s: f64, seed: u64) -> Result<MrOutput> {
        self.forward_inner(x, s, seed, None)
    }

    /// Forward pass with the confidence map replaced by a constant.
    pub fn forward_with_confidence(&self, x: &Tensor, s: f64, seed: u64, confidence: f64) -> Result<MrOutput> {
        self.forward_inner(x, s, seed, Some(confidence))
    }

    fn forward_inner(&self, x: &Tensor, s: f64, seed: u64, forced: Option<f64>) -> Result<MrOutput> {
        let (n, h, w) = self.check_input(x, s)?;
        let (th, tw) = target_size(h, w, s);
        let cond = (x.ones_like()? * (s / self.config.s_max))?;
        let input = Tensor::cat(&[(x - 0.5)?, cond], 1)?;
        let f = leaky_relu(&self.stem.forward(&input)?, SLOPE)?;
        let (f, att) = self.rams[0].forward(&f)?;
        let confidence = match forced {
            Some(v) => Tensor::full(v, (n, 1, h, w), x.device())?.to_dtype(x.dtype())?,
            None => sigmoid(&self.conf_head.forward(&att)?)?,
        };
        let z = self.noise(n, h, w, seed)?.broadcast_mul(&(1.0 - &confidence)?)?;
        let mut f = leaky_relu(&self.mix.forward(&Tensor::cat(&[f, z], 1)?)?, SLOPE)?;
        for ram in &self.rams[1..] {
            f = ram.forward(&f)?.0;
        }
        let logits = self.logits.forward(&f)?;
        let up = convex_upsample(&f, &logits, th, tw)?;
        let y = self.out2.forward(&leaky_relu(&self.out1.forward(&up)?, SLOPE)?)?;
        Ok(MrOutput {
            restored: sigmoid(&y)?,
            confidence,
        })
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
        let config: MrNetConfig = serde_json::from_value(ck.config.clone())?;
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

/// Restores one image at scale `s`.
pub fn mr_forward(net: &MrNet, img: &Image, s: f64, seed: u64) -> Result<RestorationOutput> {
    let x = image_to_tensor(img, net.dtype(), &Device::Cpu)?;
    let out = net.forward(&x, s, seed)?;
    let restored = tensor_to_image(&out.restored, 0, 0)?;
    let effective_scale = restored.height() as f64 / img.height() as f64;
    Ok(RestorationOutput {
        restored,
        confidence: ConfidenceMap::new(tensor_to_image(&out.confidence, 0, 0)?)?,
        effective_scale,
    })
}

/// Source sample positions for a resized axis: the pixel-centre source
/// coordinate and the nearest source pixel.
fn axis_map(n: usize, m: usize) -> Vec<(f64, usize)> {
    let s = m as f64 / n as f64;
    (0..m)
        .map(|i| {
            let c = i as f64 + 0.5;
            let src = (c / s - 0.5).clamp(0.0, (n - 1) as f64);
            let nearest = ((c / s) as usize).min(n - 1);
            (src, nearest)
        })
        .collect()
}

/// Linear interpolation matrix `(m, n)` sampling an axis at `src`.
fn interp_matrix(map: &[(f64, usize)], n: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut a = vec![0.0; map.len() * n];
    for (i, &(src, _)) in map.iter().enumerate() {
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let f = src - lo as f64;
        a[i * n + lo] += 1.0 - f;
        a[i * n + hi] += f;
    }
    Ok(Tensor::from_vec(a, (map.len(), n), dev)?.to_dtype(dtype)?)
}

fn offset_index(map: &[(f64, usize)], n: usize, d: isize, dev: &Device) -> Result<Tensor> {
    let idx: Vec<u32> = map
        .iter()
        .map(|&(_, c)| reflect_index(c as isize + d, n) as u32)
        .collect();
    let len = idx.len();
    Ok(Tensor::from_vec(idx, len, dev)?)
}

/// Convex combination weights `(n, 9, th, tw)` for resizing logits given
/// at source resolution.
pub fn convex_weights(logits: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (_, k, h, w) = logits.dims4()?;
    if k != 9 {
        return Err(Error::shape("9 logit channels", k));
    }
    if target_h == 0 || target_w == 0 {
        return Err(Error::param("target size must be positive"));
    }
    let dev = logits.device();
    let dt = logits.dtype();
    let ay = interp_matrix(&axis_map(h, target_h), h, dt, dev)?;
    let ax = interp_matrix(&axis_map(w, target_w), w, dt, dev)?;
    let sampled = ay.broadcast_matmul(&logits.contiguous()?.broadcast_matmul(&ax.t()?)?)?;
    softmax(&sampled, 1)
}

/// Resizes `features` to `(target_h, target_w)`; every output is a convex
/// combination of the 3x3 source neighbourhood around its nearest source
/// pixel, weighted by softmaxed, bilinearly resampled `logits`.
pub fn convex_upsample(features: &Tensor, logits: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (n, _, h, w) = features.dims4()?;
    let (ln, _, lh, lw) = logits.dims4()?;
    if (ln, lh, lw) != (n, h, w) {
        return Err(Error::shape(format!("logits over ({n}, {h}, {w})"), format!("({ln}, {lh}, {lw})")));
    }
    let alpha = convex_weights(logits, target_h, target_w)?;
    let dev = features.device();
    let my = axis_map(h, target_h);
    let mx = axis_map(w, target_w);
    let mut out: Option<Tensor> = None;
    for dy in -1isize..=1 {
        let rows = features.index_select(&offset_index(&my, h, dy, dev)?, 2)?;
        for dx in -1isize..=1 {
            let k = ((dy + 1) * 3 + dx + 1) as usize;
            let p = rows.index_select(&offset_index(&mx, w, dx, dev)?, 3)?;
            let term = p.broadcast_mul(&alpha.narrow(1, k, 1)?)?;
            out = Some(match out {
                Some(acc) => (acc + term)?,
                None => term,
            });
        }
    }
    Ok(out.expect("nine terms"))
}

fn ensure_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    Ok(())
}

/// Confidence-weighted absolute error; `confidence` is at input resolution
/// and is nearest-upsampled to the output.
pub fn pixel_loss(y: &Tensor, gt: &Tensor, confidence: &Tensor) -> Result<Tensor> {
    ensure_same(y, gt)?;
    let (_, _, h, w) = y.dims4()?;
    let m = resize_nearest(confidence, h, w)?;
    Ok((y - gt)?.abs()?.broadcast_mul(&m)?.mean_all()?)
}

/// `1 - mean(M_c)`.
pub fn confidence_loss(confidence: &Tensor) -> Result<Tensor> {
    Ok((1.0 - confidence.mean_all()?)?)
}

/// Mean distance of each pixel to the nearer of black and white.
pub fn binarization_loss(y: &Tensor) -> Result<Tensor> {
    Ok(y.minimum(&(1.0 - y)?)?.mean_all()?)
}

/// Mean absolute difference of Gaussian-smoothed intensities.
pub fn intensity_loss(y: &Tensor, reference: &Tensor) -> Result<Tensor> {
    ensure_same(y, reference)?;
    let gy = gaussian_blur(y, ITN_KERNEL, ITN_SIGMA)?;
    let gr = gaussian_blur(reference, ITN_KERNEL, ITN_SIGMA)?;
    Ok((gy - gr)?.abs()?.mean_all()?)
}

/// Keeps the root differentiable at zero deviation.
const HOM_EPS: f64 = 1e-12;

/// Homogeneity of the embedding of a single-image `(1, 1, h, w)` output.
pub fn homogeneity_loss(y: &Tensor, partition: &SuperpixelPartition, emb: &ScreenEmbedding) -> Result<Tensor> {
    let n = y.dim(0)?;
    if n != 1 {
        return Err(Error::shape("batch of 1", n));
    }
    embedding_homogeneity(&emb.embed_tensor(y)?, partition)
}

/// Mean over superpixels of the RMS distance of `(1, c, h, w)` embedding
/// vectors from their superpixel mean.
pub fn embedding_homogeneity(phi: &Tensor, partition: &SuperpixelPartition) -> Result<Tensor> {
    let (n, c, h, w) = phi.dims4()?;
    if n != 1 {
        return Err(Error::shape("batch of 1", n));
    }
    if partition.dims() != (h, w) {
        return Err(Error::shape(format!("partition {h}x{w}"), format!("{:?}", partition.dims())));
    }
    let sizes = partition.sizes();
    if sizes.is_empty() || sizes.iter().any(|&s| s == 0) {
        return Err(Error::param("empty superpixel"));
    }
    let k = sizes.len();
    let hw = h * w;
    let dev = phi.device();
    let phi = phi.reshape((c, hw))?;
    let mut avg = vec![0.0; hw * k];
    for (p, &l) in partition.labels().iter().enumerate() {
        avg[p * k + l as usize] = 1.0 / sizes[l as usize] as f64;
    }
    let avg = Tensor::from_vec(avg, (hw, k), dev)?.to_dtype(phi.dtype())?;
    let labels = Tensor::from_vec(partition.labels().to_vec(), hw, dev)?;
    let mu = phi.matmul(&avg)?;
    let dev2 = (&phi - mu.index_select(&labels, 1)?)?.sqr()?.sum_keepdim(0)?;
    let per_sp = dev2.matmul(&avg)?;
    Ok((per_sp + HOM_EPS)?.sqrt()?.mean_all()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrLossWeights {
    pub conf: f64,
    pub bin: f64,
    pub itn: f64,
    pub hom: f64,
}

impl Default for MrLossWeights {
    fn default() -> Self {
        Self {
            conf: 0.5,
            bin: 0.5,
            itn: 0.5,
            hom: 0.02,
        }
    }
}

/// Supervision available for one restored image.
pub enum MrTarget<'a> {
    Supervised {
        gt: &'a Tensor,
        partition: &'a SuperpixelPartition,
    },
    /// `reference` is the input resized to the output raster.
    Unsupervised { reference: &'a Tensor },
}

pub struct MrLosses {
    pub total: Tensor,
    pub pix: Option<Tensor>,
    pub conf: Tensor,
    pub bin: Tensor,
    pub itn: Tensor,
    pub hom: Option<Tensor>,
}

/// Weighted restoration objective for one image. Supervised targets use
/// all five terms with the ground truth as intensity reference;
/// unsupervised targets keep only the confidence, binarization and
/// intensity terms.
pub fn mr_total_loss(
    y: &Tensor,
    confidence: &Tensor,
    target: MrTarget<'_>,
    emb: &ScreenEmbedding,
    weights: &MrLossWeights,
) -> Result<MrLosses> {
    let conf = confidence_loss(confidence)?;
    let bin = binarization_loss(y)?;
    let shared = ((&conf * weights.conf)? + (&bin * weights.bin)?)?;
    match target {
        MrTarget::Supervised { gt, partition } => {
            let pix = pixel_loss(y, gt, confidence)?;
            let itn = intensity_loss(y, gt)?;
            let hom = if weights.hom != 0.0 {
                homogeneity_loss(y, partition, emb)?
            } else {
                y.zeros_like()?.mean_all()?
            };
            let total = (((&pix + shared)? + (&itn * weights.itn)?)? + (&hom * weights.hom)?)?;
            Ok(MrLosses {
                total,
                pix: Some(pix),
                conf,
                bin,
                itn,
                hom: Some(hom),
            })
        }
        MrTarget::Unsupervised { reference } => {
            let itn = intensity_loss(y, reference)?;
            let total = (shared + (&itn * weights.itn)?)?;
            Ok(MrLosses {
                total,
                pix: None,
                conf,
                bin,
                itn,
                hom: None,
            })
        }
    }
}
