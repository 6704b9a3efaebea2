//! Dataset assembly, training loops for both networks, checkpointing and
//! run bookkeeping.

mod dataset;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use dataset::{
    build_dataset, build_dataset_with, DatasetManifest, DatasetOptions, DegradationStyle, ManifestRecord, ScaleDist,
    MANIFEST_FILE,
};

use crate::error::{Error, Result};
use crate::imaging::{resample, Image, ResampleFilter};
use crate::nn::ops::{image_to_tensor, images_to_batch, scalar};
use crate::nn::{Adam, AdamConfig, Checkpoint, ParamStore, TrainState};
use crate::restorer::{mr_total_loss, target_size, MrLossWeights, MrNet, MrNetConfig, MrTarget};
use crate::scale_estimator::{estimate_scale_voted, se_total_loss_t, SeNet, SeNetConfig, CONSISTENCY_WEIGHT};
use crate::screen_embedding::{superpixels, ScreenEmbedding, SlicOptions};
use crate::screentone::RegionLabels;

pub const CONFIG_FILE: &str = "train.cfg";
pub const LOSS_FILE: &str = "losses.csv";
/// Iterations between progress lines on the log.
const LOG_EVERY: u64 = 100;
pub const ACCESS_FILE: &str = "access.log";
pub const SE_CHECKPOINT: &str = "se.safetensors";
pub const MR_CHECKPOINT: &str = "mr.safetensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Pages per step.
    pub batch_size: usize,
    pub iterations: u64,
    /// Input-side crop size.
    pub patch_size: usize,
    /// Share of steps that are supervised when unpaired records exist.
    pub supervised_fraction: f64,
    pub seed: u64,
    /// Zero disables intermediate checkpoints.
    pub checkpoint_every: u64,
    /// Crops per page for the consistency term.
    pub patches_per_page: usize,
    pub consistency_weight: f64,
    /// Crops per image when estimating scales of unpaired records.
    pub vote_patches: usize,
    pub se: SeNetConfig,
    pub mr: MrNetConfig,
    pub loss: MrLossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            batch_size: 8,
            iterations: 5000,
            patch_size: 128,
            supervised_fraction: 0.5,
            seed: 0,
            checkpoint_every: 1000,
            patches_per_page: 4,
            consistency_weight: CONSISTENCY_WEIGHT,
            vote_patches: 8,
            se: SeNetConfig::default(),
            mr: MrNetConfig::default(),
            loss: MrLossWeights::default(),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::param("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::param("Adam betas must lie in [0, 1)"));
        }
        if !(self.supervised_fraction > 0.0 && self.supervised_fraction <= 1.0) {
            return Err(Error::param("supervised_fraction must lie in (0, 1]"));
        }
        if self.batch_size == 0 || self.patch_size == 0 || self.patches_per_page == 0 || self.vote_patches == 0 {
            return Err(Error::param("batch, patch and vote sizes must be positive"));
        }
        self.se.validate()?;
        self.mr.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..Default::default()
        }
    }

    /// Sets a dotted key such as `lr` or `se.base_channels`, parsing the
    /// value with the type of the current entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::param(format!("unknown config key {key}")))?;
        }
        let bad = || Error::param(format!("invalid value {value:?} for {key}"));
        *slot = match slot {
            Value::String(_) => Value::String(value.to_string()),
            Value::Object(_) => return Err(Error::param(format!("{key} is a section, not a value"))),
            _ => serde_json::from_str(value).map_err(|_| bad())?,
        };
        *self = serde_json::from_value(root).map_err(|_| bad())?;
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::param(format!("expected key=value, got {line:?}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        let mut pairs = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut pairs);
        pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_kv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_kv()).map_err(|e| Error::io(path, e))
    }
}

/// What a training step read from the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Access {
    Degraded,
    GroundTruth,
    Labels,
}

impl Access {
    fn name(self) -> &'static str {
        match self {
            Access::Degraded => "degraded",
            Access::GroundTruth => "gt",
            Access::Labels => "labels",
        }
    }
}

/// Caches dataset images and records every read as
/// `iteration,record,kind` in the access log.
struct DataStore<'a> {
    manifest: &'a DatasetManifest,
    log: fs::File,
    log_path: PathBuf,
    degraded: HashMap<String, Image>,
    gt: HashMap<String, Image>,
    labels: HashMap<String, RegionLabels>,
}

impl<'a> DataStore<'a> {
    fn new(manifest: &'a DatasetManifest, out_dir: &Path, append: bool) -> Result<Self> {
        let log_path = out_dir.join(ACCESS_FILE);
        let log = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        Ok(Self {
            manifest,
            log,
            log_path,
            degraded: HashMap::new(),
            gt: HashMap::new(),
            labels: HashMap::new(),
        })
    }

    fn note(&mut self, it: u64, r: &ManifestRecord, kind: Access) -> Result<()> {
        writeln!(self.log, "{it},{},{}", r.id, kind.name()).map_err(|e| Error::io(&self.log_path, e))
    }

    fn degraded(&mut self, it: u64, r: &ManifestRecord) -> Result<&Image> {
        self.note(it, r, Access::Degraded)?;
        if !self.degraded.contains_key(&r.id) {
            let img = self.manifest.load_degraded(r)?;
            self.degraded.insert(r.id.clone(), img);
        }
        Ok(&self.degraded[&r.id])
    }

    fn gt(&mut self, it: u64, r: &ManifestRecord) -> Result<&Image> {
        if !r.paired {
            return Err(Error::param(format!("record {} is unpaired", r.id)));
        }
        self.note(it, r, Access::GroundTruth)?;
        if !self.gt.contains_key(&r.id) {
            let img = self.manifest.load_gt(r)?;
            self.gt.insert(r.id.clone(), img);
        }
        Ok(&self.gt[&r.id])
    }

    fn labels(&mut self, it: u64, r: &ManifestRecord) -> Result<&RegionLabels> {
        if !r.paired {
            return Err(Error::param(format!("record {} is unpaired", r.id)));
        }
        self.note(it, r, Access::Labels)?;
        if !self.labels.contains_key(&r.id) {
            let l = self.manifest.load_labels(r)?;
            self.labels.insert(r.id.clone(), l);
        }
        Ok(&self.labels[&r.id])
    }
}

/// Per-step generator so that resumed runs replay the same draws.
fn step_rng(seed: u64, it: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(it);
    rng
}

/// Whether step `it` is supervised under the configured share.
fn is_supervised(it: u64, fraction: f64, have_unpaired: bool) -> bool {
    if !have_unpaired {
        return true;
    }
    ((it + 1) as f64 * fraction).floor() > (it as f64 * fraction).floor()
}

fn random_crop(rng: &mut ChaCha8Rng, img: &Image, p: usize) -> Result<(usize, usize)> {
    if img.height() < p || img.width() < p {
        return Err(Error::ImageTooSmall {
            height: img.height(),
            width: img.width(),
            min: p,
        });
    }
    Ok((rng.random_range(0..=img.height() - p), rng.random_range(0..=img.width() - p)))
}

fn pick<'m>(rng: &mut ChaCha8Rng, pool: &[&'m ManifestRecord], n: usize) -> Vec<&'m ManifestRecord> {
    if n <= pool.len() {
        sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

struct LossLog {
    file: fs::File,
    path: PathBuf,
}

impl LossLog {
    fn open(path: PathBuf, header: &str, append: bool) -> Result<Self> {
        let fresh = !append || !path.exists();
        let mut file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if fresh {
            writeln!(file, "{header}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { file, path })
    }

    fn row(&mut self, it: u64, mode: &str, values: &[Option<f64>]) -> Result<()> {
        let cols: Vec<String> = values.iter().map(|v| v.map_or(String::new(), |x| format!("{x:.8}"))).collect();
        writeln!(self.file, "{it},{mode},{}", cols.join(",")).map_err(|e| Error::io(&self.path, e))
    }
}

/// Training products.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub iterations: u64,
    pub last_loss: Option<f64>,
}

fn save_state(
    kind_ck: Checkpoint,
    cfg: &TrainConfig,
    adam: &Adam,
    it: u64,
    path: &Path,
) -> Result<()> {
    let mut ck = kind_ck;
    ck.train_state = Some(TrainState {
        iteration: it,
        adam_step: adam.step_count(),
    });
    ck.optimizer = adam.state();
    if let Value::Object(map) = &mut ck.config {
        map.insert("train".into(), serde_json::to_value(cfg)?);
    }
    ck.save(path)
}

/// Restores optimizer moments and returns the iteration to continue from.
fn resume_state(ck: &Checkpoint, ps: &ParamStore, adam: &mut Adam) -> Result<u64> {
    ps.load(&ck.params)?;
    let ts = ck
        .train_state
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?;
    adam.restore(ts.adam_step, &ck.optimizer)?;
    Ok(ts.iteration)
}

fn prepare_out(out_dir: &Path, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    cfg.save(out_dir.join(CONFIG_FILE))
}

fn backward_step(loss: &Tensor, ps: &ParamStore, adam: &mut Adam) -> Result<()> {
    let grads = loss.backward()?;
    adam.step(ps, &grads)
}

/// Trains the scale estimator. Supervised steps use the scale and
/// consistency terms on paired pages; unsupervised steps use only the
/// consistency term on unpaired pages. With `resume`, parameters, optimizer
/// moments and the iteration counter are restored from that checkpoint.
pub fn train_se(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: impl AsRef<Path>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let paired: Vec<&ManifestRecord> = manifest.paired().collect();
    let unpaired: Vec<&ManifestRecord> = manifest.unpaired().collect();
    if paired.is_empty() {
        return Err(Error::Missing("paired training records".into()));
    }
    if cfg.patches_per_page < 2 {
        return Err(Error::param("the consistency term needs at least two patches per page"));
    }
    prepare_out(out_dir, cfg)?;
    let net = SeNet::new(cfg.se.clone(), DType::F32, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam(), net.params())?;
    let start = match resume {
        Some(p) => resume_state(&Checkpoint::load(p)?, net.params(), &mut adam)?,
        None => 0,
    };
    let mut store = DataStore::new(manifest, out_dir, resume.is_some())?;
    let mut log = LossLog::open(out_dir.join(LOSS_FILE), "iteration,mode,total,scale,consistency", resume.is_some())?;
    let final_path = out_dir.join(SE_CHECKPOINT);
    let p = cfg.patch_size;
    let m = cfg.patches_per_page;
    let mut last = None;
    for it in start..cfg.iterations {
        let mut rng = step_rng(cfg.seed, it);
        let supervised = is_supervised(it, cfg.supervised_fraction, !unpaired.is_empty());
        let pool = if supervised { &paired } else { &unpaired };
        let batch = pick(&mut rng, pool, cfg.batch_size);
        let mut crops = Vec::with_capacity(batch.len() * m);
        let mut gts = Vec::with_capacity(batch.len());
        for r in &batch {
            let img = store.degraded(it, r)?;
            for _ in 0..m {
                let (y, x) = random_crop(&mut rng, img, p)?;
                crops.push(img.crop(y, x, p, p)?);
            }
            if supervised {
                gts.push(r.scale().expect("paired records carry parameters"));
            }
        }
        let refs: Vec<&Image> = crops.iter().collect();
        let x = images_to_batch(&refs, DType::F32, &Device::Cpu)?;
        let scales = net.forward(&x)?.scale.reshape((batch.len(), m))?;
        let (loss, scl) = if supervised {
            let g = Tensor::from_vec(gts, batch.len(), &Device::Cpu)?.to_dtype(DType::F32)?;
            let scl = crate::scale_estimator::scale_loss_t(&scales, &g)?;
            (se_total_loss_t(&scales, Some(&g), cfg.consistency_weight)?, Some(scalar(&scl)?))
        } else {
            (se_total_loss_t(&scales, None, cfg.consistency_weight)?, None)
        };
        let cons = scalar(&crate::scale_estimator::consistency_loss_t(&scales)?)?;
        let total = scalar(&loss)?;
        if !total.is_finite() {
            return Err(Error::param(format!("loss diverged at iteration {it}")));
        }
        backward_step(&loss, net.params(), &mut adam)?;
        log.row(it, if supervised { "sup" } else { "unsup" }, &[Some(total), scl, Some(cons)])?;
        last = Some(total);
        let done = it + 1;
        if done % LOG_EVERY == 0 {
            log::info!("se iteration {done}/{}: loss {total:.5}", cfg.iterations);
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.iterations {
            save_state(net.to_checkpoint()?, cfg, &adam, done, &out_dir.join(format!("se_{done:06}.safetensors")))?;
        }
    }
    save_state(net.to_checkpoint()?, cfg, &adam, cfg.iterations.max(start), &final_path)?;
    Ok(TrainOutcome {
        checkpoint: final_path,
        iterations: cfg.iterations.max(start),
        last_loss: last,
    })
}

/// One training sample for the restorer: an input crop and its scale with
/// either ground truth and superpixels or an intensity reference.
struct MrSample {
    input: Image,
    scale: f64,
    gt: Option<(Image, crate::screen_embedding::SuperpixelPartition)>,
}

/// Aligned input/ground-truth crops of a paired record.
fn paired_sample(store: &mut DataStore<'_>, it: u64, r: &ManifestRecord, p: usize, rng: &mut ChaCha8Rng) -> Result<MrSample> {
    let s = r.scale().expect("paired records carry parameters");
    let deg = store.degraded(it, r)?.clone();
    let (y, x) = random_crop(rng, &deg, p)?;
    let gt = store.gt(it, r)?.clone();
    let labels = store.labels(it, r)?.clone();
    let (th, tw) = target_size(p, p, s);
    let ry = gt.height() as f64 / deg.height() as f64;
    let rx = gt.width() as f64 / deg.width() as f64;
    let gy = ((y as f64 * ry).round() as usize).min(gt.height() - th);
    let gx = ((x as f64 * rx).round() as usize).min(gt.width() - tw);
    let gt_crop = gt.crop(gy, gx, th, tw)?;
    let lab = labels.crop(gy, gx, th, tw)?;
    let raw: Vec<u32> = lab.data().iter().map(|&l| l as u32).collect();
    let part = crate::screen_embedding::SuperpixelPartition::from_raw(th, tw, &raw)?;
    Ok(MrSample {
        input: deg.crop(y, x, p, p)?,
        scale: s,
        gt: Some((gt_crop, part)),
    })
}

/// Trains the restorer. Supervised steps use all five terms on paired
/// crops; unsupervised steps use the confidence, binarization and intensity
/// terms with the scale predicted by the frozen estimator at `se_model`.
pub fn train_mr(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: impl AsRef<Path>,
    se_model: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let paired: Vec<&ManifestRecord> = manifest.paired().collect();
    let unpaired: Vec<&ManifestRecord> = manifest.unpaired().collect();
    if paired.is_empty() {
        return Err(Error::Missing("paired training records".into()));
    }
    if !unpaired.is_empty() && se_model.is_none() {
        return Err(Error::Missing("scale estimator checkpoint for unpaired records".into()));
    }
    prepare_out(out_dir, cfg)?;
    let emb = ScreenEmbedding::bundled();
    let net = MrNet::new(cfg.mr.clone(), DType::F32, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam(), net.params())?;
    let start = match resume {
        Some(p) => resume_state(&Checkpoint::load(p)?, net.params(), &mut adam)?,
        None => 0,
    };
    let mut store = DataStore::new(manifest, out_dir, resume.is_some())?;
    let mut estimated: HashMap<String, f64> = HashMap::new();
    if let Some(path) = se_model.filter(|_| !unpaired.is_empty()) {
        let se = SeNet::load(path)?;
        for r in &unpaired {
            let img = store.degraded(start, r)?;
            let patch = cfg.patch_size.min(img.height()).min(img.width());
            let est = estimate_scale_voted(&se, img, cfg.vote_patches, patch, cfg.seed)?;
            estimated.insert(r.id.clone(), est.scale.clamp(1.0, cfg.mr.s_max));
        }
    }
    let mut log = LossLog::open(
        out_dir.join(LOSS_FILE),
        "iteration,mode,total,pixel,confidence,binarization,intensity,homogeneity",
        resume.is_some(),
    )?;
    let final_path = out_dir.join(MR_CHECKPOINT);
    let p = cfg.patch_size;
    let mut last = None;
    for it in start..cfg.iterations {
        let mut rng = step_rng(cfg.seed, it);
        let supervised = is_supervised(it, cfg.supervised_fraction, !unpaired.is_empty());
        let pool = if supervised { &paired } else { &unpaired };
        let batch = pick(&mut rng, pool, cfg.batch_size);
        let mut samples = Vec::with_capacity(batch.len());
        for r in &batch {
            samples.push(if supervised {
                paired_sample(&mut store, it, r, p, &mut rng)?
            } else {
                let img = store.degraded(it, r)?;
                let (y, x) = random_crop(&mut rng, img, p)?;
                MrSample {
                    input: img.crop(y, x, p, p)?,
                    scale: estimated[&r.id],
                    gt: None,
                }
            });
        }
        let n = samples.len() as f64;
        let mut total: Option<Tensor> = None;
        let mut sums = [0.0f64; 6];
        for sample in &samples {
            let x = image_to_tensor(&sample.input, DType::F32, &Device::Cpu)?;
            let out = net.forward(&x, sample.scale, rng.random())?;
            let losses = match &sample.gt {
                Some((gt, part)) => {
                    let g = image_to_tensor(gt, DType::F32, &Device::Cpu)?;
                    mr_total_loss(&out.restored, &out.confidence, MrTarget::Supervised { gt: &g, partition: part }, &emb, &cfg.loss)?
                }
                None => {
                    let (th, tw) = target_size(p, p, sample.scale);
                    let reference = resample(&sample.input, th, tw, ResampleFilter::Bicubic)?;
                    let r = image_to_tensor(&reference, DType::F32, &Device::Cpu)?;
                    mr_total_loss(&out.restored, &out.confidence, MrTarget::Unsupervised { reference: &r }, &emb, &cfg.loss)?
                }
            };
            let parts = [
                Some(&losses.total),
                losses.pix.as_ref(),
                Some(&losses.conf),
                Some(&losses.bin),
                Some(&losses.itn),
                losses.hom.as_ref(),
            ];
            for (acc, t) in sums.iter_mut().zip(parts) {
                if let Some(t) = t {
                    *acc += scalar(t)? / n;
                }
            }
            let term = (losses.total / n)?;
            total = Some(match total {
                Some(acc) => (acc + term)?,
                None => term,
            });
        }
        let loss = total.expect("non-empty batch");
        if !sums[0].is_finite() {
            return Err(Error::param(format!("loss diverged at iteration {it}")));
        }
        backward_step(&loss, net.params(), &mut adam)?;
        let row: Vec<Option<f64>> = sums
            .iter()
            .enumerate()
            .map(|(i, &v)| if !supervised && (i == 1 || i == 5) { None } else { Some(v) })
            .collect();
        log.row(it, if supervised { "sup" } else { "unsup" }, &row)?;
        last = Some(sums[0]);
        let done = it + 1;
        if done % LOG_EVERY == 0 {
            log::info!("mr iteration {done}/{}: loss {:.5}", cfg.iterations, sums[0]);
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.iterations {
            save_state(net.to_checkpoint()?, cfg, &adam, done, &out_dir.join(format!("mr_{done:06}.safetensors")))?;
        }
    }
    save_state(net.to_checkpoint()?, cfg, &adam, cfg.iterations.max(start), &final_path)?;
    Ok(TrainOutcome {
        checkpoint: final_path,
        iterations: cfg.iterations.max(start),
        last_loss: last,
    })
}

/// Superpixels for a ground-truth page: region labels when present,
/// otherwise SLIC on the embedding.
pub fn page_superpixels(
    emb: &ScreenEmbedding,
    gt: &Image,
    labels: Option<&RegionLabels>,
) -> Result<crate::screen_embedding::SuperpixelPartition> {
    superpixels(emb, gt, labels, &SlicOptions::default())
}
