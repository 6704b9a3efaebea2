//! Synthetic dataset assembly and the JSON-lines manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::{degrade, sample_params_in, DegradationParams};
use crate::error::{Error, Result};
use crate::imaging::{load_image, save_image, Image};
use crate::screentone::{compose_page, random_layout_with, LayoutOptions, RegionLabels, ScreentoneSpec};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Paths are relative to the manifest directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_path: Option<String>,
    pub degraded_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<DegradationParams>,
    pub paired: bool,
    /// Screentone of each region label, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specs: Option<Vec<ScreentoneSpec>>,
    #[serde(default)]
    pub volume: String,
}

impl ManifestRecord {
    /// Ground-truth scale of a paired record.
    pub fn scale(&self) -> Option<f64> {
        self.params.as_ref().map(|p| p.scale)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)?;
            if rec.paired && (rec.gt_path.is_none() || rec.params.is_none()) {
                return Err(Error::param(format!("paired record {} lacks ground truth or parameters", rec.id)));
            }
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    /// Writes `manifest.jsonl` into `root`.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(path)
    }

    pub fn paired(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| r.paired)
    }

    pub fn unpaired(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| !r.paired)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_degraded(&self, r: &ManifestRecord) -> Result<Image> {
        load_image(self.resolve(&r.degraded_path))
    }

    pub fn load_gt(&self, r: &ManifestRecord) -> Result<Image> {
        let p = r.gt_path.as_ref().ok_or_else(|| Error::Missing(format!("ground truth of {}", r.id)))?;
        load_image(self.resolve(p))
    }

    pub fn load_labels(&self, r: &ManifestRecord) -> Result<RegionLabels> {
        let p = r.labels_path.as_ref().ok_or_else(|| Error::Missing(format!("labels of {}", r.id)))?;
        Ok(RegionLabels::from_image(&load_image(self.resolve(p))?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ScaleDist {
    Uniform(f64, f64),
    Choice(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DegradationStyle {
    /// Blur, noise and JPEG each applied with probability one half.
    Random,
    /// Downsampling plus Gaussian noise of the given 8-bit sigma.
    NoiseOnly(f64),
}

#[derive(Clone, Debug)]
pub struct DatasetOptions {
    pub n_pages: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub unpaired_fraction: f64,
    pub layout: LayoutOptions,
    pub scales: ScaleDist,
    pub style: DegradationStyle,
    /// Consecutive pages grouped under one volume id.
    pub pages_per_volume: usize,
}

impl DatasetOptions {
    pub fn new(n_pages: usize, seed: u64) -> Self {
        Self {
            n_pages,
            height: 256,
            width: 256,
            seed,
            unpaired_fraction: 0.0,
            layout: LayoutOptions::default(),
            scales: ScaleDist::Uniform(1.0, 4.0),
            style: DegradationStyle::Random,
            pages_per_volume: usize::MAX,
        }
    }
}

fn page_seed(seed: u64, i: usize, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(i as u128 * 4);
    rng.random()
}

fn draw_params(opts: &DatasetOptions, seed: u64) -> DegradationParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = match &opts.scales {
        ScaleDist::Uniform(lo, hi) if hi > lo => rng.random_range(*lo..=*hi),
        ScaleDist::Uniform(lo, _) => *lo,
        ScaleDist::Choice(v) => v[rng.random_range(0..v.len())],
    };
    match opts.style {
        DegradationStyle::Random => {
            let mut p = sample_params_in(rng.random(), (scale, scale));
            p.scale = scale;
            p
        }
        DegradationStyle::NoiseOnly(sigma) => DegradationParams {
            noise_sigma: sigma,
            ..DegradationParams::downsample_only(scale)
        },
    }
}

/// Generates pages, degrades them, and writes `pages/`, `labels/`,
/// `degraded/` and `manifest.jsonl` under `out_dir`. Exactly
/// `round(n_pages * unpaired_fraction)` records, chosen by seed, are
/// written without ground truth, labels or parameters.
pub fn build_dataset_with(out_dir: impl AsRef<Path>, opts: &DatasetOptions) -> Result<DatasetManifest> {
    let root = out_dir.as_ref().to_path_buf();
    if opts.n_pages == 0 {
        return Err(Error::param("at least one page is required"));
    }
    if !(0.0..=1.0).contains(&opts.unpaired_fraction) {
        return Err(Error::param("unpaired fraction must lie in [0, 1]"));
    }
    if let ScaleDist::Choice(v) = &opts.scales {
        if v.is_empty() {
            return Err(Error::param("empty scale set"));
        }
    }
    for sub in ["pages", "labels", "degraded"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let n_unpaired = (opts.n_pages as f64 * opts.unpaired_fraction).round() as usize;
    let mut order: Vec<usize> = (0..opts.n_pages).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed));
    let mut unpaired = vec![false; opts.n_pages];
    for &i in &order[..n_unpaired] {
        unpaired[i] = true;
    }
    let width = opts.n_pages.to_string().len().max(4);
    let mut records = Vec::with_capacity(opts.n_pages);
    for i in 0..opts.n_pages {
        let id = format!("{i:0width$}");
        let layout = random_layout_with(opts.height, opts.width, page_seed(opts.seed, i, 1), &opts.layout)?;
        let (page, labels) = compose_page(&layout)?;
        let params = draw_params(opts, page_seed(opts.seed, i, 2));
        let degraded = degrade(&page, &params, page_seed(opts.seed, i, 3))?;
        let degraded_path = format!("degraded/{id}.png");
        save_image(&degraded, root.join(&degraded_path))?;
        let volume = format!("vol{}", i / opts.pages_per_volume.max(1));
        if unpaired[i] {
            records.push(ManifestRecord {
                id,
                gt_path: None,
                degraded_path,
                labels_path: None,
                params: None,
                paired: false,
                specs: None,
                volume,
            });
            continue;
        }
        let gt_path = format!("pages/{id}.png");
        let labels_path = format!("labels/{id}.png");
        save_image(&page, root.join(&gt_path))?;
        save_image(&labels.to_image(), root.join(&labels_path))?;
        records.push(ManifestRecord {
            id,
            gt_path: Some(gt_path),
            degraded_path,
            labels_path: Some(labels_path),
            params: Some(params),
            paired: true,
            specs: Some(layout.specs()),
            volume,
        });
    }
    let manifest = DatasetManifest { root, records };
    manifest.save()?;
    Ok(manifest)
}

/// Default synthetic dataset of `n_pages` 256x256 pages.
pub fn build_dataset(n_pages: usize, out_dir: impl AsRef<Path>, seed: u64) -> Result<DatasetManifest> {
    build_dataset_with(out_dir, &DatasetOptions::new(n_pages, seed))
}
