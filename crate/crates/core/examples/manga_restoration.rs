//! Trains a small restorer on synthetic pages and restores a held-out page
//! at its known scale, comparing against bicubic upsampling.
//!
//! cargo run --example manga_restoration -- [iterations]

use manga_restore::imaging::{resample, ResampleFilter};
use manga_restore::metrics::{identifiability_mask, psnr, ssim};
use manga_restore::restorer::{mr_forward, MrNet};
use manga_restore::screentone::{LayoutOptions, ScreentoneKind, ScreentoneSpec, SpecSampler};
use manga_restore::trainer::{build_dataset_with, train_mr, DatasetOptions, DegradationStyle, ScaleDist, TrainConfig};

fn palette() -> Vec<ScreentoneSpec> {
    use ScreentoneKind::*;
    vec![
        ScreentoneSpec::new(Dot, 8.0, 45.0, 0.4),
        ScreentoneSpec::new(Line, 8.0, 0.0, 0.5),
        ScreentoneSpec::new(Stochastic, 5.0, 0.0, 0.4),
    ]
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iterations: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let dir = tempfile::tempdir()?;
    let opts = |n, seed| DatasetOptions {
        height: 160,
        width: 160,
        layout: LayoutOptions {
            sampler: SpecSampler::Palette(palette()),
            ..Default::default()
        },
        scales: ScaleDist::Choice(vec![1.5, 2.0]),
        style: DegradationStyle::NoiseOnly(2.0),
        ..DatasetOptions::new(n, seed)
    };
    let train = build_dataset_with(dir.path().join("train"), &opts(60, 3))?;
    let test = build_dataset_with(dir.path().join("test"), &opts(1, 4))?;
    let mut cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        patch_size: 32,
        iterations,
        checkpoint_every: 0,
        ..Default::default()
    };
    cfg.mr.base_channels = 16;
    let outcome = train_mr(&cfg, &train, dir.path().join("mr"), None, None)?;
    let net = MrNet::load(&outcome.checkpoint)?;
    let r = test.paired().next().expect("one test page");
    let (x, gt) = (test.load_degraded(r)?, test.load_gt(r)?);
    let s = r.scale().expect("paired page");
    let out = mr_forward(&net, &x, s, 0)?;
    let mask = identifiability_mask(&test.load_labels(r)?, r.specs.as_deref().unwrap_or_default(), s)?;
    let bicubic = resample(&x, gt.height(), gt.width(), ResampleFilter::Bicubic)?;
    println!("input {:?} at scale {s} -> {:?}", x.dims(), out.restored.dims());
    println!("scores over {} identifiable pixels:", mask.count_ones());
    for (name, img) in [("restored", &out.restored), ("bicubic", &bicubic)] {
        let near = img.data().iter().filter(|&&v| v.min(1.0 - v) <= 0.1).count() as f64 / img.data().len() as f64;
        println!(
            "  {name:8} PSNR {:.2} dB, SSIM {:.4}, {:.1}% near-bitonal",
            psnr(img, &gt, Some(&mask))?,
            ssim(img, &gt, Some(&mask))?,
            100.0 * near
        );
    }
    println!("mean confidence {:.3}", out.confidence.image().mean());
    Ok(())
}
