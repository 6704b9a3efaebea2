//! Trains a small scale estimator on synthetic pages and estimates the scale
//! of held-out pages by confidence-weighted patch voting.
//!
//! cargo run --example scale_estimation -- [iterations]

use manga_restore::scale_estimator::{estimate_scale_voted, SeNet};
use manga_restore::screentone::{LayoutOptions, ScreentoneKind, ScreentoneSpec, SpecSampler};
use manga_restore::trainer::{build_dataset_with, train_se, DatasetOptions, DegradationStyle, ScaleDist, TrainConfig};

fn palette() -> Vec<ScreentoneSpec> {
    use ScreentoneKind::*;
    vec![
        ScreentoneSpec::new(Dot, 6.0, 45.0, 0.3),
        ScreentoneSpec::new(Dot, 9.0, 0.0, 0.5),
        ScreentoneSpec::new(Line, 8.0, 0.0, 0.6),
        ScreentoneSpec::new(Checker, 10.0, 30.0, 0.35),
    ]
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iterations: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let dir = tempfile::tempdir()?;
    let opts = |n, seed| DatasetOptions {
        height: 192,
        width: 192,
        layout: LayoutOptions {
            sampler: SpecSampler::Palette(palette()),
            ..Default::default()
        },
        scales: ScaleDist::Uniform(1.0, 3.0),
        style: DegradationStyle::NoiseOnly(2.0),
        ..DatasetOptions::new(n, seed)
    };
    let train = build_dataset_with(dir.path().join("train"), &opts(60, 1))?;
    let test = build_dataset_with(dir.path().join("test"), &opts(4, 2))?;
    let mut cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        patch_size: 64,
        iterations,
        checkpoint_every: 0,
        ..Default::default()
    };
    cfg.se.base_channels = 8;
    let outcome = train_se(&cfg, &train, dir.path().join("se"), None)?;
    println!("trained {} iterations, last loss {:?}", outcome.iterations, outcome.last_loss);
    let net = SeNet::load(&outcome.checkpoint)?;
    for r in test.paired() {
        let img = test.load_degraded(r)?;
        let est = estimate_scale_voted(&net, &img, 8, 64, 0)?;
        println!("{}: true {:.3}, estimated {:.3} from {} patches", r.id, r.scale().unwrap_or(f64::NAN), est.scale, est.per_patch.len());
    }
    Ok(())
}
