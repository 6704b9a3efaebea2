//! Synthetic data, both networks, blind scale estimation and restoration of
//! an unseen page. Training budgets here only exercise the pipeline; the
//! scale_estimation and manga_restoration examples train for real.

use manga_restore::imaging::save_image;
use manga_restore::restorer::{mr_forward, MrNet};
use manga_restore::scale_estimator::{estimate_scale_voted, SeNet};
use manga_restore::trainer::{build_dataset_with, train_mr, train_se, DatasetOptions, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let opts = |n, seed| DatasetOptions { height: 128, width: 128, ..DatasetOptions::new(n, seed) };
    let train = build_dataset_with(dir.path().join("train"), &opts(12, 8))?;
    let test = build_dataset_with(dir.path().join("test"), &opts(1, 9))?;
    let mut cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 2,
        patch_size: 32,
        iterations: 100,
        checkpoint_every: 0,
        ..Default::default()
    };
    cfg.se.base_channels = 4;
    cfg.mr.base_channels = 4;
    let se = train_se(&cfg, &train, dir.path().join("se"), None)?;
    cfg.iterations = 20;
    let mr = train_mr(&cfg, &train, dir.path().join("mr"), Some(&se.checkpoint), None)?;
    let (se_net, mr_net) = (SeNet::load(&se.checkpoint)?, MrNet::load(&mr.checkpoint)?);
    let r = test.paired().next().expect("one test page");
    let x = test.load_degraded(r)?;
    let s = estimate_scale_voted(&se_net, &x, 8, 32, 0)?.scale;
    let out = mr_forward(&mr_net, &x, s, 0)?;
    let path = dir.path().join("restored.png");
    save_image(&out.restored, &path)?;
    println!(
        "true scale {:.3}, estimated {s:.3}; {:?} -> {:?}, effective scale {:.3}",
        r.scale().unwrap_or(f64::NAN),
        x.dims(),
        out.restored.dims(),
        out.effective_scale
    );
    Ok(())
}
