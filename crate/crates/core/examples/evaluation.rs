//! Scale-estimation statistics and masked restoration scores on a bicubic
//! baseline.

use manga_restore::degradation::{degrade, DegradationParams};
use manga_restore::imaging::{resample, ResampleFilter};
use manga_restore::metrics::{identifiability_mask, restore_eval, scale_eval, RestoreSample};
use manga_restore::screen_embedding::ScreenEmbedding;
use manga_restore::screentone::{compose_page, random_layout};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let gts: Vec<f64> = (0..12).map(|i| 1.0 + 0.25 * i as f64).collect();
    let preds: Vec<f64> = gts.iter().enumerate().map(|(i, g)| g * (1.0 + 0.02 * ((i % 5) as f64 - 2.0))).collect();
    let vols: Vec<String> = (0..12).map(|i| format!("vol{}", i / 6)).collect();
    let report = scale_eval(&preds, &gts, &vols)?;
    for b in &report.buckets {
        let (err, acc) = (b.mean_relative_error.unwrap_or(f64::NAN), b.accuracy.unwrap_or(f64::NAN));
        println!("{}: n {} mean relative error {err:.4}, accuracy {acc:.4}", b.name, b.count);
    }
    for v in &report.volumes {
        println!("{}: mean {:.3} std {:.3}", v.volume, v.mean, v.std);
    }

    let emb = ScreenEmbedding::bundled();
    let layout = random_layout(192, 192, 5, (3, 4))?;
    let (gt, labels) = compose_page(&layout)?;
    let s = 2.0;
    let x = degrade(&gt, &DegradationParams::downsample_only(s), 0)?;
    let bicubic = resample(&x, gt.height(), gt.width(), ResampleFilter::Bicubic)?;
    let mask = identifiability_mask(&labels, &layout.specs(), s)?;
    let eval = restore_eval(
        &[RestoreSample { id: "page".into(), restored: &bicubic, gt: &gt, mask: &mask }],
        &emb,
    )?;
    println!(
        "bicubic at scale {s}: PSNR {:.2} dB, SSIM {:.4}, SVAE {:.4} over {:.0}% identifiable pixels",
        eval.mean_psnr,
        eval.mean_ssim,
        eval.mean_svae,
        100.0 * eval.mean_mask_coverage
    );
    Ok(())
}
