//! Closed-form checks: degradation, convex upsampling and metrics.

use candle_core::{Device, Tensor};
use manga_restore::degradation::{degrade, DegradationParams};
use manga_restore::imaging::{reflect_index, round_half_up, Image};
use manga_restore::metrics::{psnr, scale_eval, ssim};
use manga_restore::restorer::{convex_upsample, convex_weights};
use manga_restore::screen_embedding::{svae_distance, ScreenEmbedding};
use manga_restore::screentone::{render_screentone, ScreentoneKind, ScreentoneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::training::Shared;
use crate::Outcome;

/// Strongest non-DC frequency bin of the column-mean profile.
fn peak_bin(img: &Image) -> usize {
    let (h, w) = img.dims();
    let mut buf: Vec<Complex<f64>> = (0..w)
        .map(|x| Complex::new((0..h).map(|y| img.get(y, x)).sum::<f64>() / h as f64, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(w).process(&mut buf);
    (1..=w / 2)
        .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
        .expect("width of at least two")
}

/// Bin where a fundamental of `1 / period` cycles per pixel lands after
/// sampling every `scale` pixels on an `n`-sample axis.
fn predicted_alias_bin(period: f64, scale: f64, n: usize) -> f64 {
    let f = scale / period;
    (f - f.round()).abs() * n as f64
}

pub fn degradation(_: &mut Shared) -> Outcome {
    let mut lines = Vec::new();
    let page = render_screentone(&ScreentoneSpec::new(ScreentoneKind::Dot, 5.5, 30.0, 0.4), 48, 40).unwrap();
    let identity = degrade(&page, &DegradationParams::downsample_only(1.0), 0).unwrap();
    let identity_ok = identity == page;
    lines.push(format!("identity degradation exact: {identity_ok}"));

    let checker = Image::from_fn(64, 64, |y, x| ((x + y) % 2) as f64);
    let halved = degrade(&checker, &DegradationParams::downsample_only(2.0), 0).unwrap();
    let checker_ok = halved.dims() == (32, 32) && halved.data().iter().all(|&v| v == 0.5);
    lines.push(format!("period-2 checkerboard halved to constant 0.5: {checker_ok}"));

    let pairs = [(3.0, 2.0), (2.5, 2.0), (4.0, 3.0), (5.0, 3.0), (6.0, 4.0)];
    let mut alias_ok = true;
    for (period, scale) in pairs {
        let gt = render_screentone(&ScreentoneSpec::new(ScreentoneKind::Line, period, 0.0, 0.5), 96, 480).unwrap();
        let d = degrade(&gt, &DegradationParams::downsample_only(scale), 0).unwrap();
        let predicted = predicted_alias_bin(period, scale, d.width());
        let found = peak_bin(&d);
        let ok = (found as f64 - predicted).abs() <= 1.0;
        alias_ok &= ok;
        lines.push(format!(
            "line p={period} /{scale}: alias peak bin {found}, predicted {predicted:.1} of {}: {ok}",
            d.width()
        ));
    }
    Outcome::new(identity_ok && checker_ok && alias_ok, lines.join("\n"))
}

/// Nearest source index of target sample `i` when resizing `n` to `m`.
fn nearest(i: usize, n: usize, m: usize) -> usize {
    ((2 * i + 1) * n / (2 * m)).min(n - 1)
}

pub fn convex(_: &mut Shared) -> Outcome {
    const DRAWS: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let dev = Device::Cpu;
    let (mut weight_err, mut min_weight, mut bound_violation) = (0.0f64, f64::INFINITY, 0.0f64);
    let (mut one_hot_draws, mut one_hot_mismatch) = (0usize, 0usize);
    for draw in 0..DRAWS {
        let c = rng.random_range(1..=3);
        let h = rng.random_range(2..=9);
        let w = rng.random_range(2..=9);
        let s: f64 = rng.random_range(1.0..=4.0);
        let (th, tw) = (round_half_up(h as f64 * s), round_half_up(w as f64 * s));
        let feats: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let one_hot = draw % 10 == 0;
        let logits: Vec<f64> = (0..9 * h * w)
            .map(|i| {
                if one_hot {
                    if i / (h * w) == 4 {
                        1000.0
                    } else {
                        0.0
                    }
                } else {
                    4.0 * rng.sample::<f64, _>(StandardNormal)
                }
            })
            .collect();
        let f = Tensor::from_vec(feats.clone(), (1, c, h, w), &dev).unwrap();
        let l = Tensor::from_vec(logits, (1, 9, h, w), &dev).unwrap();
        let alpha = convex_weights(&l, th, tw).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for p in 0..th * tw {
            let sum: f64 = (0..9).map(|k| alpha[k * th * tw + p]).sum();
            weight_err = weight_err.max((sum - 1.0).abs());
            for k in 0..9 {
                min_weight = min_weight.min(alpha[k * th * tw + p]);
            }
        }
        let out = convex_upsample(&f, &l, th, tw).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let at = |ch: usize, y: usize, x: usize| feats[(ch * h + y) * w + x];
        for ch in 0..c {
            for ty in 0..th {
                for tx in 0..tw {
                    let (ny, nx) = (nearest(ty, h, th), nearest(tx, w, tw));
                    let v = out[(ch * th + ty) * tw + tx];
                    if one_hot {
                        one_hot_draws += 1;
                        if v != at(ch, ny, nx) {
                            one_hot_mismatch += 1;
                        }
                    }
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let sv = at(ch, reflect_index(ny as isize + dy, h), reflect_index(nx as isize + dx, w));
                            lo = lo.min(sv);
                            hi = hi.max(sv);
                        }
                    }
                    bound_violation = bound_violation.max(lo - v).max(v - hi);
                }
            }
        }
    }
    let pass = min_weight >= 0.0 && weight_err <= 1e-6 && one_hot_mismatch == 0 && bound_violation <= 1e-12;
    Outcome::new(
        pass,
        format!(
            "{DRAWS} draws: min weight {min_weight:.3e}, max |sum - 1| {weight_err:.2e}\n\
             one-hot centre logits: {one_hot_mismatch} of {one_hot_draws} outputs differ from nearest neighbour\n\
             worst excursion outside the 3x3 neighbourhood range: {bound_violation:.2e}"
        ),
    )
}

pub fn metrics(_: &mut Shared) -> Outcome {
    let a = Image::from_fn(32, 32, |y, x| ((x * 7 + y * 3) % 9) as f64 / 10.0);
    let shifted = a.map(|v| v + 0.1);
    let p = psnr(&a, &shifted, None).unwrap();
    let s = ssim(&a, &a, None).unwrap();
    let page = render_screentone(&ScreentoneSpec::new(ScreentoneKind::Dot, 6.0, 45.0, 0.3), 48, 48).unwrap();
    let d = svae_distance(&ScreenEmbedding::bundled(), &page, &page).unwrap();
    let gts: Vec<f64> = (0..10).map(|i| 1.0 + 0.3 * i as f64).collect();
    let preds: Vec<f64> = gts
        .iter()
        .enumerate()
        .map(|(i, t)| if i % 2 == 0 { t * (1.0 + 0.0104) } else { t * (1.0 - 0.0104) })
        .collect();
    let vols = vec!["v".to_string(); gts.len()];
    let acc = scale_eval(&preds, &gts, &vols).unwrap().overall().accuracy.expect("non-empty");
    let checks = [
        ((p - 20.0).abs() <= 1e-9, format!("psnr(a, a + 0.1) = {p:.12} dB")),
        ((s - 1.0).abs() <= 1e-12, format!("ssim(a, a) = {s:.12}")),
        (d == 0.0, format!("svae(a, a) = {d}")),
        ((acc - 0.9896).abs() <= 1e-6, format!("accuracy on (1 +/- 0.0104) T = {acc:.9}")),
    ];
    let pass = checks.iter().all(|(ok, _)| *ok);
    Outcome::new(pass, checks.map(|(_, l)| l).join("\n"))
}
