use candle_core::{DType, Device, Tensor};
use manga_restore::degradation::{degrade, DegradationParams};
use manga_restore::imaging::{round_half_up, Image};
use manga_restore::metrics::{psnr, scale_eval, spec_identifiable, ssim};
use manga_restore::nn::ops::scalar;
use manga_restore::restorer::{
    binarization_loss, confidence_loss, convex_weights, mr_forward, pixel_loss, target_size, MrNet, MrNetConfig,
};
use manga_restore::scale_estimator::{
    consistency_loss, patch_origins, scale_loss, se_total_loss, vote, SeNet, SeNetConfig,
};
use manga_restore::screentone::{render_screentone, ScreentoneKind, ScreentoneSpec};
use proptest::prelude::*;

fn image(h: usize, w: usize, data: Vec<f64>) -> Image {
    Image::from_vec(h, w, 1, data).unwrap()
}

fn unit_image(min_side: usize, max_side: usize) -> impl Strategy<Value = Image> {
    (min_side..=max_side, min_side..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0..=1.0f64, h * w).prop_map(move |d| image(h, w, d))
    })
}

fn image_pair(max_side: usize) -> impl Strategy<Value = (Image, Image)> {
    (11..=max_side, 11..=max_side).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(0.0..=1.0f64, h * w),
            prop::collection::vec(0.0..=1.0f64, h * w),
        )
            .prop_map(move |(a, b)| (image(h, w, a), image(h, w, b)))
    })
}

fn kind() -> impl Strategy<Value = ScreentoneKind> {
    prop::sample::select(ScreentoneKind::ALL.to_vec())
}

fn tensor(v: Vec<f64>, h: usize, w: usize) -> Tensor {
    Tensor::from_vec(v, (1, 1, h, w), &Device::Cpu).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn consistency_is_translation_invariant(
        s in prop::collection::vec(1.0..4.0f64, 2..10),
        c in -3.0..3.0f64,
    ) {
        let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
        let a = consistency_loss(&s).unwrap();
        prop_assert!((a - consistency_loss(&shifted).unwrap()).abs() < 1e-12);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn scale_loss_is_a_metric(a in 1.0..4.0f64, b in 1.0..4.0f64) {
        prop_assert_eq!(scale_loss(a, b), scale_loss(b, a));
        prop_assert!(scale_loss(a, b) >= 0.0);
        prop_assert_eq!(scale_loss(a, a), 0.0);
    }

    #[test]
    fn unsupervised_objective_is_the_weighted_consistency(s in prop::collection::vec(1.0..4.0f64, 2..8)) {
        let total = se_total_loss(2.0, None, &s).unwrap();
        prop_assert!((total - 0.1 * consistency_loss(&s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn vote_stays_within_the_votes(v in prop::collection::vec((1.0..4.0f64, 0.0..1.0f64), 1..12)) {
        let s = vote(&v).unwrap();
        let lo = v.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = v.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
    }

    #[test]
    fn patches_lie_inside_the_image(
        h in 16usize..300, w in 16usize..300, m in 1usize..12, patch in 8usize..64, seed in any::<u64>(),
    ) {
        prop_assume!(patch <= h && patch <= w);
        for (y, x) in patch_origins(h, w, m, patch, seed).unwrap() {
            prop_assert!(y + patch <= h && x + patch <= w);
        }
    }

    #[test]
    fn convex_weights_are_a_partition_of_unity(
        h in 1usize..6, w in 1usize..6, s in 1.0..4.0f64,
        logits in prop::collection::vec(-30.0..30.0f64, 9 * 36),
    ) {
        let l = Tensor::from_vec(logits[..9 * h * w].to_vec(), (1, 9, h, w), &Device::Cpu).unwrap();
        let (th, tw) = target_size(h, w, s);
        let a = convex_weights(&l, th, tw).unwrap();
        let sums = a.sum(1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        prop_assert!(sums.iter().all(|v| (v - 1.0).abs() < 1e-9));
        let all = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        prop_assert!(all.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn target_size_rounds_half_up(h in 1usize..500, w in 1usize..500, s in 1.0..4.0f64) {
        prop_assert_eq!(target_size(h, w, s), (round_half_up(h as f64 * s), round_half_up(w as f64 * s)));
    }

    #[test]
    fn restoration_losses_stay_in_range(
        y in prop::collection::vec(0.0..=1.0f64, 36),
        gt in prop::collection::vec(0.0..=1.0f64, 36),
        c in prop::collection::vec(0.0..=1.0f64, 9),
    ) {
        let (y, gt, c) = (tensor(y, 6, 6), tensor(gt, 6, 6), tensor(c, 3, 3));
        let bin = scalar(&binarization_loss(&y).unwrap()).unwrap();
        prop_assert!((0.0..=0.5).contains(&bin));
        let conf = scalar(&confidence_loss(&c).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&conf));
        let pix = scalar(&pixel_loss(&y, &gt, &c).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&pix));
        let gated = scalar(&pixel_loss(&y, &gt, &c.zeros_like().unwrap()).unwrap()).unwrap();
        prop_assert_eq!(gated, 0.0);
    }

    #[test]
    fn psnr_and_ssim_are_symmetric((a, b) in image_pair(20)) {
        let p = psnr(&a, &b, None).unwrap();
        prop_assert!((p - psnr(&b, &a, None).unwrap()).abs() < 1e-12);
        let s = ssim(&a, &b, None).unwrap();
        prop_assert!((s - ssim(&b, &a, None).unwrap()).abs() < 1e-12);
        prop_assert!(s <= 1.0 + 1e-12);
    }

    #[test]
    fn degradation_keeps_range_and_size(
        img in unit_image(2, 40), scale in 1.0..4.0f64, noise in 0.0..10.0f64, seed in any::<u64>(),
    ) {
        let p = DegradationParams { noise_sigma: noise, ..DegradationParams::downsample_only(scale) };
        let (oh, ow) = p.output_dims(img.height(), img.width());
        prop_assume!(oh >= 8 && ow >= 8);
        let d = degrade(&img, &p, seed).unwrap();
        prop_assert_eq!(d.dims(), (oh, ow));
        prop_assert!(d.is_in_unit_range());
    }

    #[test]
    fn identifiability_is_monotone_in_scale(
        k in kind(), period in 2.0..14.0f64, s1 in 1.0..4.0f64, s2 in 1.0..4.0f64,
    ) {
        let spec = ScreentoneSpec::new(k, period, 0.0, 0.5);
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        prop_assert!(!spec_identifiable(&spec, hi) || spec_identifiable(&spec, lo));
    }

    #[test]
    fn scale_errors_are_relative(
        pairs in prop::collection::vec((1.0..2.0f64, 0.9..1.1f64), 1..20), k in 1.0..2.0f64,
    ) {
        let gts: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let preds: Vec<f64> = pairs.iter().map(|p| p.0 * p.1).collect();
        let vols = vec!["v".to_string(); gts.len()];
        let a = scale_eval(&preds, &gts, &vols).unwrap().overall().mean_relative_error.unwrap();
        let sg: Vec<f64> = gts.iter().map(|g| g * k).collect();
        let sp: Vec<f64> = preds.iter().map(|p| p * k).collect();
        let b = scale_eval(&sp, &sg, &vols).unwrap().overall().mean_relative_error.unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn screentones_are_bitonal(
        k in kind(), period in 2.0..12.0f64, angle in 0.0..90.0f64, tone in 0.0..=1.0f64,
    ) {
        let img = render_screentone(&ScreentoneSpec::new(k, period, angle, tone), 24, 24).unwrap();
        prop_assert!(img.is_bitonal());
    }

    #[test]
    fn estimator_output_is_bounded(img in unit_image(4, 24), seed in any::<u64>()) {
        let config = SeNetConfig { n_downsample: 2, base_channels: 4, ..Default::default() };
        let net = SeNet::new(config, DType::F32, seed).unwrap();
        let (s, c) = net.predict(&img).unwrap();
        prop_assert!((1.0..=4.0).contains(&s));
        prop_assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn restorer_outputs_are_in_unit_range(img in unit_image(16, 20), s in 1.0..4.0f64, seed in any::<u64>()) {
        let config = MrNetConfig { base_channels: 4, noise_channels: 2, ..Default::default() };
        let net = MrNet::new(config, DType::F32, seed).unwrap();
        let out = mr_forward(&net, &img, s, seed).unwrap();
        prop_assert_eq!(out.restored.dims(), target_size(img.height(), img.width(), s));
        prop_assert!(out.restored.is_in_unit_range());
        prop_assert_eq!((out.confidence.height(), out.confidence.width()), img.dims());
    }
}
