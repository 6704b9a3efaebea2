//! Analytic gradients of every loss against central finite differences in
//! double precision on 8x8 instances.

use candle_core::{DType, Device, Tensor, Var};
use manga_restore::nn::ops::scalar;
use manga_restore::restorer::{
    binarization_loss, confidence_loss, homogeneity_loss, intensity_loss, pixel_loss,
};
use manga_restore::scale_estimator::{
    consistency_loss_t, scale_loss_t, se_total_loss_t, SeNet, SeNetConfig, CONSISTENCY_WEIGHT,
};
use manga_restore::screen_embedding::{ScreenEmbedding, SuperpixelPartition};
use manga_restore::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::training::Shared;
use crate::Outcome;

const STEP: f64 = 1e-6;
const TOLERANCE: f64 = 1e-4;

fn max_abs(v: impl Iterator<Item = f64>) -> f64 {
    v.fold(0.0, |m, x| m.max(x.abs()))
}

/// `|a - n|_inf / max(|a|_inf, |n|_inf)`.
fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = max_abs(a.iter().zip(n).map(|(x, y)| x - y));
    let scale = max_abs(a.iter().copied()).max(max_abs(n.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn tensor(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

type LossFn<'a> = dyn Fn(&[Tensor]) -> Result<Tensor> + 'a;

/// Relative error of the gradient of `f` with respect to input `wrt`.
fn check_input(f: &LossFn<'_>, inputs: &[Tensor], wrt: usize) -> f64 {
    let vars: Vec<Var> = inputs.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
    let live: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&live).unwrap().backward().unwrap();
    let analytic = values(grads.get(vars[wrt].as_tensor()).expect("input reaches the loss"));
    let base = values(&inputs[wrt]);
    let shape = inputs[wrt].dims().to_vec();
    let eval = |i: usize, d: f64| {
        let mut v = base.clone();
        v[i] += d;
        let mut ins = inputs.to_vec();
        ins[wrt] = tensor(v, &shape);
        scalar(&f(&ins).unwrap()).unwrap()
    };
    let numeric: Vec<f64> = (0..base.len())
        .map(|i| (eval(i, STEP) - eval(i, -STEP)) / (2.0 * STEP))
        .collect();
    relative_error(&analytic, &numeric)
}

/// Relative error of the gradient of `f` with respect to every parameter of
/// `net`.
fn check_params(net: &SeNet, f: &dyn Fn(&SeNet) -> Result<Tensor>) -> f64 {
    let grads = f(net).unwrap().backward().unwrap();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for var in net.params().vars().values() {
        analytic.extend(values(grads.get(var.as_tensor()).expect("parameter reaches the loss")));
        let base = values(var.as_tensor());
        let shape = var.dims().to_vec();
        for i in 0..base.len() {
            let at = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                var.set(&tensor(v, &shape)).unwrap();
                scalar(&f(net).unwrap()).unwrap()
            };
            let (hi, lo) = (at(STEP), at(-STEP));
            numeric.push((hi - lo) / (2.0 * STEP));
        }
        var.set(&tensor(base, &shape)).unwrap();
    }
    relative_error(&analytic, &numeric)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values in `(0, 1)` kept clear of 0.5, where the binarization distance
/// has its kink.
fn off_midpoint(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.random_range(0.05..0.45);
            if rng.random::<bool>() {
                v
            } else {
                1.0 - v
            }
        })
        .collect()
}

fn estimator_checks(rng: &mut ChaCha8Rng) -> Vec<(&'static str, f64)> {
    let config = SeNetConfig {
        n_downsample: 1,
        base_channels: 2,
        cbam_reduction: 1,
        ..Default::default()
    };
    let net = SeNet::new(config, DType::F64, 7).unwrap();
    let (pages, patches) = (2, 3);
    let x = tensor(uniform(rng, pages * patches * 64, 0.0, 1.0), &[pages * patches, 1, 8, 8]);
    let gt = tensor(vec![1.7, 3.2], &[pages]);
    let scales = |net: &SeNet| -> Result<Tensor> { Ok(net.forward(&x)?.scale.reshape((pages, patches))?) };
    vec![
        ("L_scl", check_params(&net, &|n| scale_loss_t(&scales(n)?, &gt))),
        ("L_cons", check_params(&net, &|n| consistency_loss_t(&scales(n)?))),
        (
            "L_scl + 0.1 L_cons",
            check_params(&net, &|n| se_total_loss_t(&scales(n)?, Some(&gt), CONSISTENCY_WEIGHT)),
        ),
    ]
}

fn restorer_checks(rng: &mut ChaCha8Rng) -> Vec<(&'static str, f64)> {
    let y = tensor(off_midpoint(rng, 64), &[1, 1, 8, 8]);
    let gt = tensor((0..64).map(|_| f64::from(rng.random::<bool>())).collect(), &[1, 1, 8, 8]);
    let conf = tensor(uniform(rng, 16, 0.05, 0.95), &[1, 1, 4, 4]);
    let reference = tensor(uniform(rng, 64, 0.0, 1.0), &[1, 1, 8, 8]);
    let raw: Vec<u32> = (0..64).map(|p| ((p / 8) / 4 * 2 + (p % 8) / 4) as u32).collect();
    let part = SuperpixelPartition::from_raw(8, 8, &raw).unwrap();
    let emb = ScreenEmbedding::bundled();
    let pix = |t: &[Tensor]| pixel_loss(&t[0], &t[1], &t[2]);
    let itn = |t: &[Tensor]| intensity_loss(&t[0], &t[1]);
    let hom = |t: &[Tensor]| homogeneity_loss(&t[0], &part, &emb);
    vec![
        ("L_pix / I_y", check_input(&pix, &[y.clone(), gt.clone(), conf.clone()], 0)),
        ("L_pix / M_c", check_input(&pix, &[y.clone(), gt, conf.clone()], 2)),
        ("L_conf / M_c", check_input(&|t| confidence_loss(&t[0]), &[conf], 0)),
        ("L_bin / I_y", check_input(&|t| binarization_loss(&t[0]), &[y.clone()], 0)),
        ("L_itn / I_y", check_input(&itn, &[y.clone(), reference], 0)),
        ("L_hom / I_y", check_input(&hom, &[y], 0)),
    ]
}

pub fn criterion(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checks = estimator_checks(&mut rng);
    checks.extend(restorer_checks(&mut rng));
    let pass = checks.iter().all(|&(_, e)| e < TOLERANCE);
    let detail = checks
        .iter()
        .map(|(name, e)| format!("{name}: relative error {e:.2e}"))
        .collect::<Vec<_>>()
        .join("\n");
    Outcome::new(pass, detail)
}
