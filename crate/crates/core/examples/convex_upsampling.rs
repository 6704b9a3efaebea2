//! Convex upsampling to a non-integer scale: uniform weights blur the 3x3
//! neighbourhood while a dominant centre logit reproduces nearest neighbour.

use candle_core::{Device, Tensor};
use manga_restore::restorer::{convex_upsample, target_size};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dev = Device::Cpu;
    let (h, w, s) = (3, 4, 1.7);
    let (th, tw) = target_size(h, w, s);
    let feats = Tensor::arange(0f64, (h * w) as f64, &dev)?.reshape((1, 1, h, w))?;
    let uniform = Tensor::zeros((1, 9, h, w), candle_core::DType::F64, &dev)?;
    let centre: Vec<f64> = (0..9 * h * w).map(|i| if i / (h * w) == 4 { 50.0 } else { 0.0 }).collect();
    let centre = Tensor::from_vec(centre, (1, 9, h, w), &dev)?;
    println!("features {h}x{w} at scale {s} -> {th}x{tw}");
    for (name, logits) in [("uniform", &uniform), ("centre", &centre)] {
        let up = convex_upsample(&feats, logits, th, tw)?.squeeze(0)?.squeeze(0)?.to_vec2::<f64>()?;
        println!("{name}:");
        for row in up {
            println!("  {}", row.iter().map(|v| format!("{v:5.2}")).collect::<Vec<_>>().join(" "));
        }
    }
    Ok(())
}
