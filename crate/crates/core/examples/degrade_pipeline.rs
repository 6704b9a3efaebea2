//! Composes a synthetic page and degrades it with randomly drawn parameters.
//!
//! cargo run --example degrade_pipeline -- [seed]

use manga_restore::degradation::{degrade, sample_params};
use manga_restore::screentone::{compose_page, random_layout};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let layout = random_layout(256, 192, seed, (2, 5))?;
    let (page, labels) = compose_page(&layout)?;
    println!("page {:?}, {} regions, labels present {:?}", page.dims(), layout.regions.len(), labels.present_labels());
    for r in &layout.regions {
        println!("  {:?} period {:.1} angle {:.0} tone {:.2}", r.spec.kind, r.spec.period, r.spec.angle, r.spec.tone);
    }
    for k in 0..6 {
        let params = sample_params(seed * 10 + k);
        let out = degrade(&page, &params, seed + k)?;
        println!(
            "scale {:.3} blur {:.2} noise {:.1} jpeg {:?}: {:?} -> {:?}, mean {:.3} -> {:.3}",
            params.scale,
            params.blur_sigma,
            params.noise_sigma,
            params.jpeg_quality,
            page.dims(),
            out.dims(),
            page.mean(),
            out.mean()
        );
    }
    Ok(())
}
