//! Embeds screentones, compares them with the SVAE distance and partitions a
//! page into superpixels.

use manga_restore::screen_embedding::{superpixels, svae_distance, ScreenEmbedding, SlicOptions};
use manga_restore::screentone::{compose_page, random_layout, render_screentone, ScreentoneKind, ScreentoneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let emb = ScreenEmbedding::bundled();
    let specs = [
        ScreentoneSpec::new(ScreentoneKind::Dot, 6.0, 45.0, 0.3),
        ScreentoneSpec::new(ScreentoneKind::Dot, 6.0, 45.0, 0.5),
        ScreentoneSpec::new(ScreentoneKind::Dot, 10.0, 45.0, 0.3),
        ScreentoneSpec::new(ScreentoneKind::Line, 6.0, 0.0, 0.3),
    ];
    let tiles = specs
        .iter()
        .map(|s| render_screentone(s, 64, 64))
        .collect::<manga_restore::Result<Vec<_>>>()?;
    let phi = emb.embed(&tiles[0])?;
    println!("embedding of a {:?} tile has {} channels", tiles[0].dims(), phi.channels());
    for (i, a) in tiles.iter().enumerate() {
        let row = tiles
            .iter()
            .map(|b| svae_distance(&emb, a, b).map(|d| format!("{d:6.3}")))
            .collect::<manga_restore::Result<Vec<_>>>()?;
        println!("{:?} p{} t{}: {}", specs[i].kind, specs[i].period, specs[i].tone, row.join(" "));
    }
    let (page, _) = compose_page(&random_layout(160, 160, 3, (3, 4))?)?;
    let partition = superpixels(&emb, &page, None, &SlicOptions::default())?;
    let sizes = partition.sizes();
    println!(
        "SLIC: {} superpixels, sizes {}..{}",
        partition.len(),
        sizes.iter().min().unwrap_or(&0),
        sizes.iter().max().unwrap_or(&0)
    );
    Ok(())
}
