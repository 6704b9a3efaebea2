//! Renders one tile per screentone kind and reports measured black coverage.
//!
//! cargo run --example render_screentones -- [out_dir]

use std::path::PathBuf;

use manga_restore::imaging::save_image;
use manga_restore::screentone::{render_screentone, ScreentoneKind, ScreentoneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("manga-restore-screentones"));
    std::fs::create_dir_all(&out)?;
    for kind in ScreentoneKind::ALL {
        let spec = ScreentoneSpec::new(kind, 6.0, 30.0, 0.35);
        let tile = render_screentone(&spec, 128, 128)?;
        let path = out.join(format!("{kind:?}.png").to_lowercase());
        save_image(&tile, &path)?;
        println!(
            "{kind:?}: tone {:.2}, coverage {:.3}, bitonal {} -> {}",
            spec.tone,
            tile.black_coverage(),
            tile.is_bitonal(),
            path.display()
        );
    }
    Ok(())
}
