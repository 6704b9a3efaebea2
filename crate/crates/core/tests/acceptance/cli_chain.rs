//! synth -> degrade -> train-se -> train-mr -> estimate -> restore through
//! the command-line binary.

use std::path::Path;
use std::process::Command;

use manga_restore::imaging::{load_image, round_half_up};

use crate::training::Shared;
use crate::Outcome;

fn run(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_manga-restore"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn value<'a>(stdout: &'a str, key: &str) -> Option<&'a str> {
    stdout.lines().find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
}

fn chain(dir: &Path) -> Result<String, String> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let data = p("data");
    run(&[
        "synth", "--pages", "8", "--out", &data, "--seed", "5", "--height", "128", "--width", "128",
        "--scale-min", "2", "--scale-max", "2", "--noise-only", "2",
    ])?;
    let page = format!("{data}/pages/0000.png");
    let input = p("input.png");
    run(&["degrade", "--input", &page, "--out", &input, "--scale", "2", "--noise-sigma", "2"])?;
    let manifest = format!("{data}/manifest.jsonl");
    let se = p("se");
    run(&[
        "train-se", "--data", &manifest, "--out", &se, "--set", "iterations=400", "--set", "lr=0.01",
        "--set", "batch_size=2", "--set", "patch_size=32", "--set", "se.base_channels=4",
        "--set", "checkpoint_every=0",
    ])?;
    let mr = p("mr");
    run(&[
        "train-mr", "--data", &manifest, "--out", &mr, "--set", "iterations=2", "--set", "batch_size=1",
        "--set", "patch_size=16", "--set", "mr.base_channels=4", "--set", "checkpoint_every=0",
    ])?;
    let se_model = format!("{se}/se.safetensors");
    let estimate = run(&[
        "estimate", "--model", &se_model, "--input", &input, "--patches", "4", "--patch-size", "32",
    ])?;
    let scale: f64 = value(&estimate, "scale")
        .and_then(|v| v.parse().ok())
        .ok_or("estimate printed no scale")?;
    let restored = p("restored.png");
    let confidence = p("confidence.png");
    run(&[
        "restore", "--model", &format!("{mr}/mr.safetensors"), "--input", &input, "--se-model", &se_model,
        "--out", &restored, "--confidence-out", &confidence, "--patches", "4", "--patch-size", "32",
    ])?;
    let x = load_image(&input).map_err(|e| e.to_string())?;
    let y = load_image(&restored).map_err(|e| e.to_string())?;
    let c = load_image(&confidence).map_err(|e| e.to_string())?;
    let expected = (round_half_up(x.height() as f64 * scale), round_half_up(x.width() as f64 * scale));
    let rounds_to_two = expected == (2 * x.height(), 2 * x.width());
    let doubled = y.dims() == (2 * x.height(), 2 * x.width());
    let conf_ok = c.dims() == x.dims() && c.data().iter().all(|v| (0.0..=1.0).contains(v));
    let verdict = if rounds_to_two && doubled && conf_ok { "ok" } else { "fail" };
    Ok(format!(
        "{verdict}: estimated scale {scale:.4} (raster rounds to 2x: {rounds_to_two})\n\
         degraded {:?} -> restored {:?} (exactly doubled: {doubled})\n\
         confidence map {:?}, values in [0, 1]: {conf_ok}",
        x.dims(),
        y.dims(),
        c.dims()
    ))
}

pub fn criterion(shared: &mut Shared) -> Outcome {
    let dir = shared.path("cli");
    std::fs::create_dir_all(&dir).unwrap();
    match chain(&dir) {
        Ok(detail) => Outcome::new(detail.starts_with("ok"), detail.trim_start_matches("ok: ").trim_start_matches("fail: ")),
        Err(e) => Outcome::new(false, e),
    }
}
