//! Command-line front end. [`run`] parses arguments, dispatches one
//! subcommand and maps failures to exit codes: 2 for argument errors, 1 for
//! runtime errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::degradation::{degrade, DegradationParams};
use crate::error::{Error, Result};
use crate::imaging::{binarize, load_image, save_image, Image, ResampleFilter};
use crate::metrics::{identifiability_mask, restore_eval, scale_eval, RestoreSample};
use crate::restorer::{mr_forward, MrNet};
use crate::scale_estimator::{estimate_scale_voted, SeNet};
use crate::screen_embedding::{fit_projection, screentone_bank, ScreenEmbedding};
use crate::trainer::{build_dataset_with, train_mr, train_se, DatasetManifest, DatasetOptions, DegradationStyle, ScaleDist, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "manga-restore", version, about = "Scale estimation and screentone restoration for degraded manga")]
struct Cli {
    /// Increase log detail on standard error.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic pages, degrade them and write a manifest.
    Synth(SynthArgs),
    /// Degrade one image with explicit parameters.
    Degrade(DegradeArgs),
    /// Refit the screentone embedding projection and write it as JSON.
    EmbedFit(EmbedFitArgs),
    /// Train the scale estimator.
    TrainSe(TrainArgs),
    /// Train the restorer.
    TrainMr(TrainMrArgs),
    /// Estimate the restorative scale of an image.
    Estimate(EstimateArgs),
    /// Restore an image at a given or estimated scale.
    Restore(RestoreArgs),
    /// Score scale estimates and restorations on a dataset.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    pages: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 0.0)]
    unpaired_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    scale_min: f64,
    #[arg(long, default_value_t = 4.0)]
    scale_max: f64,
    /// Replace the random degradation mix with noise of this 8-bit sigma.
    #[arg(long)]
    noise_only: Option<f64>,
    #[arg(long, default_value_t = usize::MAX, hide_default_value = true)]
    pages_per_volume: usize,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scale: f64,
    #[arg(long, default_value_t = 0.0)]
    blur_sigma: f64,
    #[arg(long, default_value_t = 5)]
    blur_kernel: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[arg(long)]
    jpeg_quality: Option<u8>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EmbedFitArgs {
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest (manifest.jsonl).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single key=value override, repeatable; applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainMrArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Frozen scale estimator used for unpaired records.
    #[arg(long)]
    se_model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 8)]
    patches: usize,
    /// Patch side; clamped to the image.
    #[arg(long, default_value_t = 128)]
    patch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct RestoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, conflicts_with = "se_model", required_unless_present = "se_model")]
    scale: Option<f64>,
    #[arg(long)]
    se_model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Threshold the result at 0.5.
    #[arg(long)]
    binarize: bool,
    #[arg(long)]
    confidence_out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    patches: usize,
    #[arg(long, default_value_t = 128)]
    patch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory for report.json and the per-image CSV tables.
    #[arg(long)]
    out: PathBuf,
    /// Scale estimator to score against ground-truth scales.
    #[arg(long)]
    se_model: Option<PathBuf>,
    /// Restorer to run at the ground-truth scale.
    #[arg(long)]
    mr_model: Option<PathBuf>,
    /// Directory of externally restored `{id}.png` files.
    #[arg(long)]
    restored: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    patches: usize,
    #[arg(long, default_value_t = 128)]
    patch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Argument problems found before any work starts.
struct Usage(String);

fn require_file(p: &Path) -> std::result::Result<(), Usage> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Usage(format!("no such file: {}", p.display())))
    }
}

fn require_dir(p: &Path) -> std::result::Result<(), Usage> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Usage(format!("no such directory: {}", p.display())))
    }
}

fn validate(cmd: &Command) -> std::result::Result<(), Usage> {
    match cmd {
        Command::Synth(a) => {
            if a.pages == 0 {
                return Err(Usage("--pages must be at least 1".into()));
            }
            if !(1.0..=4.0).contains(&a.scale_min) || a.scale_max < a.scale_min || a.scale_max > 4.0 {
                return Err(Usage("scale range must lie within [1, 4]".into()));
            }
            Ok(())
        }
        Command::Degrade(a) => require_file(&a.input),
        Command::EmbedFit(_) => Ok(()),
        Command::TrainSe(a) => validate_train(a),
        Command::TrainMr(a) => {
            validate_train(&a.train)?;
            a.se_model.as_deref().map_or(Ok(()), require_file)
        }
        Command::Estimate(a) => {
            require_file(&a.model)?;
            require_file(&a.input)
        }
        Command::Restore(a) => {
            require_file(&a.model)?;
            require_file(&a.input)?;
            if let Some(s) = a.scale {
                if !(1.0..=4.0).contains(&s) {
                    return Err(Usage(format!("--scale must lie in [1, 4], got {s}")));
                }
            }
            a.se_model.as_deref().map_or(Ok(()), require_file)
        }
        Command::Evaluate(a) => {
            require_file(&a.data)?;
            if a.se_model.is_none() && a.mr_model.is_none() && a.restored.is_none() {
                return Err(Usage("give --se-model, --mr-model or --restored".into()));
            }
            a.se_model.as_deref().map_or(Ok(()), require_file)?;
            a.mr_model.as_deref().map_or(Ok(()), require_file)?;
            a.restored.as_deref().map_or(Ok(()), require_dir)
        }
    }
}

fn validate_train(a: &TrainArgs) -> std::result::Result<(), Usage> {
    require_file(&a.data)?;
    a.config.as_deref().map_or(Ok(()), require_file)?;
    a.resume.as_deref().map_or(Ok(()), require_file)?;
    for o in &a.overrides {
        if !o.contains('=') {
            return Err(Usage(format!("--set expects KEY=VALUE, got {o:?}")));
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).target(env_logger::Target::Stderr).try_init();
    if let Err(Usage(msg)) = validate(&cli.command) {
        eprintln!("error: {msg}\n\nRun with --help for usage.");
        return 2;
    }
    let mut stdout = std::io::stdout().lock();
    match dispatch(cli.command, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn out(w: &mut dyn Write, line: String) -> Result<()> {
    writeln!(w, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn dispatch(cmd: Command, w: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a, w),
        Command::Degrade(a) => degrade_cmd(a, w),
        Command::EmbedFit(a) => {
            let asset = fit_projection(&screentone_bank())?;
            if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(&a.out, asset.to_json()?).map_err(|e| Error::io(&a.out, e))?;
            out(w, format!("bank_scale={}", asset.bank_scale))?;
            out(w, format!("asset={}", a.out.display()))
        }
        Command::TrainSe(a) => {
            let cfg = train_config(&a)?;
            let manifest = DatasetManifest::load(&a.data)?;
            let res = train_se(&cfg, &manifest, &a.out, a.resume.as_deref())?;
            report_training(w, &res)
        }
        Command::TrainMr(a) => {
            let cfg = train_config(&a.train)?;
            let manifest = DatasetManifest::load(&a.train.data)?;
            let res = train_mr(&cfg, &manifest, &a.train.out, a.se_model.as_deref(), a.train.resume.as_deref())?;
            report_training(w, &res)
        }
        Command::Estimate(a) => {
            let net = SeNet::load(&a.model)?;
            let img = load_image(&a.input)?;
            let patch = a.patch_size.min(img.height()).min(img.width());
            let est = estimate_scale_voted(&net, &img, a.patches, patch, a.seed)?;
            out(w, format!("scale={:.4}", est.scale))?;
            out(w, "patch\ty\tx\tscale\tconfidence".into())?;
            for (i, p) in est.per_patch.iter().enumerate() {
                out(w, format!("{i}\t{}\t{}\t{:.4}\t{:.4}", p.origin.0, p.origin.1, p.scale, p.confidence))?;
            }
            Ok(())
        }
        Command::Restore(a) => restore_cmd(a, w),
        Command::Evaluate(a) => evaluate_cmd(a, w),
    }
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        cfg.apply_kv(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?;
    }
    for o in &a.overrides {
        let (k, v) = o.split_once('=').expect("validated");
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_training(w: &mut dyn Write, res: &crate::trainer::TrainOutcome) -> Result<()> {
    out(w, format!("checkpoint={}", res.checkpoint.display()))?;
    out(w, format!("iterations={}", res.iterations))?;
    if let Some(l) = res.last_loss {
        out(w, format!("loss={l:.6}"))?;
    }
    Ok(())
}

fn synth(a: SynthArgs, w: &mut dyn Write) -> Result<()> {
    let opts = DatasetOptions {
        height: a.height,
        width: a.width,
        unpaired_fraction: a.unpaired_fraction,
        scales: ScaleDist::Uniform(a.scale_min, a.scale_max),
        style: a.noise_only.map_or(DegradationStyle::Random, DegradationStyle::NoiseOnly),
        pages_per_volume: a.pages_per_volume,
        ..DatasetOptions::new(a.pages, a.seed)
    };
    let m = build_dataset_with(&a.out, &opts)?;
    out(w, format!("manifest={}", a.out.join(crate::trainer::MANIFEST_FILE).display()))?;
    out(w, format!("pages={} paired={}", m.records.len(), m.paired().count()))
}

fn degrade_cmd(a: DegradeArgs, w: &mut dyn Write) -> Result<()> {
    let params = DegradationParams {
        blur_kernel_size: a.blur_kernel,
        blur_sigma: a.blur_sigma,
        scale: a.scale,
        jpeg_quality: a.jpeg_quality,
        noise_sigma: a.noise_sigma,
        filter: ResampleFilter::Area,
    };
    let img = load_image(&a.input)?;
    let d = degrade(&img, &params, a.seed)?;
    save_image(&d, &a.out)?;
    let sidecar = sidecar_path(&a.out);
    fs::write(&sidecar, serde_json::to_string_pretty(&params)?).map_err(|e| Error::io(&sidecar, e))?;
    out(w, format!("size={}x{}", d.height(), d.width()))
}

/// `<out>.json` next to an output image.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn restore_cmd(a: RestoreArgs, w: &mut dyn Write) -> Result<()> {
    let img = load_image(&a.input)?;
    let net = MrNet::load(&a.model)?;
    let (scale, source) = match (a.scale, &a.se_model) {
        (Some(s), _) => (s, "given".to_string()),
        (None, Some(p)) => {
            let se = SeNet::load(p)?;
            let patch = a.patch_size.min(img.height()).min(img.width());
            let est = estimate_scale_voted(&se, &img, a.patches, patch, a.seed)?;
            (est.scale.clamp(1.0, net.config().s_max), "estimated".to_string())
        }
        (None, None) => unreachable!("argument parser requires a scale source"),
    };
    let res = mr_forward(&net, &img, scale, a.seed)?;
    let restored = if a.binarize {
        binarize(&res.restored, 0.5).to_image()
    } else {
        res.restored.clone()
    };
    save_image(&restored, &a.out)?;
    if let Some(c) = &a.confidence_out {
        save_image(res.confidence.image(), c)?;
    }
    let meta = json!({
        "input": a.input,
        "scale": scale,
        "scale_source": source,
        "effective_scale": res.effective_scale,
        "height": restored.height(),
        "width": restored.width(),
        "binarized": a.binarize,
        "confidence": a.confidence_out,
    });
    let sidecar = sidecar_path(&a.out);
    fs::write(&sidecar, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&sidecar, e))?;
    out(w, format!("scale={scale:.4}"))?;
    out(w, format!("effective_scale={:.4}", res.effective_scale))?;
    out(w, format!("size={}x{}", restored.height(), restored.width()))
}

fn evaluate_cmd(a: EvaluateArgs, w: &mut dyn Write) -> Result<()> {
    let manifest = DatasetManifest::load(&a.data)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut report = serde_json::Map::new();
    if let Some(p) = &a.se_model {
        let se = SeNet::load(p)?;
        let (mut preds, mut gts, mut vols) = (Vec::new(), Vec::new(), Vec::new());
        let mut csv = String::from("id,volume,scale_gt,scale_pred\n");
        for r in manifest.paired() {
            let img = manifest.load_degraded(r)?;
            let patch = a.patch_size.min(img.height()).min(img.width());
            let est = estimate_scale_voted(&se, &img, a.patches, patch, a.seed)?;
            let gt = r.scale().expect("paired");
            csv.push_str(&format!("{},{},{gt},{}\n", r.id, r.volume, est.scale));
            preds.push(est.scale);
            gts.push(gt);
            vols.push(r.volume.clone());
        }
        let rep = scale_eval(&preds, &gts, &vols)?;
        write_file(&a.out.join("scales.csv"), &csv)?;
        out(w, format!("scale_accuracy={:.4}", rep.overall().accuracy.unwrap_or(0.0)))?;
        report.insert("scale".into(), serde_json::to_value(&rep)?);
    }
    if a.mr_model.is_some() || a.restored.is_some() {
        let net = a.mr_model.as_deref().map(MrNet::load).transpose()?;
        let emb = ScreenEmbedding::bundled();
        let mut owned: Vec<(String, Image, Image, crate::imaging::BitonalMask)> = Vec::new();
        for r in manifest.paired() {
            let gt = manifest.load_gt(r)?;
            let restored = match (&net, &a.restored) {
                (Some(net), _) => mr_forward(net, &manifest.load_degraded(r)?, r.scale().expect("paired"), a.seed)?.restored,
                (None, Some(dir)) => {
                    let p = dir.join(format!("{}.png", r.id));
                    if !p.is_file() {
                        continue;
                    }
                    load_image(&p)?
                }
                (None, None) => unreachable!("validated"),
            };
            if restored.dims() != gt.dims() {
                log::warn!("{}: restored size {:?} differs from ground truth {:?}", r.id, restored.dims(), gt.dims());
                continue;
            }
            let specs = r.specs.clone().unwrap_or_default();
            let mask = identifiability_mask(&manifest.load_labels(r)?, &specs, r.scale().expect("paired"))?;
            owned.push((r.id.clone(), restored, gt, mask));
        }
        let samples: Vec<RestoreSample<'_>> = owned
            .iter()
            .map(|(id, restored, gt, mask)| RestoreSample {
                id: id.clone(),
                restored,
                gt,
                mask,
            })
            .collect();
        let rep = restore_eval(&samples, &emb)?;
        let mut csv = String::from("id,psnr,ssim,svae,mask_coverage\n");
        for i in &rep.images {
            csv.push_str(&format!("{},{},{},{},{}\n", i.id, i.psnr, i.ssim, i.svae, i.mask_coverage));
        }
        write_file(&a.out.join("restoration.csv"), &csv)?;
        out(w, format!("psnr={:.3} ssim={:.4} svae={:.4}", rep.mean_psnr, rep.mean_ssim, rep.mean_svae))?;
        report.insert("restoration".into(), serde_json::to_value(&rep)?);
    }
    let path = a.out.join("report.json");
    write_file(&path, &serde_json::to_string_pretty(&report)?)?;
    out(w, format!("report={}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
