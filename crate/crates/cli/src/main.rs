//! `ptz`: synthesize scenes, calibrate, georeference, localize and evaluate.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ptz_core::correspondence::MatchFile;
use ptz_core::eval::{evaluate, summarize};
use ptz_core::georef::{georeference, load_annotations};
use ptz_core::io::{read_json, write_json};
use ptz_core::online::ReferenceDatabase;
use ptz_core::pipeline::{
    calibrate, ground_template, localize, truth_cameras, CameraSet, LocalizationFile, PipelineConfig,
    ReconstructionFile,
};
use ptz_core::polygon::Polygon;
use ptz_core::synth::{generate_scene, write_scene, GroundTruthFile};
use ptz_core::{par, Error, Result, ViewId};

#[derive(Parser)]
#[command(name = "ptz", version, about = "Calibration of pan-tilt-zoom cameras")]
struct Cli {
    /// TOML configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Run every stage sequentially.
    #[arg(long, global = true)]
    sequential_compute: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Offline calibration from pairwise matches.
    Calibrate(CalibrateArgs),
    /// Align a reconstruction to the world frame with annotations.
    Georef(GeorefArgs),
    /// Localize new frames against a calibrated reconstruction.
    Localize(LocalizeArgs),
    /// Score predicted cameras against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Pixel noise standard deviation.
    #[arg(long, allow_negative_numbers = true)]
    sigma: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    matches: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// One distortion set for all views.
    #[arg(long)]
    share_distortion: bool,
    /// RANSAC symmetric transfer threshold in pixels.
    #[arg(long)]
    ransac_threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GeorefArgs {
    #[arg(long)]
    recon: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LocalizeArgs {
    /// Reconstruction file holding the reference views.
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    matches: PathBuf,
    /// Bootstrap each frame from the previous one.
    #[arg(long, conflicts_with = "stateless")]
    sequential: bool,
    /// Match every frame against the references directly.
    #[arg(long)]
    stateless: bool,
    #[arg(long)]
    ransac_threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Reconstruction or localization file.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth file written by `synth`.
    #[arg(long)]
    truth: PathBuf,
    /// Ground polygon for part-mode IoU; defaults to a square around the camera.
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long, default_value = "scene")]
    scene: String,
    #[arg(long, default_value = "offline")]
    stage: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage errors share the config exit code; 2 is reserved
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match par::with_threads(cli.jobs, || run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_algorithmic() { 2 } else { 1 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if cli.sequential_compute {
        cfg.parallel = false;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth(a) => {
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(s) = a.sigma {
                cfg.scene.noise_sigma_px = s;
            }
            let cfg = finish(cfg)?;
            cmd_synth(&cfg, &a.out)
        }
        Command::Calibrate(a) => {
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(t) = a.ransac_threshold {
                cfg.ransac.threshold_px = t;
            }
            cfg.iba.share_distortion |= a.share_distortion;
            let cfg = finish(cfg)?;
            cmd_calibrate(&cfg, &a.matches, &a.out)
        }
        Command::Georef(a) => cmd_georef(&finish(cfg)?, &a.recon, &a.annotations, &a.out),
        Command::Localize(a) => {
            if a.sequential {
                cfg.online.sequential = true;
            }
            if a.stateless {
                cfg.online.sequential = false;
            }
            if let Some(t) = a.ransac_threshold {
                cfg.ransac.threshold_px = t;
            }
            cmd_localize(&finish(cfg)?, &a.db, &a.matches, &a.out)
        }
        Command::Eval(a) => cmd_eval(&finish(cfg)?, a),
    }
}

fn finish(cfg: PipelineConfig) -> Result<PipelineConfig> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_synth(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let scene = generate_scene(&cfg.scene)?;
    write_scene(&scene, out)?;
    let template = ground_template(&scene.truth.world_center(), cfg.template_half_size_m);
    write_json(&out.join("template.json"), &template)?;
    println!("wrote scene with {} references and {} queries to {}", scene.references.len(), scene.queries.len(), out.display());
    Ok(())
}

fn cmd_calibrate(cfg: &PipelineConfig, matches: &Path, out: &Path) -> Result<()> {
    let file: MatchFile = read_json(matches)?;
    match calibrate(&file, cfg) {
        Ok((recon, status)) => {
            write_json(out, &ReconstructionFile::new(&recon, status))?;
            println!("{} views registered, {} landmarks ({status:?})", recon.registered.len(), recon.landmarks.len());
            Ok(())
        }
        Err(e) => {
            if e.is_algorithmic() {
                write_json(out, &ReconstructionFile::failed(e.to_string()))?;
            }
            Err(e)
        }
    }
}

fn cmd_georef(cfg: &PipelineConfig, recon_path: &Path, annotations: &Path, out: &Path) -> Result<()> {
    let file: ReconstructionFile = read_json(recon_path)?;
    let recon = file.to_reconstruction()?;
    let annotations = load_annotations(annotations)?;
    let geo = georeference(recon, &annotations, &cfg.georef, &cfg.iba)?;
    write_json(out, &ReconstructionFile::georeferenced(&geo, file.status))?;
    let c = geo.world_center();
    println!(
        "camera center ({:.3}, {:.3}, {:.3}); {} annotation outliers",
        c.x,
        c.y,
        c.z,
        geo.flagged_annotations.len()
    );
    Ok(())
}

fn cmd_localize(cfg: &PipelineConfig, db_path: &Path, matches: &Path, out: &Path) -> Result<()> {
    let file: ReconstructionFile = read_json(db_path)?;
    let transform = file.transform()?;
    let db = ReferenceDatabase::from_reconstruction(&file.to_reconstruction()?, transform)?;
    let online: MatchFile = read_json(matches)?;
    let results = localize(&db, &online, cfg)?;
    let ok = results.iter().filter(|r| r.params.is_some()).count();
    write_json(out, &LocalizationFile::new(&results, transform.as_ref()))?;
    println!("{ok} of {} frames localized", results.len());
    if ok == 0 && !results.is_empty() {
        return Err(Error::Localization("no frame could be localized".into()));
    }
    Ok(())
}

fn cmd_eval(cfg: &PipelineConfig, a: &EvalArgs) -> Result<()> {
    let pred: CameraSet = read_json(&a.pred)?;
    let pred = pred.world_cameras()?;
    let truth: GroundTruthFile = read_json(&a.truth)?;
    let views = truth
        .cameras
        .iter()
        .map(|c| Ok((c.view_id.clone(), c.to_view()?)))
        .collect::<Result<_>>()?;
    let truth_cams = truth_cameras(&views);
    let template = match &a.template {
        Some(p) => {
            let t: Polygon = read_json(p)?;
            t.validate()?;
            Polygon::new(t.vertices)
        }
        None => ground_template(&truth.transform.to_transform()?.inverse().translation, cfg.template_half_size_m),
    };
    let expected: Vec<ViewId> = if a.stage == "online" { truth.queries.clone() } else { truth.references.clone() };
    let report = evaluate(&a.scene, &a.stage, &pred, &truth_cams, &expected, Some(&template), cfg.parallel)?;
    let table = summarize(std::slice::from_ref(&report))?;
    write_json(&a.out, &serde_json::json!({ "table": table, "views": report.views, "missing": report.missing }))?;
    print!("{}", table.to_text());
    Ok(())
}
