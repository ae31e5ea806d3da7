use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lap_core::config::TrainConfig;
use lap_core::data::load_dataset;
use lap_core::eval::{evaluate_dirs, parse_metrics, Align};
use lap_core::fit::{fit_single, psnr, write_fit, FitConfig};
use lap_core::gradsuite::{self, Suite};
use lap_core::infer::{load_checkpoint, load_inputs, reconstruct, write_bundle};
use lap_core::render::Camera;
use lap_core::synth::{synthesize, SynthOptions, Tier};
use lap_core::train::{train_stage, Stage};
use lap_core::{io, Error, Result};

#[derive(Parser)]
#[command(name = "lap", version, about = "Unsupervised 3D face reconstruction from image collections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic face collection.
    Synth {
        #[arg(long)]
        identities: usize,
        #[arg(long)]
        views: usize,
        #[arg(long, default_value = "easy")]
        tier: Tier,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage; B and C continue from a checkpoint of the previous stage.
    Train {
        #[arg(long)]
        stage: Stage,
        /// Identity directories or directories of them.
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// `key = value` file; unset keys keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = "checkpoints")]
        out: PathBuf,
    },
    /// Fit factors to a single image without any network.
    Fit {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a trained model on a set of images of one person.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        /// Images, or one identity directory.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        target: usize,
        /// Require scene-specific outputs (stage B or later).
        #[arg(long)]
        personalize: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predictions against ground truth, file by file.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long, default_value = "side,mad,ssim,corr")]
        metrics: String,
        /// Depth alignment before depth metrics: none or median.
        #[arg(long, default_value = "none")]
        align: Align,
        /// CSV output path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Exit status for a run that completed but did not pass.
struct Failed;

fn run(cli: Cli) -> Result<std::result::Result<(), Failed>> {
    match cli.command {
        Command::Synth {
            identities,
            views,
            tier,
            seed,
            resolution,
            out,
        } => {
            let opts = SynthOptions {
                identities,
                views,
                tier,
                seed,
                resolution,
            };
            synthesize(&out, &opts)?;
            println!("wrote {identities} identities x {views} views to {}", out.display());
        }
        Command::Train {
            stage,
            data,
            config,
            resume,
            out,
        } => {
            let cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            let ids = load_dataset(&data)?;
            println!("stage {stage}: {} identities, config {}", ids.len(), &cfg.hash()[..12]);
            train_stage(&cfg, &ids, stage, resume.as_deref(), &out, &mut |r| {
                println!(
                    "epoch {:>3}  train {:.6}  val {:.6}  rejected {}  {}",
                    r.epoch,
                    r.train_loss,
                    r.val_loss,
                    r.rejected,
                    r.checkpoint.display()
                );
            })?;
        }
        Command::Fit { image, iters, seed, out } => {
            let img = io::read_png_rgb(&image)?;
            let cam = Camera::new(lap_core::render::DEFAULT_FOV_DEG, img.dim(2), img.dim(3))?;
            let cfg = FitConfig {
                iterations: iters,
                seed,
                ..FitConfig::default()
            };
            let fit = fit_single(&img, &cam, &cfg)?;
            write_fit(&out, &fit, &cam)?;
            let db = psnr(&fit.render.image, &img, &fit.render.covered)?;
            println!("{iters} iterations, PSNR {db:.2} dB over covered pixels, wrote {}", out.display());
        }
        Command::Reconstruct {
            ckpt,
            input,
            target,
            personalize,
            out,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let images = load_inputs(&input)?;
            let rec = reconstruct(&ck, &images, target, personalize || ck.stage >= Stage::B)?;
            write_bundle(&out, &rec)?;
            println!(
                "stage {} checkpoint, {} inputs, target {}, wrote {}",
                ck.stage,
                rec.inputs,
                target,
                out.display()
            );
        }
        Command::Eval {
            pred_dir,
            gt_dir,
            metrics,
            align,
            report,
        } => {
            let metrics = parse_metrics(&metrics)?;
            let rep = evaluate_dirs(&pred_dir, &gt_dir, &metrics, align)?;
            print!("{}", rep.to_table());
            if let Some(path) = report {
                std::fs::write(&path, rep.to_csv()).map_err(|e| Error::io(&path, e))?;
            }
            if rep.rows.is_empty() {
                eprintln!("error: no prediction in {} matched the ground truth", pred_dir.display());
                return Ok(Err(Failed));
            }
        }
        Command::Gradcheck { suite, seed } => {
            let start = std::time::Instant::now();
            let rows = gradsuite::run(suite, seed)?;
            print!("{}", gradsuite::table(&rows));
            let failed = rows.iter().filter(|r| !r.passed()).count();
            println!("{} checks, {failed} failed, {:.1}s", rows.len(), start.elapsed().as_secs_f64());
            if failed > 0 {
                return Ok(Err(Failed));
            }
        }
    }
    Ok(Ok(()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failed)) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
