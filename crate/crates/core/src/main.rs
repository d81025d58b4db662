use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use foci::io::GrayImage;
use foci::pipeline::{self, PipelineConfig};
use foci::Error;

/// Foci detector: synthetic data, training, inference and evaluation.
#[derive(Parser)]
#[command(name = "foci", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Index of the first generated image; use a disjoint range for
        /// held-out sets.
        #[arg(long, default_value_t = 0)]
        first_index: u64,
        /// Reuse a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on a dataset directory and write weights.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print detections for one PGM image.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        conf: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate weights on an annotated dataset and write a JSON report.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> foci::Result<PipelineConfig> {
    path.map_or_else(|| Ok(PipelineConfig::desk()), PipelineConfig::load)
}

fn run(cli: Cli) -> foci::Result<()> {
    match cli.command {
        Command::Gen {
            config,
            out,
            count,
            first_index,
            force,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            pipeline::run_gen(&cfg, &out, first_index, count, force)?;
            println!("{}", out.join(foci::synth::MANIFEST_FILE).display());
        }
        Command::Train {
            config,
            data,
            out,
            epochs,
            resume,
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let outcome = pipeline::run_train(&cfg, &data, &out, resume.as_deref(), |line| {
                println!("{line}")
            })?;
            println!("weights {}", out.display());
            println!("loss history {}", outcome.history_path.display());
        }
        Command::Infer {
            weights,
            image,
            conf,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mut detector = pipeline::load_detector(&cfg, &weights)?;
            let img = GrayImage::read(&image)?;
            let dets = pipeline::run_infer(
                &cfg,
                &mut detector,
                &img,
                conf.unwrap_or(cfg.eval.conf_threshold),
            )?;
            for d in &dets {
                println!("{}", pipeline::detection_line(d));
            }
        }
        Command::Eval {
            weights,
            data,
            iou,
            report,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let r = pipeline::run_eval(
                &cfg,
                &weights,
                &data,
                iou.unwrap_or(cfg.eval.iou_threshold),
                &report,
            )?;
            match r.map {
                Some(m) => println!("mAP@{} {m:.4}", r.iou_threshold),
                None => println!("mAP@{} undefined (no ground truth)", r.iou_threshold),
            }
            println!("max recall {:.4}", r.max_recall);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFiniteLoss { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
