use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pcbdefect::config::RunConfig;
use pcbdefect::pipeline;
use pcbdefect::Error;

/// GAN-augmented PCB defect detection pipeline.
#[derive(Debug, Parser)]
#[command(name = "pcbdefect", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every component seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    nms_iou: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single logical thread, byte-identical artifacts.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic boards and the dataset manifest.
    SynthData,
    /// Train one GAN per enabled defect class and measure fidelity.
    TrainGan,
    /// Composite GAN defects onto blank boards and add them to training.
    Augment,
    /// Train the detector and calibrate per-class thresholds.
    Train,
    /// Evaluate on the val split and write report.txt / report.json.
    Eval,
    /// Write thresholded detections per val image.
    Detect,
    /// Re-render report.txt from report.json.
    Report,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence(_) | Error::NonFinite(_) => EXIT_DIVERGED,
        Error::Io { .. } | Error::Parameter(_) | Error::Json(_) | Error::Empty(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn load_config(cli: &Cli) -> pcbdefect::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = cli.epochs {
        cfg.train.epochs = e;
    }
    if let Some(t) = cli.nms_iou {
        cfg.train.nms_iou = t;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> pcbdefect::Result<()> {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::SynthData => {
            let m = pipeline::synth_data(&cfg)?;
            println!("wrote {} boards to {}", m.entries.len(), pipeline::Layout::new(&cfg).data.display());
        }
        Command::TrainGan => {
            pipeline::train_gans(&cfg, |class, rec| {
                let verdict = if rec.passed { "pass" } else { "reject" };
                println!(
                    "{class}: moment distance {:.4} ({verdict}), mean diff {:.3?}, std diff {:.3?}",
                    rec.stats.moment_distance, rec.stats.mean_diff, rec.stats.std_diff
                );
            })?;
        }
        Command::Augment => {
            let n = pipeline::augment(&cfg)?;
            println!("added {n} composited boards to the training split");
        }
        Command::Train => {
            let s = pipeline::train(&cfg, |e| {
                let val = e.val.as_ref().map_or(String::new(), |v| {
                    format!("  val box {:.4} cls {:.4} dfl {:.4}", v.box_loss, v.cls, v.dfl)
                });
                println!(
                    "epoch {:>3}  lr {:.2e}  train box {:.4} cls {:.4} dfl {:.4}{val}",
                    e.epoch, e.lr, e.train.box_loss, e.train.cls, e.train.dfl
                );
            })?;
            println!(
                "trained {} epochs on {} images ({} val) in {:.1}s",
                s.epochs_completed, s.train_images, s.val_images, s.seconds
            );
        }
        Command::Eval => {
            let r = pipeline::eval(&cfg)?;
            print!("{}", pcbdefect::evaluate::report_table(&r));
        }
        Command::Detect => {
            let out = pipeline::detect(&cfg)?;
            let total: usize = out.iter().map(|d| d.detections.len()).sum();
            println!("{total} detections over {} images", out.len());
        }
        Command::Report => print!("{}", pipeline::report(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
