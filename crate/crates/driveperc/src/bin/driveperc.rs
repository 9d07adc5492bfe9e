//! Command-line surface: training, evaluation, threshold sweeps,
//! gradient-conflict analysis, lane-label dilation, single-image inference,
//! and synthetic-scene generation.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use driveperc::grad_analysis::{histogram_csv, render_histogram_png};
use driveperc::lane_eval::dilate_directory;
use driveperc::pipeline::checkpoint;
use driveperc::pipeline::config::Config;
use driveperc::pipeline::eval::{
    default_grid, evaluate, predict_sample, sweep_csv, sweep_thresholds,
};
use driveperc::pipeline::infer::infer;
use driveperc::pipeline::synth::{generate_synthetic_dataset, write_sample};
use driveperc::pipeline::train::{analyze_gradients, load_dataset, train};
use driveperc::Result;

#[derive(Parser)]
#[command(name = "driveperc", about = "Multi-task road perception toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints and the step log.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on its configured dataset.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        da_threshold: Option<f64>,
        #[arg(long)]
        ll_threshold: Option<f64>,
    },
    /// Sweep segmentation confidence thresholds over the standard grid.
    SweepThresholds {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Record per-task gradients on the shared parameters and emit
    /// cosine-similarity histograms.
    GradAnalyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long, value_enum)]
        gca: Switch,
        #[arg(long, default_value = "runs/grad")]
        out: PathBuf,
    },
    /// Dilate every lane mask PNG in a directory with the 7x7 elliptical
    /// element.
    DilateLabels {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a checkpoint on one image and write masks, detections, and an
    /// overlay.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "runs/infer")]
        out: PathBuf,
    },
    /// Generate synthetic road scenes to disk.
    GenSynth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 320)]
        size: usize,
        #[arg(long, default_value = "runs/synth")]
        out: PathBuf,
    },
}

fn load_model(weights: &PathBuf) -> Result<driveperc::pipeline::train::Trainer> {
    checkpoint::resume(weights)
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, out } => {
            let cfg = Config::from_path(&config)?;
            let outcome = train(&cfg, &out)?;
            println!(
                "trained {} steps; last checkpoint at {}",
                outcome.logs.len(),
                outcome.last_checkpoint.display()
            );
        }
        Command::Eval {
            config,
            weights,
            da_threshold,
            ll_threshold,
        } => {
            let trainer = load_model(&weights)?;
            let cfg = match config {
                Some(p) => Config::from_path(&p)?,
                None => trainer.config().clone(),
            };
            let thresholds = (
                da_threshold.unwrap_or(cfg.train.da_threshold),
                ll_threshold.unwrap_or(cfg.train.ll_threshold),
            );
            let data = load_dataset(&cfg)?;
            let metrics = evaluate(&trainer.model, &data, thresholds)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            println!("recall    {}", fmt(metrics.recall));
            println!("mAP50     {}", fmt(metrics.map50));
            println!("mIoU      {}", fmt(metrics.miou));
            println!("lane IoU  {}", fmt(metrics.lane_iou));
            println!("lane ACC  {}", fmt(metrics.lane_acc));
            println!("fps       {:.2}", metrics.fps);
            println!(
                "{}",
                serde_json::to_string(&metrics)
                    .map_err(|e| driveperc::Error::invalid_input(e.to_string()))?
            );
        }
        Command::SweepThresholds { weights, out } => {
            let trainer = load_model(&weights)?;
            let data = load_dataset(trainer.config())?;
            let preds = data
                .iter()
                .map(|s| predict_sample(&trainer.model, s))
                .collect::<Result<Vec<_>>>()?;
            let rows = sweep_thresholds(&preds, &data, &default_grid())?;
            let csv = sweep_csv(&rows);
            std::fs::write(&out, &csv)?;
            print!("{csv}");
        }
        Command::GradAnalyze {
            config,
            steps,
            gca,
            out,
        } => {
            let mut cfg = Config::from_path(&config)?;
            cfg.model.gca = matches!(gca, Switch::On);
            let run = analyze_gradients(&cfg, steps)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("histogram.csv"), histogram_csv(&run.histogram))?;
            render_histogram_png(&run.histogram, &out.join("histogram.png"))?;
            println!(
                "mean cosine {:.4}, fraction negative {:.4} over {} samples",
                run.histogram.mean, run.histogram.fraction_negative, run.histogram.samples
            );
        }
        Command::DilateLabels { input, out } => {
            let n = dilate_directory(&input, &out)?;
            println!("dilated {n} masks into {}", out.display());
        }
        Command::Infer {
            weights,
            image,
            out,
        } => {
            let trainer = load_model(&weights)?;
            let outputs = infer(&trainer.model, &image, &out)?;
            println!("wrote {}", outputs.overlay.display());
        }
        Command::GenSynth { n, seed, size, out } => {
            let samples = generate_synthetic_dataset(n, (size, size), seed)?;
            for (i, s) in samples.iter().enumerate() {
                write_sample(s, &out, i)?;
            }
            println!("wrote {n} scenes to {}", out.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
