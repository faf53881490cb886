use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use maskdiff::checkpoint::Checkpoint;
use maskdiff::cli::{self, SampleOptions, DEFAULT_SAMPLE_BATCH};
use maskdiff::diffusion::ReverseVariance;
use maskdiff::train::{run_training, TrainConfig};

#[derive(Parser)]
#[command(
    name = "maskdiff",
    version,
    about = "Mask-conditioned diffusion for paired image/mask data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic ellipse dataset with a manifest.
    MakeToy {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a denoiser from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate images conditioned on masks.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of mask images, or a single mask file.
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Reverse-step variance: posterior or beta.
        #[arg(long, default_value = "posterior")]
        variance: ReverseVariance,
        /// Clip each step's clean-image estimate to [-1, 1].
        #[arg(long)]
        clip_denoised: bool,
        /// Chains denoised together per network call.
        #[arg(long, default_value_t = DEFAULT_SAMPLE_BATCH)]
        batch: usize,
    },
    /// Score synthetic images against real ones.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synth: PathBuf,
        /// Conditioning masks; enables the conditioning-fidelity rows.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
        #[arg(long)]
        report: PathBuf,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("MASKDIFF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("MASKDIFF_THREADS={raw:?} is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::MakeToy { n, size, seed, out } => {
            let manifest = cli::make_toy(n, size, seed, &out)?;
            println!(
                "wrote {} image/mask pairs ({size}x{size}) to {}",
                manifest.entries.len(),
                out.display()
            );
        }
        Command::Train { config, resume } => {
            let cfg = TrainConfig::from_file(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let mut stdout = std::io::stdout();
            let summary = run_training(&cfg, resume.as_deref(), &mut stdout)?;
            println!(
                "trained steps {}..={}; checkpoint {}",
                summary.first_step,
                summary.last_step,
                summary.final_checkpoint.display()
            );
        }
        Command::Sample {
            checkpoint,
            masks,
            out,
            seed,
            count,
            variance,
            clip_denoised,
            batch,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let masks = cli::load_masks(&masks, ckpt.image_size)?;
            let opts = SampleOptions {
                seed,
                count,
                variance,
                clip_denoised,
                batch,
            };
            let (outputs, _) = cli::sample_to_dir(&ckpt, &masks, &out, &opts)?;
            let images: usize = outputs.iter().map(|o| o.images.len()).sum();
            println!(
                "wrote {images} images and {} grids to {}",
                outputs.len(),
                out.display()
            );
        }
        Command::Evaluate {
            real,
            synth,
            masks,
            threshold,
            report,
        } => {
            let r = cli::evaluate(&real, &synth, masks.as_deref(), threshold)?;
            r.write(&report)?;
            print!("{}", r.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
