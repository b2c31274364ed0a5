use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use deshadow::cli;
use deshadow::config::Config;
use deshadow::{Error, Result};

/// Shadow detection and removal for OCT B-scans.
#[derive(Debug, Parser)]
#[command(name = "deshadow", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write phantom B-scans with injected shadows, masks, ground truth and ROIs.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Run the alternating training schedule.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
        /// Stop after this many phases (leaves a resumable checkpoint).
        #[arg(long, hide = true)]
        max_phases: Option<usize>,
    },
    /// Deshadow every image in a directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Measure contrast and restoration error on a dataset with ROIs.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rois: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        with_compensation: bool,
        #[arg(long)]
        force: bool,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config> {
    let cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run(args: Args) -> Result<()> {
    match args.command {
        Command::Simulate {
            config,
            out,
            seed,
            force,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let m = cli::simulate(&cfg, &out, force)?;
            println!("wrote {} files to {}", m.outputs.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            seed,
            force,
            max_phases,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let m = cli::train(&cfg, &data, &out, resume.as_deref(), force, max_phases)?;
            for p in &m.phase_ledger {
                println!(
                    "cycle {:>2} {:<20} {} epoch(s), final loss {:.6}",
                    p.cycle,
                    p.phase.as_str(),
                    p.epochs,
                    p.epoch_losses.last().copied().unwrap_or(f64::NAN)
                );
            }
            if m.stopped_early {
                println!("stopped early: probe loss no longer improving");
            }
        }
        Command::Infer {
            checkpoint,
            input,
            out,
            force,
        } => {
            let s = cli::infer(&checkpoint, &input, &out, force)?;
            println!("deshadowed {} image(s)", s.written.len());
            if let Some(ms) = s.mean_ms_per_image {
                println!("mean {ms:.1} ms/image");
            }
            if !s.failed.is_empty() {
                for (stem, e) in &s.failed {
                    eprintln!("failed: {stem}: {e}");
                }
                return Err(Error::Validation(format!("{} image(s) failed", s.failed.len())));
            }
        }
        Command::Evaluate {
            checkpoint,
            data,
            rois,
            out,
            with_compensation,
            force,
        } => {
            let r = cli::evaluate(&checkpoint, &data, &rois, &out, with_compensation, force)?;
            let s = &r.summary;
            let show = |v: Option<f64>| v.map(|x| format!("{x:.2}%")).unwrap_or_else(|| "n/a".into());
            println!("contrast reduction: {}", show(s.contrast_reduction_pct));
            println!("masked MAE improvement: {}", show(s.masked_mae_improvement_pct));
            if let Some(ms) = r.mean_ms_per_image {
                println!("mean {ms:.1} ms/image");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
