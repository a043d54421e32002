use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rfr::config::ExperimentConfig;
use rfr::experiment::{cmd_adapt, cmd_datagen, cmd_eval, cmd_pretrain, cmd_sweep, curve_csv};
use rfr::Result;

#[derive(Parser)]
#[command(name = "rfr", version, about = "Test-time fine-tuning for image inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Also print the resulting CSV to stdout.
    #[arg(long, global = true)]
    tee_csv: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the train, validation and test corpora.
    Datagen,
    /// Pre-train the inpainter on the training corpus.
    Pretrain,
    /// Fine-tune on every test image and report before/after metrics.
    Adapt,
    /// Re-score saved restorations.
    Eval,
    /// Aggregate metrics over a list of iteration counts.
    Sweep,
}

fn run(cli: &Cli) -> Result<()> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(cli.seed.unwrap_or(0)),
    };
    let cfg = base.resolve(cli.seed, cli.out.clone())?;
    match cli.command {
        Command::Datagen => {
            let dir = cmd_datagen(&cfg)?;
            if cli.tee_csv {
                let m = dir.join(rfr::experiment::MANIFEST);
                print!("{}", std::fs::read_to_string(&m).map_err(|e| rfr::Error::io(&m, e))?);
            }
            eprintln!("corpus written to {}", dir.display());
        }
        Command::Pretrain => {
            let log = cmd_pretrain(&cfg)?;
            if cli.tee_csv {
                print!("{}", rfr::corpus::pretrain_log_csv(&log));
            }
            eprintln!("checkpoint written to {}", cfg.checkpoint_path().display());
        }
        Command::Adapt | Command::Eval => {
            let reports = match cli.command {
                Command::Adapt => cmd_adapt(&cfg)?,
                _ => cmd_eval(&cfg)?,
            };
            for (split, r) in &reports {
                if cli.tee_csv {
                    print!("{}", r.to_csv());
                }
                eprintln!(
                    "{}: median psnr gain {:.3} dB, median ssim gain {:.4}",
                    split.name(),
                    r.aggregates.psnr_gain.median,
                    r.aggregates.ssim_gain.median
                );
            }
        }
        Command::Sweep => {
            let rows = cmd_sweep(&cfg)?;
            if cli.tee_csv {
                print!("{}", curve_csv(&rows));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
