use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cddpm::config::ExperimentConfig;
use cddpm::experiment::{
    cmd_evaluate, cmd_phantoms, cmd_pretrain, cmd_reconstruct, cmd_report, cmd_train, run_all, ReconOptions, MODEL_FILE,
};
use cddpm::Result;

#[derive(Parser)]
#[command(name = "cddpm", version, about = "Diffusion-based unsupervised anomaly detection on volumes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file with `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Model preset; overrides the configuration.
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    /// Start from the full-scale settings instead of the desk-scale defaults
    /// (ignored when --config is given).
    #[arg(long, global = true)]
    full_scale: bool,
    /// Print training progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Ddpm,
    Cddpm,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic phantom dataset to the output directory.
    Phantoms,
    /// Masked pre-training of the context encoder.
    Pretrain {
        /// Dataset directory written by `phantoms`; generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a denoiser on healthy volumes.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pre-trained encoder checkpoint (default: <out>/encoder.ck).
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Reconstruct the evaluation volumes with a trained model.
    Reconstruct {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model checkpoint (default: <out>/model.ck).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also reconstruct every sweep noise level.
        #[arg(long)]
        sweep: bool,
        /// Also reconstruct contrast-shifted test volumes.
        #[arg(long)]
        contrast: bool,
    },
    /// Threshold selection, segmentation and metrics.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory holding the reconstructions (default: --out).
        #[arg(long)]
        recon: Option<PathBuf>,
    },
    /// Aggregate evaluated runs into tables, p-values and panels.
    Report {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluated run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Pre-train (if configured), train, reconstruct and evaluate in one go.
    Run,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if c.full_scale => ExperimentConfig::full_scale(),
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(p) = c.preset {
        cfg.preset = match p {
            PresetArg::Ddpm => "ddpm",
            PresetArg::Cddpm => "cddpm",
        }
        .into();
    }
    cfg.verbose = c.verbose;
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(report: &cddpm::metrics::MetricReport) {
    println!("threshold {:.6}", report.threshold);
    for (name, mean, std) in report.summary() {
        println!("{name:<14}{mean:.4} ± {std:.4}");
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    match cli.command {
        Command::Phantoms => {
            cmd_phantoms(&cfg, out)?;
        }
        Command::Pretrain { data } => {
            cmd_pretrain(&cfg, out, data.as_deref())?;
        }
        Command::Train { data, encoder } => {
            cmd_train(&cfg, out, data.as_deref(), encoder.as_deref())?;
        }
        Command::Reconstruct {
            data,
            checkpoint,
            sweep,
            contrast,
        } => {
            let ck = checkpoint.unwrap_or_else(|| out.join(MODEL_FILE));
            cmd_reconstruct(&cfg, out, &ck, data.as_deref(), ReconOptions { sweep, contrast })?;
        }
        Command::Evaluate { data, recon } => {
            let recon = recon.unwrap_or_else(|| out.clone());
            let (report, _) = cmd_evaluate(&cfg, out, &recon, data.as_deref())?;
            print_summary(&report);
        }
        Command::Report { data, runs } => {
            cmd_report(&cfg, out, &runs, data.as_deref())?;
            print!("{}", std::fs::read_to_string(out.join("table.csv"))?);
        }
        Command::Run => {
            let (report, _) = run_all(&cfg, out)?;
            print_summary(&report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
