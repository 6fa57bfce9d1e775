//! `mgaa` command-line tool: generate toy models and calibration data,
//! capture statistics, allocate ranks, compress, evaluate, and analyze.

mod analyze;
mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "mgaa",
    about = "Calibration-driven low-rank compression for a toy transformer",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded toy model file.
    GenToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a seeded calibration token file.
    GenCalib {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run two-pass calibration and write the statistics file.
    Capture {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long = "out-stats")]
        out_stats: PathBuf,
    },
    /// Build an allocation plan from captured statistics.
    Allocate {
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "out-plan")]
        out_plan: PathBuf,
    },
    /// Compress a model end to end and write the report.
    Compress {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Compare a compressed model against its reference.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        calib: PathBuf,
    },
    /// Emit importance/energy CSVs and static plots from a statistics file.
    Analyze {
        #[arg(long)]
        stats: PathBuf,
        #[arg(long = "plot-dir")]
        plot_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenToy { config, out } => commands::gen_toy(&config, &out),
        Command::GenCalib { config, out } => commands::gen_calib(&config, &out),
        Command::Capture {
            model,
            calib,
            out_stats,
        } => commands::capture(&model, &calib, &out_stats),
        Command::Allocate {
            stats,
            config,
            out_plan,
        } => commands::allocate(&stats, &config, &out_plan),
        Command::Compress {
            model,
            calib,
            config,
            out,
            report,
        } => commands::compress(
            model.as_deref(),
            calib.as_deref(),
            &config,
            out.as_deref(),
            &report,
        ),
        Command::Eval {
            model,
            reference,
            calib,
        } => commands::eval(&model, &reference, &calib),
        Command::Analyze {
            stats,
            plot_dir,
            config,
        } => commands::analyze(&stats, &plot_dir, config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error[{}]: {}", failure.stage, failure.message);
            ExitCode::from(1)
        }
    }
}
