//! `ionhom`: a multiscale simulator for ion transport in periodic tissue.
//!
//! Exit codes: 0 on success, 2 for configuration or validation problems,
//! 1 for runtime failures. Failures also emit a one-line JSON record on
//! stderr so callers can distinguish the categories programmatically.

mod commands;
mod config;
mod output;
mod study;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "ionhom",
    version,
    about = "Multiscale simulator for ion transport in periodic multicellular tissue"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Configuration file with `key = value` lines; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for CSV artifacts and the run manifest.
    #[arg(long, default_value = "ionhom-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration file and echo the resolved values.
    Validate {
        /// Configuration file to check; checks the defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Solve the periodic cell problems and write the effective tensors.
    CellProblem {
        #[command(flatten)]
        common: CommonArgs,
        /// Also write the corrector fields as value rasters.
        #[arg(long)]
        correctors: bool,
        /// Also write the phase indicator raster (1 inside cells).
        #[arg(long)]
        tags: bool,
    },
    /// Run the resolved microscale model on the periodic tissue.
    Micro {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the homogenized macroscale model.
    Macro {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Compare averaged micro runs against the macro model across epsilons.
    Converge {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated epsilon denominators, e.g. 2,4,8 for 1/2,1/4,1/8.
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        epsilons: Vec<u32>,
    },
    /// Inspect the membrane model at the configured concentrations.
    Membrane {
        #[command(flatten)]
        common: CommonArgs,
        /// Tabulate per-species currents over a membrane-potential grid.
        #[arg(long)]
        probe: bool,
        /// Lower end of the probe potential grid.
        #[arg(long, default_value_t = -4.0, allow_hyphen_values = true)]
        v_min: f64,
        /// Upper end of the probe potential grid.
        #[arg(long, default_value_t = 4.0, allow_hyphen_values = true)]
        v_max: f64,
        /// Number of probe grid points.
        #[arg(long, default_value_t = 161)]
        points: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate { config } => commands::cmd_validate(config.as_deref()),
        Command::CellProblem {
            common,
            correctors,
            tags,
        } => commands::cmd_cell_problem(common.config.as_deref(), &common.out, *correctors, *tags),
        Command::Micro { common } => commands::cmd_micro(common.config.as_deref(), &common.out),
        Command::Macro { common } => commands::cmd_macro(common.config.as_deref(), &common.out),
        Command::Converge { common, epsilons } => {
            study::cmd_converge(common.config.as_deref(), &common.out, epsilons)
        }
        Command::Membrane {
            common,
            probe,
            v_min,
            v_max,
            points,
        } => commands::cmd_membrane(
            common.config.as_deref(),
            &common.out,
            *probe,
            *v_min,
            *v_max,
            *points,
        ),
    };
    if let Err(failure) = result {
        let record = serde_json::json!({
            "kind": failure.kind(),
            "message": failure.message(),
        });
        eprintln!("{record}");
        std::process::exit(failure.exit_code());
    }
}
