//! `cmg`: cross-modal guidance decoding, layer selection and attention
//! analysis from the command line.
//!
//! Machine-readable output (JSON, JSON lines, CSV) goes to stdout or to the
//! named file; diagnostics go to stderr, filtered by `CMG_LOG`. Exit codes:
//! 0 success, 2 configuration error, 3 runtime error.

mod commands;
mod io;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cmg::analysis::RowSelection;

use commands::Failure;
use settings::{ModelSize, RunSettings};

#[derive(Parser)]
#[command(name = "cmg", version, about = "Cross-modal guidance decoding and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Flat JSON file whose keys mirror the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: RunSettings,
}

impl RunArgs {
    fn resolve(self) -> Result<RunSettings, Failure> {
        self.settings.resolve(self.config.as_deref()).map_err(Failure::Config)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Rows {
    /// Last prompt row only.
    Last,
    /// Every row.
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Decode a prompt; prints the generated tokens as JSON.
    Generate(RunArgs),
    /// Decode with and without guidance; prints a comparison report.
    Compare(RunArgs),
    /// Score the layers of a trace and select the ones to mask.
    SelectLayers {
        trace: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention proportions by layer (trace file) or by step (step log).
    Analyze {
        input: PathBuf,
        /// Query rows averaged for layer curves.
        #[arg(long, value_enum, default_value_t = Rows::Last)]
        rows: Rows,
        /// Print the curve as CSV instead of the JSON report.
        #[arg(long)]
        csv: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-patch drop frequencies of a step log, as CSV.
    MaskViz {
        steps: PathBuf,
        /// Patch grid `ROWSxCOLS`; inferred for square image spans.
        #[arg(long, value_parser = commands::parse_grid)]
        grid: Option<(usize, usize)>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Existence-question benchmark on the bias fixture.
    Bench {
        #[arg(long, default_value = "fixtures/bias-suite.json")]
        suite: PathBuf,
        /// Per-case results as CSV.
        #[arg(long)]
        csv_out: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write fixture files.
    #[command(subcommand)]
    Fixture(FixtureCommand),
}

#[derive(Subcommand)]
enum FixtureCommand {
    /// The bias model and its case suite.
    Bias {
        #[arg(long, default_value = "fixtures")]
        out_dir: PathBuf,
    },
    /// A random model as a weights file; prints its prompt.
    Weights {
        #[arg(long, value_enum, default_value_t = ModelSize::Desk)]
        model: ModelSize,
        #[arg(long, default_value_t = 0)]
        model_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate(args) => commands::generate(&args.resolve()?),
        Command::Compare(args) => commands::compare(&args.resolve()?),
        Command::SelectLayers { trace, tau, out } => commands::select_layers_cmd(&trace, tau, out.as_deref()),
        Command::Analyze { input, rows, csv, out } => {
            let rows = match rows {
                Rows::Last => RowSelection::LastPromptRow,
                Rows::All => RowSelection::AllRows,
            };
            commands::analyze(&input, rows, csv, out.as_deref())
        }
        Command::MaskViz { steps, grid, out } => commands::mask_viz(&steps, grid, out.as_deref()),
        Command::Bench { suite, csv_out, run } => commands::bench(&suite, &run.resolve()?, csv_out.as_deref()),
        Command::Fixture(FixtureCommand::Bias { out_dir }) => commands::fixture_bias(&out_dir),
        Command::Fixture(FixtureCommand::Weights { model, model_seed, out }) => {
            commands::fixture_weights(model, model_seed, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CMG_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
