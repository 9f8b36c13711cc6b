//! `combine`: backtests, single-window fits and synthetic panels.
//!
//! Exit codes: 0 success, 1 unexpected failure (e.g. an output could not be
//! written), 2 usage error (bad flag, config or input path), 3 invalid data.

mod config;
mod fit;
mod manifest;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use combine_core::backtest::{render_table, run_backtest, write_folds_csv, write_summary_csv, BacktestError};
use combine_core::panel::{load_panels, synthesize_panels, to_log, write_panels, CsvSchema, PanelError, SynthConfig};
use combine_core::ForecastPanel;
use thiserror::Error;

use config::{resolve, resolve_seed, ModelFlags};
use manifest::{input_digests, Manifest, SynthSettings};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

impl From<PanelError> for CliError {
    fn from(e: PanelError) -> Self {
        match &e {
            PanelError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                CliError::Usage(e.to_string())
            }
            PanelError::Io { .. } => CliError::Other(e.to_string()),
            PanelError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BacktestError> for CliError {
    fn from(e: BacktestError) -> Self {
        match e {
            BacktestError::Panel { .. } => CliError::Data(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "combine", version, about = "Discounted forecast combination and rolling backtests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rolling-window backtest over every ticker in a panel.
    Backtest(BacktestArgs),
    /// Fit one estimator on one training window.
    Fit(fit::FitArgs),
    /// Write synthetic panels in the input CSV format.
    Synth(SynthArgs),
}

#[derive(Debug, clap::Args)]
struct BacktestArgs {
    /// Directory with forecasts.csv (and optionally actuals.csv), or one forecast file.
    #[arg(long, value_name = "PATH")]
    panel: PathBuf,
    /// Comma-separated list from qp, nlp-win, nlp-hit, bayes, naive, seasonal-naive, or `all`.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Debug, clap::Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 23)]
    tickers: usize,
    #[arg(long, default_value_t = 36)]
    quarters: usize,
    #[arg(long, default_value_t = 10)]
    analysts: usize,
    #[arg(long, default_value_t = 0.05)]
    missing_rate: f64,
    /// Log growth of the actuals per quarter.
    #[arg(long, default_value_t = 0.02)]
    growth: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Backtest(args) => cmd_backtest(args),
        Command::Fit(args) => fit::cmd_fit(args),
        Command::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub(crate) fn load(path: &Path) -> Result<Vec<ForecastPanel>, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("panel path {} does not exist", path.display())));
    }
    let raw = load_panels(path, &CsvSchema::default())?;
    if raw.is_empty() {
        return Err(CliError::Data(format!("no panels found in {}", path.display())));
    }
    Ok(raw.into_iter().map(to_log).collect())
}

pub(crate) fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Other(format!("cannot create {}: {e}", path.display())))
}

pub(crate) fn write_failed(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Other(format!("cannot write {}: {e}", path.display()))
}

fn cmd_backtest(args: BacktestArgs) -> Result<(), CliError> {
    let started = manifest::now();
    let config = resolve(&args.model, args.estimators.as_deref())?;
    let inputs = input_digests(&args.panel)?;
    let panels = load(&args.panel)?;

    let pool = match args.jobs {
        Some(0) => return Err(CliError::Usage("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n),
        None => rayon::ThreadPoolBuilder::new(),
    }
    .build()
    .map_err(|e| CliError::Other(format!("cannot start worker pool: {e}")))?;
    let jobs = pool.current_num_threads();
    let report = pool.install(|| run_backtest(&panels, &config))?;

    create_dir(&args.out)?;
    let folds = args.out.join("folds.csv");
    write_folds_csv(&report, create(&folds)?).map_err(write_failed(&folds))?;
    let summary = args.out.join("summary.csv");
    write_summary_csv(&report, create(&summary)?).map_err(write_failed(&summary))?;

    let mut m = Manifest::new("backtest", started, inputs);
    m.seed = config.seed;
    m.jobs = Some(jobs);
    m.config = Some(config::snapshot(&config));
    m.outputs = vec!["folds.csv".into(), "summary.csv".into()];
    m.write(&args.out)?;

    print!("{}", render_table(&report));
    println!(
        "{} tickers, {} fold rows written to {}",
        report.tickers.len(),
        report.folds.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let started = manifest::now();
    let seed = resolve_seed(args.seed)?;
    if args.tickers == 0 {
        return Err(CliError::Usage("--tickers must be at least 1".into()));
    }
    let settings = SynthConfig {
        quarters: args.quarters,
        analysts: args.analysts,
        missing_rate: args.missing_rate,
        growth: args.growth,
        ..SynthConfig::default()
    };
    let panels = synthesize_panels(&settings, args.tickers, seed)?;
    create_dir(&args.out)?;
    write_panels(&args.out, &panels)?;

    let mut m = Manifest::new("synth", started, Vec::new());
    m.seed = seed;
    m.synth = Some(SynthSettings {
        tickers: args.tickers,
        quarters: args.quarters,
        analysts: args.analysts,
        missing_rate: args.missing_rate,
        growth: args.growth,
    });
    m.outputs = vec![
        combine_core::panel::FORECASTS_FILE.into(),
        combine_core::panel::ACTUALS_FILE.into(),
    ];
    m.write(&args.out)?;
    println!(
        "wrote {} panels of {} quarters x {} analysts to {}",
        panels.len(),
        args.quarters,
        args.analysts,
        args.out.display()
    );
    Ok(())
}
