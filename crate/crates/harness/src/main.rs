use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use repp_core::geometry::{BilliardTable, TableKind};
use repp_harness::accept::{self, AcceptOptions, Scale};
use repp_harness::config::{config_schema, ConfigError, ExperimentConfig, Mode};
use repp_harness::experiment::{run_with, RunError, RunOptions, RunParts};
use repp_harness::report;

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "repp", version, about = "Rare-event point processes of planar billiards")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Print per-cell progress to stderr.
    #[arg(long)]
    progress: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Full,
    Reduced,
}

#[derive(Subcommand)]
enum Command {
    /// Table operations.
    Table {
        #[command(subcommand)]
        action: TableAction,
    },
    /// Simulate exceedance series and write events and count histograms.
    Simulate(Common),
    /// Simulate and test the rare-event point process against Poisson.
    Repp(Common),
    /// Induced-mode run: Kac check, return-time tail, lifted comparison and paired counts.
    Induce(Common),
    /// Mixing and recurrence diagnostics from the config's `diagnostics` section.
    Stats(Common),
    /// Run the acceptance suite (criteria 1-11).
    Accept {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "full")]
        scale: ScaleArg,
        /// Run only these criteria, e.g. `--only 1,2,11`.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<u8>>,
    },
    /// Print the JSON schema of experiment configs.
    Schema,
}

#[derive(Subcommand)]
enum TableAction {
    /// Check a table file and print its components.
    Validate {
        file: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(e) => Failure::Config(e.to_string()),
            RunError::Runtime(m) => Failure::Runtime(m),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(format!("{e:#}"))
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let path = common.config.as_ref().ok_or_else(|| Failure::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: Option<&ExperimentConfig>) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn threads(common: &Common) -> usize {
    common.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_parts(common: &Common, parts: RunParts, need_induced: bool) -> Result<bool, Failure> {
    let cfg = load(common)?;
    if need_induced && cfg.mode != Mode::Induced {
        return Err(Failure::Config("this command needs \"mode\": \"induced\" and an inducing set".into()));
    }
    let out = accept::with_threads(threads(common), || {
        run_with(&cfg, parts, RunOptions { progress: common.progress })
    })??;
    let dir = out_dir(common, Some(&cfg));
    for p in report::write_all(&dir, &out)? {
        println!("wrote {}", p.display());
    }
    let verdict = out.report.aggregate.as_ref().is_none_or(|a| a.verdict);
    if let Some(a) = &out.report.aggregate {
        println!(
            "{} of {} considered cells passed, {} near-periodic, {} errored: {}",
            a.passed,
            a.considered,
            a.near_periodic,
            a.errored,
            if a.verdict { "PASS" } else { "FAIL" }
        );
    }
    Ok(verdict)
}

fn validate_table(file: &Path) -> Result<bool, Failure> {
    let text = std::fs::read_to_string(file).map_err(|e| Failure::Config(format!("cannot read {}: {e}", file.display())))?;
    let table = BilliardTable::from_json(&text).map_err(|e| Failure::Config(e.to_string()))?;
    let kind = match table.kind() {
        TableKind::LorentzGas => "Lorentz gas",
        TableKind::Stadium => "stadium",
    };
    println!("valid {kind} table, boundary length {:.6}", table.total_boundary_length());
    for (i, c) in table.components().iter().enumerate() {
        println!("  component {i}: length {:.6}{}", c.length, if c.periodic { ", periodic" } else { "" });
    }
    Ok(true)
}

fn accept_cmd(common: &Common, scale: ScaleArg, only: Option<&[u8]>) -> Result<bool, Failure> {
    let cfg = common.config.as_ref().map(|_| load(common)).transpose()?;
    let seed = common.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
    let opts = AcceptOptions {
        seed,
        scale: match scale {
            ScaleArg::Full => Scale::Full,
            ScaleArg::Reduced => Scale::Reduced,
        },
        threads: threads(common),
        echo: true,
        progress: common.progress,
    };
    let dir = out_dir(common, cfg.as_ref());
    let ids: Vec<u8> = only.map_or_else(|| (1..=11).collect(), <[u8]>::to_vec);
    let run = accept::run_selected(&ids, opts, Some(&dir)).map_err(|e| Failure::Config(e.to_string()))?;
    println!("wrote {}", dir.join(report::RESULTS_FILE).display());
    println!("acceptance: {}", if run.all_passed() { "PASS" } else { "FAIL" });
    Ok(run.all_passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Table { action: TableAction::Validate { file, .. } } => validate_table(file),
        Command::Simulate(c) => {
            run_parts(c, RunParts { cells: true, tests: false, induced_checks: false, diagnostics: false }, false)
        }
        Command::Repp(c) => {
            run_parts(c, RunParts { cells: true, tests: true, induced_checks: false, diagnostics: false }, false)
        }
        Command::Induce(c) => {
            run_parts(c, RunParts { cells: true, tests: true, induced_checks: true, diagnostics: false }, true)
        }
        Command::Stats(c) => {
            run_parts(c, RunParts { cells: false, tests: false, induced_checks: false, diagnostics: true }, false)
        }
        Command::Accept { common, scale, only } => accept_cmd(common, *scale, only.as_deref()),
        Command::Schema => {
            println!("{}", config_schema());
            Ok(true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAIL),
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("runtime error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
