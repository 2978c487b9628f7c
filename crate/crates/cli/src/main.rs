use clap::{Parser, Subcommand};
use clsr_core::experiment::{analyse, load_artifacts, run, ExperimentConfig};
use clsr_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

/// Overrides the output directory of `run` when set.
const OUT_ENV: &str = "CLSR_LAB_OUT";

#[derive(Parser)]
#[command(name = "clsr-lab", version, about = "Run routed fine-tuning experiments on synthetic multilingual tasks")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline a config file names.
    Run {
        config: PathBuf,
        /// Output directory; beats both the config and CLSR_LAB_OUT.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fine-tuning runs executed in parallel.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Summarize a finished run directory.
    Report { dir: PathBuf },
}

const INVARIANT: u8 = 1;
const CONFIG: u8 = 2;
const RUNTIME: u8 = 3;

fn code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => CONFIG,
        _ => RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp_secs().init();

    match cli.command {
        Command::Run { config, out, workers } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(code(&e));
                }
            };
            if let Some(dir) = out.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)) {
                cfg.output_dir = dir;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            match run(&cfg) {
                Ok(outcome) => {
                    print!("{}", outcome.report);
                    println!("artifacts in {}", cfg.output_dir.display());
                    ExitCode::from(if outcome.passed() { 0 } else { INVARIANT })
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(code(&e))
                }
            }
        }
        Command::Report { dir } => {
            let artifacts = match load_artifacts(&dir) {
                Ok(a) => a,
                Err(e) => {
                    eprintln!("error: cannot read {}: {e}", dir.display());
                    return ExitCode::from(RUNTIME);
                }
            };
            if artifacts.records.is_empty() && artifacts.baselines.is_empty() {
                eprintln!("error: {} holds no run records", dir.display());
                return ExitCode::from(RUNTIME);
            }
            match analyse(&artifacts) {
                Ok((_, verdicts, text)) => {
                    print!("{text}");
                    ExitCode::from(if verdicts.iter().all(|v| v.passed) { 0 } else { INVARIANT })
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(code(&e))
                }
            }
        }
    }
}
