//! Command-line front end: single runs, mixture sweeps, the verification
//! suite, and record export.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use leopard::driver::{
    self, standard_mixtures, sweep, verify_all, DriverError, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "leopard", about = "Reward learning from preferences and ranked demonstrations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment configuration over its seeds.
    Train {
        /// JSON experiment config; defaults to the desk-scale cliff setup.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run a single seed instead of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Run the standard feedback-mixture grid over the base config.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Single-feedback-type maximum number of preferences.
        #[arg(long, default_value_t = 128)]
        max_prefs: usize,
        /// Single-feedback-type maximum number of demonstrations.
        #[arg(long, default_value_t = 4)]
        max_demos: usize,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Run the property-verification suite; exits nonzero on any failure.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert saved run records (JSON) to the per-iteration CSV.
    Export {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig, DriverError> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| DriverError::Serde(e.to_string()))
        }
        None => Ok(ExperimentConfig::default_cliff()),
    }
}

fn write_outputs(
    out_dir: &Path,
    runs: &[(String, driver::RunResult)],
    summary: &[driver::SummaryRow],
) -> Result<(), DriverError> {
    fs::create_dir_all(out_dir)?;
    driver::write_runs_csv(fs::File::create(out_dir.join("runs.csv"))?, runs)?;
    driver::write_summary_csv(fs::File::create(out_dir.join("summary.csv"))?, summary)?;
    driver::write_rm_log_csv(fs::File::create(out_dir.join("rm_log.csv"))?, runs)?;
    driver::write_records_json(&out_dir.join("records.json"), runs)?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, DriverError> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out_dir,
        } => {
            let mut config = load_config(&config)?;
            if let Some(seed) = seed {
                config.seeds = vec![seed];
            }
            let n_iters = config.n_iters;
            let cells = vec![("train".to_string(), config)];
            let result = sweep(&cells)?;
            write_outputs(&out_dir, &result.runs, &result.summary)?;
            for row in result.summary.iter().filter(|r| r.iteration == n_iters) {
                println!(
                    "{}: final return {:.2} +- {:.2} over {} kept runs ({} outliers)",
                    row.config_id, row.mean, row.stderr, row.n_kept, row.n_outliers
                );
            }
            println!("wrote {}", out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            max_prefs,
            max_demos,
            out_dir,
        } => {
            let base = load_config(&config)?;
            let cells = standard_mixtures(&base, max_prefs, max_demos);
            let result = sweep(&cells)?;
            write_outputs(&out_dir, &result.runs, &result.summary)?;
            let final_iter = base.n_iters;
            for row in result.summary.iter().filter(|r| r.iteration == final_iter) {
                println!(
                    "{}: final return {:.2} +- {:.2} over {} kept runs ({} outliers)",
                    row.config_id, row.mean, row.stderr, row.n_kept, row.n_outliers
                );
            }
            println!("wrote {}", out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { seed, out } => {
            let report = verify_all(seed);
            report.print();
            if let Some(path) = out {
                let json = serde_json::to_string_pretty(&report)
                    .map_err(|e| DriverError::Serde(e.to_string()))?;
                fs::write(&path, json)?;
                println!("wrote {}", path.display());
            }
            if report.all_passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
        Command::Export { records, out } => {
            let runs = driver::read_records_json(&records)?;
            driver::write_runs_csv(fs::File::create(&out)?, &runs)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
