use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tradeloop_harness::artifacts::{self, load_experiment};
use tradeloop_harness::config::{ExperimentConfig, PromptingMode};
use tradeloop_harness::{backtest, data, run_experiment, HarnessError};

#[derive(Parser)]
#[command(name = "tradeloop", version, about = "Run and evaluate LLM trading agent experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its run directories.
    Run {
        #[command(flatten)]
        overrides: Overrides,
        /// Output root; runs land in <out>/<name>/<run_id>/.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the rule-based baselines over the configured window.
    Backtest {
        #[arg(long)]
        config: PathBuf,
    },
    /// Aggregate one or more experiment directories into a table.
    Report {
        #[arg(required = true)]
        experiments: Vec<PathBuf>,
        /// Also write summary.csv and equity_curves.csv here.
        #[arg(long)]
        csv_dir: Option<PathBuf>,
    },
    /// Re-execute a run from its recorded model responses and compare outputs.
    Replay { run_dir: PathBuf },
    /// Check bars, calendar and optional inputs for the configured window.
    ValidateData {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    mode: Option<PromptingMode>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    no_news: bool,
    #[arg(long)]
    no_market: bool,
    #[arg(long)]
    no_fundamental: bool,
}

impl Overrides {
    fn apply(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(m) = self.mode {
            cfg.prompting_mode = m;
        }
        if let Some(r) = self.runs {
            cfg.runs = r;
        }
        if let Some(k) = self.k {
            cfg.opro_k = k;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = &self.name {
            cfg.name = n.clone();
        }
        cfg.ablation.no_news |= self.no_news;
        cfg.ablation.no_market |= self.no_market;
        cfg.ablation.no_fundamental |= self.no_fundamental;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn label(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn execute(cmd: Command) -> Result<(), HarnessError> {
    match cmd {
        Command::Run { overrides, out } => {
            let cfg = overrides.apply()?;
            let result = run_experiment(&cfg, &out)?;
            for a in &result.artifacts {
                println!("{}", a.dir.display());
            }
            print!("{}", result.table);
        }
        Command::Backtest { config } => {
            print!("{}", backtest(&ExperimentConfig::load(&config)?)?);
        }
        Command::Report { experiments, csv_dir } => {
            let groups = experiments
                .iter()
                .map(|d| Ok((label(d), load_experiment(d)?)))
                .collect::<Result<Vec<_>, HarnessError>>()?;
            let summary = artifacts::aggregate_and_report(&groups)?;
            print!("{}", summary.table);
            if let Some(dir) = csv_dir {
                artifacts::write(&dir.join("summary.csv"), &summary.csv)?;
                artifacts::write(&dir.join("equity_curves.csv"), &summary.curves_csv)?;
            }
        }
        Command::Replay { run_dir } => {
            let r = artifacts::replay(&run_dir)?;
            println!("{}: identical ({})", r.run_id, r.checked.join(", "));
        }
        Command::ValidateData { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            println!("{}", data::describe(&data::load(&cfg)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
