//! Experiment orchestration for tradeloop: configuration, the per-run
//! decision loop, run directories, replay and reports.

pub mod artifacts;
pub mod config;
pub mod data;
pub mod mock;
pub mod runner;
pub mod synthetic;

use std::path::{Path, PathBuf};

use thiserror::Error;
use tradeloop_core::metrics::{aggregate_runs, render_table, AggregateReport};
use tradeloop_core::strategies::{run_strategy, StrategyConfig};

use crate::artifacts::{write, write_run, ConfigLock, RunArtifact};
use crate::config::ExperimentConfig;
use crate::runner::{build_gateway, execute_run, run_plans, RunOutput};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("replay failed: {0}")]
    Replay(String),
    #[error("run failed: {0}")]
    Run(String),
    #[error("{0}")]
    Io(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) => 3,
            HarnessError::Provider(_) => 4,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub dir: PathBuf,
    pub artifacts: Vec<RunArtifact>,
    pub aggregate: AggregateReport,
    pub table: String,
}

/// The text of `config.lock` for a config and its loaded inputs.
pub fn lock_text(cfg: &ExperimentConfig, data: &data::ExperimentData) -> String {
    ConfigLock { config: cfg.clone(), inputs: data.hashes.clone() }.render()
}

/// Runs every configured run (concurrently, each with its own state) and
/// writes `<out>/<name>/<run_id>/` plus the experiment summary. A run that
/// fails still leaves its partial audit on disk before the error returns.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentResult, HarnessError> {
    cfg.validate()?;
    let data = data::load(cfg)?;
    let lock = lock_text(cfg, &data);
    let plans = run_plans(cfg);
    let outputs: Vec<Result<RunOutput, HarnessError>> = std::thread::scope(|s| {
        let handles: Vec<_> = plans
            .iter()
            .map(|plan| {
                let data = &data;
                s.spawn(move || {
                    let gw = build_gateway(cfg, plan.seed, None)?;
                    Ok(execute_run(cfg, data, &plan.run_id, gw))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    });
    let dir = out.join(&cfg.name);
    let mut first_error = None;
    let mut artifacts = Vec::new();
    for output in outputs {
        let output = output?;
        let run_dir = dir.join(&output.run_id);
        write_run(&run_dir, &output, &lock)?;
        match output.error() {
            Some(e) => {
                first_error.get_or_insert(e);
            }
            None => artifacts.push(RunArtifact::load(&run_dir)?),
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }
    let summary = artifacts::aggregate_and_report(&[(cfg.name.clone(), artifacts.clone())])?;
    write(&dir.join("summary.txt"), &summary.table)?;
    write(&dir.join("summary.csv"), &summary.csv)?;
    write(&dir.join("equity_curves.csv"), &summary.curves_csv)?;
    let aggregate = summary.rows[0].1.clone();
    Ok(ExperimentResult { dir, artifacts, aggregate, table: summary.table })
}

/// The rule-based baselines over the configured window, one table row each.
pub fn backtest(cfg: &ExperimentConfig) -> Result<String, HarnessError> {
    let data = data::load(cfg)?;
    let window = data.bars.between(cfg.window_start, cfg.window_end);
    let mut rows = Vec::new();
    for s in StrategyConfig::all_defaults() {
        let run = run_strategy(&s, &window, cfg.initial_cash).map_err(|e| HarnessError::Data(format!("{}: {e}", s.label())))?;
        rows.push((s.label().to_string(), aggregate_runs(&[run.report])));
    }
    Ok(render_table(&rows))
}
