//! Run directories on disk: writing, reading back, replaying and reporting.
//!
//! Layout: `<out>/<experiment>/<run_id>/` holding `engine.jsonl`,
//! `gateway.jsonl`, `opro.jsonl`, `decisions.jsonl`, `equity.csv`,
//! `metrics.json` and `config.lock`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tradeloop_agents::gateway::parse_gateway_audit;
use tradeloop_agents::opro::{sha256_hex, ScoringWindow};
use tradeloop_core::metrics::{aggregate_runs, render_csv, render_table, AggregateReport, MetricReport};

use crate::config::ExperimentConfig;
use crate::data;
use crate::runner::{build_gateway, execute_run, RunOutput};
use crate::HarnessError;

pub const ENGINE: &str = "engine.jsonl";
pub const GATEWAY: &str = "gateway.jsonl";
pub const OPRO: &str = "opro.jsonl";
pub const DECISIONS: &str = "decisions.jsonl";
pub const EQUITY: &str = "equity.csv";
pub const METRICS: &str = "metrics.json";
pub const LOCK: &str = "config.lock";

/// Files a replay must reproduce byte for byte.
pub const REPLAYED: [&str; 5] = [ENGINE, OPRO, DECISIONS, EQUITY, METRICS];

fn io(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

pub fn read(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|e| io(path, e))
}

pub fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io(path, e))
}

/// Resolved config plus the hash of every input it read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigLock {
    pub config: ExperimentConfig,
    pub inputs: BTreeMap<String, String>,
}

impl ConfigLock {
    pub fn render(&self) -> String {
        toml::to_string(self).expect("lock serializes")
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Replay(format!("{LOCK}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub run_id: String,
    pub config_hash: String,
    pub sessions: usize,
    pub optimizer_calls: usize,
    pub report: MetricReport,
    pub windows: Vec<ScoringWindow>,
}

impl MetricsFile {
    pub fn render(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize") + "\n"
    }
}

/// A finished run on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifact {
    pub run_id: String,
    pub dir: PathBuf,
    pub config_hash: String,
    pub metrics: MetricsFile,
}

impl RunArtifact {
    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let metrics: MetricsFile = serde_json::from_str(&read(&dir.join(METRICS))?)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", dir.join(METRICS).display())))?;
        Ok(RunArtifact {
            run_id: metrics.run_id.clone(),
            dir: dir.to_path_buf(),
            config_hash: metrics.config_hash.clone(),
            metrics,
        })
    }
}

/// Text of every file the run directory holds, keyed by file name.
pub fn render_run(out: &RunOutput, lock_text: &str) -> BTreeMap<&'static str, String> {
    let mut files = BTreeMap::from([
        (ENGINE, out.engine_jsonl.clone()),
        (GATEWAY, out.gateway_jsonl.clone()),
        (OPRO, out.opro_jsonl.clone()),
        (DECISIONS, out.decisions_jsonl.clone()),
        (EQUITY, out.equity_csv.clone()),
        (LOCK, lock_text.to_string()),
    ]);
    if let Some(report) = &out.report {
        let m = MetricsFile {
            run_id: out.run_id.clone(),
            config_hash: sha256_hex(lock_text),
            sessions: out.sessions,
            optimizer_calls: out.optimizer_calls,
            report: report.clone(),
            windows: out.windows.clone(),
        };
        files.insert(METRICS, m.render());
    }
    files
}

pub fn write_run(dir: &Path, out: &RunOutput, lock_text: &str) -> Result<(), HarnessError> {
    for (name, text) in render_run(out, lock_text) {
        write(&dir.join(name), &text)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub run_id: String,
    pub checked: Vec<&'static str>,
    pub metrics: MetricReport,
}

fn first_difference(a: &str, b: &str) -> String {
    let (mut la, mut lb) = (a.lines(), b.lines());
    let mut n = 0;
    loop {
        n += 1;
        match (la.next(), lb.next()) {
            (Some(x), Some(y)) if x == y => continue,
            (None, None) => return "trailing bytes differ".to_string(),
            (x, y) => {
                let cut = |s: Option<&str>| s.map_or("<end>".to_string(), |s| s.chars().take(160).collect());
                return format!("line {n}: recorded {} | replayed {}", cut(x), cut(y));
            }
        }
    }
}

/// Re-executes a run from its gateway log and checks that every engine,
/// prompt and metric artifact comes out byte-identical.
pub fn replay(dir: &Path) -> Result<ReplayReport, HarnessError> {
    let lock_text = read(&dir.join(LOCK))?;
    let lock = ConfigLock::parse(&lock_text)?;
    let recorded = RunArtifact::load(dir)?;
    if recorded.config_hash != sha256_hex(&lock_text) {
        return Err(HarnessError::Replay(format!("{LOCK} does not match the hash recorded in {METRICS}")));
    }
    let inputs = data::load(&lock.config)?;
    for (name, want) in &lock.inputs {
        if inputs.hashes.get(name) != Some(want) {
            return Err(HarnessError::Replay(format!("input {name} changed since the run")));
        }
    }
    let records = parse_gateway_audit(&read(&dir.join(GATEWAY))?).map_err(|e| HarnessError::Replay(e.to_string()))?;
    let gw = build_gateway(&lock.config, 0, Some(&records))?;
    let out = execute_run(&lock.config, &inputs, &recorded.run_id, gw);
    if let Some(e) = out.error() {
        return Err(HarnessError::Replay(format!("replayed run stopped: {e}")));
    }
    let files = render_run(&out, &lock_text);
    let mut diffs = Vec::new();
    for name in REPLAYED {
        let before = read(&dir.join(name))?;
        let after = files.get(name).map(String::as_str).unwrap_or("");
        if before != after {
            diffs.push(format!("{name}: {}", first_difference(&before, after)));
        }
    }
    if !diffs.is_empty() {
        return Err(HarnessError::Replay(format!("outputs diverged\n{}", diffs.join("\n"))));
    }
    Ok(ReplayReport { run_id: recorded.run_id, checked: REPLAYED.to_vec(), metrics: out.report.expect("successful run has metrics") })
}

/// Rendered summary of one or more experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<(String, AggregateReport)>,
    pub table: String,
    pub csv: String,
    /// `experiment,run_id,date,portfolio_value`, one row per session and run.
    pub curves_csv: String,
}

/// Aggregates labelled groups of runs into mean ± std rows and collects
/// their equity curves.
pub fn aggregate_and_report(groups: &[(String, Vec<RunArtifact>)]) -> Result<Summary, HarnessError> {
    let mut rows = Vec::new();
    let mut curves = String::from("experiment,run_id,date,portfolio_value\n");
    for (label, runs) in groups {
        if runs.is_empty() {
            return Err(HarnessError::Io(format!("{label}: no runs to report")));
        }
        let reports: Vec<MetricReport> = runs.iter().map(|r| r.metrics.report.clone()).collect();
        rows.push((label.clone(), aggregate_runs(&reports)));
        for r in runs {
            for line in read(&r.path(EQUITY))?.lines().skip(1) {
                let mut cols = line.split(',');
                let (date, value) = (cols.next().unwrap_or(""), cols.next().unwrap_or(""));
                curves.push_str(&format!("{label},{},{date},{value}\n", r.run_id));
            }
        }
    }
    Ok(Summary { table: render_table(&rows), csv: render_csv(&rows), curves_csv: curves, rows })
}

/// Run directories under an experiment directory, in name order.
pub fn load_experiment(dir: &Path) -> Result<Vec<RunArtifact>, HarnessError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io(dir, e))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.join(METRICS).is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| RunArtifact::load(d)).collect()
}
