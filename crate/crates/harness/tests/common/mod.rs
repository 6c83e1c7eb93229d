#![allow(dead_code)]

use std::path::PathBuf;

use chrono::NaiveDate;
use tradeloop_harness::config::{ExperimentConfig, PromptingMode};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn date(s: &str) -> NaiveDate {
    s.parse().unwrap()
}

/// The shipped mock config, single run, with the given mode and window end.
pub fn mock_config(mode: PromptingMode, window_end: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&fixtures().join("mock.toml")).unwrap();
    cfg.prompting_mode = mode;
    cfg.window_end = date(window_end);
    cfg.runs = 1;
    cfg
}
