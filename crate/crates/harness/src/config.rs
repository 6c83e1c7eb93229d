//! Experiment configuration, read from TOML.
//!
//! Relative paths resolve against the directory of the config file. The
//! only interpolation is `api_key = "${VAR}"`, which names the environment
//! variable holding a provider key; the key itself is never read here.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{NaiveDate, NaiveTime};
use serde::{Deserialize, Serialize};
use tradeloop_agents::opro::{RoiMode, DEFAULT_K, DEFAULT_REFLECTION_INTERVAL};
use tradeloop_core::Money;

use crate::HarnessError;

/// Routing keys a provider table may use besides `default`.
pub const ROLES: [&str; 6] = ["market", "news", "fundamental", "reflection", "trader", "optimizer"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptingMode {
    #[default]
    Baseline,
    Reflection,
    AdaptiveOpro,
    AdaptiveOproWithReflection,
}

impl PromptingMode {
    pub fn optimizes(self) -> bool {
        matches!(self, PromptingMode::AdaptiveOpro | PromptingMode::AdaptiveOproWithReflection)
    }

    pub fn reflects(self) -> bool {
        matches!(self, PromptingMode::Reflection | PromptingMode::AdaptiveOproWithReflection)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptingMode::Baseline => "baseline",
            PromptingMode::Reflection => "reflection",
            PromptingMode::AdaptiveOpro => "adaptive_opro",
            PromptingMode::AdaptiveOproWithReflection => "adaptive_opro_with_reflection",
        }
    }
}

impl fmt::Display for PromptingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            PromptingMode::Baseline,
            PromptingMode::Reflection,
            PromptingMode::AdaptiveOpro,
            PromptingMode::AdaptiveOproWithReflection,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| format!("unknown prompting mode {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_news: bool,
    pub no_market: bool,
    pub no_fundamental: bool,
}

/// Session open and close in UTC. News published up to a decision time is
/// visible to that decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionClock {
    pub open_utc: NaiveTime,
    pub close_utc: NaiveTime,
}

impl Default for SessionClock {
    fn default() -> Self {
        SessionClock {
            open_utc: NaiveTime::from_hms_opt(13, 30, 0).unwrap(),
            close_utc: NaiveTime::from_hms_opt(20, 0, 0).unwrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub bars: PathBuf,
    pub calendar: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub news: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fundamentals: Option<PathBuf>,
    /// Directory with replacement prompt files named like the shipped ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Seeded stand-in model with role-appropriate canned behavior.
    Mock,
    /// Replies from a JSON script file.
    Scripted,
    /// OpenAI-compatible chat completions endpoint.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(default)]
    pub model: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    #[serde(default)]
    pub strict: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

impl ProviderConfig {
    pub fn mock(model: &str) -> Self {
        ProviderConfig {
            kind: ProviderKind::Mock,
            model: model.to_string(),
            params: BTreeMap::new(),
            script: None,
            strict: false,
            base_url: None,
            api_key: None,
            timeout_secs: default_timeout(),
        }
    }

    /// Name of the environment variable in `api_key = "${NAME}"`.
    pub fn api_key_env(&self) -> Result<Option<String>, String> {
        let Some(raw) = &self.api_key else { return Ok(None) };
        let name = raw
            .strip_prefix("${")
            .and_then(|s| s.strip_suffix('}'))
            .filter(|n| !n.is_empty() && n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
            .ok_or("api_key must be written as \"${ENV_VAR}\"; keys are read from the environment")?;
        Ok(Some(name.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub instrument: String,
    pub window_start: NaiveDate,
    pub window_end: NaiveDate,
    #[serde(default = "one")]
    pub action_interval: usize,
    #[serde(default)]
    pub prompting_mode: PromptingMode,
    #[serde(default = "default_reflection_interval")]
    pub reflection_interval: usize,
    #[serde(default = "default_k")]
    pub opro_k: usize,
    #[serde(default)]
    pub roi_mode: RoiMode,
    #[serde(default = "three")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cash")]
    pub initial_cash: Money,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub clock: SessionClock,
    pub paths: DataPaths,
    /// `default` plus optional per-role overrides.
    pub providers: BTreeMap<String, ProviderConfig>,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_reflection_interval() -> usize {
    DEFAULT_REFLECTION_INTERVAL
}

fn default_cash() -> Money {
    Money::from_units(100_000)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let base = std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf());
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.bars);
        fix(&mut self.paths.calendar);
        for p in [&mut self.paths.news, &mut self.paths.fundamentals, &mut self.paths.prompts].into_iter().flatten() {
            fix(p);
        }
        for provider in self.providers.values_mut() {
            if let Some(s) = &mut provider.script {
                fix(s);
            }
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.window_start >= self.window_end {
            return bad(format!("window_start {} is not before window_end {}", self.window_start, self.window_end));
        }
        if self.runs < 1 {
            return bad("runs must be at least 1".into());
        }
        if self.opro_k < 1 {
            return bad("opro_k must be at least 1".into());
        }
        if self.action_interval < 1 {
            return bad("action_interval must be at least 1".into());
        }
        if self.prompting_mode.reflects() && self.reflection_interval < 1 {
            return bad("reflection_interval must be at least 1".into());
        }
        if !self.initial_cash.is_positive() {
            return bad("initial_cash must be positive".into());
        }
        if !self.providers.contains_key("default") {
            return bad("providers.default is required".into());
        }
        for (role, p) in &self.providers {
            if role != "default" && !ROLES.contains(&role.as_str()) {
                return bad(format!("unknown provider role {role:?}; expected default or one of {ROLES:?}"));
            }
            p.api_key_env().map_err(|m| HarnessError::Config(format!("providers.{role}: {m}")))?;
            match p.kind {
                ProviderKind::Scripted if p.script.is_none() => {
                    return bad(format!("providers.{role}: scripted provider needs script"))
                }
                ProviderKind::Http if p.base_url.is_none() => {
                    return bad(format!("providers.{role}: http provider needs base_url"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// The config as written to `config.lock`: canonical TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"
name = "t"
instrument = "SYN"
window_start = "2025-04-28"
window_end = "2025-06-27"

[paths]
bars = "bars.csv"
calendar = "calendar.csv"

[providers.default]
kind = "mock"
"#;

    #[test]
    fn defaults_follow_the_protocol() {
        let c = ExperimentConfig::parse(MIN).unwrap();
        assert_eq!((c.runs, c.opro_k, c.action_interval), (3, 5, 1));
        assert_eq!(c.prompting_mode, PromptingMode::Baseline);
        assert_eq!(c.initial_cash, Money::from_units(100_000));
        assert_eq!(ExperimentConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_windows_and_literal_keys() {
        let swapped = MIN.replace("2025-06-27", "2025-04-01");
        assert!(matches!(ExperimentConfig::parse(&swapped), Err(HarnessError::Config(_))));
        let literal = format!("{MIN}api_key = \"sk-123\"\n");
        let err = ExperimentConfig::parse(&literal).unwrap_err().to_string();
        assert!(err.contains("environment"), "{err}");
        let ok = format!("{MIN}api_key = \"${{OPENAI_API_KEY}}\"\n");
        let c = ExperimentConfig::parse(&ok).unwrap();
        assert_eq!(c.providers["default"].api_key_env().unwrap().as_deref(), Some("OPENAI_API_KEY"));
        let zero_runs = MIN.replace("name = \"t\"", "name = \"t\"\nruns = 0");
        assert!(ExperimentConfig::parse(&zero_runs).is_err());
        let typo = format!("{MIN}\n[providers.trder]\nkind = \"mock\"\n");
        assert!(ExperimentConfig::parse(&typo).is_err());
    }
}
