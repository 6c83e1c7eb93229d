//! Loading and checking everything a run reads from disk.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use tradeloop_agents::opro::sha256_hex;
use tradeloop_agents::pipeline::{FundamentalData, NewsItem};
use tradeloop_agents::prompts::{self, PromptSet};
use tradeloop_agents::template::{Template, TemplateError};
use tradeloop_core::market_data::{parse_bars, BarFormat, BarSeries, DataError, Lookback, SessionCalendar};

use crate::config::ExperimentConfig;
use crate::HarnessError;

/// Slack allowed between the required history start and the first bar,
/// for weekends and holidays at the boundary.
const HISTORY_SLACK_DAYS: i64 = 7;

#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub bars: BarSeries,
    pub calendar: SessionCalendar,
    /// Calendar sessions inside the window, in order.
    pub sessions: Vec<NaiveDate>,
    pub news: Vec<NewsItem>,
    pub fundamentals: FundamentalData,
    pub prompts: PromptSet,
    /// Starting trader template; the optimizer rewrites copies of it.
    pub cta_initial: Template,
    /// SHA-256 of each input file, keyed by role.
    pub hashes: BTreeMap<String, String>,
}

fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Data(format!("{}: {e}", path.display()))
}

pub fn parse_news_jsonl(text: &str) -> Result<Vec<NewsItem>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

/// Checks the bars against the calendar and the window. Window sessions
/// must all have bars, bars inside the window must be sessions, and the
/// history must reach two years back for the long-horizon context.
pub fn check_coverage(
    bars: &BarSeries,
    calendar: &SessionCalendar,
    start: NaiveDate,
    end: NaiveDate,
) -> Result<Vec<NaiveDate>, HarnessError> {
    let sessions = calendar.sessions_between(start, end);
    if sessions.is_empty() {
        return Err(HarnessError::Data(format!("calendar has no sessions between {start} and {end}")));
    }
    calendar
        .check_membership(&bars.between(start, end))
        .map_err(|e| HarnessError::Data(e.to_string()))?;
    let missing = calendar.missing_sessions(bars, start, end);
    if !missing.is_empty() {
        return Err(HarnessError::Data(DataError::MissingSessions(missing).to_string()));
    }
    let first = bars.first().map(|b| b.session_date).ok_or(HarnessError::Data("no bars".into()))?;
    if first >= sessions[0] {
        return Err(HarnessError::Data(format!("no bar before the first session {}", sessions[0])));
    }
    let need = Lookback::Years(2).start_exclusive(sessions[0]);
    if (first - need).num_days() > HISTORY_SLACK_DAYS {
        return Err(HarnessError::Data(format!("history starts {first}; bars from about {need} are needed")));
    }
    Ok(sessions)
}

pub fn load(cfg: &ExperimentConfig) -> Result<ExperimentData, HarnessError> {
    let mut hashes = BTreeMap::new();
    let p = &cfg.paths;

    let text = read(&p.bars)?;
    hashes.insert("bars".to_string(), sha256_hex(&text));
    let format = match p.bars.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => BarFormat::Jsonl,
        _ => BarFormat::Csv,
    };
    let bars = parse_bars(text.as_bytes(), format, &cfg.instrument).map_err(|e| data_err(&p.bars, e))?;

    let text = read(&p.calendar)?;
    hashes.insert("calendar".to_string(), sha256_hex(&text));
    let calendar = SessionCalendar::parse_csv(text.as_bytes()).map_err(|e| data_err(&p.calendar, e))?;
    let sessions = check_coverage(&bars, &calendar, cfg.window_start, cfg.window_end)?;

    let news = match &p.news {
        Some(path) => {
            let text = read(path)?;
            hashes.insert("news".to_string(), sha256_hex(&text));
            parse_news_jsonl(&text).map_err(|e| data_err(path, e))?
        }
        None => Vec::new(),
    };
    let fundamentals = match &p.fundamentals {
        Some(path) => {
            let text = read(path)?;
            hashes.insert("fundamentals".to_string(), sha256_hex(&text));
            serde_json::from_str(&text).map_err(|e| data_err(path, e))?
        }
        None => FundamentalData::default(),
    };
    let mut overrides = BTreeMap::new();
    if let Some(dir) = &p.prompts {
        for (name, _) in prompts::ALL {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let text = read(&path)?;
                hashes.insert(format!("prompt:{name}"), sha256_hex(&text));
                overrides.insert(name.to_string(), text);
            }
        }
    }
    let prompt_err = |e: TemplateError| HarnessError::Config(format!("prompt override: {e}"));
    let prompts = PromptSet::with_overrides(|name| overrides.get(name).cloned()).map_err(prompt_err)?;
    let cta_initial = match overrides.get("cta_initial") {
        Some(text) => Template::parse("cta_initial", text.clone()).map_err(prompt_err)?,
        None => prompts::cta_initial(),
    };
    Ok(ExperimentData { bars, calendar, sessions, news, fundamentals, prompts, cta_initial, hashes })
}

/// One-line summary printed by `validate-data`.
pub fn describe(data: &ExperimentData) -> String {
    let first = data.bars.first().map(|b| b.session_date);
    let months: std::collections::BTreeSet<(i32, u32)> = data.sessions.iter().map(|d| (d.year(), d.month())).collect();
    format!(
        "{} sessions from {} to {} across {} months; history from {}; {} news items; {} fundamental events",
        data.sessions.len(),
        data.sessions[0],
        data.sessions[data.sessions.len() - 1],
        months.len(),
        first.map_or("-".to_string(), |d| d.to_string()),
        data.news.len(),
        data.fundamentals.event_dates().len()
    )
}
