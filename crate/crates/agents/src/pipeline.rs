//! Analysts and the central trading agent.
//!
//! Every agent keeps one conversation per run: the first call renders the
//! agent's initial template, later calls append the follow-up template to
//! the same message history.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tradeloop_core::execution::{Action, Fill, OrderRequest, OrderType};
use tradeloop_core::indicators::{
    detect_levels, render_levels, render_snapshot, snapshot, SnapshotParams, DEFAULT_LEVEL_TOLERANCE_PCT,
    DEFAULT_MIN_TOUCHES,
};
use tradeloop_core::market_data::{resample, window_slice, Bar, BarSeries, Lookback, Resolution};
use tradeloop_core::Money;

use crate::gateway::{ChatRequest, Gateway, GatewayError, Message};
use crate::prompts::PromptSet;
use crate::template::{Context, Rendered, Template, TemplateError};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("{agent} at {step}: {source}")]
    Gateway {
        agent: Author,
        step: String,
        #[source]
        source: GatewayError,
    },
    #[error("{agent} template: {source}")]
    Template {
        agent: Author,
        #[source]
        source: TemplateError,
    },
    #[error("{agent}: {reason}")]
    Input { agent: Author, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Author {
    Market,
    News,
    Fundamental,
    Reflection,
    Trader,
    Optimizer,
}

impl Author {
    /// The gateway routing tag.
    pub fn as_str(self) -> &'static str {
        match self {
            Author::Market => "market",
            Author::News => "news",
            Author::Fundamental => "fundamental",
            Author::Reflection => "reflection",
            Author::Trader => "trader",
            Author::Optimizer => "optimizer",
        }
    }
}

impl std::fmt::Display for Author {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const NEWS_SECTIONS: [&str; 4] = ["Sentiment Assessment", "Key Developments", "Market Relevance", "Source Analysis"];

/// Shown to the model if it calls the news analyst's web_search tool.
pub const WEB_SEARCH_UNAVAILABLE: &str = "NOT_AVAILABLE: web search is disabled in this environment";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalystReport {
    pub author: Author,
    pub as_of: NaiveDate,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sections: BTreeMap<String, String>,
}

/// Tags attached to every request of one decision step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepTags {
    pub run_id: String,
    pub step: usize,
    pub date: NaiveDate,
}

impl StepTags {
    fn label(&self) -> String {
        format!("step {} ({})", self.step, self.date)
    }
}

/// A multi-turn exchange with one agent.
#[derive(Debug, Clone, Default)]
pub struct Conversation {
    system_text: String,
    messages: Vec<Message>,
}

impl Conversation {
    pub fn is_started(&self) -> bool {
        !self.messages.is_empty()
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn reset(&mut self) {
        *self = Conversation::default();
    }

    /// Sends `rendered` as the next user turn. The first turn also sets the
    /// system text. A failed call leaves the conversation as it was.
    pub fn ask(
        &mut self,
        gw: &mut Gateway,
        author: Author,
        tags: &StepTags,
        rendered: Rendered,
    ) -> Result<String, AgentError> {
        let first = !self.is_started();
        if first {
            self.system_text = rendered.system_text;
        }
        self.messages.push(Message::user(rendered.user_text));
        let req = ChatRequest::new(self.system_text.clone(), self.messages.clone())
            .tag("role", author.as_str())
            .tag("run", tags.run_id.clone())
            .tag("step", tags.step.to_string())
            .tag("date", tags.date.to_string());
        match gw.complete(req) {
            Ok(resp) => {
                self.messages.push(Message::assistant(resp.text.clone()));
                Ok(resp.text)
            }
            Err(source) => {
                self.messages.pop();
                if first {
                    self.system_text.clear();
                }
                Err(AgentError::Gateway { agent: author, step: tags.label(), source })
            }
        }
    }
}

fn render(t: &Template, ctx: &Context, agent: Author) -> Result<Rendered, AgentError> {
    t.render(ctx).map_err(|source| AgentError::Template { agent, source })
}

/// Window-level facts every analyst prompt carries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionInfo {
    pub instrument: String,
    pub window_start: NaiveDate,
    pub window_end: NaiveDate,
    pub now: NaiveDateTime,
    pub action_interval: usize,
}

impl SessionInfo {
    pub fn interval_text(&self) -> String {
        match self.action_interval {
            1 => "1 day".to_string(),
            n => format!("{n} days"),
        }
    }

    pub fn now_text(&self) -> String {
        self.now.format("%Y-%m-%d %H:%M").to_string()
    }

    fn base_context(&self) -> Context {
        Context::new()
            .text("instrument", &self.instrument)
            .text("session_start", self.window_start.to_string())
            .text("session_end", self.window_end.to_string())
            .text("current_time", self.now_text())
            .text("action_interval", self.interval_text())
    }
}

fn bar_line(b: &Bar) -> String {
    format!(
        "{} O {} H {} L {} C {} V {}",
        b.session_date,
        b.open.format_2dp(),
        b.high.format_2dp(),
        b.low.format_2dp(),
        b.close.format_2dp(),
        b.volume
    )
}

/// Monthly candles over two years, weekly over six months and daily over
/// three months, all ending at the last bar of `daily`.
pub fn multi_timeframe_text(daily: &BarSeries) -> Result<String, String> {
    let as_of = daily.last().ok_or("no daily history")?.session_date;
    let mut out = String::new();
    let spans = [
        ("Monthly candles (2 years)", Lookback::Years(2), Resolution::Monthly),
        ("Weekly candles (6 months)", Lookback::Months(6), Resolution::Weekly),
        ("Daily candles (3 months)", Lookback::Months(3), Resolution::Daily),
    ];
    for (title, lookback, res) in spans {
        let slice = window_slice(daily, lookback, as_of).map_err(|e| e.to_string())?;
        let bars = if res == Resolution::Daily { slice } else { resample(&slice, res).map_err(|e| e.to_string())? };
        let _ = writeln!(out, "**{title}:**");
        for b in bars.bars() {
            let _ = writeln!(out, "{}", bar_line(b));
        }
        out.push('\n');
    }
    Ok(out.trim_end().to_string())
}

/// Indicator snapshot plus support/resistance at the last bar of `daily`.
pub fn indicator_text(daily: &BarSeries, params: &SnapshotParams) -> Result<String, String> {
    let values = snapshot(daily, params).map_err(|e| e.to_string())?;
    let levels = detect_levels(daily, DEFAULT_LEVEL_TOLERANCE_PCT, DEFAULT_MIN_TOUCHES);
    Ok(format!("{}{}", render_snapshot(&values), render_levels(&levels)).trim_end().to_string())
}

pub struct MarketAnalyst {
    conversation: Conversation,
    pub params: SnapshotParams,
}

impl Default for MarketAnalyst {
    fn default() -> Self {
        Self::new(SnapshotParams::default())
    }
}

impl MarketAnalyst {
    pub fn new(params: SnapshotParams) -> Self {
        MarketAnalyst { conversation: Conversation::default(), params }
    }

    pub fn has_started(&self) -> bool {
        self.conversation.is_started()
    }

    /// Renders the prompt for the latest bar of `daily` without calling
    /// the gateway.
    pub fn prompt(&self, prompts: &PromptSet, info: &SessionInfo, daily: &BarSeries) -> Result<Rendered, AgentError> {
        let input = |reason: String| AgentError::Input { agent: Author::Market, reason };
        let bar = daily.last().ok_or_else(|| input("no daily history".into()))?;
        let mut ctx = info
            .base_context()
            .text("open_price", bar.open.format_2dp())
            .text("high_price", bar.high.format_2dp())
            .text("low_price", bar.low.format_2dp())
            .text("close_price", bar.close.format_2dp())
            .text("volume", bar.volume.to_string())
            .text("vwap_str", bar.vwap.map_or("n/a".to_string(), |v| format!("${}", v.format_2dp())))
            .text("transactions", bar.transactions.map_or("n/a".to_string(), |t| t.to_string()))
            .text("formatted_indicators", indicator_text(daily, &self.params).map_err(input)?);
        let template = if self.has_started() {
            &prompts.market_followup
        } else {
            ctx.set_text("extended_intervals_analysis", multi_timeframe_text(daily).map_err(input)?);
            &prompts.market_initial
        };
        render(template, &ctx, Author::Market)
    }

    pub fn analyze(
        &mut self,
        gw: &mut Gateway,
        prompts: &PromptSet,
        info: &SessionInfo,
        daily: &BarSeries,
        tags: &StepTags,
    ) -> Result<AnalystReport, AgentError> {
        let rendered = self.prompt(prompts, info, daily)?;
        let text = self.conversation.ask(gw, Author::Market, tags, rendered)?;
        Ok(AnalystReport { author: Author::Market, as_of: tags.date, text, sections: BTreeMap::new() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewsItem {
    pub published: DateTime<Utc>,
    pub title: String,
    #[serde(default)]
    pub publisher: String,
    #[serde(default)]
    pub url: String,
    #[serde(default)]
    pub summary: String,
    #[serde(default)]
    pub keywords: Vec<String>,
}

/// Drops repeats of the same (title, timestamp), keeping first occurrences.
pub fn dedup_news(items: &[NewsItem]) -> Vec<NewsItem> {
    let mut seen = BTreeSet::new();
    items
        .iter()
        .filter(|n| seen.insert((n.title.clone(), n.published)))
        .cloned()
        .collect()
}

pub fn format_news(items: &[NewsItem]) -> String {
    let mut out = String::new();
    for n in items {
        let _ = write!(out, "[{}] {}", n.published.to_rfc3339(), n.title);
        if !n.publisher.is_empty() {
            let _ = write!(out, " --- {}", n.publisher);
        }
        out.push('\n');
        if !n.url.is_empty() {
            let _ = writeln!(out, "URL: {}", n.url);
        }
        if !n.summary.is_empty() {
            let _ = writeln!(out, "Summary: {}", n.summary);
        }
        if !n.keywords.is_empty() {
            let _ = writeln!(out, "Keywords: {}", n.keywords.join(", "));
        }
        out.push('\n');
    }
    out.trim_end().to_string()
}

/// Picks out the four news sections by their headings, however they are
/// decorated (`**X**`, `## X`, `1. X:`).
pub fn parse_news_sections(text: &str) -> BTreeMap<String, String> {
    let mut out: BTreeMap<String, String> = BTreeMap::new();
    let mut current: Option<&str> = None;
    for line in text.lines() {
        let bare = line.trim_start_matches(|c: char| c == '#' || c == '*' || c == ' ' || c.is_ascii_digit() || c == '.');
        let heading = NEWS_SECTIONS.iter().find(|h| {
            bare.len() >= h.len() && bare.is_char_boundary(h.len()) && bare[..h.len()].eq_ignore_ascii_case(h)
        });
        if let Some(h) = heading {
            current = Some(h);
            let rest = bare[h.len()..].trim_start_matches(['*', ':', ' ']).trim();
            let entry = out.entry(h.to_string()).or_default();
            entry.push_str(rest);
            continue;
        }
        if let Some(h) = current {
            let entry = out.entry(h.to_string()).or_default();
            if !entry.is_empty() {
                entry.push('\n');
            }
            entry.push_str(line.trim());
        }
    }
    for v in out.values_mut() {
        *v = v.trim().to_string();
    }
    out
}

#[derive(Default)]
pub struct NewsAnalyst {
    conversation: Conversation,
}

impl NewsAnalyst {
    pub fn has_started(&self) -> bool {
        self.conversation.is_started()
    }

    /// `None` without a gateway call when the deduplicated batch is empty.
    pub fn analyze(
        &mut self,
        gw: &mut Gateway,
        prompts: &PromptSet,
        info: &SessionInfo,
        batch: &[NewsItem],
        tags: &StepTags,
    ) -> Result<Option<AnalystReport>, AgentError> {
        let items = dedup_news(batch);
        if items.is_empty() {
            return Ok(None);
        }
        let ctx = info.base_context().text("joined_news", format_news(&items));
        let template = if self.has_started() { &prompts.news_followup } else { &prompts.news_initial };
        let rendered = render(template, &ctx, Author::News)?;
        let text = self.conversation.ask(gw, Author::News, tags, rendered)?;
        let sections = parse_news_sections(&text);
        Ok(Some(AnalystReport { author: Author::News, as_of: tags.date, text, sections }))
    }
}

/// One filing's statement figures. Amounts in currency units, counts in
/// shares; anything unreported is absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FundamentalSnapshot {
    pub period: String,
    pub filing_date: NaiveDate,
    #[serde(default)]
    pub revenue: Option<f64>,
    #[serde(default)]
    pub cogs: Option<f64>,
    #[serde(default)]
    pub operating_income: Option<f64>,
    #[serde(default)]
    pub net_income: Option<f64>,
    #[serde(default)]
    pub weighted_shares: Option<f64>,
    #[serde(default)]
    pub ocf: Option<f64>,
    #[serde(default)]
    pub nce: Option<f64>,
    #[serde(default)]
    pub wcc: Option<f64>,
    #[serde(default)]
    pub icf: Option<f64>,
    #[serde(default)]
    pub fcf_fin: Option<f64>,
    #[serde(default)]
    pub total_assets: Option<f64>,
    #[serde(default)]
    pub total_debt: Option<f64>,
    #[serde(default)]
    pub total_equity: Option<f64>,
    #[serde(default)]
    pub annual_dividends_per_share: Option<f64>,
    #[serde(default)]
    pub price: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub gross_margin_pct: Option<f64>,
    pub operating_margin_pct: Option<f64>,
    pub net_margin_pct: Option<f64>,
    pub eps: Option<f64>,
    pub ocf: Option<f64>,
    pub net_cash_flow: Option<f64>,
    pub debt_to_equity: Option<f64>,
    pub dividend_yield_pct: Option<f64>,
}

impl Ratios {
    pub fn to_map(&self) -> BTreeMap<&'static str, Option<f64>> {
        BTreeMap::from([
            ("gross_margin_pct", self.gross_margin_pct),
            ("operating_margin_pct", self.operating_margin_pct),
            ("net_margin_pct", self.net_margin_pct),
            ("eps", self.eps),
            ("ocf", self.ocf),
            ("net_cash_flow", self.net_cash_flow),
            ("debt_to_equity", self.debt_to_equity),
            ("dividend_yield_pct", self.dividend_yield_pct),
        ])
    }
}

fn ratio(num: Option<f64>, den: Option<f64>) -> Option<f64> {
    match (num, den) {
        (Some(n), Some(d)) if d != 0.0 => Some(n / d),
        _ => None,
    }
}

/// Each ratio is undefined when an input is missing or its denominator is
/// zero. OCF falls back to NI + NCE + WCC when not reported directly.
pub fn compute_ratios(s: &FundamentalSnapshot) -> Ratios {
    let ocf = s.ocf.or(match (s.net_income, s.nce, s.wcc) {
        (Some(ni), Some(nce), Some(wcc)) => Some(ni + nce + wcc),
        _ => None,
    });
    let net_cash_flow = match (ocf, s.icf, s.fcf_fin) {
        (Some(o), Some(i), Some(f)) => Some(o + i + f),
        _ => None,
    };
    let gross = match (s.revenue, s.cogs) {
        (Some(r), Some(c)) => Some(r - c),
        _ => None,
    };
    Ratios {
        gross_margin_pct: ratio(gross, s.revenue).map(|x| x * 100.0),
        operating_margin_pct: ratio(s.operating_income, s.revenue).map(|x| x * 100.0),
        net_margin_pct: ratio(s.net_income, s.revenue).map(|x| x * 100.0),
        eps: ratio(s.net_income, s.weighted_shares),
        ocf,
        net_cash_flow,
        debt_to_equity: ratio(s.total_debt, s.total_equity),
        dividend_yield_pct: ratio(s.annual_dividends_per_share, s.price).map(|x| x * 100.0),
    }
}

fn big_money(x: f64) -> String {
    let a = x.abs();
    let sign = if x < 0.0 { "-" } else { "" };
    if a >= 1e9 {
        format!("{sign}${:.1}B", a / 1e9)
    } else if a >= 1e6 {
        format!("{sign}${:.1}M", a / 1e6)
    } else {
        format!("{sign}${a:.2}")
    }
}

/// One filing in the compact `Revenue $130.5B; GPM 75.0%; ...` form.
pub fn format_filing(s: &FundamentalSnapshot) -> String {
    let r = compute_ratios(s);
    let mut parts = Vec::new();
    let mut push = |label: &str, v: Option<String>| {
        if let Some(v) = v {
            parts.push(format!("{label} {v}"));
        }
    };
    push("Revenue", s.revenue.map(big_money));
    push("GPM", r.gross_margin_pct.map(|x| format!("{x:.1}%")));
    push("OpM", r.operating_margin_pct.map(|x| format!("{x:.1}%")));
    push("Net income", s.net_income.map(big_money));
    push("EPS", r.eps.map(|x| format!("${x:.2}")));
    push("OCF", r.ocf.map(big_money));
    push("NCF", r.net_cash_flow.map(big_money));
    push("Assets", s.total_assets.map(big_money));
    push("Equity", s.total_equity.map(big_money));
    push("D/E", r.debt_to_equity.map(|x| format!("{x:.2}")));
    push("Dividend yield", r.dividend_yield_pct.map(|x| format!("{x:.2}%")));
    format!("{} (Filed: {}):\n{}.", s.period, s.filing_date, parts.join("; "))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvent {
    pub date: NaiveDate,
    /// "old:new", e.g. "1:10".
    pub ratio: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DividendEvent {
    pub date: NaiveDate,
    pub cash: f64,
}

/// Everything the fundamental analyst may see over a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FundamentalData {
    #[serde(default)]
    pub filings: Vec<FundamentalSnapshot>,
    #[serde(default)]
    pub splits: Vec<SplitEvent>,
    #[serde(default)]
    pub dividends: Vec<DividendEvent>,
}

impl FundamentalData {
    pub fn event_dates(&self) -> BTreeSet<NaiveDate> {
        self.filings
            .iter()
            .map(|f| f.filing_date)
            .chain(self.splits.iter().map(|s| s.date))
            .chain(self.dividends.iter().map(|d| d.date))
            .collect()
    }

    /// True when a filing or corporate action dated in `(after, upto]`
    /// exists.
    pub fn has_event(&self, after: Option<NaiveDate>, upto: NaiveDate) -> bool {
        self.event_dates().iter().any(|d| *d <= upto && after.is_none_or(|a| *d > a))
    }

    /// What is public on `as_of`, newest first, in the compact batch form.
    pub fn batch_text(&self, as_of: NaiveDate) -> String {
        let mut out = String::new();
        let mut splits: Vec<_> = self.splits.iter().filter(|s| s.date <= as_of).collect();
        splits.sort_by_key(|e| std::cmp::Reverse(e.date));
        if !splits.is_empty() {
            let _ = writeln!(out, "Stock Splits:");
            let _ = writeln!(out, "{}", splits.iter().map(|s| format!("{}: {}", s.date, s.ratio)).collect::<Vec<_>>().join("  "));
        }
        let mut divs: Vec<_> = self.dividends.iter().filter(|d| d.date <= as_of).collect();
        divs.sort_by_key(|e| std::cmp::Reverse(e.date));
        if !divs.is_empty() {
            let _ = writeln!(out, "Dividends:");
            let _ = writeln!(out, "{}", divs.iter().map(|d| format!("{}: ${:.3}", d.date, d.cash)).collect::<Vec<_>>().join("  "));
        }
        let mut filings: Vec<_> = self.filings.iter().filter(|f| f.filing_date <= as_of).collect();
        filings.sort_by_key(|f| std::cmp::Reverse(f.filing_date));
        for f in filings {
            let _ = writeln!(out, "{}", format_filing(f));
        }
        out.trim_end().to_string()
    }
}

#[derive(Default)]
pub struct FundamentalAnalyst {
    conversation: Conversation,
    last_activation: Option<NaiveDate>,
}

impl FundamentalAnalyst {
    /// Runs only when a filing or corporate action became public since the
    /// previous activation (or ever, on the first call).
    pub fn analyze(
        &mut self,
        gw: &mut Gateway,
        prompts: &PromptSet,
        info: &SessionInfo,
        data: &FundamentalData,
        tags: &StepTags,
    ) -> Result<Option<AnalystReport>, AgentError> {
        let as_of = tags.date;
        let since = self.last_activation.or_else(|| info.window_start.pred_opt());
        if !data.has_event(since, as_of) {
            return Ok(None);
        }
        let ctx = info.base_context().text("fundamental_data", data.batch_text(as_of));
        let template = if self.conversation.is_started() {
            &prompts.fundamental_followup
        } else {
            &prompts.fundamental_initial
        };
        let rendered = render(template, &ctx, Author::Fundamental)?;
        let text = self.conversation.ask(gw, Author::Fundamental, tags, rendered)?;
        self.last_activation = Some(as_of);
        Ok(Some(AnalystReport { author: Author::Fundamental, as_of, text, sections: BTreeMap::new() }))
    }
}

/// OHLCV of the last completed session as shown to the trader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BarView {
    pub open: Money,
    pub high: Money,
    pub low: Money,
    pub close: Money,
    pub volume: u64,
}

impl From<&Bar> for BarView {
    fn from(b: &Bar) -> Self {
        BarView { open: b.open, high: b.high, low: b.low, close: b.close, volume: b.volume }
    }
}

/// Every value the trader templates reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionContext {
    pub instrument: String,
    pub window_start: NaiveDate,
    pub window_end: NaiveDate,
    pub now: NaiveDateTime,
    pub action_interval: usize,
    /// `None` before the first session opens.
    pub bar: Option<BarView>,
    pub market_analysis: Option<String>,
    pub news_analysis: Option<String>,
    pub fund_analysis: Option<String>,
    pub reflection_analysis: Option<String>,
    pub shares_long: u64,
    pub shares_short: u64,
    pub portfolio_cash: Money,
    pub executed_orders: String,
}

impl DecisionContext {
    pub fn to_context(&self) -> Context {
        let interval = match self.action_interval {
            1 => "1 day".to_string(),
            n => format!("{n} days"),
        };
        let mut ctx = Context::new()
            .text("instrument", &self.instrument)
            .text("window_start", self.window_start.to_string())
            .text("window_end", self.window_end.to_string())
            .text("now", self.now.format("%Y-%m-%d %H:%M").to_string())
            .text("action_interval", interval)
            .flag("has_bar", self.bar.is_some())
            .maybe("market_analysis", self.market_analysis.as_deref())
            .maybe("news_analysis", self.news_analysis.as_deref())
            .maybe("fund_analysis", self.fund_analysis.as_deref())
            .maybe("reflection_analysis", self.reflection_analysis.as_deref())
            .text("shares_long", self.shares_long.to_string())
            .text("shares_short", self.shares_short.to_string())
            .text("shares_net", (self.shares_long as i64 - self.shares_short as i64).to_string())
            .text("portfolio_cash", self.portfolio_cash.format_2dp())
            .text("executed_orders", &self.executed_orders);
        if let Some(b) = &self.bar {
            ctx = ctx
                .text("open", b.open.format_2dp())
                .text("high", b.high.format_2dp())
                .text("low", b.low.format_2dp())
                .text("close", b.close.format_2dp())
                .text("volume", b.volume.to_string());
        }
        ctx
    }
}

/// The last five fills, newest last, as `DATE ACTION QTY @ PRICE` lines;
/// `None` without fills.
pub fn recent_activity(fills: &[Fill]) -> String {
    if fills.is_empty() {
        return "None".to_string();
    }
    fills[fills.len().saturating_sub(5)..]
        .iter()
        .map(|f| format!("{} {} {} @ {}", f.executed_at, f.action, f.quantity, f.fill_price.format_2dp()))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OrderParseError {
    #[error("NOT_JSON_ARRAY: {0}")]
    NotJsonArray(String),
    #[error("SCHEMA_VIOLATION at {path}: {reason}")]
    SchemaViolation { path: String, reason: String },
}

impl OrderParseError {
    pub fn path(&self) -> Option<&str> {
        match self {
            OrderParseError::SchemaViolation { path, .. } => Some(path),
            OrderParseError::NotJsonArray(_) => None,
        }
    }
}

const ORDER_KEYS: [&str; 5] = ["action", "orderType", "price", "quantity", "explanation"];

/// The payload between the first pair of ``` fences, or the whole text.
pub fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(open) = t.find("```") else { return t };
    let after = &t[open + 3..];
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let lang = after[..body_start].trim();
    if !lang.is_empty() && !lang.chars().all(|c| c.is_ascii_alphanumeric()) {
        return t;
    }
    let body = &after[body_start..];
    match body.find("```") {
        Some(close) => body[..close].trim(),
        None => body.trim(),
    }
}

/// Strict parse of a trader reply into order requests.
pub fn parse_orders(text: &str) -> Result<Vec<OrderRequest>, OrderParseError> {
    let payload = strip_fences(text);
    let value: serde_json::Value =
        serde_json::from_str(payload).map_err(|e| OrderParseError::NotJsonArray(format!("invalid JSON: {e}")))?;
    let items = value
        .as_array()
        .ok_or_else(|| OrderParseError::NotJsonArray(format!("top level is {}", json_kind(&value))))?;
    items.iter().enumerate().map(|(i, v)| parse_order(i, v)).collect()
}

fn json_kind(v: &serde_json::Value) -> &'static str {
    match v {
        serde_json::Value::Null => "null",
        serde_json::Value::Bool(_) => "a boolean",
        serde_json::Value::Number(_) => "a number",
        serde_json::Value::String(_) => "a string",
        serde_json::Value::Array(_) => "an array",
        serde_json::Value::Object(_) => "an object",
    }
}

fn parse_order(i: usize, v: &serde_json::Value) -> Result<OrderRequest, OrderParseError> {
    let violation = |field: &str, reason: String| OrderParseError::SchemaViolation {
        path: if field.is_empty() { format!("[{i}]") } else { format!("[{i}].{field}") },
        reason,
    };
    let obj = v.as_object().ok_or_else(|| violation("", format!("expected an object, got {}", json_kind(v))))?;
    if let Some(k) = obj.keys().find(|k| !ORDER_KEYS.contains(&k.as_str())) {
        return Err(violation(k, "unknown field".into()));
    }
    let enum_field = |field: &str| -> Result<&str, OrderParseError> {
        match obj.get(field) {
            Some(serde_json::Value::String(s)) => Ok(s),
            Some(other) => Err(violation(field, format!("expected a string, got {}", json_kind(other)))),
            None => Err(violation(field, "missing".into())),
        }
    };
    let action: Action = enum_field("action")?
        .parse()
        .map_err(|_| violation("action", "must be BUY|SELL|SHORT|SHORT_COVER".into()))?;
    let order_type: OrderType = enum_field("orderType")?
        .parse()
        .map_err(|_| violation("orderType", "must be MARKET|LIMIT|STOP".into()))?;
    let price = match (order_type, obj.get("price")) {
        (OrderType::Market, None | Some(serde_json::Value::Null)) => None,
        (OrderType::Market, Some(_)) => return Err(violation("price", "must be null for MARKET".into())),
        (_, Some(serde_json::Value::Number(n))) => {
            let p = n.as_f64().filter(|p| *p > 0.0).and_then(Money::from_f64).filter(|m| m.is_positive());
            Some(p.ok_or_else(|| violation("price", format!("must be a number > 0, got {n}")))?)
        }
        (_, Some(other)) => {
            return Err(violation("price", format!("must be a number > 0, got {}", json_kind(other))))
        }
        (_, None) => return Err(violation("price", format!("missing for {order_type}"))),
    };
    let quantity = match obj.get("quantity") {
        Some(serde_json::Value::Number(n)) => n
            .as_u64()
            .filter(|q| *q > 0)
            .ok_or_else(|| violation("quantity", format!("must be a positive integer, got {n}")))?,
        Some(other) => return Err(violation("quantity", format!("must be a positive integer, got {}", json_kind(other)))),
        None => return Err(violation("quantity", "missing".into())),
    };
    let explanation = match obj.get("explanation") {
        None | Some(serde_json::Value::Null) => String::new(),
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(other) => return Err(violation("explanation", format!("expected a string, got {}", json_kind(other)))),
    };
    Ok(OrderRequest { action, order_type, price, quantity, explanation })
}

pub const FORMAT_REMINDER: &str = "Your previous reply could not be used as an order list. Return only a JSON array of \
order objects with exactly the keys action, orderType, price, quantity, explanation, or [] for no action.";

/// What the trader decided for one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub orders: Vec<OrderRequest>,
    pub attempts: u32,
    /// Set when every attempt failed to parse and the step fell back to no
    /// action.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    pub used_initial_template: bool,
}

pub struct TradingAgent {
    conversation: Conversation,
    pub format_retries: u32,
}

impl Default for TradingAgent {
    fn default() -> Self {
        TradingAgent { conversation: Conversation::default(), format_retries: 2 }
    }
}

impl TradingAgent {
    /// Starts a fresh conversation, so the next decision uses the initial
    /// template again.
    pub fn reset(&mut self) {
        self.conversation.reset();
    }

    pub fn conversation(&self) -> &Conversation {
        &self.conversation
    }

    /// Renders the prompt the next decision would send.
    pub fn prompt(
        &self,
        initial: &Template,
        prompts: &PromptSet,
        ctx: &DecisionContext,
    ) -> Result<Rendered, AgentError> {
        let template = if self.conversation.is_started() { &prompts.cta_followup } else { initial };
        render(template, &ctx.to_context(), Author::Trader)
    }

    /// Unparseable replies are re-asked with a format reminder up to
    /// `format_retries` times, after which the step takes no action.
    pub fn decide(
        &mut self,
        gw: &mut Gateway,
        initial: &Template,
        prompts: &PromptSet,
        ctx: &DecisionContext,
        tags: &StepTags,
    ) -> Result<Decision, AgentError> {
        let used_initial_template = !self.conversation.is_started();
        let mut rendered = self.prompt(initial, prompts, ctx)?;
        let mut attempts = 0;
        loop {
            attempts += 1;
            let reply = self.conversation.ask(gw, Author::Trader, tags, rendered)?;
            match parse_orders(&reply) {
                Ok(orders) => return Ok(Decision { orders, attempts, parse_error: None, used_initial_template }),
                Err(e) if attempts > self.format_retries => {
                    return Ok(Decision {
                        orders: Vec::new(),
                        attempts,
                        parse_error: Some(e.to_string()),
                        used_initial_template,
                    })
                }
                Err(e) => {
                    rendered = Rendered { system_text: String::new(), user_text: format!("{FORMAT_REMINDER}\nProblem: {e}") };
                }
            }
        }
    }
}
