//! Daily bar ingestion, validation, corporate-action adjustment, resampling
//! and lookback slicing.
//!
//! Every downstream component consumes [`BarSeries`]. A series is validated
//! once at construction and is immutable afterwards.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Read};
use std::str::FromStr;

use chrono::{Datelike, Months, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::money::Money;

pub mod fetch;

pub const CSV_HEADER: [&str; 8] = [
    "date",
    "open",
    "high",
    "low",
    "close",
    "volume",
    "vwap",
    "transactions",
];

pub const ACTIONS_HEADER: [&str; 4] = ["date", "kind", "ratio", "cash"];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("empty input")]
    Empty,
    #[error("malformed row {row}: {reason}")]
    Malformed { row: usize, reason: String },
    #[error("{reason} at row {row}")]
    InvalidBar { row: usize, reason: String },
    #[error("duplicate session {date}")]
    Duplicate { date: NaiveDate },
    #[error("unordered dates: {date} at row {row} is not after the previous session")]
    Unordered { row: usize, date: NaiveDate },
    #[error("header mismatch: expected {expected:?}, found {found:?}")]
    Header { expected: String, found: String },
    #[error("expected daily input, found {0}")]
    NotDaily(Resolution),
    #[error("as_of {as_of} is before the first bar {first}")]
    AsOfBeforeStart { as_of: NaiveDate, first: NaiveDate },
    #[error("non-positive split ratio on {date}")]
    NonPositiveSplit { date: NaiveDate },
    #[error("session {date} is not in the trading calendar")]
    OffCalendar { date: NaiveDate },
    #[error("missing sessions: {}", format_dates(.0))]
    MissingSessions(Vec<NaiveDate>),
    #[error("provider error: {0}")]
    Provider(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_dates(dates: &[NaiveDate]) -> String {
    dates
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Daily,
    Weekly,
    Monthly,
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Resolution::Daily => "daily",
            Resolution::Weekly => "weekly",
            Resolution::Monthly => "monthly",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarFormat {
    Csv,
    Jsonl,
}

/// One session's OHLCV record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bar {
    #[serde(rename = "date")]
    pub session_date: NaiveDate,
    pub open: Money,
    pub high: Money,
    pub low: Money,
    pub close: Money,
    pub volume: u64,
    #[serde(default)]
    pub vwap: Option<Money>,
    #[serde(default)]
    pub transactions: Option<u64>,
}

impl Bar {
    /// Checks price positivity and the low/open/close/high ordering.
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("open", self.open),
            ("high", self.high),
            ("low", self.low),
            ("close", self.close),
        ] {
            if !v.is_positive() {
                return Err(format!("{name} must be > 0"));
            }
        }
        if self.low > self.high {
            return Err("low > high".into());
        }
        if self.open < self.low || self.open > self.high {
            return Err("open outside [low, high]".into());
        }
        if self.close < self.low || self.close > self.high {
            return Err("close outside [low, high]".into());
        }
        if let Some(vwap) = self.vwap {
            if vwap < self.low || vwap > self.high {
                return Err("vwap outside [low, high]".into());
            }
        }
        Ok(())
    }

    /// Bar with O=H=L=C, handy for fixtures.
    pub fn flat(session_date: NaiveDate, price: Money, volume: u64) -> Self {
        Bar {
            session_date,
            open: price,
            high: price,
            low: price,
            close: price,
            volume,
            vwap: None,
            transactions: None,
        }
    }
}

/// An ordered run of bars for one symbol at one resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BarSeries {
    symbol: String,
    resolution: Resolution,
    bars: Vec<Bar>,
}

impl BarSeries {
    /// Validates every bar and the strict date ordering. Row numbers in
    /// errors are 1-based positions in `bars`.
    pub fn new(
        symbol: impl Into<String>,
        resolution: Resolution,
        bars: Vec<Bar>,
    ) -> Result<Self, DataError> {
        for (i, bar) in bars.iter().enumerate() {
            bar.validate()
                .map_err(|reason| DataError::InvalidBar { row: i + 1, reason })?;
            if i > 0 {
                let prev = bars[i - 1].session_date;
                if bar.session_date == prev {
                    return Err(DataError::Duplicate { date: prev });
                }
                if bar.session_date < prev {
                    return Err(DataError::Unordered {
                        row: i + 1,
                        date: bar.session_date,
                    });
                }
            }
        }
        Ok(BarSeries {
            symbol: symbol.into(),
            resolution,
            bars,
        })
    }

    pub fn symbol(&self) -> &str {
        &self.symbol
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn bars(&self) -> &[Bar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn first(&self) -> Option<&Bar> {
        self.bars.first()
    }

    pub fn last(&self) -> Option<&Bar> {
        self.bars.last()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.bars.iter().map(|b| b.session_date).collect()
    }

    pub fn closes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.close.to_f64()).collect()
    }

    /// Index of the session on `date`, if present.
    pub fn position(&self, date: NaiveDate) -> Option<usize> {
        self.bars
            .binary_search_by_key(&date, |b| b.session_date)
            .ok()
    }

    /// Bars with `session_date <= date`.
    pub fn up_to(&self, date: NaiveDate) -> BarSeries {
        let end = self.bars.partition_point(|b| b.session_date <= date);
        self.with_bars(self.bars[..end].to_vec())
    }

    /// Bars with `start <= session_date <= end`.
    pub fn between(&self, start: NaiveDate, end: NaiveDate) -> BarSeries {
        let lo = self.bars.partition_point(|b| b.session_date < start);
        let hi = self.bars.partition_point(|b| b.session_date <= end);
        self.with_bars(self.bars[lo..hi.max(lo)].to_vec())
    }

    fn with_bars(&self, bars: Vec<Bar>) -> BarSeries {
        BarSeries {
            symbol: self.symbol.clone(),
            resolution: self.resolution,
            bars,
        }
    }

    /// Canonical CSV: the exact header, amounts in shortest decimal form and
    /// empty cells for absent vwap/transactions.
    pub fn to_csv(&self) -> String {
        let mut out = CSV_HEADER.join(",");
        out.push('\n');
        for b in &self.bars {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                b.session_date,
                b.open,
                b.high,
                b.low,
                b.close,
                b.volume,
                b.vwap.map(|v| v.to_string()).unwrap_or_default(),
                b.transactions.map(|t| t.to_string()).unwrap_or_default(),
            ));
        }
        out
    }
}

fn parse_date(s: &str) -> Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| format!("bad date {s:?}: {e}"))
}

fn parse_price(field: &str, s: &str) -> Result<Money, String> {
    Money::from_str(s).map_err(|e| format!("{field}: {e}"))
}

fn parse_opt<T: FromStr>(field: &str, s: &str) -> Result<Option<T>, String> {
    let t = s.trim();
    if t.is_empty() {
        return Ok(None);
    }
    t.parse()
        .map(Some)
        .map_err(|_| format!("{field}: cannot parse {t:?}"))
}

/// Parses bars from CSV (exact header required) or JSONL.
pub fn parse_bars(
    source: impl Read,
    format: BarFormat,
    symbol: &str,
) -> Result<BarSeries, DataError> {
    let bars = match format {
        BarFormat::Csv => parse_csv_rows(source)?,
        BarFormat::Jsonl => parse_jsonl_rows(source)?,
    };
    if bars.is_empty() {
        return Err(DataError::Empty);
    }
    BarSeries::new(symbol, Resolution::Daily, bars)
}

fn parse_csv_rows(source: impl Read) -> Result<Vec<Bar>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(source);
    let header = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(csv_error(0, e)),
    };
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(DataError::Empty);
    }
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(DataError::Header {
            expected: CSV_HEADER.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut bars = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| csv_error(row, e))?;
        let bar = (|| -> Result<Bar, String> {
            Ok(Bar {
                session_date: parse_date(&record[0])?,
                open: parse_price("open", &record[1])?,
                high: parse_price("high", &record[2])?,
                low: parse_price("low", &record[3])?,
                close: parse_price("close", &record[4])?,
                volume: record[5]
                    .trim()
                    .parse()
                    .map_err(|_| format!("volume: cannot parse {:?}", &record[5]))?,
                vwap: parse_opt::<Money>("vwap", &record[6])?,
                transactions: parse_opt::<u64>("transactions", &record[7])?,
            })
        })()
        .map_err(|reason| DataError::Malformed { row, reason })?;
        bar.validate()
            .map_err(|reason| DataError::InvalidBar { row, reason })?;
        check_order(&bars, &bar, row)?;
        bars.push(bar);
    }
    Ok(bars)
}

fn csv_error(row: usize, e: csv::Error) -> DataError {
    match e.kind() {
        csv::ErrorKind::Io(_) => DataError::Io(std::io::Error::other(e.to_string())),
        _ => DataError::Malformed {
            row,
            reason: e.to_string(),
        },
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonBar {
    date: String,
    open: f64,
    high: f64,
    low: f64,
    close: f64,
    volume: u64,
    #[serde(default)]
    vwap: Option<f64>,
    #[serde(default)]
    transactions: Option<u64>,
}

fn parse_jsonl_rows(source: impl Read) -> Result<Vec<Bar>, DataError> {
    let reader = std::io::BufReader::new(source);
    let mut bars = Vec::new();
    let mut row = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        row += 1;
        let raw: JsonBar = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            row,
            reason: e.to_string(),
        })?;
        let money = |field: &str, v: f64| {
            Money::from_f64(v).ok_or_else(|| DataError::Malformed {
                row,
                reason: format!("{field}: not a finite amount"),
            })
        };
        let bar = Bar {
            session_date: parse_date(&raw.date)
                .map_err(|reason| DataError::Malformed { row, reason })?,
            open: money("open", raw.open)?,
            high: money("high", raw.high)?,
            low: money("low", raw.low)?,
            close: money("close", raw.close)?,
            volume: raw.volume,
            vwap: raw.vwap.map(|v| money("vwap", v)).transpose()?,
            transactions: raw.transactions,
        };
        bar.validate()
            .map_err(|reason| DataError::InvalidBar { row, reason })?;
        check_order(&bars, &bar, row)?;
        bars.push(bar);
    }
    Ok(bars)
}

fn check_order(prev: &[Bar], bar: &Bar, row: usize) -> Result<(), DataError> {
    if let Some(last) = prev.last() {
        if bar.session_date == last.session_date {
            return Err(DataError::Duplicate {
                date: bar.session_date,
            });
        }
        if bar.session_date < last.session_date {
            return Err(DataError::Unordered {
                row,
                date: bar.session_date,
            });
        }
    }
    Ok(())
}

/// Split ratio expressed as new shares per old shares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub new_shares: u64,
    pub old_shares: u64,
}

impl SplitRatio {
    pub fn as_f64(&self) -> f64 {
        self.new_shares as f64 / self.old_shares as f64
    }
}

impl fmt::Display for SplitRatio {
    /// Rendered old:new, the notation used in filings feeds (`1:10`).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.old_shares, self.new_shares)
    }
}

impl FromStr for SplitRatio {
    type Err = String;

    /// Accepts `old:new` (`1:10`), `new/old` (`10/1`) or a plain integer
    /// multiplier (`10`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let num = |x: &str| -> Result<u64, String> {
            x.trim()
                .parse::<u64>()
                .map_err(|_| format!("bad split ratio {s:?}"))
        };
        let (new_shares, old_shares) = if let Some((old, new)) = t.split_once(':') {
            (num(new)?, num(old)?)
        } else if let Some((new, old)) = t.split_once('/') {
            (num(new)?, num(old)?)
        } else {
            (num(t)?, 1)
        };
        Ok(SplitRatio {
            new_shares,
            old_shares,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActionKind {
    Split { ratio: SplitRatio },
    Dividend { cash_amount: Money },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorporateAction {
    pub effective_date: NaiveDate,
    #[serde(flatten)]
    pub kind: ActionKind,
}

impl CorporateAction {
    pub fn split(effective_date: NaiveDate, new_shares: u64, old_shares: u64) -> Self {
        CorporateAction {
            effective_date,
            kind: ActionKind::Split {
                ratio: SplitRatio {
                    new_shares,
                    old_shares,
                },
            },
        }
    }

    pub fn dividend(effective_date: NaiveDate, cash_amount: Money) -> Self {
        CorporateAction {
            effective_date,
            kind: ActionKind::Dividend { cash_amount },
        }
    }
}

/// Parses the `date,kind,ratio,cash` corporate actions CSV.
pub fn parse_actions(source: impl Read) -> Result<Vec<CorporateAction>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(source);
    let header = reader.headers().map_err(|e| csv_error(0, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ACTIONS_HEADER {
        return Err(DataError::Header {
            expected: ACTIONS_HEADER.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut actions = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| csv_error(row, e))?;
        let malformed = |reason: String| DataError::Malformed { row, reason };
        let date = parse_date(&record[0]).map_err(malformed)?;
        let kind = match record[1].trim() {
            "split" => ActionKind::Split {
                ratio: record[2].parse().map_err(malformed)?,
            },
            "dividend" => ActionKind::Dividend {
                cash_amount: parse_price("cash", &record[3]).map_err(malformed)?,
            },
            other => return Err(malformed(format!("unknown action kind {other:?}"))),
        };
        actions.push(CorporateAction {
            effective_date: date,
            kind,
        });
    }
    Ok(actions)
}

/// Split-adjusts every bar dated before each split's effective date:
/// prices divided by the ratio, volume multiplied. Dividends leave prices
/// untouched.
pub fn adjust_for_actions(
    series: &BarSeries,
    actions: &[CorporateAction],
) -> Result<BarSeries, DataError> {
    let mut bars = series.bars.clone();
    let mut splits: Vec<_> = actions
        .iter()
        .filter_map(|a| match a.kind {
            ActionKind::Split { ratio } => Some((a.effective_date, ratio)),
            ActionKind::Dividend { .. } => None,
        })
        .collect();
    splits.sort_by_key(|(d, _)| *d);
    for (date, ratio) in &splits {
        if ratio.new_shares == 0 || ratio.old_shares == 0 {
            return Err(DataError::NonPositiveSplit { date: *date });
        }
    }
    for (date, ratio) in splits {
        if ratio.new_shares == ratio.old_shares {
            continue;
        }
        let scale_price = |m: Money| -> Money {
            let num = m.raw() as i128 * ratio.old_shares as i128;
            let den = ratio.new_shares as i128;
            // Round half away from zero to the 4th decimal.
            let q = (2 * num + den.signum() * den) / (2 * den);
            Money::from_raw(q as i64)
        };
        for bar in bars.iter_mut().filter(|b| b.session_date < date) {
            bar.open = scale_price(bar.open);
            bar.high = scale_price(bar.high);
            bar.low = scale_price(bar.low);
            bar.close = scale_price(bar.close);
            bar.vwap = bar.vwap.map(scale_price);
            let vol = bar.volume as u128 * ratio.new_shares as u128;
            bar.volume = ((2 * vol + ratio.old_shares as u128) / (2 * ratio.old_shares as u128))
                as u64;
        }
    }
    BarSeries::new(series.symbol.clone(), series.resolution, bars)
}

/// Aggregates daily bars into ISO-week or calendar-month buckets. Each
/// output bar is dated with the first session of its bucket.
pub fn resample(series: &BarSeries, target: Resolution) -> Result<BarSeries, DataError> {
    if series.resolution != Resolution::Daily {
        return Err(DataError::NotDaily(series.resolution));
    }
    if series.is_empty() {
        return Err(DataError::Empty);
    }
    if target == Resolution::Daily {
        return Ok(series.clone());
    }
    let key = |d: NaiveDate| -> (i32, u32) {
        match target {
            Resolution::Weekly => (d.iso_week().year(), d.iso_week().week()),
            _ => (d.year(), d.month()),
        }
    };
    let mut out: Vec<Bar> = Vec::new();
    let mut bucket: Vec<&Bar> = Vec::new();
    let flush = |bucket: &mut Vec<&Bar>, out: &mut Vec<Bar>| {
        if bucket.is_empty() {
            return;
        }
        out.push(merge_bucket(bucket));
        bucket.clear();
    };
    for bar in &series.bars {
        if let Some(first) = bucket.first() {
            if key(first.session_date) != key(bar.session_date) {
                flush(&mut bucket, &mut out);
            }
        }
        bucket.push(bar);
    }
    flush(&mut bucket, &mut out);
    BarSeries::new(series.symbol.clone(), target, out)
}

fn merge_bucket(bucket: &[&Bar]) -> Bar {
    let first = bucket[0];
    let last = bucket[bucket.len() - 1];
    let volume: u64 = bucket.iter().map(|b| b.volume).sum();
    let vwap = if volume > 0 && bucket.iter().all(|b| b.vwap.is_some()) {
        let weighted: f64 = bucket
            .iter()
            .map(|b| b.vwap.unwrap().to_f64() * b.volume as f64)
            .sum();
        Money::from_f64(weighted / volume as f64)
    } else {
        None
    };
    let high = bucket.iter().map(|b| b.high).max().unwrap();
    let low = bucket.iter().map(|b| b.low).min().unwrap();
    Bar {
        session_date: first.session_date,
        open: first.open,
        high,
        low,
        close: last.close,
        volume,
        vwap: vwap.map(|v| v.clamp(low, high)),
        transactions: bucket
            .iter()
            .map(|b| b.transactions)
            .sum::<Option<u64>>(),
    }
}

/// A calendar-based lookback span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lookback {
    Days(u32),
    Weeks(u32),
    Months(u32),
    Years(u32),
}

impl Lookback {
    /// `as_of` minus this span, saturating at the calendar minimum.
    pub fn start_exclusive(&self, as_of: NaiveDate) -> NaiveDate {
        let sub = match *self {
            Lookback::Days(n) => as_of.checked_sub_days(chrono::Days::new(n as u64)),
            Lookback::Weeks(n) => as_of.checked_sub_days(chrono::Days::new(7 * n as u64)),
            Lookback::Months(n) => as_of.checked_sub_months(Months::new(n)),
            Lookback::Years(n) => as_of.checked_sub_months(Months::new(12 * n)),
        };
        sub.unwrap_or(NaiveDate::MIN)
    }
}

/// Bars with `session_date` in `(as_of − lookback, as_of]`. Missing sessions
/// are simply absent.
pub fn window_slice(
    series: &BarSeries,
    lookback: Lookback,
    as_of: NaiveDate,
) -> Result<BarSeries, DataError> {
    let first = series.first().ok_or(DataError::Empty)?.session_date;
    if as_of < first {
        return Err(DataError::AsOfBeforeStart { as_of, first });
    }
    let start = lookback.start_exclusive(as_of);
    let lo = series.bars.partition_point(|b| b.session_date <= start);
    let hi = series.bars.partition_point(|b| b.session_date <= as_of);
    Ok(series.with_bars(series.bars[lo..hi].to_vec()))
}

/// The ordered set of official trading sessions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCalendar {
    trading_dates: Vec<NaiveDate>,
}

impl SessionCalendar {
    pub fn new(dates: impl IntoIterator<Item = NaiveDate>) -> Result<Self, DataError> {
        let trading_dates: Vec<NaiveDate> = dates.into_iter().collect();
        for (i, w) in trading_dates.windows(2).enumerate() {
            if w[1] == w[0] {
                return Err(DataError::Duplicate { date: w[0] });
            }
            if w[1] < w[0] {
                return Err(DataError::Unordered {
                    row: i + 2,
                    date: w[1],
                });
            }
        }
        Ok(SessionCalendar { trading_dates })
    }

    /// One `date` column, header required.
    pub fn parse_csv(source: impl Read) -> Result<Self, DataError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(source);
        let header = reader.headers().map_err(|e| csv_error(0, e))?.clone();
        if header.iter().next() != Some("date") {
            return Err(DataError::Header {
                expected: "date".into(),
                found: header.iter().collect::<Vec<_>>().join(","),
            });
        }
        let mut dates = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| csv_error(i + 1, e))?;
            dates.push(
                parse_date(&record[0])
                    .map_err(|reason| DataError::Malformed { row: i + 1, reason })?,
            );
        }
        if dates.is_empty() {
            return Err(DataError::Empty);
        }
        SessionCalendar::new(dates)
    }

    pub fn from_series(series: &BarSeries) -> Self {
        SessionCalendar {
            trading_dates: series.dates(),
        }
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.trading_dates
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.trading_dates.binary_search(&date).is_ok()
    }

    /// Sessions with `start <= date <= end`.
    pub fn sessions_between(&self, start: NaiveDate, end: NaiveDate) -> Vec<NaiveDate> {
        self.trading_dates
            .iter()
            .copied()
            .filter(|d| *d >= start && *d <= end)
            .collect()
    }

    /// Every bar must fall on a calendar session.
    pub fn check_membership(&self, series: &BarSeries) -> Result<(), DataError> {
        match series.bars.iter().find(|b| !self.contains(b.session_date)) {
            Some(b) => Err(DataError::OffCalendar {
                date: b.session_date,
            }),
            None => Ok(()),
        }
    }

    /// Calendar sessions in `[start, end]` that have no bar.
    pub fn missing_sessions(
        &self,
        series: &BarSeries,
        start: NaiveDate,
        end: NaiveDate,
    ) -> Vec<NaiveDate> {
        let have: BTreeSet<NaiveDate> = series.bars.iter().map(|b| b.session_date).collect();
        self.sessions_between(start, end)
            .into_iter()
            .filter(|d| !have.contains(d))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn m(s: &str) -> Money {
        s.parse().unwrap()
    }

    fn bar(date: &str, o: &str, h: &str, l: &str, c: &str, v: u64) -> Bar {
        Bar {
            session_date: d(date),
            open: m(o),
            high: m(h),
            low: m(l),
            close: m(c),
            volume: v,
            vwap: None,
            transactions: None,
        }
    }

    const HEADER: &str = "date,open,high,low,close,volume,vwap,transactions\n";

    #[test]
    fn csv_row_maps_fields() {
        let src = format!("{HEADER}2025-04-28,100,110,90,105,1000,102.5,50\n");
        let s = parse_bars(src.as_bytes(), BarFormat::Csv, "X").unwrap();
        let b = &s.bars()[0];
        assert_eq!(b.open, m("100"));
        assert_eq!(b.high, m("110"));
        assert_eq!(b.low, m("90"));
        assert_eq!(b.close, m("105"));
        assert_eq!(b.volume, 1000);
        assert_eq!(b.vwap, Some(m("102.5")));
        assert_eq!(b.transactions, Some(50));
    }

    #[test]
    fn inverted_range_is_rejected_with_row() {
        let src = format!("{HEADER}2025-04-28,100,90,110,100,1000,,\n");
        let err = parse_bars(src.as_bytes(), BarFormat::Csv, "X").unwrap_err();
        assert_eq!(err.to_string(), "low > high at row 1");
    }

    #[test]
    fn duplicate_session_is_rejected() {
        let src = format!(
            "{HEADER}2025-04-28,100,110,90,105,1000,,\n2025-04-28,100,110,90,105,1000,,\n"
        );
        let err = parse_bars(src.as_bytes(), BarFormat::Csv, "X").unwrap_err();
        assert_eq!(err.to_string(), "duplicate session 2025-04-28");
    }

    #[test]
    fn unordered_and_empty_inputs_fail() {
        let src = format!(
            "{HEADER}2025-04-29,100,110,90,105,1000,,\n2025-04-28,100,110,90,105,1000,,\n"
        );
        assert!(matches!(
            parse_bars(src.as_bytes(), BarFormat::Csv, "X"),
            Err(DataError::Unordered { row: 2, .. })
        ));
        assert!(matches!(
            parse_bars(HEADER.as_bytes(), BarFormat::Csv, "X"),
            Err(DataError::Empty)
        ));
        assert!(matches!(
            parse_bars(&b""[..], BarFormat::Csv, "X"),
            Err(DataError::Empty)
        ));
    }

    #[test]
    fn wrong_header_and_bad_cells_fail() {
        let src = "Date,Open,High,Low,Close,Volume,VWAP,N\n";
        assert!(matches!(
            parse_bars(src.as_bytes(), BarFormat::Csv, "X"),
            Err(DataError::Header { .. })
        ));
        let src = format!("{HEADER}2025-04-28,abc,110,90,105,1000,,\n");
        assert!(matches!(
            parse_bars(src.as_bytes(), BarFormat::Csv, "X"),
            Err(DataError::Malformed { row: 1, .. })
        ));
    }

    #[test]
    fn vwap_outside_range_is_rejected() {
        let src = format!("{HEADER}2025-04-28,100,110,90,105,1000,120,\n");
        assert!(matches!(
            parse_bars(src.as_bytes(), BarFormat::Csv, "X"),
            Err(DataError::InvalidBar { row: 1, .. })
        ));
    }

    #[test]
    fn jsonl_matches_csv() {
        let csv = format!(
            "{HEADER}2025-04-28,100,110,90,105,1000,102.5,50\n2025-04-29,105,106,101,102,800,,\n"
        );
        let jsonl = concat!(
            r#"{"date":"2025-04-28","open":100,"high":110,"low":90,"close":105,"volume":1000,"vwap":102.5,"transactions":50}"#,
            "\n",
            r#"{"date":"2025-04-29","open":105,"high":106,"low":101,"close":102,"volume":800,"vwap":null}"#,
            "\n"
        );
        let a = parse_bars(csv.as_bytes(), BarFormat::Csv, "X").unwrap();
        let b = parse_bars(jsonl.as_bytes(), BarFormat::Jsonl, "X").unwrap();
        assert_eq!(a, b);
        let extra = r#"{"date":"2025-04-28","open":1,"high":1,"low":1,"close":1,"volume":1,"foo":1}"#;
        assert!(parse_bars(extra.as_bytes(), BarFormat::Jsonl, "X").is_err());
    }

    #[test]
    fn canonical_csv_round_trips() {
        let src = format!(
            "{HEADER}2025-04-28,100,110,90,105,1000,102.5,50\n2025-04-29,105,106.25,101.0001,102,800,,\n"
        );
        let s = parse_bars(src.as_bytes(), BarFormat::Csv, "X").unwrap();
        assert_eq!(s.to_csv(), src);
    }

    #[test]
    fn ten_for_one_split() {
        let bars: Vec<Bar> = (1..=6)
            .map(|i| {
                let date = format!("2024-06-{:02}", i + 2);
                if i < 5 {
                    bar(&date, "1000", "1000", "1000", "1000", 7)
                } else {
                    bar(&date, "100", "100", "100", "100", 70)
                }
            })
            .collect();
        let s = BarSeries::new("NVDA", Resolution::Daily, bars).unwrap();
        let adj = adjust_for_actions(&s, &[CorporateAction::split(d("2024-06-07"), 10, 1)]).unwrap();
        assert_eq!(adj.bars()[0].close, m("100"));
        assert_eq!(adj.bars()[0].volume, 70);
        assert_eq!(adj.bars()[5].close, m("100"));
        assert_eq!(adj.bars()[5].volume, 70);
    }

    #[test]
    fn empty_and_unit_actions_are_identity() {
        let s = BarSeries::new(
            "X",
            Resolution::Daily,
            vec![bar("2025-01-02", "10", "12", "9", "11", 5)],
        )
        .unwrap();
        assert_eq!(adjust_for_actions(&s, &[]).unwrap(), s);
        let unit = CorporateAction::split(d("2025-02-01"), 3, 3);
        let div = CorporateAction::dividend(d("2025-02-01"), m("0.5"));
        assert_eq!(adjust_for_actions(&s, &[unit, div]).unwrap(), s);
    }

    #[test]
    fn sequential_splits_compose() {
        // Three bars; a 1:2 split before bar 2 and 1:4 before bar 3.
        let s = BarSeries::new(
            "X",
            Resolution::Daily,
            vec![
                bar("2025-01-02", "800", "800", "800", "800", 1),
                bar("2025-01-03", "400", "400", "400", "400", 2),
                bar("2025-01-06", "100", "100", "100", "100", 8),
            ],
        )
        .unwrap();
        let adj = adjust_for_actions(
            &s,
            &[
                CorporateAction::split(d("2025-01-06"), 4, 1),
                CorporateAction::split(d("2025-01-03"), 2, 1),
            ],
        )
        .unwrap();
        // Hand composition: 800 / (2·4) = 100; 400 / 4 = 100.
        let closes: Vec<_> = adj.bars().iter().map(|b| b.close).collect();
        assert_eq!(closes, vec![m("100"); 3]);
        let vols: Vec<_> = adj.bars().iter().map(|b| b.volume).collect();
        assert_eq!(vols, vec![8, 8, 8]);
    }

    #[test]
    fn zero_split_ratio_is_an_error() {
        let s = BarSeries::new(
            "X",
            Resolution::Daily,
            vec![bar("2025-01-02", "10", "12", "9", "11", 5)],
        )
        .unwrap();
        let bad = CorporateAction::split(d("2025-02-01"), 0, 1);
        assert!(matches!(
            adjust_for_actions(&s, &[bad]),
            Err(DataError::NonPositiveSplit { .. })
        ));
    }

    #[test]
    fn split_ratio_notations() {
        let r: SplitRatio = "1:10".parse().unwrap();
        assert_eq!((r.new_shares, r.old_shares), (10, 1));
        let r: SplitRatio = "2:3".parse().unwrap();
        assert_eq!((r.new_shares, r.old_shares), (3, 2));
        let r: SplitRatio = "4".parse().unwrap();
        assert_eq!((r.new_shares, r.old_shares), (4, 1));
        assert_eq!(r.to_string(), "1:4");
    }

    #[test]
    fn actions_csv_parses() {
        let src = "date,kind,ratio,cash\n2024-06-10,split,1:10,\n2025-03-12,dividend,,0.01\n";
        let a = parse_actions(src.as_bytes()).unwrap();
        assert_eq!(a[0], CorporateAction::split(d("2024-06-10"), 10, 1));
        assert_eq!(a[1], CorporateAction::dividend(d("2025-03-12"), m("0.01")));
    }

    #[test]
    fn weekly_bucket_takes_first_open_last_close() {
        // Mon 2025-04-28 .. Fri 2025-05-02
        let bars = (0..5)
            .map(|i| {
                let date = d("2025-04-28") + chrono::Days::new(i);
                let o = (1 + 2 * i).to_string();
                let c = (1 + 2 * i + 2).to_string();
                bar(&date.to_string(), &o, "20", "1", &c, 10)
            })
            .collect();
        let s = BarSeries::new("X", Resolution::Daily, bars).unwrap();
        let w = resample(&s, Resolution::Weekly).unwrap();
        assert_eq!(w.len(), 1);
        let b = &w.bars()[0];
        assert_eq!((b.open, b.close), (m("1"), m("11")));
        assert_eq!((b.high, b.low, b.volume), (m("20"), m("1"), 50));
    }

    #[test]
    fn singleton_bucket_is_identical_in_ohlc() {
        let s = BarSeries::new(
            "X",
            Resolution::Daily,
            vec![bar("2025-01-02", "10", "12", "9", "11", 5)],
        )
        .unwrap();
        let w = resample(&s, Resolution::Weekly).unwrap();
        let (a, b) = (&s.bars()[0], &w.bars()[0]);
        assert_eq!((a.open, a.high, a.low, a.close), (b.open, b.high, b.low, b.close));
        assert!(matches!(
            resample(&w, Resolution::Monthly),
            Err(DataError::NotDaily(Resolution::Weekly))
        ));
    }

    #[test]
    fn monthly_volumes_sum_per_month() {
        // 21 weekdays starting Wed 2025-04-16: 11 in April, 10 in May.
        let mut bars = Vec::new();
        let mut date = d("2025-04-16");
        let mut i = 0u64;
        while bars.len() < 21 {
            if date.weekday().number_from_monday() <= 5 {
                i += 1;
                bars.push(bar(&date.to_string(), "10", "10", "10", "10", i));
            }
            date = date.succ_opt().unwrap();
        }
        let s = BarSeries::new("X", Resolution::Daily, bars).unwrap();
        let mo = resample(&s, Resolution::Monthly).unwrap();
        assert_eq!(mo.len(), 2);
        // April: volumes 1..=11 → 66; May: 12..=21 → 165.
        assert_eq!(mo.bars()[0].volume, 66);
        assert_eq!(mo.bars()[1].volume, 165);
    }

    fn weekday_series(start: &str, n: usize) -> BarSeries {
        let mut bars = Vec::new();
        let mut date = d(start);
        while bars.len() < n {
            if date.weekday().number_from_monday() <= 5 {
                bars.push(bar(&date.to_string(), "10", "11", "9", "10", 1));
            }
            date = date.succ_opt().unwrap();
        }
        BarSeries::new("X", Resolution::Daily, bars).unwrap()
    }

    #[test]
    fn three_month_slice_of_two_years() {
        // Two years of weekdays ending 2025-06-27 (a Friday).
        let s = weekday_series("2023-06-28", 523);
        let as_of = s.last().unwrap().session_date;
        assert_eq!(as_of, d("2025-06-27"));
        let w = window_slice(&s, Lookback::Months(3), as_of).unwrap();
        // Weekdays in (2025-03-27, 2025-06-27]: Mar 28, 31 (2) + April (22)
        // + May (22) + June 1–27 (20) = 66, counted by hand off a calendar.
        assert_eq!(w.len(), 66);
        assert_eq!(w.first().unwrap().session_date, d("2025-03-28"));
    }

    #[test]
    fn slice_clamps_and_bounds() {
        let s = weekday_series("2025-01-01", 30);
        let last = s.last().unwrap().session_date;
        let all = window_slice(&s, Lookback::Years(5), last).unwrap();
        assert_eq!(all, s);
        let first = s.first().unwrap().session_date;
        assert_eq!(window_slice(&s, Lookback::Months(3), first).unwrap().len(), 1);
        assert!(matches!(
            window_slice(&s, Lookback::Days(3), d("2024-12-31")),
            Err(DataError::AsOfBeforeStart { .. })
        ));
    }

    #[test]
    fn calendar_membership_and_gaps() {
        let s = weekday_series("2025-01-06", 5);
        let cal = SessionCalendar::new(
            ["2025-01-06", "2025-01-07", "2025-01-08", "2025-01-09", "2025-01-10", "2025-01-13"]
                .map(d),
        )
        .unwrap();
        cal.check_membership(&s).unwrap();
        assert_eq!(
            cal.missing_sessions(&s, d("2025-01-06"), d("2025-01-13")),
            vec![d("2025-01-13")]
        );
        let small = SessionCalendar::new([d("2025-01-06")]).unwrap();
        assert!(small.check_membership(&s).is_err());
        assert!(SessionCalendar::new([d("2025-01-07"), d("2025-01-06")]).is_err());
    }
}
