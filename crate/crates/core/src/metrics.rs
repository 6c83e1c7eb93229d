//! Performance metrics from an equity curve and a fill log, and mean ± std
//! aggregation across repeated runs.
//!
//! Undefined metrics are `None`, serialize as `null` and render as `n/a`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::execution::{Action, AuditEvent, AuditRecord, Fill, OrderId};
use crate::money::Money;

pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("initial value must be positive, got {0}")]
    NonPositiveStart(Money),
    #[error("equity curve has no sessions")]
    EmptyCurve,
}

/// Portfolio value at the start of the run and after each session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquityCurve {
    pub initial_value: Money,
    pub dates: Vec<NaiveDate>,
    pub values: Vec<Money>,
    pub closes: Vec<Money>,
    pub exposure: Vec<Money>,
}

impl EquityCurve {
    pub fn new(initial_value: Money) -> Self {
        EquityCurve {
            initial_value,
            dates: Vec::new(),
            values: Vec::new(),
            closes: Vec::new(),
            exposure: Vec::new(),
        }
    }

    pub fn push(&mut self, date: NaiveDate, value: Money, close: Money, exposure: Money) {
        self.dates.push(date);
        self.values.push(value);
        self.closes.push(close);
        self.exposure.push(exposure);
    }

    /// Built from SESSION_SUMMARY records; a later summary for the same date
    /// replaces the earlier one.
    pub fn from_audit(initial_value: Money, records: &[AuditRecord]) -> Self {
        let mut curve = EquityCurve::new(initial_value);
        for r in records {
            if let AuditEvent::SessionSummary {
                date,
                close,
                portfolio_value,
                gross_exposure,
                ..
            } = &r.event
            {
                if curve.dates.last() == Some(date) {
                    curve.dates.pop();
                    curve.values.pop();
                    curve.closes.pop();
                    curve.exposure.pop();
                }
                curve.push(*date, *portfolio_value, *close, *gross_exposure);
            }
        }
        curve
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Initial value followed by every session value.
    pub fn series(&self) -> Vec<f64> {
        std::iter::once(self.initial_value)
            .chain(self.values.iter().copied())
            .map(Money::to_f64)
            .collect()
    }

    pub fn final_value(&self) -> Money {
        self.values.last().copied().unwrap_or(self.initial_value)
    }

    /// `date,portfolio_value,close,gross_exposure`, one row per session.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("date,portfolio_value,close,gross_exposure\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.dates[i], self.values[i], self.closes[i], self.exposure[i]
            ));
        }
        out
    }
}

/// `(V_T − V_0)/V_0 × 100`.
pub fn roi_pct(values: &[f64]) -> Result<f64, MetricsError> {
    let (first, last) = match (values.first(), values.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(MetricsError::EmptyCurve),
    };
    if first <= 0.0 {
        return Err(MetricsError::NonPositiveStart(
            Money::from_f64(first).unwrap_or(Money::ZERO),
        ));
    }
    Ok((last - first) / first * 100.0)
}

/// Exact ROI on fixed-point values.
pub fn roi_pct_money(initial: Money, last: Money) -> Result<f64, MetricsError> {
    if !initial.is_positive() {
        return Err(MetricsError::NonPositiveStart(initial));
    }
    Ok((last - initial).raw() as f64 / initial.raw() as f64 * 100.0)
}

pub fn daily_returns(values: &[f64]) -> Vec<f64> {
    values.windows(2).map(|w| w[1] / w[0] - 1.0).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample (n − 1) standard deviation; `None` below two observations.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

/// Daily Sharpe with zero risk-free rate; `None` when σ is zero or
/// undefined.
pub fn sharpe(values: &[f64]) -> Option<f64> {
    let r = daily_returns(values);
    let sd = sample_std(&r)?;
    (sd > 0.0).then(|| mean(&r) / sd)
}

pub fn annualize(daily_sharpe: f64) -> f64 {
    daily_sharpe * TRADING_DAYS_PER_YEAR.sqrt()
}

/// Mean daily return over the sample deviation of the negative returns.
pub fn sortino(values: &[f64]) -> Option<f64> {
    let r = daily_returns(values);
    let downside: Vec<f64> = r.iter().copied().filter(|x| *x < 0.0).collect();
    let sd = sample_std(&downside)?;
    (sd > 0.0).then(|| mean(&r) / sd)
}

/// Largest peak-to-trough decline in percent, single pass.
pub fn max_drawdown_pct(values: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &v in values {
        peak = peak.max(v);
        if peak > 0.0 {
            worst = worst.max((peak - v) / peak);
        }
    }
    worst * 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Long,
    Short,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LotSlice {
    pub order_id: OrderId,
    pub date: NaiveDate,
    pub price: Money,
    pub quantity: u64,
}

/// Entry lots matched against one closing fill.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTrip {
    pub direction: Direction,
    pub opens: Vec<LotSlice>,
    pub close: LotSlice,
    pub realized_pnl: Money,
}

/// FIFO lot book per direction.
#[derive(Debug, Clone, Default)]
pub struct LotBook {
    long: VecDeque<LotSlice>,
    short: VecDeque<LotSlice>,
    trips: Vec<RoundTrip>,
}

impl LotBook {
    pub fn apply(&mut self, fill: &Fill) {
        let slice = LotSlice {
            order_id: fill.order_id,
            date: fill.executed_at,
            price: fill.fill_price,
            quantity: fill.quantity,
        };
        match fill.action {
            Action::Buy => self.long.push_back(slice),
            Action::Short => self.short.push_back(slice),
            Action::Sell => self.close(Direction::Long, slice),
            Action::ShortCover => self.close(Direction::Short, slice),
        }
    }

    fn close(&mut self, direction: Direction, exit: LotSlice) {
        let book = match direction {
            Direction::Long => &mut self.long,
            Direction::Short => &mut self.short,
        };
        let mut remaining = exit.quantity;
        let mut opens = Vec::new();
        let mut pnl = Money::ZERO;
        while remaining > 0 {
            let Some(lot) = book.front_mut() else { break };
            let q = remaining.min(lot.quantity);
            let per_share = match direction {
                Direction::Long => exit.price - lot.price,
                Direction::Short => lot.price - exit.price,
            };
            pnl += per_share.times(q);
            opens.push(LotSlice { quantity: q, ..*lot });
            lot.quantity -= q;
            remaining -= q;
            if lot.quantity == 0 {
                book.pop_front();
            }
        }
        let matched = exit.quantity - remaining;
        if matched > 0 {
            self.trips.push(RoundTrip {
                direction,
                opens,
                close: LotSlice {
                    quantity: matched,
                    ..exit
                },
                realized_pnl: pnl,
            });
        }
    }

    pub fn trips(&self) -> &[RoundTrip] {
        &self.trips
    }

    /// Open lots marked at `close`.
    pub fn unrealized(&self, close: Money) -> Money {
        let long: Money = self.long.iter().map(|l| (close - l.price).times(l.quantity)).sum();
        let short: Money = self.short.iter().map(|l| (l.price - close).times(l.quantity)).sum();
        long + short
    }
}

pub fn match_round_trips(fills: &[Fill]) -> Vec<RoundTrip> {
    let mut book = LotBook::default();
    for f in fills {
        book.apply(f);
    }
    book.trips
}

pub fn win_rate_pct(trips: &[RoundTrip]) -> f64 {
    if trips.is_empty() {
        return 0.0;
    }
    let wins = trips.iter().filter(|t| t.realized_pnl.is_positive()).count();
    wins as f64 / trips.len() as f64 * 100.0
}

pub fn profit_per_trade(trips: &[RoundTrip]) -> Option<f64> {
    if trips.is_empty() {
        return None;
    }
    let total: Money = trips.iter().map(|t| t.realized_pnl).sum();
    Some(total.to_f64() / trips.len() as f64)
}

/// Distinct orders with at least one fill.
pub fn num_trades(fills: &[Fill]) -> usize {
    fills.iter().map(|f| f.order_id).collect::<BTreeSet<_>>().len()
}

/// Realized plus unrealized P&L at the last close, over the mean gross
/// exposure of sessions that had any exposure.
pub fn roic_pct(fills: &[Fill], curve: &EquityCurve) -> Option<f64> {
    let deployed: Vec<f64> = curve
        .exposure
        .iter()
        .filter(|e| e.is_positive())
        .map(|e| e.to_f64())
        .collect();
    if deployed.is_empty() {
        return None;
    }
    let mut book = LotBook::default();
    for f in fills {
        book.apply(f);
    }
    let realized: Money = book.trips().iter().map(|t| t.realized_pnl).sum();
    let last_close = curve.closes.last().copied()?;
    let profit = realized + book.unrealized(last_close);
    Some(profit.to_f64() / mean(&deployed) * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub roi_pct: f64,
    pub sharpe_daily: Option<f64>,
    pub sharpe_annualized: Option<f64>,
    pub sortino: Option<f64>,
    pub max_drawdown_pct: f64,
    pub win_rate_pct: f64,
    pub num_trades: u64,
    pub roic_pct: Option<f64>,
    pub profit_per_trade: Option<f64>,
}

pub fn compute_report(curve: &EquityCurve, fills: &[Fill]) -> Result<MetricReport, MetricsError> {
    if curve.is_empty() {
        return Err(MetricsError::EmptyCurve);
    }
    let series = curve.series();
    let trips = match_round_trips(fills);
    let sharpe_daily = sharpe(&series);
    Ok(MetricReport {
        roi_pct: roi_pct_money(curve.initial_value, curve.final_value())?,
        sharpe_daily,
        sharpe_annualized: sharpe_daily.map(annualize),
        sortino: sortino(&series),
        max_drawdown_pct: max_drawdown_pct(&series),
        win_rate_pct: win_rate_pct(&trips),
        num_trades: num_trades(fills) as u64,
        roic_pct: roic_pct(fills, curve),
        profit_per_trade: profit_per_trade(&trips),
    })
}

/// Column order for tables and CSV.
pub const REPORT_COLUMNS: [(&str, &str); 9] = [
    ("roi_pct", "ROI (%)"),
    ("sharpe_daily", "SR"),
    ("max_drawdown_pct", "Max DD (%)"),
    ("win_rate_pct", "Win Rate (%)"),
    ("num_trades", "Num Trades"),
    ("sharpe_annualized", "Ann. SR"),
    ("sortino", "Sortino"),
    ("roic_pct", "ROIC (%)"),
    ("profit_per_trade", "P/T ($)"),
];

impl MetricReport {
    pub fn field(&self, key: &str) -> Option<f64> {
        match key {
            "roi_pct" => Some(self.roi_pct),
            "sharpe_daily" => self.sharpe_daily,
            "sharpe_annualized" => self.sharpe_annualized,
            "sortino" => self.sortino,
            "max_drawdown_pct" => Some(self.max_drawdown_pct),
            "win_rate_pct" => Some(self.win_rate_pct),
            "num_trades" => Some(self.num_trades as f64),
            "roic_pct" => self.roic_pct,
            "profit_per_trade" => self.profit_per_trade,
            _ => None,
        }
    }
}

/// Mean and sample standard deviation over the runs where a metric is
/// defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        Stat {
            n: xs.len(),
            mean: (!xs.is_empty()).then(|| mean(xs)),
            std: sample_std(xs),
        }
    }

    /// `-9.00 ± 1.00`, `-9.00` for a single run, `n/a` when undefined.
    pub fn cell(&self, decimals: usize) -> String {
        match (self.mean, self.std) {
            (None, _) => "n/a".to_string(),
            (Some(m), Some(s)) => format!("{m:.decimals$} ± {s:.decimals$}"),
            (Some(m), None) => format!("{m:.decimals$}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub stats: BTreeMap<String, Stat>,
}

pub fn aggregate_runs(reports: &[MetricReport]) -> AggregateReport {
    let stats = REPORT_COLUMNS
        .iter()
        .map(|(key, _)| {
            let xs: Vec<f64> = reports.iter().filter_map(|r| r.field(key)).collect();
            (key.to_string(), Stat::of(&xs))
        })
        .collect();
    AggregateReport {
        runs: reports.len(),
        stats,
    }
}

fn decimals_for(key: &str) -> usize {
    match key {
        "sharpe_daily" | "sortino" | "sharpe_annualized" => 3,
        _ => 2,
    }
}

impl AggregateReport {
    pub fn cell(&self, key: &str) -> String {
        self.stats
            .get(key)
            .map(|s| s.cell(decimals_for(key)))
            .unwrap_or_else(|| "n/a".into())
    }
}

/// Aligned text table, one row per labelled aggregate.
pub fn render_table(rows: &[(String, AggregateReport)]) -> String {
    let mut grid: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["Configuration".to_string()];
    header.extend(REPORT_COLUMNS.iter().map(|(_, h)| h.to_string()));
    grid.push(header);
    for (label, agg) in rows {
        let mut row = vec![label.clone()];
        row.extend(REPORT_COLUMNS.iter().map(|(k, _)| agg.cell(k)));
        grid.push(row);
    }
    let widths: Vec<usize> = (0..grid[0].len())
        .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in grid.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                let pad = widths[c] - cell.chars().count();
                if c == 0 {
                    format!("{cell}{}", " ".repeat(pad))
                } else {
                    format!("{}{cell}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

/// CSV with a mean and a std column per metric; undefined cells are empty.
pub fn render_csv(rows: &[(String, AggregateReport)]) -> String {
    let mut out = String::from("configuration,runs");
    for (k, _) in REPORT_COLUMNS {
        out.push_str(&format!(",{k}_mean,{k}_std"));
    }
    out.push('\n');
    let num = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for (label, agg) in rows {
        out.push_str(&format!("{label},{}", agg.runs));
        for (k, _) in REPORT_COLUMNS {
            let s = agg.stats.get(k).copied().unwrap_or(Stat {
                n: 0,
                mean: None,
                std: None,
            });
            out.push_str(&format!(",{},{}", num(s.mean), num(s.std)));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(v: i64) -> Money {
        Money::from_units(v)
    }

    fn d(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2025, 5, day).unwrap()
    }

    fn fill(id: u64, action: Action, price: i64, q: u64) -> Fill {
        Fill {
            order_id: OrderId(id),
            action,
            executed_at: d(id as u32),
            fill_price: m(price),
            quantity: q,
            clamped_from: None,
        }
    }

    #[test]
    fn roi_examples() {
        assert_eq!(roi_pct_money(m(100_000), m(100_000)).unwrap(), 0.0);
        assert!((roi_pct_money(m(100_000), m(91_410)).unwrap() + 8.59).abs() < 1e-12);
        assert!((roi_pct_money(m(100_000), m(141_300)).unwrap() - 41.30).abs() < 1e-12);
        assert!(roi_pct(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn sharpe_cases() {
        assert_eq!(sharpe(&[100.0, 100.0, 100.0]), None);
        // +1% then −1/1.01 brings the value back: mean exactly zero needs
        // symmetric returns, so build them directly.
        let mut v = vec![100.0];
        for i in 0..10 {
            let r = if i % 2 == 0 { 0.01 } else { -0.01 };
            v.push(v.last().unwrap() * (1.0 + r));
        }
        assert!(sharpe(&v).unwrap().abs() < 1e-12);
    }

    #[test]
    fn sortino_needs_dispersed_downside() {
        assert_eq!(sortino(&[100.0, 101.0, 102.0]), None);
        let v = [100.0, 102.0, 102.0 * 0.99, 102.0 * 0.99 * 0.99];
        assert_eq!(sortino(&v), None);
    }

    #[test]
    fn drawdown_cases() {
        assert_eq!(max_drawdown_pct(&[1.0, 2.0, 3.0]), 0.0);
        assert!((max_drawdown_pct(&[100.0, 80.0, 90.0]) - 20.0).abs() < 1e-12);
        assert!((max_drawdown_pct(&[100.0, 120.0, 60.0, 200.0]) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn fifo_round_trips() {
        let one = match_round_trips(&[fill(1, Action::Buy, 100, 10), fill(2, Action::Sell, 110, 10)]);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].realized_pnl, m(100));

        let split = match_round_trips(&[
            fill(1, Action::Buy, 100, 10),
            fill(2, Action::Sell, 110, 4),
            fill(3, Action::Sell, 90, 6),
        ]);
        let pnl: Vec<_> = split.iter().map(|t| t.realized_pnl).collect();
        assert_eq!(pnl, vec![m(40), m(-60)]);

        let short = match_round_trips(&[fill(1, Action::Short, 100, 5), fill(2, Action::ShortCover, 80, 5)]);
        assert_eq!(short[0].direction, Direction::Short);
        assert_eq!(short[0].realized_pnl, m(100));
    }

    #[test]
    fn win_rate_and_pt() {
        let mk = |pnl: i64| RoundTrip {
            direction: Direction::Long,
            opens: vec![],
            close: LotSlice {
                order_id: OrderId(1),
                date: d(1),
                price: m(1),
                quantity: 1,
            },
            realized_pnl: m(pnl),
        };
        assert_eq!(win_rate_pct(&[mk(1), mk(-1), mk(2), mk(0)]), 50.0);
        assert_eq!(win_rate_pct(&[]), 0.0);
        assert_eq!(win_rate_pct(&[mk(3), mk(4)]), 100.0);
        assert_eq!(profit_per_trade(&[mk(100), mk(-60)]), Some(20.0));
        assert_eq!(profit_per_trade(&[mk(40)]), Some(40.0));
        assert_eq!(profit_per_trade(&[]), None);
    }

    #[test]
    fn trade_count_is_distinct_filled_orders() {
        assert_eq!(num_trades(&[]), 0);
        let mut f = vec![fill(1, Action::Buy, 1, 1)];
        assert_eq!(num_trades(&f), 1);
        f.push(fill(1, Action::Buy, 1, 1));
        f.push(fill(2, Action::Sell, 1, 1));
        assert_eq!(num_trades(&f), 2);
    }

    #[test]
    fn roic_two_sessions() {
        // Buy 10 @ 100, close 100 then 110: profit 100 over mean exposure 1050.
        let mut c = EquityCurve::new(m(1000));
        c.push(d(1), m(1000), m(100), m(1000));
        c.push(d(2), m(1100), m(110), m(1100));
        let r = roic_pct(&[fill(1, Action::Buy, 100, 10)], &c).unwrap();
        assert!((r - 100.0 / 1050.0 * 100.0).abs() < 1e-12);

        let mut idle = EquityCurve::new(m(1000));
        idle.push(d(1), m(1000), m(100), Money::ZERO);
        assert_eq!(roic_pct(&[], &idle), None);

        // Same profit, twice the exposure: half the ROIC.
        let mut c2 = EquityCurve::new(m(1000));
        c2.push(d(1), m(1000), m(100), m(2000));
        c2.push(d(2), m(1100), m(110), m(2200));
        let r2 = roic_pct(&[fill(1, Action::Buy, 100, 10)], &c2).unwrap();
        assert!((r2 * 2.0 - r).abs() < 1e-12);
    }

    #[test]
    fn aggregation_cells() {
        let rep = |roi: f64| MetricReport {
            roi_pct: roi,
            sharpe_daily: None,
            sharpe_annualized: None,
            sortino: None,
            max_drawdown_pct: 0.0,
            win_rate_pct: 0.0,
            num_trades: 1,
            roic_pct: None,
            profit_per_trade: None,
        };
        let agg = aggregate_runs(&[rep(-10.73), rep(-9.19), rep(-7.65)]);
        let s = agg.stats["roi_pct"];
        assert!((s.mean.unwrap() + 9.19).abs() < 1e-12);
        assert!((s.std.unwrap() - 1.54).abs() < 1e-12);
        let agg = aggregate_runs(&[rep(-8.0), rep(-9.0), rep(-10.0)]);
        assert_eq!(agg.cell("roi_pct"), "-9.00 ± 1.00");
        assert_eq!(agg.cell("sortino"), "n/a");
        let single = aggregate_runs(&[rep(-9.0)]);
        assert_eq!(single.cell("roi_pct"), "-9.00");
        let same = aggregate_runs(&[rep(1.0), rep(1.0)]);
        assert_eq!(same.stats["roi_pct"].std, Some(0.0));
        let table = render_table(&[("B&H".into(), agg.clone())]);
        assert!(table.lines().next().unwrap().starts_with("Configuration"));
        let csv = render_csv(&[("B&H".into(), agg)]);
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn report_serializes_undefined_as_null() {
        let mut c = EquityCurve::new(m(100));
        c.push(d(1), m(100), m(1), Money::ZERO);
        let r = compute_report(&c, &[]).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains(r#""sharpe_daily":null"#));
        assert!(json.contains(r#""profit_per_trade":null"#));
        assert_eq!(c.to_csv().lines().count(), 2);
    }
}
