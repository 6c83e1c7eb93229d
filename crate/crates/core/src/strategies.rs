//! Rule-based long-only baselines driven through the execution engine.
//!
//! Signals are computed on closes. A signal on session `t` becomes a MARKET
//! order that executes at the open of `t+1`; buy-and-hold instead buys at the
//! open of the first session. Entries spend all cash on whole shares at the
//! execution open; exits sell the whole position.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::execution::{Action, Engine, EngineError, OrderRequest};
use crate::indicators::{self, IndicatorError};
use crate::market_data::BarSeries;
use crate::metrics::{self, EquityCurve, MetricReport, MetricsError};
use crate::money::Money;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyConfig {
    BuyHold,
    Sma { n: usize },
    Slma { short: usize, long: usize },
    Macd { fast: usize, slow: usize, signal: usize },
    Bollinger { n: usize, k: f64 },
}

impl StrategyConfig {
    pub const SMA: StrategyConfig = StrategyConfig::Sma { n: 10 };
    pub const SLMA: StrategyConfig = StrategyConfig::Slma { short: 10, long: 30 };
    pub const MACD: StrategyConfig = StrategyConfig::Macd {
        fast: 12,
        slow: 26,
        signal: 9,
    };
    pub const BOLLINGER: StrategyConfig = StrategyConfig::Bollinger { n: 20, k: 2.0 };

    pub fn all_defaults() -> [StrategyConfig; 5] {
        [
            StrategyConfig::BuyHold,
            StrategyConfig::MACD,
            StrategyConfig::SMA,
            StrategyConfig::SLMA,
            StrategyConfig::BOLLINGER,
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            StrategyConfig::BuyHold => "Buy & Hold",
            StrategyConfig::Sma { .. } => "SMA",
            StrategyConfig::Slma { .. } => "SLMA",
            StrategyConfig::Macd { .. } => "MACD",
            StrategyConfig::Bollinger { .. } => "Bollinger Bands",
        }
    }

    /// Bars needed before the first comparable indicator value.
    pub fn min_bars(&self) -> usize {
        match *self {
            StrategyConfig::BuyHold => 1,
            StrategyConfig::Sma { n } => n,
            StrategyConfig::Slma { short, long } => short.max(long),
            StrategyConfig::Macd { fast, slow, signal } => fast.max(slow) + signal - 1,
            StrategyConfig::Bollinger { n, .. } => n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stance {
    EnterLong,
    ExitLong,
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signal {
    pub date: NaiveDate,
    pub stance: Stance,
}

#[derive(Debug, thiserror::Error)]
pub enum StrategyError {
    #[error("insufficient history: need {need} bars, have {have}")]
    InsufficientHistory { need: usize, have: usize },
    #[error(transparent)]
    Indicator(#[from] IndicatorError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// `a` crosses above `b` at `t`: `a ≤ b` on the prior bar, `a > b` now.
fn crossed_above(a: &[Option<f64>], b: &[Option<f64>], t: usize) -> bool {
    match (a[t - 1], b[t - 1], a[t], b[t]) {
        (Some(a0), Some(b0), Some(a1), Some(b1)) => a0 <= b0 && a1 > b1,
        _ => false,
    }
}

fn crossed_below(a: &[Option<f64>], b: &[Option<f64>], t: usize) -> bool {
    match (a[t - 1], b[t - 1], a[t], b[t]) {
        (Some(a0), Some(b0), Some(a1), Some(b1)) => a0 >= b0 && a1 < b1,
        _ => false,
    }
}

/// Raw per-bar stances before position gating.
fn raw_stances(config: &StrategyConfig, closes: &[f64]) -> Result<Vec<Stance>, IndicatorError> {
    let n = closes.len();
    let price: Vec<Option<f64>> = closes.iter().map(|c| Some(*c)).collect();
    let mut out = vec![Stance::Hold; n];
    let mut mark = |up: &dyn Fn(usize) -> bool, down: &dyn Fn(usize) -> bool| {
        for t in 1..n {
            if up(t) {
                out[t] = Stance::EnterLong;
            } else if down(t) {
                out[t] = Stance::ExitLong;
            }
        }
    };
    match *config {
        StrategyConfig::BuyHold => {}
        StrategyConfig::Sma { n: w } => {
            let sma = indicators::sma_series(closes, w)?;
            mark(
                &|t| crossed_above(&price, &sma, t),
                &|t| crossed_below(&price, &sma, t),
            );
        }
        StrategyConfig::Slma { short, long } => {
            let s = indicators::sma_series(closes, short)?;
            let l = indicators::sma_series(closes, long)?;
            mark(&|t| crossed_above(&s, &l, t), &|t| crossed_below(&s, &l, t));
        }
        StrategyConfig::Macd { fast, slow, signal } => {
            let pts = indicators::macd_series(closes, fast, slow, signal)?;
            let line: Vec<Option<f64>> = pts.iter().map(|p| p.map(|p| p.macd)).collect();
            let sig: Vec<Option<f64>> = pts.iter().map(|p| p.map(|p| p.signal)).collect();
            mark(&|t| crossed_above(&line, &sig, t), &|t| crossed_below(&line, &sig, t));
        }
        StrategyConfig::Bollinger { n: w, k } => {
            let bands = indicators::bollinger_series(closes, w, k)?;
            let lower: Vec<Option<f64>> = bands.iter().map(|b| b.map(|b| b.lower)).collect();
            let upper: Vec<Option<f64>> = bands.iter().map(|b| b.map(|b| b.upper)).collect();
            mark(
                &|t| crossed_below(&price, &lower, t),
                &|t| crossed_above(&price, &upper, t),
            );
        }
    }
    Ok(out)
}

/// Entry and exit signals, gated so that entries happen only when flat and
/// exits only when long.
pub fn generate_signals(
    config: &StrategyConfig,
    series: &BarSeries,
) -> Result<Vec<Signal>, StrategyError> {
    let need = config.min_bars();
    if series.len() < need {
        return Err(StrategyError::InsufficientHistory {
            need,
            have: series.len(),
        });
    }
    let dates = series.dates();
    if *config == StrategyConfig::BuyHold {
        return Ok(vec![Signal {
            date: dates[0],
            stance: Stance::EnterLong,
        }]);
    }
    let stances = raw_stances(config, &series.closes())?;
    let mut long = false;
    let mut out = Vec::new();
    for (date, stance) in dates.into_iter().zip(stances) {
        let take = match stance {
            Stance::EnterLong => !long,
            Stance::ExitLong => long,
            Stance::Hold => false,
        };
        if take {
            long = stance == Stance::EnterLong;
            out.push(Signal { date, stance });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub config: StrategyConfig,
    pub signals: Vec<Signal>,
    pub curve: EquityCurve,
    pub report: MetricReport,
    pub audit_jsonl: String,
}

pub fn run_strategy(
    config: &StrategyConfig,
    series: &BarSeries,
    initial_cash: Money,
) -> Result<StrategyRun, StrategyError> {
    let signals = generate_signals(config, series)?;
    let bars = series.bars();
    let first = bars[0].session_date;
    let mut engine = Engine::new(initial_cash, first);
    // Index of the bar whose open executes each signal.
    let mut orders: Vec<(usize, Stance)> = Vec::new();
    for s in &signals {
        let idx = series.position(s.date).expect("signal dates come from the series");
        let exec = if *config == StrategyConfig::BuyHold {
            idx
        } else {
            idx + 1
        };
        if exec < bars.len() {
            orders.push((exec, s.stance));
        }
    }
    let mut next = orders.iter().peekable();
    for (i, bar) in bars.iter().enumerate() {
        while let Some(&&(exec, stance)) = next.peek() {
            if exec != i {
                break;
            }
            next.next();
            let decided_on = if i == 0 {
                first.pred_opt().unwrap_or(first)
            } else {
                bars[i - 1].session_date
            };
            let open = bar.open;
            let req = match stance {
                Stance::EnterLong => {
                    let q = open.max_quantity(engine.portfolio().cash);
                    (q > 0).then(|| OrderRequest::market(Action::Buy, q))
                }
                Stance::ExitLong => {
                    let q = engine.portfolio().shares_long;
                    (q > 0).then(|| OrderRequest::market(Action::Sell, q))
                }
                Stance::Hold => None,
            };
            if let Some(req) = req {
                let label = config.label();
                let _ = engine.submit(req.with_explanation(label), open, decided_on);
            }
        }
        engine.step_session(bar)?;
    }
    let curve = EquityCurve::from_audit(initial_cash, engine.audit());
    let fills = crate::execution::fills_from_audit(engine.audit());
    let report = metrics::compute_report(&curve, &fills)?;
    Ok(StrategyRun {
        config: *config,
        signals,
        curve,
        report,
        audit_jsonl: engine.audit_jsonl(),
    })
}
