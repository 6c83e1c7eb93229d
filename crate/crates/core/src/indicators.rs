//! Technical indicators over daily bars.
//!
//! Each indicator has a `*_series` form that returns one optional value per
//! input position (`None` until enough history exists) and a point form that
//! evaluates at the last bar of a [`BarSeries`]. All series forms are causal,
//! so appending bars never changes earlier values.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::market_data::{Bar, BarSeries};

pub const DEFAULT_PROFILE_BINS: usize = 24;
pub const DEFAULT_VALUE_AREA: f64 = 0.70;
pub const DEFAULT_LEVEL_TOLERANCE_PCT: f64 = 0.5;
pub const DEFAULT_MIN_TOUCHES: usize = 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IndicatorError {
    #[error("window length must be at least {min}, got {got}")]
    Window { min: usize, got: usize },
    #[error("series is empty")]
    Empty,
    #[error("total volume in window is zero")]
    ZeroVolume,
}

fn check_window(n: usize, min: usize) -> Result<(), IndicatorError> {
    if n < min {
        Err(IndicatorError::Window { min, got: n })
    } else {
        Ok(())
    }
}

/// One indicator evaluated at one date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorValue {
    #[serde(rename = "date")]
    pub as_of: NaiveDate,
    pub name: String,
    pub params: BTreeMap<String, f64>,
    pub values: Option<BTreeMap<String, f64>>,
    #[serde(default = "default_true")]
    pub available: bool,
}

fn default_true() -> bool {
    true
}

impl IndicatorValue {
    fn new(
        as_of: NaiveDate,
        name: &str,
        params: &[(&str, f64)],
        values: Option<Vec<(&str, f64)>>,
    ) -> Self {
        let values: Option<BTreeMap<String, f64>> =
            values.map(|v| v.into_iter().map(|(k, x)| (k.to_string(), x)).collect());
        IndicatorValue {
            as_of,
            name: name.to_string(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            available: values.is_some(),
            values,
        }
    }

    /// The single value of a scalar indicator, or a named component.
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.as_ref().and_then(|v| v.get(key).copied())
    }

    pub fn value(&self) -> Option<f64> {
        self.get("value")
    }

    /// `SMA(n=20): 101.25` or `SMA(n=20): n/a`.
    pub fn render(&self) -> String {
        let params = self
            .params
            .iter()
            .map(|(k, v)| format!("{k}={}", trim_num(*v)))
            .collect::<Vec<_>>()
            .join(", ");
        let head = format!("{}({params})", self.name.to_uppercase());
        match &self.values {
            None => format!("{head}: n/a"),
            Some(v) if v.len() == 1 && v.contains_key("value") => {
                format!("{head}: {:.2}", v["value"])
            }
            Some(v) => {
                let body = v
                    .iter()
                    .map(|(k, x)| format!("{k}={x:.2}"))
                    .collect::<Vec<_>>()
                    .join(", ");
                format!("{head}: {body}")
            }
        }
    }
}

fn trim_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn last_date(series: &BarSeries) -> Result<NaiveDate, IndicatorError> {
    series
        .last()
        .map(|b| b.session_date)
        .ok_or(IndicatorError::Empty)
}

pub fn sma_series(closes: &[f64], n: usize) -> Result<Vec<Option<f64>>, IndicatorError> {
    check_window(n, 1)?;
    let mut out = Vec::with_capacity(closes.len());
    let mut sum = 0.0;
    for (i, &c) in closes.iter().enumerate() {
        sum += c;
        if i >= n {
            sum -= closes[i - n];
        }
        out.push((i + 1 >= n).then(|| sum / n as f64));
    }
    Ok(out)
}

/// EMA with α = 2/(n+1), seeded by the SMA of the first `n` values.
pub fn ema_series(values: &[f64], n: usize) -> Result<Vec<Option<f64>>, IndicatorError> {
    check_window(n, 1)?;
    let alpha = 2.0 / (n as f64 + 1.0);
    let mut out = vec![None; values.len()];
    if values.len() < n {
        return Ok(out);
    }
    let mut ema = values[..n].iter().sum::<f64>() / n as f64;
    out[n - 1] = Some(ema);
    for i in n..values.len() {
        ema = alpha * values[i] + (1.0 - alpha) * ema;
        out[i] = Some(ema);
    }
    Ok(out)
}

fn rsi_from(avg_gain: f64, avg_loss: f64) -> f64 {
    if avg_loss == 0.0 {
        if avg_gain == 0.0 {
            50.0
        } else {
            100.0
        }
    } else if avg_gain == 0.0 {
        0.0
    } else {
        100.0 - 100.0 / (1.0 + avg_gain / avg_loss)
    }
}

/// Wilder RSI. The first averages are simple means over the first `n`
/// changes, so the first value appears at index `n`.
pub fn rsi_series(closes: &[f64], n: usize) -> Result<Vec<Option<f64>>, IndicatorError> {
    check_window(n, 1)?;
    let mut out = vec![None; closes.len()];
    if closes.len() <= n {
        return Ok(out);
    }
    let change = |i: usize| closes[i] - closes[i - 1];
    let (mut g, mut l) = (0.0, 0.0);
    for i in 1..=n {
        let d = change(i);
        g += d.max(0.0);
        l += (-d).max(0.0);
    }
    let nf = n as f64;
    let (mut avg_g, mut avg_l) = (g / nf, l / nf);
    out[n] = Some(rsi_from(avg_g, avg_l));
    for i in n + 1..closes.len() {
        let d = change(i);
        avg_g = ((nf - 1.0) * avg_g + d.max(0.0)) / nf;
        avg_l = ((nf - 1.0) * avg_l + (-d).max(0.0)) / nf;
        out[i] = Some(rsi_from(avg_g, avg_l));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacdPoint {
    pub macd: f64,
    pub signal: f64,
    pub histogram: f64,
}

/// MACD(fast, slow, signal). The signal EMA is seeded with the SMA of the
/// first `signal` MACD values, so all three components first appear at
/// index `slow + signal − 2`.
pub fn macd_series(
    closes: &[f64],
    fast: usize,
    slow: usize,
    signal: usize,
) -> Result<Vec<Option<MacdPoint>>, IndicatorError> {
    check_window(fast, 1)?;
    check_window(slow, 1)?;
    check_window(signal, 1)?;
    let ef = ema_series(closes, fast)?;
    let es = ema_series(closes, slow)?;
    let line: Vec<Option<f64>> = ef
        .iter()
        .zip(&es)
        .map(|(f, s)| Some((*f)? - (*s)?))
        .collect();
    let start = match line.iter().position(Option::is_some) {
        Some(p) => p,
        None => return Ok(vec![None; closes.len()]),
    };
    let defined: Vec<f64> = line[start..].iter().map(|v| v.unwrap()).collect();
    let sig = ema_series(&defined, signal)?;
    let mut out = vec![None; closes.len()];
    for (j, s) in sig.iter().enumerate() {
        if let Some(s) = s {
            let m = defined[j];
            out[start + j] = Some(MacdPoint {
                macd: m,
                signal: *s,
                histogram: m - s,
            });
        }
    }
    Ok(out)
}

/// True range with the first bar's TR taken as `high − low`.
pub fn true_range_series(bars: &[Bar]) -> Vec<f64> {
    bars.iter()
        .enumerate()
        .map(|(i, b)| {
            let (h, l) = (b.high.to_f64(), b.low.to_f64());
            if i == 0 {
                h - l
            } else {
                let pc = bars[i - 1].close.to_f64();
                (h - l).max((h - pc).abs()).max((l - pc).abs())
            }
        })
        .collect()
}

/// Simple `n`-mean of true ranges; needs at least two bars.
pub fn atr_series(bars: &[Bar], n: usize) -> Result<Vec<Option<f64>>, IndicatorError> {
    check_window(n, 1)?;
    let tr = true_range_series(bars);
    let mut out = sma_series(&tr, n)?;
    if let Some(first) = out.first_mut() {
        *first = None;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bands {
    pub middle: f64,
    pub upper: f64,
    pub lower: f64,
    pub sigma: f64,
}

/// Bollinger bands on the SMA with population standard deviation.
pub fn bollinger_series(
    closes: &[f64],
    n: usize,
    k: f64,
) -> Result<Vec<Option<Bands>>, IndicatorError> {
    check_window(n, 2)?;
    let mid = sma_series(closes, n)?;
    Ok(mid
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let m = (*m)?;
            let window = &closes[i + 1 - n..=i];
            let var = window.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / n as f64;
            let sigma = var.sqrt();
            Some(Bands {
                middle: m,
                upper: m + k * sigma,
                lower: m - k * sigma,
                sigma,
            })
        })
        .collect())
}

pub fn sma(series: &BarSeries, n: usize) -> Result<IndicatorValue, IndicatorError> {
    let v = *sma_series(&series.closes(), n)?.last().ok_or(IndicatorError::Empty)?;
    Ok(IndicatorValue::new(
        last_date(series)?,
        "sma",
        &[("n", n as f64)],
        v.map(|x| vec![("value", x)]),
    ))
}

pub fn ema(series: &BarSeries, n: usize) -> Result<IndicatorValue, IndicatorError> {
    let v = *ema_series(&series.closes(), n)?.last().ok_or(IndicatorError::Empty)?;
    Ok(IndicatorValue::new(
        last_date(series)?,
        "ema",
        &[("n", n as f64)],
        v.map(|x| vec![("value", x)]),
    ))
}

pub fn rsi(series: &BarSeries, n: usize) -> Result<IndicatorValue, IndicatorError> {
    let v = *rsi_series(&series.closes(), n)?.last().ok_or(IndicatorError::Empty)?;
    Ok(IndicatorValue::new(
        last_date(series)?,
        "rsi",
        &[("n", n as f64)],
        v.map(|x| vec![("value", x)]),
    ))
}

pub fn macd(series: &BarSeries) -> Result<IndicatorValue, IndicatorError> {
    let v = *macd_series(&series.closes(), 12, 26, 9)?
        .last()
        .ok_or(IndicatorError::Empty)?;
    Ok(IndicatorValue::new(
        last_date(series)?,
        "macd",
        &[("fast", 12.0), ("slow", 26.0), ("signal", 9.0)],
        v.map(|p| {
            vec![
                ("macd_line", p.macd),
                ("signal_line", p.signal),
                ("histogram", p.histogram),
            ]
        }),
    ))
}

pub fn atr(series: &BarSeries, n: usize) -> Result<IndicatorValue, IndicatorError> {
    let v = *atr_series(series.bars(), n)?
        .last()
        .ok_or(IndicatorError::Empty)?;
    Ok(IndicatorValue::new(
        last_date(series)?,
        "atr",
        &[("n", n as f64)],
        v.map(|x| vec![("value", x)]),
    ))
}

pub fn bollinger(series: &BarSeries, n: usize, k: f64) -> Result<IndicatorValue, IndicatorError> {
    let v = *bollinger_series(&series.closes(), n, k)?
        .last()
        .ok_or(IndicatorError::Empty)?;
    Ok(IndicatorValue::new(
        last_date(series)?,
        "bollinger",
        &[("n", n as f64), ("k", k)],
        v.map(|b| vec![("middle", b.middle), ("upper", b.upper), ("lower", b.lower)]),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileBin {
    pub low: f64,
    pub high: f64,
    pub volume: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeProfile {
    pub as_of: NaiveDate,
    pub bins: Vec<ProfileBin>,
    pub poc_bin: usize,
    pub poc: f64,
    pub value_area_low: f64,
    pub value_area_high: f64,
    /// Centers of bins that are local volume maxima.
    pub high_volume_nodes: Vec<f64>,
}

impl VolumeProfile {
    pub fn to_indicator(&self, coverage: f64) -> IndicatorValue {
        IndicatorValue::new(
            self.as_of,
            "volume_profile",
            &[("bins", self.bins.len() as f64), ("coverage", coverage)],
            Some(vec![
                ("poc", self.poc),
                ("value_area_low", self.value_area_low),
                ("value_area_high", self.value_area_high),
            ]),
        )
    }
}

/// Close-binned volume histogram over `[min low, max high]`.
///
/// The value area grows symmetrically around the POC bin one bin per side at
/// a time until it holds at least `coverage` of total volume; empty bins left
/// at its edges are then trimmed.
pub fn volume_profile(
    series: &BarSeries,
    n_bins: usize,
    coverage: f64,
) -> Result<VolumeProfile, IndicatorError> {
    check_window(n_bins, 1)?;
    let bars = series.bars();
    let as_of = last_date(series)?;
    let lo = bars.iter().map(|b| b.low).min().unwrap().to_f64();
    let hi = bars.iter().map(|b| b.high).max().unwrap().to_f64();
    let width = (hi - lo) / n_bins as f64;
    let mut volumes = vec![0u64; n_bins];
    for b in bars {
        let idx = if width > 0.0 {
            (((b.close.to_f64() - lo) / width).floor() as usize).min(n_bins - 1)
        } else {
            0
        };
        volumes[idx] += b.volume;
    }
    let total: u64 = volumes.iter().sum();
    if total == 0 {
        return Err(IndicatorError::ZeroVolume);
    }
    let bins: Vec<ProfileBin> = volumes
        .iter()
        .enumerate()
        .map(|(i, &v)| ProfileBin {
            low: lo + i as f64 * width,
            high: if i + 1 == n_bins {
                hi
            } else {
                lo + (i + 1) as f64 * width
            },
            volume: v,
        })
        .collect();
    // First maximum wins ties, i.e. the lowest-priced bin.
    let poc_bin = volumes
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > volumes[best] { i } else { best });
    let target = coverage.clamp(0.0, 1.0) * total as f64;
    let (mut a, mut b) = (poc_bin, poc_bin);
    let mut acc = volumes[poc_bin];
    while (acc as f64) < target - 1e-9 * total as f64 && (a > 0 || b + 1 < n_bins) {
        if a > 0 {
            a -= 1;
            acc += volumes[a];
        }
        if b + 1 < n_bins {
            b += 1;
            acc += volumes[b];
        }
    }
    while volumes[a] == 0 && a < poc_bin {
        a += 1;
    }
    while volumes[b] == 0 && b > poc_bin {
        b -= 1;
    }
    let center = |i: usize| (bins[i].low + bins[i].high) / 2.0;
    let high_volume_nodes = (0..n_bins)
        .filter(|&i| {
            let v = volumes[i];
            v > 0 && (i == 0 || v >= volumes[i - 1]) && (i + 1 == n_bins || v >= volumes[i + 1])
        })
        .map(center)
        .collect();
    Ok(VolumeProfile {
        as_of,
        poc: center(poc_bin),
        value_area_low: bins[a].low,
        value_area_high: bins[b].high,
        poc_bin,
        bins,
        high_volume_nodes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub price: f64,
    pub touches: usize,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSet {
    pub as_of: NaiveDate,
    pub support: Vec<Level>,
    pub resistance: Vec<Level>,
}

/// Swing highs and lows clustered into price bands.
///
/// A bar is a swing low when its low is the minimum of its ±2-bar
/// neighborhood and at least one neighbor is strictly higher; swing highs
/// mirror that. Extrema are sorted by price and grouped greedily while within
/// `tolerance_pct` percent of the group's lowest price. Groups with at least
/// `min_touches` members become levels at their mean price. Strength is the
/// product of touches and mean touch volume, each normalized by its maximum
/// across all levels.
pub fn detect_levels(series: &BarSeries, tolerance_pct: f64, min_touches: usize) -> LevelSet {
    let bars = series.bars();
    let as_of = series
        .last()
        .map(|b| b.session_date)
        .unwrap_or(NaiveDate::MIN);
    let mut lows = Vec::new();
    let mut highs = Vec::new();
    if bars.len() >= 5 {
        for i in 2..bars.len() - 2 {
            let hood = &bars[i - 2..=i + 2];
            let (l, h) = (bars[i].low, bars[i].high);
            if hood.iter().all(|b| b.low >= l) && hood.iter().any(|b| b.low > l) {
                lows.push((l.to_f64(), bars[i].volume));
            }
            if hood.iter().all(|b| b.high <= h) && hood.iter().any(|b| b.high < h) {
                highs.push((h.to_f64(), bars[i].volume));
            }
        }
    }
    let min_touches = min_touches.max(1);
    let support = cluster(lows, tolerance_pct, min_touches);
    let resistance = cluster(highs, tolerance_pct, min_touches);
    let max_touches = support
        .iter()
        .chain(&resistance)
        .map(|c| c.1)
        .max()
        .unwrap_or(1) as f64;
    let max_vol = support
        .iter()
        .chain(&resistance)
        .map(|c| c.2)
        .fold(0.0, f64::max);
    let finish = |raw: Vec<(f64, usize, f64)>| -> Vec<Level> {
        raw.into_iter()
            .map(|(price, touches, vol)| {
                let vw = if max_vol > 0.0 { vol / max_vol } else { 1.0 };
                Level {
                    price,
                    touches,
                    strength: (touches as f64 / max_touches * vw).clamp(0.0, 1.0),
                }
            })
            .collect()
    };
    LevelSet {
        as_of,
        support: finish(support),
        resistance: finish(resistance),
    }
}

fn cluster(
    mut points: Vec<(f64, u64)>,
    tolerance_pct: f64,
    min_touches: usize,
) -> Vec<(f64, usize, f64)> {
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::new();
    let mut i = 0;
    while i < points.len() {
        let anchor = points[i].0;
        let mut j = i + 1;
        while j < points.len() && (points[j].0 - anchor) / anchor * 100.0 <= tolerance_pct {
            j += 1;
        }
        let group = &points[i..j];
        if group.len() >= min_touches {
            let n = group.len() as f64;
            let price = group.iter().map(|p| p.0).sum::<f64>() / n;
            let vol = group.iter().map(|p| p.1 as f64).sum::<f64>() / n;
            out.push((price, group.len(), vol));
        }
        i = j;
    }
    out
}

/// Parameters for the standard indicator snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotParams {
    pub sma_short: usize,
    pub sma_long: usize,
    pub ema_fast: usize,
    pub ema_slow: usize,
    pub rsi_n: usize,
    pub atr_n: usize,
    pub bollinger_n: usize,
    pub bollinger_k: f64,
    pub profile_bins: usize,
    pub value_area: f64,
}

impl Default for SnapshotParams {
    fn default() -> Self {
        SnapshotParams {
            sma_short: 20,
            sma_long: 50,
            ema_fast: 12,
            ema_slow: 26,
            rsi_n: 14,
            atr_n: 14,
            bollinger_n: 20,
            bollinger_k: 2.0,
            profile_bins: DEFAULT_PROFILE_BINS,
            value_area: DEFAULT_VALUE_AREA,
        }
    }
}

/// Every standard indicator evaluated at the last bar of `series`.
pub fn snapshot(
    series: &BarSeries,
    p: &SnapshotParams,
) -> Result<Vec<IndicatorValue>, IndicatorError> {
    let mut out = vec![
        sma(series, p.sma_short)?,
        sma(series, p.sma_long)?,
        ema(series, p.ema_fast)?,
        ema(series, p.ema_slow)?,
        rsi(series, p.rsi_n)?,
        macd(series)?,
        atr(series, p.atr_n)?,
        bollinger(series, p.bollinger_n, p.bollinger_k)?,
    ];
    match volume_profile(series, p.profile_bins, p.value_area) {
        Ok(vp) => out.push(vp.to_indicator(p.value_area)),
        Err(IndicatorError::ZeroVolume) => out.push(IndicatorValue::new(
            last_date(series)?,
            "volume_profile",
            &[("bins", p.profile_bins as f64), ("coverage", p.value_area)],
            None,
        )),
        Err(e) => return Err(e),
    }
    Ok(out)
}

/// One line per indicator, unavailable values shown as `n/a`.
pub fn render_snapshot(values: &[IndicatorValue]) -> String {
    let mut s = String::new();
    for v in values {
        let _ = writeln!(s, "{}", v.render());
    }
    s
}

pub fn render_levels(levels: &LevelSet) -> String {
    let fmt = |ls: &[Level]| {
        if ls.is_empty() {
            "none".to_string()
        } else {
            ls.iter()
                .map(|l| format!("{:.2} (touches {}, strength {:.2})", l.price, l.touches, l.strength))
                .collect::<Vec<_>>()
                .join("; ")
        }
    };
    format!(
        "Support: {}\nResistance: {}\n",
        fmt(&levels.support),
        fmt(&levels.resistance)
    )
}

pub fn to_jsonl(values: &[IndicatorValue]) -> String {
    values
        .iter()
        .map(|v| serde_json::to_string(v).expect("indicator values serialize") + "\n")
        .collect()
}
