//! Seeded synthetic daily bars for offline runs and tests.

use chrono::NaiveDate;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use tradeloop_core::market_data::{Bar, BarSeries, Resolution};
use tradeloop_core::money::Money;

/// Geometric random walk with about 1.5% daily volatility and a slight
/// upward drift. Each bar opens near the previous close.
pub fn synthetic_bars(symbol: &str, dates: &[NaiveDate], seed: u64, start_price: f64) -> BarSeries {
    let mut rng = StdRng::seed_from_u64(seed);
    let ret = Normal::new(0.0003, 0.015).expect("valid normal");
    let gap = Normal::new(0.0, 0.004).expect("valid normal");
    let cents = |x: f64| Money::from_f64((x * 100.0).round() / 100.0).expect("finite price");
    let mut prev = start_price;
    let mut bars = Vec::with_capacity(dates.len());
    for &d in dates {
        let open = (prev * (1.0 + gap.sample(&mut rng))).max(1.0);
        let close = (open * (1.0 + ret.sample(&mut rng))).max(1.0);
        let high = open.max(close) * (1.0 + rng.gen_range(0.0..0.01));
        let low = open.min(close) * (1.0 - rng.gen_range(0.0..0.01));
        let (open, close) = (cents(open), cents(close));
        let high = cents(high).max(open.max(close));
        let low = cents(low).min(open.min(close));
        bars.push(Bar {
            session_date: d,
            open,
            high,
            low,
            close,
            volume: rng.gen_range(2_000_000..9_000_000),
            vwap: None,
            transactions: None,
        });
        prev = close.to_f64();
    }
    BarSeries::new(symbol, Resolution::Daily, bars).expect("generated bars are valid")
}
