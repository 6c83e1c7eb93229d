use chrono::{Datelike, NaiveDate};
use proptest::prelude::*;
use tradeloop_core::market_data::*;
use tradeloop_core::Money;

fn weekdays(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if d.weekday().number_from_monday() <= 5 {
            out.push(d);
        }
        d = d.succ_opt().unwrap();
    }
    out
}

fn series() -> impl Strategy<Value = BarSeries> {
    prop::collection::vec((100i64..10_000, 0i64..500, 0i64..500, 0u64..1_000_000), 1..300).prop_map(
        |rows| {
            let dates = weekdays(NaiveDate::from_ymd_opt(2023, 1, 2).unwrap(), rows.len());
            let bars = rows
                .iter()
                .zip(dates)
                .map(|(&(c, up, down, v), d)| {
                    let close = Money::from_raw(c * 100);
                    Bar {
                        session_date: d,
                        open: close,
                        high: Money::from_raw((c + up) * 100),
                        low: Money::from_raw((c - down).max(1) * 100),
                        close,
                        volume: v,
                        vwap: None,
                        transactions: Some(v / 10),
                    }
                })
                .collect();
            BarSeries::new("P", Resolution::Daily, bars).unwrap()
        },
    )
}

proptest! {
    #[test]
    fn csv_round_trip_is_byte_identical(s in series()) {
        let text = s.to_csv();
        let back = parse_bars(text.as_bytes(), BarFormat::Csv, "P").unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(back.to_csv(), text);
    }

    #[test]
    fn resampling_conserves_volume(s in series()) {
        let total: u64 = s.bars().iter().map(|b| b.volume).sum();
        for target in [Resolution::Weekly, Resolution::Monthly] {
            let r = resample(&s, target).unwrap();
            prop_assert_eq!(r.bars().iter().map(|b| b.volume).sum::<u64>(), total);
        }
    }

    #[test]
    fn unit_split_is_identity(s in series(), k in 1u64..20) {
        let d = s.bars()[s.len() / 2].session_date;
        prop_assert_eq!(adjust_for_actions(&s, &[CorporateAction::split(d, k, k)]).unwrap(), s);
    }

    #[test]
    fn slice_is_a_contiguous_suffix_up_to_as_of(s in series(), pick in 0usize..300, days in 1u32..400) {
        let idx = pick % s.len();
        let as_of = s.bars()[idx].session_date;
        let w = window_slice(&s, Lookback::Days(days), as_of).unwrap();
        let dates = s.dates();
        let got = w.dates();
        prop_assert!(!got.is_empty());
        prop_assert_eq!(*got.last().unwrap(), as_of);
        let start = dates.iter().position(|d| *d == got[0]).unwrap();
        prop_assert_eq!(&dates[start..=idx], &got[..]);
        if start > 0 {
            prop_assert!(dates[start - 1] <= Lookback::Days(days).start_exclusive(as_of));
        }
    }
}
