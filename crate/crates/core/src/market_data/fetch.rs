//! Daily aggregates from a Polygon-style REST endpoint.
//!
//! The raw response body is written to the cache directory before it is
//! parsed, and a cached body is preferred over the network, so a run can be
//! reproduced offline from the cache alone.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate};
use serde::Deserialize;

use super::{Bar, BarSeries, DataError, Resolution};
use crate::money::Money;

pub const DEFAULT_BASE_URL: &str = "https://api.polygon.io";
pub const API_KEY_ENV: &str = "POLYGON_API_KEY";

#[derive(Debug, Clone)]
pub struct AggregatesClient {
    pub base_url: String,
    pub cache_dir: PathBuf,
    pub adjusted: bool,
    api_key_env: String,
}

#[derive(Deserialize)]
struct AggResponse {
    #[serde(default)]
    status: Option<String>,
    #[serde(default)]
    results: Vec<AggBar>,
}

#[derive(Deserialize)]
struct AggBar {
    t: i64,
    o: f64,
    h: f64,
    l: f64,
    c: f64,
    v: f64,
    #[serde(default)]
    vw: Option<f64>,
    #[serde(default)]
    n: Option<u64>,
}

impl AggregatesClient {
    pub fn new(cache_dir: impl Into<PathBuf>) -> Self {
        AggregatesClient {
            base_url: DEFAULT_BASE_URL.to_string(),
            cache_dir: cache_dir.into(),
            adjusted: true,
            api_key_env: API_KEY_ENV.to_string(),
        }
    }

    pub fn with_key_env(mut self, var: impl Into<String>) -> Self {
        self.api_key_env = var.into();
        self
    }

    pub fn cache_path(&self, symbol: &str, from: NaiveDate, to: NaiveDate) -> PathBuf {
        self.cache_dir.join(format!(
            "{symbol}_{from}_{to}_{}.json",
            if self.adjusted { "adj" } else { "raw" }
        ))
    }

    /// Cached body if present, otherwise fetches and caches it verbatim.
    pub fn daily(
        &self,
        symbol: &str,
        from: NaiveDate,
        to: NaiveDate,
    ) -> Result<BarSeries, DataError> {
        let path = self.cache_path(symbol, from, to);
        let body = match fs::read_to_string(&path) {
            Ok(body) => body,
            Err(_) => {
                let body = self.download(symbol, from, to)?;
                fs::create_dir_all(&self.cache_dir)?;
                fs::write(&path, &body)?;
                body
            }
        };
        parse_aggregates(&body, symbol)
    }

    fn download(&self, symbol: &str, from: NaiveDate, to: NaiveDate) -> Result<String, DataError> {
        let key = std::env::var(&self.api_key_env).map_err(|_| {
            DataError::Provider(format!("environment variable {} is not set", self.api_key_env))
        })?;
        let url = format!(
            "{}/v2/aggs/ticker/{symbol}/range/1/day/{from}/{to}",
            self.base_url.trim_end_matches('/')
        );
        let mut response = ureq::get(&url)
            .query("adjusted", if self.adjusted { "true" } else { "false" })
            .query("sort", "asc")
            .query("limit", "50000")
            .query("apiKey", &key)
            .call()
            // The error text may echo the URL, which carries the key.
            .map_err(|e| DataError::Provider(redact(&e.to_string(), &key)))?;
        response
            .body_mut()
            .read_to_string()
            .map_err(|e| DataError::Provider(redact(&e.to_string(), &key)))
    }
}

fn redact(text: &str, key: &str) -> String {
    if key.is_empty() {
        text.to_string()
    } else {
        text.replace(key, "***")
    }
}

/// Converts an aggregates response body into a validated daily series.
pub fn parse_aggregates(body: &str, symbol: &str) -> Result<BarSeries, DataError> {
    let resp: AggResponse = serde_json::from_str(body).map_err(|e| DataError::Malformed {
        row: 0,
        reason: e.to_string(),
    })?;
    if let Some(status) = resp.status.as_deref() {
        if status != "OK" && status != "DELAYED" {
            return Err(DataError::Provider(format!("status {status}")));
        }
    }
    let mut bars = Vec::with_capacity(resp.results.len());
    for (i, r) in resp.results.iter().enumerate() {
        let row = i + 1;
        let malformed = |reason: &str| DataError::Malformed {
            row,
            reason: reason.to_string(),
        };
        // Daily aggregates are stamped at midnight Eastern, which is the same
        // calendar date in UTC.
        let session_date = DateTime::from_timestamp_millis(r.t)
            .ok_or_else(|| malformed("bad timestamp"))?
            .date_naive();
        let money = |v: f64| Money::from_f64(v).ok_or_else(|| malformed("non-finite price"));
        bars.push(Bar {
            session_date,
            open: money(r.o)?,
            high: money(r.h)?,
            low: money(r.l)?,
            close: money(r.c)?,
            volume: r.v.max(0.0).round() as u64,
            vwap: r.vw.map(money).transpose()?,
            transactions: r.n,
        });
    }
    if bars.is_empty() {
        return Err(DataError::Empty);
    }
    BarSeries::new(symbol, Resolution::Daily, bars)
}

/// True when a cached body exists for the request.
pub fn is_cached(client: &AggregatesClient, symbol: &str, from: NaiveDate, to: NaiveDate) -> bool {
    Path::new(&client.cache_path(symbol, from, to)).exists()
}
