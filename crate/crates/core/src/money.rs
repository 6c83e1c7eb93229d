//! Fixed-point currency amounts with four implied decimal places.
//!
//! All cash and fill accounting goes through [`Money`] so that a fill moves
//! cash by exactly `price × quantity` with no floating point drift. Analytics
//! convert to `f64` at the boundary via [`Money::to_f64`].

use std::fmt;
use std::ops::{Add, AddAssign, Neg, Sub, SubAssign};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Number of implied decimal places.
pub const SCALE_DIGITS: u32 = 4;
const SCALE: i64 = 10_000;

/// A currency amount (or price) stored as an integer count of 1/10000 units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Money(i64);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid amount {input:?}: {reason}")]
pub struct ParseMoneyError {
    pub input: String,
    pub reason: &'static str,
}

impl Money {
    pub const ZERO: Money = Money(0);

    pub const fn from_raw(raw: i64) -> Self {
        Money(raw)
    }

    pub const fn raw(self) -> i64 {
        self.0
    }

    pub const fn from_units(units: i64) -> Self {
        Money(units * SCALE)
    }

    /// Rounds to the nearest 1/10000 (half away from zero). Returns `None` for
    /// non-finite or out-of-range input.
    pub fn from_f64(value: f64) -> Option<Self> {
        if !value.is_finite() {
            return None;
        }
        let scaled = (value * SCALE as f64).round();
        if scaled.abs() >= i64::MAX as f64 {
            return None;
        }
        Some(Money(scaled as i64))
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / SCALE as f64
    }

    pub fn is_positive(self) -> bool {
        self.0 > 0
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }

    pub fn abs(self) -> Self {
        Money(self.0.abs())
    }

    /// Exact `self × quantity`. Panics on overflow, which would need
    /// quantities and prices far outside any simulated market.
    pub fn times(self, quantity: u64) -> Money {
        let product = self.0 as i128 * quantity as i128;
        Money(i64::try_from(product).expect("money overflow"))
    }

    /// Largest `q` with `q × self ≤ budget`; zero when `self` is not positive.
    pub fn max_quantity(self, budget: Money) -> u64 {
        if self.0 <= 0 || budget.0 <= 0 {
            return 0;
        }
        (budget.0 / self.0) as u64
    }

    /// Renders with exactly two decimals, rounding half away from zero.
    pub fn format_2dp(self) -> String {
        let cents = {
            let q = self.0 / 100;
            let r = self.0 % 100;
            if r >= 50 {
                q + 1
            } else if r <= -50 {
                q - 1
            } else {
                q
            }
        };
        let sign = if cents < 0 { "-" } else { "" };
        let c = cents.unsigned_abs();
        format!("{sign}{}.{:02}", c / 100, c % 100)
    }
}

/// Canonical form: shortest decimal, no trailing zeros (`105`, `102.5`).
impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let int = abs / SCALE as u64;
        let frac = abs % SCALE as u64;
        if frac == 0 {
            write!(f, "{sign}{int}")
        } else {
            let digits = format!("{frac:04}");
            write!(f, "{sign}{int}.{}", digits.trim_end_matches('0'))
        }
    }
}

impl FromStr for Money {
    type Err = ParseMoneyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |reason| ParseMoneyError {
            input: s.to_string(),
            reason,
        };
        let t = s.trim();
        if t.is_empty() {
            return Err(err("empty"));
        }
        let (neg, body) = match t.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, t.strip_prefix('+').unwrap_or(t)),
        };
        let (int_part, frac_part) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(err("no digits"));
        }
        if !int_part.bytes().all(|b| b.is_ascii_digit())
            || !frac_part.bytes().all(|b| b.is_ascii_digit())
        {
            // Fall back to float syntax such as exponents.
            let v: f64 = t.parse().map_err(|_| err("not a number"))?;
            return Money::from_f64(v).ok_or_else(|| err("out of range"));
        }
        if frac_part.len() > SCALE_DIGITS as usize {
            let v: f64 = t.parse().map_err(|_| err("not a number"))?;
            return Money::from_f64(v).ok_or_else(|| err("out of range"));
        }
        let int: i64 = if int_part.is_empty() {
            0
        } else {
            int_part.parse().map_err(|_| err("out of range"))?
        };
        let mut frac: i64 = 0;
        for (i, b) in frac_part.bytes().enumerate() {
            frac += (b - b'0') as i64 * 10_i64.pow(SCALE_DIGITS - 1 - i as u32);
        }
        let raw = int
            .checked_mul(SCALE)
            .and_then(|v| v.checked_add(frac))
            .ok_or_else(|| err("out of range"))?;
        Ok(Money(if neg { -raw } else { raw }))
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        Money(self.0 - rhs.0)
    }
}

impl SubAssign for Money {
    fn sub_assign(&mut self, rhs: Money) {
        self.0 -= rhs.0;
    }
}

impl Neg for Money {
    type Output = Money;
    fn neg(self) -> Money {
        Money(-self.0)
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, Add::add)
    }
}

// JSON carries amounts as numbers. Values with at most four decimals
// round-trip exactly through f64's shortest representation.
impl Serialize for Money {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.to_f64())
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(deserializer)?;
        Money::from_f64(v).ok_or_else(|| serde::de::Error::custom("amount out of range"))
    }
}
