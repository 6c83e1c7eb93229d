//! Bar-granularity order matching and single-instrument portfolio accounting.
//!
//! Orders decided after session `t` closes are queued and matched against
//! bar `t+1`. Anything that does not fill in that session is cancelled.
//!
//! Fill rules, with "buy side" meaning BUY and SHORT_COVER:
//!
//! | type   | buy side                                   | sell side                                  |
//! |--------|--------------------------------------------|--------------------------------------------|
//! | MARKET | open                                       | open                                       |
//! | LIMIT  | open if open ≤ p, else p if low ≤ p        | open if open ≥ p, else p if high ≥ p       |
//! | STOP   | open if open ≥ p, else p if high ≥ p       | open if open ≤ p, else p if low ≤ p        |
//!
//! Fills are all-or-nothing. Short proceeds are credited to cash and the
//! short position is carried as a liability marked at the close.

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::market_data::Bar;
use crate::money::Money;

pub const AUDIT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_INITIAL_CASH: Money = Money::from_units(100_000);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Buy,
    Sell,
    Short,
    ShortCover,
}

impl Action {
    pub fn is_buy_side(self) -> bool {
        matches!(self, Action::Buy | Action::ShortCover)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Buy => "BUY",
            Action::Sell => "SELL",
            Action::Short => "SHORT",
            Action::ShortCover => "SHORT_COVER",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Action {
    type Err = ();

    /// Exact upper-case names only.
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "BUY" => Ok(Action::Buy),
            "SELL" => Ok(Action::Sell),
            "SHORT" => Ok(Action::Short),
            "SHORT_COVER" => Ok(Action::ShortCover),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OrderType {
    Market,
    Limit,
    Stop,
}

impl OrderType {
    pub fn as_str(self) -> &'static str {
        match self {
            OrderType::Market => "MARKET",
            OrderType::Limit => "LIMIT",
            OrderType::Stop => "STOP",
        }
    }
}

impl fmt::Display for OrderType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OrderType {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "MARKET" => Ok(OrderType::Market),
            "LIMIT" => Ok(OrderType::Limit),
            "STOP" => Ok(OrderType::Stop),
            _ => Err(()),
        }
    }
}

/// Engine-assigned order identifier, rendered `ord-000001`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OrderId(pub u64);

impl fmt::Display for OrderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ord-{:06}", self.0)
    }
}

impl FromStr for OrderId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.strip_prefix("ord-")
            .and_then(|n| n.parse().ok())
            .map(OrderId)
            .ok_or_else(|| format!("bad order id {s:?}"))
    }
}

impl Serialize for OrderId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for OrderId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An order as proposed, before the engine assigns an id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderRequest {
    pub action: Action,
    pub order_type: OrderType,
    pub price: Option<Money>,
    pub quantity: u64,
    pub explanation: String,
}

impl OrderRequest {
    pub fn market(action: Action, quantity: u64) -> Self {
        OrderRequest {
            action,
            order_type: OrderType::Market,
            price: None,
            quantity,
            explanation: String::new(),
        }
    }

    pub fn priced(action: Action, order_type: OrderType, price: Money, quantity: u64) -> Self {
        OrderRequest {
            action,
            order_type,
            price: Some(price),
            quantity,
            explanation: String::new(),
        }
    }

    pub fn with_explanation(mut self, text: impl Into<String>) -> Self {
        self.explanation = text.into();
        self
    }

    /// Checks the price/type pairing and positive quantity.
    pub fn check_shape(&self) -> Result<(), String> {
        if self.quantity == 0 {
            return Err("quantity must be >= 1".into());
        }
        match (self.order_type, self.price) {
            (OrderType::Market, None) => Ok(()),
            (OrderType::Market, Some(_)) => Err("MARKET orders carry no price".into()),
            (_, Some(p)) if p.is_positive() => Ok(()),
            (t, _) => Err(format!("{t} orders need a price > 0")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Order {
    pub id: OrderId,
    pub action: Action,
    pub order_type: OrderType,
    pub price: Option<Money>,
    pub quantity: u64,
    pub explanation: String,
    pub submitted_at: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamped_from: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fill {
    pub order_id: OrderId,
    pub action: Action,
    pub executed_at: NaiveDate,
    pub fill_price: Money,
    pub quantity: u64,
    pub clamped_from: Option<u64>,
}

impl Fill {
    /// Signed cash effect of the fill.
    pub fn cash_delta(&self) -> Money {
        let notional = self.fill_price.times(self.quantity);
        if self.action.is_buy_side() {
            -notional
        } else {
            notional
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortfolioState {
    pub cash: Money,
    pub shares_long: u64,
    pub shares_short: u64,
    pub as_of: NaiveDate,
}

impl PortfolioState {
    pub fn new(cash: Money, as_of: NaiveDate) -> Self {
        PortfolioState {
            cash,
            shares_long: 0,
            shares_short: 0,
            as_of,
        }
    }

    pub fn shares_net(&self) -> i64 {
        self.shares_long as i64 - self.shares_short as i64
    }

    pub fn value_at(&self, close: Money) -> Money {
        portfolio_value(self, close)
    }
}

/// `cash + long·close − short·close`.
pub fn portfolio_value(p: &PortfolioState, close: Money) -> Money {
    p.cash + close.times(p.shares_long) - close.times(p.shares_short)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectReason {
    #[error("INSUFFICIENT_CASH")]
    InsufficientCash,
    #[error("SHORT_LIMIT")]
    ShortLimit,
    #[error("EMPTY_AFTER_CLAMP")]
    EmptyAfterClamp,
    #[error("INVALID_ORDER")]
    InvalidOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CancelReason {
    Unfilled,
    GapReject,
    EmptyAfterClamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cancellation {
    pub order_id: OrderId,
    pub reason: CancelReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionResult {
    pub date: NaiveDate,
    pub fills: Vec<Fill>,
    pub cancelled: Vec<Cancellation>,
    pub portfolio: PortfolioState,
    pub portfolio_value: Money,
    /// Long plus short market value at the close.
    pub gross_exposure: Money,
}

/// Result of pre-trade checks: the quantity that will be queued and, when it
/// was reduced, the original request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accepted {
    pub quantity: u64,
    pub clamped_from: Option<u64>,
}

/// Pre-trade checks against the current portfolio and the last close.
///
/// BUY uses the limit price as reference for LIMIT orders and `last_close`
/// otherwise; the same reference prices the SHORT cap, which keeps total
/// short value at or below current portfolio value. SELL and SHORT_COVER are
/// clamped to the position they close.
pub fn validate(
    req: &OrderRequest,
    portfolio: &PortfolioState,
    last_close: Money,
) -> Result<Accepted, RejectReason> {
    req.check_shape().map_err(|_| RejectReason::InvalidOrder)?;
    let reference = match (req.order_type, req.price) {
        (OrderType::Limit, Some(p)) => p,
        _ => last_close,
    };
    let clamp = |held: u64| {
        let q = req.quantity.min(held);
        if q == 0 {
            Err(RejectReason::EmptyAfterClamp)
        } else {
            Ok(Accepted {
                quantity: q,
                clamped_from: (q < req.quantity).then_some(req.quantity),
            })
        }
    };
    let as_is = Accepted {
        quantity: req.quantity,
        clamped_from: None,
    };
    match req.action {
        Action::Buy => {
            if reference.times(req.quantity) > portfolio.cash {
                Err(RejectReason::InsufficientCash)
            } else {
                Ok(as_is)
            }
        }
        Action::Short => {
            let existing = last_close.times(portfolio.shares_short);
            let value = portfolio_value(portfolio, last_close);
            if existing + reference.times(req.quantity) > value {
                Err(RejectReason::ShortLimit)
            } else {
                Ok(as_is)
            }
        }
        Action::Sell => clamp(portfolio.shares_long),
        Action::ShortCover => clamp(portfolio.shares_short),
    }
}

/// Execution price for an order against a bar, or `None` if it does not
/// trigger.
pub fn match_price(
    action: Action,
    order_type: OrderType,
    price: Option<Money>,
    bar: &Bar,
) -> Option<Money> {
    let open = bar.open;
    match (order_type, price) {
        (OrderType::Market, _) => Some(open),
        (OrderType::Limit, Some(p)) => {
            if action.is_buy_side() {
                if open <= p {
                    Some(open)
                } else if bar.low <= p {
                    Some(p)
                } else {
                    None
                }
            } else if open >= p {
                Some(open)
            } else if bar.high >= p {
                Some(p)
            } else {
                None
            }
        }
        (OrderType::Stop, Some(p)) => {
            if action.is_buy_side() {
                if open >= p {
                    Some(open)
                } else if bar.high >= p {
                    Some(p)
                } else {
                    None
                }
            } else if open <= p {
                Some(open)
            } else if bar.low <= p {
                Some(p)
            } else {
                None
            }
        }
        (_, None) => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AuditEvent {
    OrderSubmitted {
        date: NaiveDate,
        order: Order,
    },
    OrderRejected {
        date: NaiveDate,
        request: OrderRequest,
        reason: RejectReason,
    },
    OrderClamped {
        date: NaiveDate,
        order_id: OrderId,
        requested: u64,
        clamped_to: u64,
    },
    Fill {
        date: NaiveDate,
        fill: Fill,
    },
    Cancel {
        date: NaiveDate,
        order_id: OrderId,
        reason: CancelReason,
    },
    ForcedCover {
        date: NaiveDate,
        fill: Fill,
        /// Long shares sold at the close to fund the cover.
        funded_by_sale: Option<Fill>,
        /// Short shares left open because cash could not cover them.
        uncovered: u64,
    },
    SessionSummary {
        date: NaiveDate,
        close: Money,
        cash: Money,
        shares_long: u64,
        shares_short: u64,
        portfolio_value: Money,
        gross_exposure: Money,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub schema_version: u32,
    pub seq: u64,
    #[serde(flatten)]
    pub event: AuditEvent,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("bar {bar} is not after order {order} submitted {submitted}")]
    Lookahead {
        bar: NaiveDate,
        order: OrderId,
        submitted: NaiveDate,
    },
    #[error("bar {bar} is not after the last session {last}")]
    Stale { bar: NaiveDate, last: NaiveDate },
}

/// One engine per run: portfolio, pending queue and the audit trail.
#[derive(Debug, Clone)]
pub struct Engine {
    portfolio: PortfolioState,
    pending: Vec<Order>,
    audit: Vec<AuditRecord>,
    next_id: u64,
    last_session: Option<NaiveDate>,
}

impl Engine {
    pub fn new(initial_cash: Money, start: NaiveDate) -> Self {
        Engine {
            portfolio: PortfolioState::new(initial_cash, start),
            pending: Vec::new(),
            audit: Vec::new(),
            next_id: 1,
            last_session: None,
        }
    }

    pub fn portfolio(&self) -> &PortfolioState {
        &self.portfolio
    }

    pub fn pending(&self) -> &[Order] {
        &self.pending
    }

    pub fn audit(&self) -> &[AuditRecord] {
        &self.audit
    }

    fn log(&mut self, event: AuditEvent) {
        let seq = self.audit.len() as u64 + 1;
        self.audit.push(AuditRecord {
            schema_version: AUDIT_SCHEMA_VERSION,
            seq,
            event,
        });
    }

    /// Validates and queues an order decided on `as_of` with the given last
    /// close. Rejections are logged and returned.
    pub fn submit(
        &mut self,
        req: OrderRequest,
        last_close: Money,
        as_of: NaiveDate,
    ) -> Result<OrderId, RejectReason> {
        let accepted = match validate(&req, &self.portfolio, last_close) {
            Ok(a) => a,
            Err(reason) => {
                self.log(AuditEvent::OrderRejected {
                    date: as_of,
                    request: req,
                    reason,
                });
                return Err(reason);
            }
        };
        let id = OrderId(self.next_id);
        self.next_id += 1;
        let order = Order {
            id,
            action: req.action,
            order_type: req.order_type,
            price: req.price,
            quantity: accepted.quantity,
            explanation: req.explanation,
            submitted_at: as_of,
            clamped_from: accepted.clamped_from,
        };
        self.log(AuditEvent::OrderSubmitted {
            date: as_of,
            order: order.clone(),
        });
        if let Some(requested) = accepted.clamped_from {
            self.log(AuditEvent::OrderClamped {
                date: as_of,
                order_id: id,
                requested,
                clamped_to: accepted.quantity,
            });
        }
        self.pending.push(order);
        Ok(id)
    }

    /// Matches the queue against `bar` in submission order, cancels whatever
    /// does not fill and marks the book at the close.
    pub fn step_session(&mut self, bar: &Bar) -> Result<SessionResult, EngineError> {
        self.run_session(bar, false)
    }

    /// Like [`Engine::step_session`] and then covers any short at the close.
    pub fn step_final_session(&mut self, bar: &Bar) -> Result<SessionResult, EngineError> {
        self.run_session(bar, true)
    }

    /// Covers outstanding shorts at `bar.close` outside the normal session
    /// flow. No-op without a short position.
    pub fn force_cover(&mut self, bar: &Bar) -> SessionResult {
        let mut fills = Vec::new();
        if self.portfolio.shares_short > 0 {
            self.cover_at_close(bar, &mut fills);
            self.summarize(bar);
        }
        self.result(bar, fills, Vec::new())
    }

    fn run_session(&mut self, bar: &Bar, final_session: bool) -> Result<SessionResult, EngineError> {
        let date = bar.session_date;
        if let Some(last) = self.last_session {
            if date <= last {
                return Err(EngineError::Stale { bar: date, last });
            }
        }
        if let Some(o) = self.pending.iter().find(|o| o.submitted_at >= date) {
            return Err(EngineError::Lookahead {
                bar: date,
                order: o.id,
                submitted: o.submitted_at,
            });
        }
        let mut fills = Vec::new();
        let mut cancelled = Vec::new();
        for order in std::mem::take(&mut self.pending) {
            match self.try_fill(&order, bar) {
                Ok(fill) => {
                    self.apply(&fill);
                    self.log(AuditEvent::Fill {
                        date,
                        fill: fill.clone(),
                    });
                    fills.push(fill);
                }
                Err(reason) => {
                    self.log(AuditEvent::Cancel {
                        date,
                        order_id: order.id,
                        reason,
                    });
                    cancelled.push(Cancellation {
                        order_id: order.id,
                        reason,
                    });
                }
            }
        }
        if final_session && self.portfolio.shares_short > 0 {
            self.cover_at_close(bar, &mut fills);
        }
        self.last_session = Some(date);
        self.portfolio.as_of = date;
        self.summarize(bar);
        Ok(self.result(bar, fills, cancelled))
    }

    fn try_fill(&mut self, order: &Order, bar: &Bar) -> Result<Fill, CancelReason> {
        let price = match_price(order.action, order.order_type, order.price, bar)
            .ok_or(CancelReason::Unfilled)?;
        let held = match order.action {
            Action::Sell => Some(self.portfolio.shares_long),
            Action::ShortCover => Some(self.portfolio.shares_short),
            _ => None,
        };
        let mut quantity = order.quantity;
        let mut clamped_from = order.clamped_from;
        if let Some(held) = held {
            if held == 0 {
                return Err(CancelReason::EmptyAfterClamp);
            }
            if held < quantity {
                clamped_from = clamped_from.or(Some(quantity));
                self.log(AuditEvent::OrderClamped {
                    date: bar.session_date,
                    order_id: order.id,
                    requested: quantity,
                    clamped_to: held,
                });
                quantity = held;
            }
        }
        if order.action.is_buy_side() && price.times(quantity) > self.portfolio.cash {
            return Err(CancelReason::GapReject);
        }
        Ok(Fill {
            order_id: order.id,
            action: order.action,
            executed_at: bar.session_date,
            fill_price: price,
            quantity,
            clamped_from,
        })
    }

    fn apply(&mut self, fill: &Fill) {
        self.portfolio.cash += fill.cash_delta();
        let p = &mut self.portfolio;
        match fill.action {
            Action::Buy => p.shares_long += fill.quantity,
            Action::Sell => p.shares_long -= fill.quantity,
            Action::Short => p.shares_short += fill.quantity,
            Action::ShortCover => p.shares_short -= fill.quantity,
        }
        debug_assert!(!p.cash.is_negative());
    }

    fn cover_at_close(&mut self, bar: &Bar, fills: &mut Vec<Fill>) {
        let close = bar.close;
        let date = bar.session_date;
        let short = self.portfolio.shares_short;
        let mut funded_by_sale = None;
        let shortfall = close.times(short) - self.portfolio.cash;
        if shortfall.is_positive() && self.portfolio.shares_long > 0 {
            // Smallest whole-share sale that closes the gap.
            let need = (shortfall.raw() + close.raw() - 1) / close.raw();
            let q = (need as u64).min(self.portfolio.shares_long);
            let sale = Fill {
                order_id: self.fresh_id(),
                action: Action::Sell,
                executed_at: date,
                fill_price: close,
                quantity: q,
                clamped_from: None,
            };
            self.apply(&sale);
            fills.push(sale.clone());
            funded_by_sale = Some(sale);
        }
        let q = short.min(close.max_quantity(self.portfolio.cash));
        let fill = Fill {
            order_id: self.fresh_id(),
            action: Action::ShortCover,
            executed_at: date,
            fill_price: close,
            quantity: q,
            clamped_from: None,
        };
        if q > 0 {
            self.apply(&fill);
            fills.push(fill.clone());
        }
        self.log(AuditEvent::ForcedCover {
            date,
            fill,
            funded_by_sale,
            uncovered: short - q,
        });
    }

    fn fresh_id(&mut self) -> OrderId {
        let id = OrderId(self.next_id);
        self.next_id += 1;
        id
    }

    fn summarize(&mut self, bar: &Bar) {
        let p = self.portfolio;
        self.log(AuditEvent::SessionSummary {
            date: bar.session_date,
            close: bar.close,
            cash: p.cash,
            shares_long: p.shares_long,
            shares_short: p.shares_short,
            portfolio_value: portfolio_value(&p, bar.close),
            gross_exposure: bar.close.times(p.shares_long + p.shares_short),
        });
    }

    fn result(&self, bar: &Bar, fills: Vec<Fill>, cancelled: Vec<Cancellation>) -> SessionResult {
        let p = self.portfolio;
        SessionResult {
            date: bar.session_date,
            fills,
            cancelled,
            portfolio: p,
            portfolio_value: portfolio_value(&p, bar.close),
            gross_exposure: bar.close.times(p.shares_long + p.shares_short),
        }
    }

    /// The audit trail as JSONL with stable field order.
    pub fn audit_jsonl(&self) -> String {
        audit_to_jsonl(&self.audit)
    }
}

pub fn audit_to_jsonl(records: &[AuditRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("audit records serialize") + "\n")
        .collect()
}

pub fn parse_audit_jsonl(text: &str) -> Result<Vec<AuditRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// All fills recorded in an audit trail, forced covers included, in order.
pub fn fills_from_audit(records: &[AuditRecord]) -> Vec<Fill> {
    let mut out = Vec::new();
    for r in records {
        match &r.event {
            AuditEvent::Fill { fill, .. } => out.push(fill.clone()),
            AuditEvent::ForcedCover {
                fill,
                funded_by_sale,
                ..
            } => {
                if let Some(s) = funded_by_sale {
                    out.push(s.clone());
                }
                if fill.quantity > 0 {
                    out.push(fill.clone());
                }
            }
            _ => {}
        }
    }
    out
}
