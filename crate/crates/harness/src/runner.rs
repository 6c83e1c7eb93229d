//! One run: bars and news in, analyst reports and trader decisions through
//! the engine, windowed scoring and prompt updates along the way.
//!
//! Decision step `j` is taken before its execution session opens. The first
//! step sees only history up to the session before the window; every later
//! step runs after the close of the previous session and sees that bar.

use std::fmt::Write as _;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use tradeloop_agents::gateway::{
    AuditClock, ChatProvider, Gateway, GatewayRecord, HttpProvider, ReplayProvider, Route, ScriptStep, ScriptedProvider,
};
use tradeloop_agents::opro::{
    reflect, reflection_due, sha256_hex, triggers_update, OproConfig, PromptOptimizer, ReflectionInput, ScoringWindow,
    Update,
};
use tradeloop_agents::pipeline::{
    recent_activity, AgentError, BarView, DecisionContext, FundamentalAnalyst, MarketAnalyst, NewsAnalyst, NewsItem,
    SessionInfo, StepTags, TradingAgent,
};
use tradeloop_core::execution::{fills_from_audit, Engine, Fill, OrderRequest};
use tradeloop_core::metrics::{compute_report, EquityCurve, MetricReport};
use tradeloop_core::Money;

use crate::config::{ExperimentConfig, ProviderConfig, ProviderKind, ROLES};
use crate::data::ExperimentData;
use crate::mock::MockProvider;
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPlan {
    pub index: usize,
    pub run_id: String,
    pub seed: u64,
}

/// Run ids and provider seeds, all drawn from the experiment seed.
pub fn run_plans(cfg: &ExperimentConfig) -> Vec<RunPlan> {
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    (0..cfg.runs)
        .map(|index| {
            let seed: u64 = rng.gen();
            RunPlan { index, run_id: format!("run{:02}-{:08x}", index + 1, seed >> 32), seed }
        })
        .collect()
}

fn provider(p: &ProviderConfig, seed: u64) -> Result<Box<dyn ChatProvider>, HarnessError> {
    Ok(match p.kind {
        ProviderKind::Mock => Box::new(MockProvider::new(seed)),
        ProviderKind::Scripted => {
            let path = p.script.as_ref().ok_or_else(|| HarnessError::Config("scripted provider needs script".into()))?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
            let steps: Vec<ScriptStep> = serde_json::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
            Box::new(ScriptedProvider::new(steps, p.strict))
        }
        ProviderKind::Http => Box::new(HttpProvider::new(
            p.base_url.clone().unwrap_or_default(),
            p.api_key_env().map_err(HarnessError::Config)?,
            std::time::Duration::from_secs(p.timeout_secs),
        )),
    })
}

/// One route per configured role. With `replay`, every route answers from
/// the recorded log but keeps its model id and params, so request hashes
/// match the original run.
pub fn build_gateway(
    cfg: &ExperimentConfig,
    seed: u64,
    replay: Option<&[GatewayRecord]>,
) -> Result<Gateway, HarnessError> {
    let route = |role: &str, offset: u64| -> Result<Route, HarnessError> {
        let p = &cfg.providers[role];
        let provider: Box<dyn ChatProvider> = match replay {
            Some(records) => Box::new(ReplayProvider::from_records(records)),
            None => provider(p, seed.wrapping_add(offset))?,
        };
        Ok(Route { provider, model_id: p.model.clone(), params: p.params.clone() })
    };
    let wall = replay.is_none() && cfg.providers.values().any(|p| p.kind == ProviderKind::Http);
    let mut gw = Gateway::new(route("default", 0)?).with_clock(if wall { AuditClock::Wall } else { AuditClock::Logical });
    for (i, role) in ROLES.iter().enumerate() {
        if cfg.providers.contains_key(*role) {
            gw = gw.with_route(role, route(role, i as u64 + 1)?);
        }
    }
    Ok(gw)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<String>,
}

/// One line of `decisions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub as_of: NaiveDate,
    pub session: NaiveDate,
    pub template_sha: String,
    pub analysts: Vec<String>,
    pub reflection_used: bool,
    pub orders: Vec<OrderRequest>,
    pub submissions: Vec<Submission>,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    pub used_initial_template: bool,
    /// Portfolio value at the close of the last session this step covers.
    pub value_after: Money,
}

/// Everything a run produces, rendered to the bytes that go to disk.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub run_id: String,
    pub sessions: usize,
    pub engine_jsonl: String,
    pub gateway_jsonl: String,
    pub opro_jsonl: String,
    pub decisions_jsonl: String,
    pub equity_csv: String,
    pub report: Option<MetricReport>,
    pub windows: Vec<ScoringWindow>,
    pub optimizer_calls: usize,
    /// Set when the run stopped early; the other fields hold what was
    /// produced up to that point.
    pub failure: Option<String>,
    pub failure_kind: Option<FailureKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Provider,
    Data,
    Config,
    Engine,
}

impl RunOutput {
    pub fn error(&self) -> Option<HarnessError> {
        let msg = format!("{}: {}", self.run_id, self.failure.as_deref()?);
        Some(match self.failure_kind? {
            FailureKind::Provider => HarnessError::Provider(msg),
            FailureKind::Data => HarnessError::Data(msg),
            FailureKind::Config => HarnessError::Config(msg),
            FailureKind::Engine => HarnessError::Run(msg),
        })
    }
}

fn classify(e: &AgentError) -> FailureKind {
    match e {
        AgentError::Gateway { .. } => FailureKind::Provider,
        AgentError::Template { .. } => FailureKind::Config,
        AgentError::Input { .. } => FailureKind::Data,
    }
}

fn utc(t: NaiveDateTime) -> DateTime<Utc> {
    DateTime::from_naive_utc_and_offset(t, Utc)
}

fn news_between(news: &[NewsItem], after: NaiveDateTime, upto: NaiveDateTime) -> Vec<NewsItem> {
    let (a, b) = (utc(after), utc(upto));
    news.iter().filter(|n| n.published > a && n.published <= b).cloned().collect()
}

fn order_text(o: &OrderRequest) -> String {
    match o.price {
        Some(p) => format!("{} {} {} @ {}", o.action, o.quantity, o.order_type, p.format_2dp()),
        None => format!("{} {} {}", o.action, o.quantity, o.order_type),
    }
}

fn fill_text(f: &Fill) -> String {
    format!("{} {} @ {}", f.action, f.quantity, f.fill_price.format_2dp())
}

fn pct(from: Money, to: Money) -> f64 {
    (to - from).to_f64() / from.to_f64() * 100.0
}

/// Summary and step-by-step history handed to the reflection prompt.
fn reflection_input(logs: &[StepLog], fills: &[Fill], interval: usize, initial: Money) -> ReflectionInput {
    let period = &logs[logs.len().saturating_sub(interval)..];
    let start_value = logs.len().checked_sub(interval + 1).map_or(initial, |i| logs[i].value_after);
    let end_value = logs.last().map_or(initial, |l| l.value_after);
    let first = &period[0];
    let last = &period[period.len() - 1];
    let period_fills: Vec<&Fill> = fills.iter().filter(|f| f.executed_at >= first.session && f.executed_at <= last.session).collect();
    let period_summary = format!(
        "Steps {}-{} (sessions {} to {}): portfolio value {} -> {} ({:+.2}%), {} orders submitted, {} fills.",
        first.step,
        last.step,
        first.session,
        last.session,
        start_value.format_2dp(),
        end_value.format_2dp(),
        pct(start_value, end_value),
        period.iter().map(|l| l.orders.len()).sum::<usize>(),
        period_fills.len()
    );
    let mut history = String::new();
    for l in logs {
        let orders = if l.orders.is_empty() { "none".to_string() } else { l.orders.iter().map(order_text).collect::<Vec<_>>().join("; ") };
        let done: Vec<String> = fills.iter().filter(|f| f.executed_at == l.session).map(fill_text).collect();
        let done = if done.is_empty() { "none".to_string() } else { done.join("; ") };
        let _ = writeln!(
            history,
            "Step {} ({}): orders {orders} | fills {done} | value {}",
            l.step,
            l.session,
            l.value_after.format_2dp()
        );
    }
    ReflectionInput { interval, period_summary, complete_history: history.trim_end().to_string() }
}

struct Loop<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a ExperimentData,
    run_id: &'a str,
    gw: Gateway,
    engine: Engine,
    market: MarketAnalyst,
    news: NewsAnalyst,
    fundamental: FundamentalAnalyst,
    trader: TradingAgent,
    optimizer: PromptOptimizer,
    logs: Vec<StepLog>,
    fund_text: Option<String>,
    pending_reflection: Option<String>,
    /// Decision time of the previous step; news after it is new.
    last_now: Option<NaiveDateTime>,
}

impl<'a> Loop<'a> {
    fn info(&self, now: NaiveDateTime) -> SessionInfo {
        SessionInfo {
            instrument: self.cfg.instrument.clone(),
            window_start: self.cfg.window_start,
            window_end: self.cfg.window_end,
            now,
            action_interval: self.cfg.action_interval,
        }
    }

    /// The decision for step `step`, executed in session `idx`.
    fn decide(&mut self, step: usize, idx: usize) -> Result<(), (FailureKind, String)> {
        let clock = self.cfg.clock;
        let session = self.data.sessions[idx];
        let history = self.data.bars.up_to(session.pred_opt().expect("session has a predecessor"));
        let last_bar = history.last().cloned().expect("coverage check guarantees a prior bar");
        let as_of = last_bar.session_date;
        let now = if idx == 0 { session.and_time(clock.open_utc) } else { as_of.and_time(clock.close_utc) };
        let news_from = self.last_now.unwrap_or_else(|| as_of.and_time(clock.close_utc));
        self.last_now = Some(now);
        let info = self.info(now);
        let tags = StepTags { run_id: self.run_id.to_string(), step, date: as_of };
        let agent = |e: AgentError| (classify(&e), e.to_string());
        let prompts = &self.data.prompts;
        let mut analysts = Vec::new();

        let market_text = if self.cfg.ablation.no_market {
            None
        } else {
            analysts.push("market".to_string());
            Some(self.market.analyze(&mut self.gw, prompts, &info, &history, &tags).map_err(agent)?.text)
        };
        let news_text = if self.cfg.ablation.no_news {
            None
        } else {
            let batch = news_between(&self.data.news, news_from, now);
            let report = self.news.analyze(&mut self.gw, prompts, &info, &batch, &tags).map_err(agent)?;
            if report.is_some() {
                analysts.push("news".to_string());
            }
            report.map(|r| r.text)
        };
        if !self.cfg.ablation.no_fundamental {
            let report = self
                .fundamental
                .analyze(&mut self.gw, prompts, &info, &self.data.fundamentals, &tags)
                .map_err(agent)?;
            if let Some(r) = report {
                analysts.push("fundamental".to_string());
                self.fund_text = Some(r.text);
            }
        }
        let reflection = self.pending_reflection.take();
        let reflection_used = reflection.is_some();

        let portfolio = *self.engine.portfolio();
        let fills = fills_from_audit(self.engine.audit());
        let ctx = DecisionContext {
            instrument: self.cfg.instrument.clone(),
            window_start: self.cfg.window_start,
            window_end: self.cfg.window_end,
            now,
            action_interval: self.cfg.action_interval,
            bar: (idx > 0).then(|| BarView::from(&last_bar)),
            market_analysis: market_text,
            news_analysis: news_text,
            fund_analysis: self.fund_text.clone(),
            reflection_analysis: reflection,
            shares_long: portfolio.shares_long,
            shares_short: portfolio.shares_short,
            portfolio_cash: portfolio.cash,
            executed_orders: recent_activity(&fills),
        };
        let live = self.optimizer.live().clone();
        let decision = self.trader.decide(&mut self.gw, &live, prompts, &ctx, &tags).map_err(agent)?;
        let submissions = decision
            .orders
            .iter()
            .map(|o| match self.engine.submit(o.clone(), last_bar.close, as_of) {
                Ok(id) => Submission { order_id: Some(id.0), rejected: None },
                Err(reason) => Submission { order_id: None, rejected: Some(reason.to_string()) },
            })
            .collect();
        self.logs.push(StepLog {
            step,
            as_of,
            session,
            template_sha: sha256_hex(live.body()),
            analysts,
            reflection_used,
            orders: decision.orders,
            submissions,
            attempts: decision.attempts,
            parse_error: decision.parse_error,
            used_initial_template: decision.used_initial_template,
            value_after: Money::ZERO,
        });
        Ok(())
    }

    /// Bookkeeping once the last session of step `step` has closed.
    fn finish_step(&mut self, step: usize, n_steps: usize, idx: usize, value: Money) -> Result<(), (FailureKind, String)> {
        if let Some(l) = self.logs.last_mut() {
            l.value_after = value;
        }
        let k = self.cfg.opro_k;
        let agent = |e: AgentError| (classify(&e), e.to_string());
        let session = self.data.sessions[idx];
        let tags = StepTags { run_id: self.run_id.to_string(), step, date: session };
        if step.is_multiple_of(k) || step == n_steps {
            let window_start_value = self.optimizer.windows().last().map_or(self.cfg.initial_cash, |w| w.v_end);
            self.optimizer
                .close_window(step, self.cfg.initial_cash, window_start_value, value)
                .map_err(|e| (FailureKind::Engine, e.to_string()))?;
        }
        if self.cfg.prompting_mode.optimizes() && triggers_update(step, n_steps, k) {
            let update = self.optimizer.optimize(&mut self.gw, &self.data.prompts, &tags).map_err(agent)?;
            if matches!(update, Update::Accepted { .. }) {
                self.trader.reset();
            }
        }
        let interval = self.cfg.reflection_interval;
        if self.cfg.prompting_mode.reflects() && reflection_due(step, n_steps, interval) {
            let fills = fills_from_audit(self.engine.audit());
            let input = reflection_input(&self.logs, &fills, interval, self.cfg.initial_cash);
            let now = session.and_time(self.cfg.clock.close_utc);
            let info = self.info(now);
            let report = reflect(&mut self.gw, &self.data.prompts, &info, &input, &tags).map_err(agent)?;
            self.pending_reflection = Some(report.text);
        }
        Ok(())
    }
}

/// Number of decision steps for `n_sessions` at the configured interval.
pub fn decision_steps(n_sessions: usize, action_interval: usize) -> usize {
    n_sessions.div_ceil(action_interval)
}

pub fn execute_run(cfg: &ExperimentConfig, data: &ExperimentData, run_id: &str, gw: Gateway) -> RunOutput {
    let sessions = &data.sessions;
    let n = sessions.len();
    let m = cfg.action_interval;
    let n_steps = decision_steps(n, m);
    let opro = OproConfig { k: cfg.opro_k, roi_mode: cfg.roi_mode, ..OproConfig::default() };
    let mut lp = Loop {
        cfg,
        data,
        run_id,
        gw,
        engine: Engine::new(cfg.initial_cash, sessions[0]),
        market: MarketAnalyst::default(),
        news: NewsAnalyst::default(),
        fundamental: FundamentalAnalyst::default(),
        trader: TradingAgent::default(),
        optimizer: PromptOptimizer::new(data.cta_initial.clone(), opro),
        logs: Vec::new(),
        fund_text: None,
        pending_reflection: None,
        last_now: None,
    };
    let mut failure = None;
    for idx in 0..n {
        let step = idx / m + 1;
        if idx % m == 0 {
            if let Err(e) = lp.decide(step, idx) {
                failure = Some(e);
                break;
            }
        }
        let bar = &data.bars.bars()[data.bars.position(sessions[idx]).expect("coverage check guarantees session bars")];
        let result = if idx + 1 == n { lp.engine.step_final_session(bar) } else { lp.engine.step_session(bar) };
        let value = match result {
            Ok(r) => r.portfolio_value,
            Err(e) => {
                failure = Some((FailureKind::Engine, e.to_string()));
                break;
            }
        };
        if (idx + 1) % m == 0 || idx + 1 == n {
            if let Err(e) = lp.finish_step(step, n_steps, idx, value) {
                failure = Some(e);
                break;
            }
        }
    }
    let audit = lp.engine.audit();
    let curve = EquityCurve::from_audit(cfg.initial_cash, audit);
    let report = compute_report(&curve, &fills_from_audit(audit)).ok();
    RunOutput {
        run_id: run_id.to_string(),
        sessions: n,
        engine_jsonl: lp.engine.audit_jsonl(),
        gateway_jsonl: lp.gw.audit_jsonl(),
        opro_jsonl: lp.optimizer.ledger_jsonl(),
        decisions_jsonl: lp.logs.iter().map(|l| serde_json::to_string(l).expect("log serializes") + "\n").collect(),
        equity_csv: curve.to_csv(),
        report: if failure.is_none() { report } else { None },
        windows: lp.optimizer.windows().to_vec(),
        optimizer_calls: lp.optimizer.invocations(),
        failure_kind: failure.as_ref().map(|f| f.0),
        failure: failure.map(|f| f.1),
    }
}
