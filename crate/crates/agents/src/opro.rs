//! Windowed prompt optimization of the trader's initial template, and the
//! periodic reflection agent.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tradeloop_core::Money;

use crate::gateway::{ChatRequest, Gateway, Message};
use crate::pipeline::{AgentError, AnalystReport, Author, SessionInfo, StepTags};
use crate::prompts::PromptSet;
use crate::template::{Context, Template};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_REFLECTION_INTERVAL: usize = 5;

/// Literal text the optimizer prompt shows where it talks about template
/// syntax; passed as values so the optimizer template itself stays free of
/// raw braces.
pub const PLACEHOLDER_TOKEN: &str = "{{ variable_name }}";
pub const CONDITIONAL_TOKEN: &str = "{% if %}";

/// `clip(50 + 250·roi, 0, 100)`: −20% maps to 0, flat to 50, +20% to 100.
pub fn window_score(roi: f64) -> f64 {
    (50.0 + 250.0 * roi).clamp(0.0, 100.0)
}

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Steps at which windows close for a run of `n_steps`: every `k`th step,
/// plus the last step when it is not a multiple of `k`.
pub fn window_boundaries(n_steps: usize, k: usize) -> Vec<usize> {
    assert!(k >= 1, "window length must be positive");
    let mut out: Vec<usize> = (1..=n_steps / k).map(|i| i * k).collect();
    if !n_steps.is_multiple_of(k) {
        out.push(n_steps);
    }
    out
}

/// Whether the window closing at `step` should produce a template update.
/// The last window never does: no later step would use the result.
pub fn triggers_update(step: usize, n_steps: usize, k: usize) -> bool {
    step.is_multiple_of(k) && step < n_steps
}

pub fn reflection_due(step: usize, n_steps: usize, interval: usize) -> bool {
    interval > 0 && step.is_multiple_of(interval) && step < n_steps
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiMode {
    /// Since the run started.
    #[default]
    Cumulative,
    /// Since the window started.
    Window,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringWindow {
    pub start_step: usize,
    pub end_step: usize,
    pub v_start: Money,
    pub v_end: Money,
    pub roi: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OproError {
    #[error("base portfolio value {0} is not positive")]
    NonPositiveBase(Money),
}

/// Scores the window `(start_step, end_step]`. `v_start` is the value the
/// ROI is measured from: the inception value in cumulative mode.
pub fn close_window(
    start_step: usize,
    end_step: usize,
    v_start: Money,
    v_end: Money,
) -> Result<ScoringWindow, OproError> {
    if !v_start.is_positive() {
        return Err(OproError::NonPositiveBase(v_start));
    }
    let roi = (v_end - v_start).to_f64() / v_start.to_f64();
    Ok(ScoringWindow { start_step, end_step, v_start, v_end, roi, score: round1(window_score(roi)) })
}

pub fn sha256_hex(text: &str) -> String {
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

/// One template the loop has seen, live or rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub iteration: u32,
    /// Latest window score while this template was live.
    pub score: Option<f64>,
    pub accepted: bool,
    pub reject_reason: Option<String>,
    pub analysis: Option<String>,
    pub improvements: Option<String>,
    pub impact: Option<String>,
    pub template_sha: String,
    pub template_text: String,
}

impl PromptRecord {
    fn seed(template: &Template) -> Self {
        PromptRecord {
            iteration: 1,
            score: None,
            accepted: true,
            reject_reason: None,
            analysis: None,
            improvements: None,
            impact: None,
            template_sha: sha256_hex(template.body()),
            template_text: template.body().to_string(),
        }
    }
}

/// Accepted and scored records, lowest score first (ties by iteration),
/// each with its full template text.
pub fn history_text(ledger: &[PromptRecord], ascending: bool) -> String {
    let mut scored: Vec<&PromptRecord> = ledger.iter().filter(|r| r.accepted && r.score.is_some()).collect();
    scored.sort_by(|a, b| {
        let (x, y) = (a.score.unwrap(), b.score.unwrap());
        let by_score = if ascending { x.total_cmp(&y) } else { y.total_cmp(&x) };
        by_score.then(a.iteration.cmp(&b.iteration))
    });
    let mut out = String::new();
    for r in scored {
        let _ = writeln!(out, "### Iteration {} | Score {:.1}", r.iteration, r.score.unwrap());
        let _ = writeln!(out, "```\n{}\n```", r.template_text.trim_end());
    }
    out.trim_end().to_string()
}

pub fn build_meta_prompt(optimizer: &Template, ledger: &[PromptRecord], ascending: bool) -> Result<String, AgentError> {
    let ctx = Context::new()
        .text("history_text", history_text(ledger, ascending))
        .text("placeholder_token", PLACEHOLDER_TOKEN)
        .text("conditional_token", CONDITIONAL_TOKEN);
    optimizer
        .render_text(&ctx)
        .map_err(|source| AgentError::Template { agent: Author::Optimizer, source })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerOutput {
    pub performance_analysis: String,
    pub optimized_prompt: String,
    pub key_improvements: String,
    pub expected_impact: String,
}

const OUTPUT_KEYS: [&str; 4] = ["performance_analysis", "optimized_prompt", "key_improvements", "expected_impact"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProposalError {
    #[error("BAD_FENCE: no ```json block in the reply")]
    BadFence,
    #[error("NOT_OBJECT: {0}")]
    NotObject(String),
    #[error("MISSING_KEY({0})")]
    MissingKey(String),
    #[error("EXTRA_KEY({0})")]
    ExtraKey(String),
    #[error("{0} must be a string")]
    NotString(String),
}

/// Reads the fenced JSON object from an optimizer reply.
pub fn parse_proposal(reply: &str) -> Result<OptimizerOutput, ProposalError> {
    let lower = reply.to_ascii_lowercase();
    let open = lower.find("```json").ok_or(ProposalError::BadFence)?;
    let body = &reply[open + "```json".len()..];
    let body = match body.find("```") {
        Some(close) => &body[..close],
        None => body,
    };
    let value: serde_json::Value =
        serde_json::from_str(body.trim()).map_err(|e| ProposalError::NotObject(e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| ProposalError::NotObject("top level is not an object".into()))?;
    if let Some(k) = obj.keys().find(|k| !OUTPUT_KEYS.contains(&k.as_str())) {
        return Err(ProposalError::ExtraKey(k.clone()));
    }
    let field = |k: &str| -> Result<String, ProposalError> {
        match obj.get(k) {
            Some(serde_json::Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(ProposalError::NotString(k.to_string())),
            None => Err(ProposalError::MissingKey(k.to_string())),
        }
    };
    let mut prompt = field("optimized_prompt")?;
    // Replies sometimes escape twice, leaving a literal backslash-n.
    if !prompt.contains('\n') && prompt.contains("\\n") {
        prompt = prompt.replace("\\n", "\n").replace("\\\"", "\"");
    }
    Ok(OptimizerOutput {
        performance_analysis: field("performance_analysis")?,
        optimized_prompt: prompt,
        key_improvements: field("key_improvements")?,
        expected_impact: field("expected_impact")?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Rejection {
    #[error("UNPARSEABLE_TEMPLATE: {0}")]
    Unparseable(String),
    #[error("MISSING_PLACEHOLDER({})", .0.join(", "))]
    MissingPlaceholder(Vec<String>),
    #[error("EXTRA_PLACEHOLDER({})", .0.join(", "))]
    ExtraPlaceholder(Vec<String>),
}

/// Accepts `candidate` only if it parses and names exactly the placeholders
/// and conditions of `current`.
pub fn validate_candidate(current: &Template, candidate: &str) -> Result<Template, Rejection> {
    let t = Template::parse(current.name(), candidate).map_err(|e| Rejection::Unparseable(e.to_string()))?;
    let want = current.placeholders();
    let got = t.placeholders();
    let missing: Vec<String> = want.difference(&got).cloned().collect();
    if !missing.is_empty() {
        return Err(Rejection::MissingPlaceholder(missing));
    }
    let extra: Vec<String> = got.difference(&want).cloned().collect();
    if !extra.is_empty() {
        return Err(Rejection::ExtraPlaceholder(extra));
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OproConfig {
    pub k: usize,
    pub roi_mode: RoiMode,
    /// Extra asks after a reply that cannot be parsed or validated.
    pub max_reasks: u32,
    pub ascending: bool,
}

impl Default for OproConfig {
    fn default() -> Self {
        OproConfig { k: DEFAULT_K, roi_mode: RoiMode::Cumulative, max_reasks: 2, ascending: true }
    }
}

/// Outcome of one optimizer invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Update {
    Accepted { iteration: u32 },
    Rejected { iteration: u32, reason: String },
}

/// The prompt-evolution state of one run.
#[derive(Debug, Clone)]
pub struct PromptOptimizer {
    pub config: OproConfig,
    live: Template,
    live_iteration: u32,
    ledger: Vec<PromptRecord>,
    windows: Vec<ScoringWindow>,
    invocations: usize,
}

impl PromptOptimizer {
    pub fn new(initial: Template, config: OproConfig) -> Self {
        let seed = PromptRecord::seed(&initial);
        PromptOptimizer { config, live: initial, live_iteration: 1, ledger: vec![seed], windows: Vec::new(), invocations: 0 }
    }

    pub fn live(&self) -> &Template {
        &self.live
    }

    pub fn ledger(&self) -> &[PromptRecord] {
        &self.ledger
    }

    pub fn windows(&self) -> &[ScoringWindow] {
        &self.windows
    }

    pub fn invocations(&self) -> usize {
        self.invocations
    }

    pub fn ledger_jsonl(&self) -> String {
        self.ledger.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }

    /// Closes the window ending at `end_step` and scores the live template
    /// with it.
    pub fn close_window(
        &mut self,
        end_step: usize,
        v_inception: Money,
        v_window_start: Money,
        v_now: Money,
    ) -> Result<&ScoringWindow, OproError> {
        let start_step = self.windows.last().map_or(0, |w| w.end_step);
        let base = match self.config.roi_mode {
            RoiMode::Cumulative => v_inception,
            RoiMode::Window => v_window_start,
        };
        let w = close_window(start_step, end_step, base, v_now)?;
        let live = self.live_iteration;
        if let Some(r) = self.ledger.iter_mut().find(|r| r.iteration == live) {
            r.score = Some(w.score);
        }
        self.windows.push(w);
        Ok(self.windows.last().unwrap())
    }

    /// Asks the optimizer for a new template. A reply that fails to parse
    /// or validate is re-asked up to `max_reasks` times; after that the
    /// live template stays.
    pub fn optimize(&mut self, gw: &mut Gateway, prompts: &PromptSet, tags: &StepTags) -> Result<Update, AgentError> {
        self.invocations += 1;
        let meta = build_meta_prompt(&prompts.optimizer, &self.ledger, self.config.ascending)?;
        let iteration = self.ledger.iter().map(|r| r.iteration).max().unwrap_or(0) + 1;
        let mut messages = vec![Message::user(meta)];
        let mut last_problem = String::new();
        let mut last_output: Option<OptimizerOutput> = None;
        for _ in 0..=self.config.max_reasks {
            let req = ChatRequest::new("", messages.clone())
                .tag("role", Author::Optimizer.as_str())
                .tag("run", tags.run_id.clone())
                .tag("step", tags.step.to_string())
                .tag("date", tags.date.to_string());
            let reply = gw.complete(req).map_err(|source| AgentError::Gateway {
                agent: Author::Optimizer,
                step: format!("step {} ({})", tags.step, tags.date),
                source,
            })?;
            messages.push(Message::assistant(reply.text.clone()));
            let problem = match parse_proposal(&reply.text) {
                Ok(out) => match validate_candidate(&self.live, &out.optimized_prompt) {
                    Ok(t) => {
                        self.ledger.push(PromptRecord {
                            iteration,
                            score: None,
                            accepted: true,
                            reject_reason: None,
                            analysis: Some(out.performance_analysis),
                            improvements: Some(out.key_improvements),
                            impact: Some(out.expected_impact),
                            template_sha: sha256_hex(t.body()),
                            template_text: t.body().to_string(),
                        });
                        self.live = t;
                        self.live_iteration = iteration;
                        return Ok(Update::Accepted { iteration });
                    }
                    Err(rej) => {
                        last_output = Some(out);
                        rej.to_string()
                    }
                },
                Err(e) => e.to_string(),
            };
            messages.push(Message::user(format!(
                "The reply could not be applied: {problem}. Return the four keys in a ```json block and keep \
                 every placeholder of the original template exactly."
            )));
            last_problem = problem;
        }
        let text = last_output.as_ref().map(|o| o.optimized_prompt.clone()).unwrap_or_default();
        self.ledger.push(PromptRecord {
            iteration,
            score: None,
            accepted: false,
            reject_reason: Some(last_problem.clone()),
            analysis: last_output.as_ref().map(|o| o.performance_analysis.clone()),
            improvements: last_output.as_ref().map(|o| o.key_improvements.clone()),
            impact: last_output.as_ref().map(|o| o.expected_impact.clone()),
            template_sha: sha256_hex(&text),
            template_text: text,
        });
        Ok(Update::Rejected { iteration, reason: last_problem })
    }
}

/// Inputs for one reflection: a summary of the period and the step-by-step
/// decision log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReflectionInput {
    pub interval: usize,
    pub period_summary: String,
    pub complete_history: String,
}

/// Renders and sends the reflection prompt; each reflection is a fresh,
/// single-turn call.
pub fn reflect(
    gw: &mut Gateway,
    prompts: &PromptSet,
    info: &SessionInfo,
    input: &ReflectionInput,
    tags: &StepTags,
) -> Result<AnalystReport, AgentError> {
    let ctx = Context::new()
        .text("instrument", &info.instrument)
        .text("reflection_interval", input.interval.to_string())
        .text("current_time", info.now_text())
        .text("action_interval", info.interval_text())
        .text("period_summary", &input.period_summary)
        .text("complete_history", &input.complete_history);
    let r = prompts
        .reflection
        .render(&ctx)
        .map_err(|source| AgentError::Template { agent: Author::Reflection, source })?;
    let req = ChatRequest::new(r.system_text, vec![Message::user(r.user_text)])
        .tag("role", Author::Reflection.as_str())
        .tag("run", tags.run_id.clone())
        .tag("step", tags.step.to_string())
        .tag("date", tags.date.to_string());
    let resp = gw.complete(req).map_err(|source| AgentError::Gateway {
        agent: Author::Reflection,
        step: format!("step {} ({})", tags.step, tags.date),
        source,
    })?;
    Ok(AnalystReport { author: Author::Reflection, as_of: tags.date, text: resp.text.trim().to_string(), sections: BTreeMap::new() })
}
