//! Chat-completion boundary. Providers are interchangeable behind
//! [`ChatProvider`]; the [`Gateway`] adds routing by agent role, retries and
//! an audit log of every request it sends.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Read;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("request has no messages")]
    EmptyRequest,
    #[error("TIMEOUT: {0}")]
    Timeout(String),
    #[error("RATE_LIMITED: {0}")]
    RateLimited(String),
    #[error("PROVIDER_ERROR: {0}")]
    Provider(String),
    #[error("SCRIPT_EXHAUSTED at call {call}")]
    ScriptExhausted { call: usize },
    #[error("SCRIPT_MISMATCH at call {call}: no remaining step matches")]
    ScriptMismatch { call: usize },
    #[error("REPLAY_MISSING: no recorded response for request {hash}")]
    ReplayMissing { hash: String },
    #[error("AUDIT_HASH_MISMATCH at line {line}: recorded {recorded}, recomputed {computed}")]
    HashMismatch { line: usize, recorded: String, computed: String },
    #[error("malformed audit log at line {line}: {reason}")]
    BadAudit { line: usize, reason: String },
}

impl GatewayError {
    fn retryable(&self) -> bool {
        matches!(self, GatewayError::Timeout(_) | GatewayError::RateLimited(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
}

impl Message {
    pub fn user(text: impl Into<String>) -> Self {
        Message { role: Role::User, text: text.into() }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Message { role: Role::Assistant, text: text.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: String,
    pub messages: Vec<Message>,
    pub model_id: String,
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

impl ChatRequest {
    pub fn new(system_text: impl Into<String>, messages: Vec<Message>) -> Self {
        ChatRequest {
            system_text: system_text.into(),
            messages,
            model_id: String::new(),
            params: BTreeMap::new(),
            tags: BTreeMap::new(),
        }
    }

    pub fn tag(mut self, key: &str, value: impl Into<String>) -> Self {
        self.tags.insert(key.to_string(), value.into());
        self
    }

    pub fn role(&self) -> Option<&str> {
        self.tags.get("role").map(String::as_str)
    }

    /// SHA-256 over what a provider receives: system text, messages, model
    /// and decode params. Tags stay out so a replay matches on content.
    pub fn request_hash(&self) -> String {
        #[derive(Serialize)]
        struct Sent<'a> {
            system_text: &'a str,
            messages: &'a [Message],
            model_id: &'a str,
            params: &'a BTreeMap<String, serde_json::Value>,
        }
        let bytes = serde_json::to_vec(&Sent {
            system_text: &self.system_text,
            messages: &self.messages,
            model_id: &self.model_id,
            params: &self.params,
        })
        .expect("request serializes");
        format!("{:x}", Sha256::digest(bytes))
    }

    /// Everything a script matcher may look at.
    pub fn full_text(&self) -> String {
        let mut s = self.system_text.clone();
        for m in &self.messages {
            s.push('\n');
            s.push_str(&m.text);
        }
        s
    }

    pub fn last_user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.text.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u64,
    pub completion: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default)]
    pub usage: Option<TokenUsage>,
    pub latency_ms: u64,
    #[serde(default)]
    pub provider_meta: BTreeMap<String, String>,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ChatResponse { text: text.into(), usage: None, latency_ms: 0, provider_meta: BTreeMap::new() }
    }
}

pub trait ChatProvider: Send {
    fn kind(&self) -> &'static str;
    fn send(&mut self, req: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

/// One scripted reply. A step matches when its 1-based call index (if set)
/// equals the current call and its substring (if set) occurs in the request.
/// Repeating steps are never used up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub response: String,
    #[serde(default)]
    pub repeat: bool,
}

impl ScriptStep {
    pub fn reply(response: impl Into<String>) -> Self {
        ScriptStep { contains: None, step: None, response: response.into(), repeat: false }
    }

    pub fn when(contains: impl Into<String>, response: impl Into<String>) -> Self {
        ScriptStep { contains: Some(contains.into()), ..Self::reply(response) }
    }

    pub fn at(step: usize, response: impl Into<String>) -> Self {
        ScriptStep { step: Some(step), ..Self::reply(response) }
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }

    fn matches(&self, call: usize, text: &str) -> bool {
        self.step.is_none_or(|s| s == call) && self.contains.as_deref().is_none_or(|c| text.contains(c))
    }
}

/// Answers from a fixed script. Each call takes the first unused step that
/// matches. Without a match, strict mode fails and lenient mode takes the
/// next unused step regardless.
#[derive(Debug, Clone)]
pub struct ScriptedProvider {
    steps: Vec<ScriptStep>,
    used: Vec<bool>,
    calls: usize,
    strict: bool,
}

impl ScriptedProvider {
    pub fn new(steps: Vec<ScriptStep>, strict: bool) -> Self {
        let used = vec![false; steps.len()];
        ScriptedProvider { steps, used, calls: 0, strict }
    }

    pub fn strict(steps: Vec<ScriptStep>) -> Self {
        Self::new(steps, true)
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn remaining(&self) -> usize {
        self.steps.iter().zip(&self.used).filter(|(s, u)| !s.repeat && !**u).count()
    }
}

impl ChatProvider for ScriptedProvider {
    fn kind(&self) -> &'static str {
        "scripted"
    }

    fn send(&mut self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.calls += 1;
        let call = self.calls;
        let text = req.full_text();
        let available = |i: usize, s: &ScriptStep| s.repeat || !self.used[i];
        let pick = self
            .steps
            .iter()
            .enumerate()
            .position(|(i, s)| available(i, s) && s.matches(call, &text))
            .or_else(|| {
                if self.strict {
                    None
                } else {
                    self.steps.iter().enumerate().position(|(i, s)| available(i, s) && !s.repeat)
                }
            });
        match pick {
            Some(i) => {
                if !self.steps[i].repeat {
                    self.used[i] = true;
                }
                Ok(ChatResponse::text(self.steps[i].response.clone()))
            }
            None if self.remaining() == 0 => Err(GatewayError::ScriptExhausted { call }),
            None => Err(GatewayError::ScriptMismatch { call }),
        }
    }
}

/// Serves responses recorded in an earlier gateway audit log, matched by
/// request hash and consumed in the order they were recorded.
#[derive(Debug, Clone, Default)]
pub struct ReplayProvider {
    responses: HashMap<String, VecDeque<ChatResponse>>,
}

impl ReplayProvider {
    pub fn from_records(records: &[GatewayRecord]) -> Self {
        let mut responses: HashMap<String, VecDeque<ChatResponse>> = HashMap::new();
        for r in records {
            if let Some(resp) = &r.response {
                responses.entry(r.request_hash.clone()).or_default().push_back(resp.clone());
            }
        }
        ReplayProvider { responses }
    }

    /// Parses and integrity-checks an audit log, then builds the provider.
    pub fn from_jsonl(text: &str) -> Result<Self, GatewayError> {
        Ok(Self::from_records(&parse_gateway_audit(text)?))
    }
}

impl ChatProvider for ReplayProvider {
    fn kind(&self) -> &'static str {
        "replay"
    }

    fn send(&mut self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let hash = req.request_hash();
        self.responses
            .get_mut(&hash)
            .and_then(VecDeque::pop_front)
            .ok_or(GatewayError::ReplayMissing { hash })
    }
}

/// An OpenAI-compatible `/chat/completions` endpoint. The key is read from
/// the named environment variable at call time and never stored.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    pub base_url: String,
    pub api_key_env: Option<String>,
    pub timeout: Duration,
}

impl HttpProvider {
    pub fn new(base_url: impl Into<String>, api_key_env: Option<String>, timeout: Duration) -> Self {
        HttpProvider { base_url: base_url.into(), api_key_env, timeout }
    }

    fn body(req: &ChatRequest) -> serde_json::Value {
        let mut messages = Vec::new();
        if !req.system_text.is_empty() {
            messages.push(serde_json::json!({"role": "system", "content": req.system_text}));
        }
        for m in &req.messages {
            messages.push(serde_json::json!({"role": m.role, "content": m.text}));
        }
        let mut body = serde_json::json!({"model": req.model_id, "messages": messages});
        for (k, v) in &req.params {
            body[k] = v.clone();
        }
        body
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<UsageBody>,
    #[serde(default)]
    model: Option<String>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct UsageBody {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl ChatProvider for HttpProvider {
    fn kind(&self) -> &'static str {
        "http"
    }

    fn send(&mut self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let key = match &self.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| GatewayError::Provider(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let mut call = agent.post(&url).header("Content-Type", "application/json");
        if let Some(k) = &key {
            call = call.header("Authorization", &format!("Bearer {k}"));
        }
        let started = Instant::now();
        let mut resp = call.send(Self::body(req).to_string()).map_err(|e| match e {
            ureq::Error::Timeout(t) => GatewayError::Timeout(t.to_string()),
            other => GatewayError::Provider(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let mut text = String::new();
        resp.body_mut()
            .as_reader()
            .read_to_string(&mut text)
            .map_err(|e| GatewayError::Provider(e.to_string()))?;
        let latency_ms = started.elapsed().as_millis() as u64;
        match status {
            200..=299 => {}
            429 => return Err(GatewayError::RateLimited(format!("status 429 from {url}"))),
            408 | 504 => return Err(GatewayError::Timeout(format!("status {status} from {url}"))),
            _ => {
                let snippet: String = text.chars().take(200).collect();
                return Err(GatewayError::Provider(format!("status {status}: {snippet}")));
            }
        }
        let body: CompletionBody =
            serde_json::from_str(&text).map_err(|e| GatewayError::Provider(format!("bad completion body: {e}")))?;
        let content = body
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::Provider("completion has no message content".into()))?;
        let mut provider_meta = BTreeMap::new();
        if let Some(m) = body.model {
            provider_meta.insert("model".into(), m);
        }
        Ok(ChatResponse {
            text: content,
            usage: body.usage.map(|u| TokenUsage { prompt: u.prompt_tokens, completion: u.completion_tokens }),
            latency_ms,
            provider_meta,
        })
    }
}

/// Attempts and waits between them: wait `i` (0-based) is
/// `base × factor^i`, so the defaults give 1s, 4s, 16s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, backoff_base_ms: 1000, backoff_factor: 4 }
    }
}

impl RetryPolicy {
    pub fn wait(&self, retry: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(u64::from(self.backoff_factor).saturating_pow(retry)))
    }
}

/// How audit timestamps are produced. Wall time makes logs differ between
/// otherwise identical runs, so scripted and replayed runs use call counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditClock {
    Wall,
    Logical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayRecord {
    pub ts: String,
    pub tags: BTreeMap<String, String>,
    pub request_hash: String,
    pub request: ChatRequest,
    pub response: Option<ChatResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub attempts: u32,
}

/// A provider with the model id and decode params it is called with.
pub struct Route {
    pub provider: Box<dyn ChatProvider>,
    pub model_id: String,
    pub params: BTreeMap<String, serde_json::Value>,
}

impl Route {
    pub fn new(provider: impl ChatProvider + 'static, model_id: impl Into<String>) -> Self {
        Route { provider: Box::new(provider), model_id: model_id.into(), params: BTreeMap::new() }
    }
}

type Sleeper = Box<dyn FnMut(Duration) + Send>;

pub struct Gateway {
    default: Route,
    by_role: BTreeMap<String, Route>,
    retry: RetryPolicy,
    sleeper: Sleeper,
    clock: AuditClock,
    records: Vec<GatewayRecord>,
}

impl Gateway {
    pub fn new(default: Route) -> Self {
        Gateway {
            default,
            by_role: BTreeMap::new(),
            retry: RetryPolicy::default(),
            sleeper: Box::new(std::thread::sleep),
            clock: AuditClock::Logical,
            records: Vec::new(),
        }
    }

    /// Sends requests tagged with `role` to `route` instead of the default.
    pub fn with_route(mut self, role: &str, route: Route) -> Self {
        self.by_role.insert(role.to_string(), route);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_sleeper(mut self, sleeper: impl FnMut(Duration) + Send + 'static) -> Self {
        self.sleeper = Box::new(sleeper);
        self
    }

    pub fn with_clock(mut self, clock: AuditClock) -> Self {
        self.clock = clock;
        self
    }

    pub fn records(&self) -> &[GatewayRecord] {
        &self.records
    }

    pub fn audit_jsonl(&self) -> String {
        gateway_audit_jsonl(&self.records)
    }

    /// Sends `req` with retries. Model id and params come from the route
    /// unless the request sets them. The request and its outcome are logged
    /// once, whatever the number of attempts.
    pub fn complete(&mut self, mut req: ChatRequest) -> Result<ChatResponse, GatewayError> {
        if req.messages.is_empty() {
            return Err(GatewayError::EmptyRequest);
        }
        let route = req
            .role()
            .and_then(|r| self.by_role.get_mut(r))
            .unwrap_or(&mut self.default);
        if req.model_id.is_empty() {
            req.model_id = route.model_id.clone();
        }
        for (k, v) in &route.params {
            req.params.entry(k.clone()).or_insert_with(|| v.clone());
        }
        let mut attempts = 0;
        let outcome = loop {
            attempts += 1;
            match route.provider.send(&req) {
                Err(e) if e.retryable() && attempts < self.retry.max_attempts => {
                    (self.sleeper)(self.retry.wait(attempts - 1));
                }
                other => break other,
            }
        };
        let ts = match self.clock {
            AuditClock::Wall => chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            AuditClock::Logical => format!("call-{:06}", self.records.len() + 1),
        };
        self.records.push(GatewayRecord {
            ts,
            tags: req.tags.clone(),
            request_hash: req.request_hash(),
            response: outcome.as_ref().ok().cloned(),
            error: outcome.as_ref().err().map(ToString::to_string),
            request: req,
            attempts,
        });
        outcome
    }
}

pub fn gateway_audit_jsonl(records: &[GatewayRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Parses a gateway log and recomputes every request hash.
pub fn parse_gateway_audit(text: &str) -> Result<Vec<GatewayRecord>, GatewayError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: GatewayRecord =
            serde_json::from_str(line).map_err(|e| GatewayError::BadAudit { line: i + 1, reason: e.to_string() })?;
        let computed = rec.request.request_hash();
        if computed != rec.request_hash {
            return Err(GatewayError::HashMismatch { line: i + 1, recorded: rec.request_hash, computed });
        }
        out.push(rec);
    }
    Ok(out)
}
