//! A seeded stand-in model. It answers each routing role in the shape the
//! pipeline expects, with enough variety (bad formats, rejected templates)
//! to exercise the recovery paths. Same seed and same requests give the
//! same replies.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde_json::json;
use tradeloop_agents::gateway::{ChatProvider, ChatRequest, ChatResponse, GatewayError, TokenUsage};
use tradeloop_agents::pipeline::FORMAT_REMINDER;

const TRADER_PROSE: &str = "Momentum looks constructive, so I would lean long here with modest size.";

const GUIDANCE: [&str; 6] = [
    "- Scale into new positions over two sessions when the trend signal is weak",
    "- Prefer LIMIT entries near support instead of chasing the open",
    "- Cut a losing position once it gives back more than one ATR",
    "- Keep at least a quarter of the portfolio in cash during high volatility",
    "- Treat an RSI above 70 as a reason to trim, not to add",
    "- Use STOP orders to protect gains after a strong session",
];

pub struct MockProvider {
    rng: StdRng,
}

impl MockProvider {
    pub fn new(seed: u64) -> Self {
        MockProvider { rng: StdRng::seed_from_u64(seed) }
    }

    fn trader(&mut self, req: &ChatRequest) -> String {
        let text = req.last_user_text();
        let reask = text.starts_with(FORMAT_REMINDER);
        if !reask && self.rng.gen_bool(0.08) {
            return TRADER_PROSE.to_string();
        }
        let close = price_after(text, " C ").or_else(|| price_after(text, "Close: "));
        let long = number_after(text, "Long Shares: ").or_else(|| number_after(text, "Long ")).unwrap_or(0.0) as u64;
        let short = number_after(text, "Short Shares: ").or_else(|| number_after(text, "Short ")).unwrap_or(0.0) as u64;
        let mut orders = Vec::new();
        if self.rng.gen_bool(0.6) {
            for _ in 0..self.rng.gen_range(1..=2) {
                orders.push(self.order(close, long, short));
            }
        }
        let body = serde_json::to_string_pretty(&orders).expect("orders serialize");
        if self.rng.gen_bool(0.25) {
            format!("```json\n{body}\n```")
        } else {
            body
        }
    }

    fn order(&mut self, close: Option<f64>, long: u64, short: u64) -> serde_json::Value {
        let roll = self.rng.gen_range(0..100);
        let action = match roll {
            0..=39 => "BUY",
            40..=64 if long > 0 => "SELL",
            65..=79 => "SHORT",
            _ if short > 0 => "SHORT_COVER",
            _ => "BUY",
        };
        let quantity = match action {
            "SELL" => self.rng.gen_range(1..=long.max(1)),
            "SHORT_COVER" => self.rng.gen_range(1..=short.max(1)),
            _ => self.rng.gen_range(10..=120),
        };
        let (order_type, price) = match (close, self.rng.gen_range(0..100)) {
            (Some(c), 0..=24) => {
                let below = matches!(action, "BUY" | "SHORT_COVER");
                let p = if below { c * 0.99 } else { c * 1.01 };
                ("LIMIT", json!((p * 100.0).round() / 100.0))
            }
            (Some(c), 25..=39) => {
                let above = matches!(action, "BUY" | "SHORT_COVER");
                let p = if above { c * 1.015 } else { c * 0.985 };
                ("STOP", json!((p * 100.0).round() / 100.0))
            }
            _ => ("MARKET", serde_json::Value::Null),
        };
        json!({
            "action": action,
            "orderType": order_type,
            "price": price,
            "quantity": quantity,
            "explanation": format!("{} on the latest bar", action.to_lowercase()),
        })
    }

    fn optimizer(&mut self, req: &ChatRequest) -> String {
        let meta = &req.messages[0].text;
        let Some(best) = best_template(meta) else {
            return "No scored template was provided.".to_string();
        };
        let reask = req.messages.len() > 1;
        let candidate = if !reask && self.rng.gen_bool(0.2) {
            best.replace("{{ portfolio_cash }}", "the available cash")
        } else {
            let line = GUIDANCE.choose(&mut self.rng).expect("guidance is non-empty");
            format!("{}\n{line}", best.trim_end())
        };
        let obj = json!({
            "performance_analysis": "Returns over the last window were driven by entry timing.",
            "optimized_prompt": candidate,
            "key_improvements": "Added one explicit risk rule.",
            "expected_impact": "Fewer late entries and smaller drawdowns.",
        });
        format!("```json\n{}\n```", serde_json::to_string_pretty(&obj).expect("proposal serializes"))
    }

    fn analyst(&mut self, role: &str) -> String {
        let tone = ["constructive", "cautious", "neutral", "deteriorating"].choose(&mut self.rng).copied().unwrap_or("neutral");
        match role {
            "market" => format!(
                "Trend: {tone}. Price is holding above the 20-day average with {} volume. Key levels: nearest support and resistance as listed.",
                ["rising", "fading", "average"].choose(&mut self.rng).copied().unwrap_or("average")
            ),
            "news" => format!(
                "**Sentiment Assessment:** {tone}\n**Key Developments:** sector headlines only\n**Market Relevance:** moderate\n**Source Analysis:** wire services"
            ),
            "fundamental" => format!("Fundamentals read {tone}: margins stable, leverage moderate, cash generation covers the dividend."),
            "reflection" => format!(
                "Recent decisions were {tone}. Keep position sizes consistent and resubmit orders that should persist."
            ),
            _ => "Acknowledged.".to_string(),
        }
    }
}

/// Last fenced template in the history, which is the best-scoring one when
/// the history is sorted ascending.
fn best_template(meta: &str) -> Option<String> {
    let at = meta.rfind("### Iteration ")?;
    let rest = &meta[at..];
    let open = rest.find("```\n")? + 4;
    let close = rest[open..].find("\n```")?;
    Some(rest[open..open + close].to_string())
}

fn number_after(text: &str, marker: &str) -> Option<f64> {
    let at = text.find(marker)? + marker.len();
    let digits: String = text[at..].chars().take_while(|c| c.is_ascii_digit() || *c == '.').collect();
    digits.parse().ok()
}

fn price_after(text: &str, marker: &str) -> Option<f64> {
    number_after(text, marker).filter(|p| *p > 0.0)
}

impl ChatProvider for MockProvider {
    fn kind(&self) -> &'static str {
        "mock"
    }

    fn send(&mut self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let role = req.role().unwrap_or("");
        let text = match role {
            "trader" => self.trader(req),
            "optimizer" => self.optimizer(req),
            other => self.analyst(other),
        };
        let prompt_chars: usize = req.system_text.len() + req.messages.iter().map(|m| m.text.len()).sum::<usize>();
        let mut resp = ChatResponse::text(text);
        resp.usage = Some(TokenUsage { prompt: (prompt_chars / 4) as u64, completion: (resp.text.len() / 4) as u64 });
        Ok(resp)
    }
}
