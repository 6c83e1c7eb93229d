//! The shipped prompt assets.

use crate::template::{Template, TemplateError};

pub const CTA_INITIAL: &str = include_str!("../assets/prompts/cta_initial.txt");
pub const CTA_FOLLOWUP: &str = include_str!("../assets/prompts/cta_followup.txt");
pub const MARKET_INITIAL: &str = include_str!("../assets/prompts/market_initial.txt");
pub const MARKET_FOLLOWUP: &str = include_str!("../assets/prompts/market_followup.txt");
pub const NEWS_INITIAL: &str = include_str!("../assets/prompts/news_initial.txt");
pub const NEWS_FOLLOWUP: &str = include_str!("../assets/prompts/news_followup.txt");
pub const FUNDAMENTAL_INITIAL: &str = include_str!("../assets/prompts/fundamental_initial.txt");
pub const FUNDAMENTAL_FOLLOWUP: &str = include_str!("../assets/prompts/fundamental_followup.txt");
pub const OPTIMIZER: &str = include_str!("../assets/prompts/optimizer.txt");
pub const REFLECTION: &str = include_str!("../assets/prompts/reflection.txt");

/// Every asset by its file stem, for override lookup and hashing.
pub const ALL: [(&str, &str); 10] = [
    ("cta_initial", CTA_INITIAL),
    ("cta_followup", CTA_FOLLOWUP),
    ("market_initial", MARKET_INITIAL),
    ("market_followup", MARKET_FOLLOWUP),
    ("news_initial", NEWS_INITIAL),
    ("news_followup", NEWS_FOLLOWUP),
    ("fundamental_initial", FUNDAMENTAL_INITIAL),
    ("fundamental_followup", FUNDAMENTAL_FOLLOWUP),
    ("optimizer", OPTIMIZER),
    ("reflection", REFLECTION),
];

/// The analyst, optimizer and reflection templates; the CTA initial template
/// lives separately because the optimizer rewrites it.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub cta_followup: Template,
    pub market_initial: Template,
    pub market_followup: Template,
    pub news_initial: Template,
    pub news_followup: Template,
    pub fundamental_initial: Template,
    pub fundamental_followup: Template,
    pub optimizer: Template,
    pub reflection: Template,
}

impl PromptSet {
    pub fn shipped() -> Self {
        Self::with_overrides(|_| None).expect("shipped prompt assets parse")
    }

    /// Builds the set, taking the body for a stem from `lookup` when it
    /// returns one.
    pub fn with_overrides(lookup: impl Fn(&str) -> Option<String>) -> Result<Self, TemplateError> {
        let t = |stem: &str, shipped: &str| {
            Template::parse(stem, lookup(stem).unwrap_or_else(|| shipped.to_string()))
        };
        Ok(PromptSet {
            cta_followup: t("cta_followup", CTA_FOLLOWUP)?,
            market_initial: t("market_initial", MARKET_INITIAL)?,
            market_followup: t("market_followup", MARKET_FOLLOWUP)?,
            news_initial: t("news_initial", NEWS_INITIAL)?,
            news_followup: t("news_followup", NEWS_FOLLOWUP)?,
            fundamental_initial: t("fundamental_initial", FUNDAMENTAL_INITIAL)?,
            fundamental_followup: t("fundamental_followup", FUNDAMENTAL_FOLLOWUP)?,
            optimizer: t("optimizer", OPTIMIZER)?,
            reflection: t("reflection", REFLECTION)?,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Template> {
        [
            &self.cta_followup,
            &self.market_initial,
            &self.market_followup,
            &self.news_initial,
            &self.news_followup,
            &self.fundamental_initial,
            &self.fundamental_followup,
            &self.optimizer,
            &self.reflection,
        ]
        .into_iter()
    }
}

pub fn cta_initial() -> Template {
    Template::parse("cta_initial", CTA_INITIAL).expect("shipped CTA template parses")
}
