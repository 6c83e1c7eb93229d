//! Core simulation pieces: bar data, technical indicators, bar-level order
//! execution, performance metrics and rule-based baseline strategies.

pub mod execution;
pub mod indicators;
pub mod market_data;
pub mod metrics;
pub mod money;
pub mod strategies;

pub use money::Money;
