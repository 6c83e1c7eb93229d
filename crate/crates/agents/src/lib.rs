//! Model gateway, prompt templates, analyst and trading agents, and the
//! prompt optimization loop.

pub mod gateway;
pub mod opro;
pub mod pipeline;
pub mod prompts;
pub mod template;
