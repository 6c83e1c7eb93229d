//! Prompt templates: `{{ name }}` substitution (with an optional
//! `| default("...")` filter) and `{% if name %}` / `{% else %}` /
//! `{% endif %}` blocks nested at most two deep. Nothing else is accepted.
//!
//! A block tag that sits alone on its line swallows that line, so
//! conditional sections do not leave blank lines behind.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

pub const MAX_DEPTH: usize = 2;

const SYSTEM_OPEN: &str = "<system_role>";
const SYSTEM_CLOSE: &str = "</system_role>";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("MALFORMED_PLACEHOLDER at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("UNBALANCED_CONDITIONAL: {0}")]
    Unbalanced(String),
    #[error("conditionals nested deeper than {MAX_DEPTH} at byte {offset}")]
    TooDeep { offset: usize },
    #[error("MISSING_KEY({0})")]
    MissingKey(String),
    #[error("UNRENDERED_PLACEHOLDER near {0:?}")]
    Unrendered(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Node {
    Text(String),
    Var { name: String, default: Option<String> },
    If { cond: String, then: Vec<Node>, otherwise: Vec<Node> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Text(String),
    Var { name: String, default: Option<String> },
    If(String, usize),
    Else(usize),
    EndIf(usize),
}

/// A value bound to a template name. Conditions test `Flag`s directly and
/// treat text as true when nonempty; an unbound condition is false.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Text(String),
    Flag(bool),
}

impl Value {
    fn truthy(&self) -> bool {
        match self {
            Value::Text(s) => !s.is_empty(),
            Value::Flag(b) => *b,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Text(s) => f.write_str(s),
            Value::Flag(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Context(BTreeMap<String, Value>);

impl Context {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn text(mut self, key: &str, value: impl Into<String>) -> Self {
        self.set_text(key, value);
        self
    }

    pub fn flag(mut self, key: &str, value: bool) -> Self {
        self.0.insert(key.to_string(), Value::Flag(value));
        self
    }

    pub fn set_text(&mut self, key: &str, value: impl Into<String>) {
        self.0.insert(key.to_string(), Value::Text(value.into()));
    }

    /// Binds `key` to `value` when present and leaves it unbound otherwise.
    pub fn maybe(mut self, key: &str, value: Option<&str>) -> Self {
        if let Some(v) = value {
            self.set_text(key, v);
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.0.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

/// The two halves of a rendered prompt: the `<system_role>` body and
/// everything else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub system_text: String,
    pub user_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    body: String,
    nodes: Vec<Node>,
}

impl Template {
    pub fn parse(name: impl Into<String>, body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        let tokens = lex(&body)?;
        let nodes = build(tokens)?;
        Ok(Template { name: name.into(), body, nodes })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Every `{{ }}` name and every `{% if %}` condition name.
    pub fn placeholders(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        collect(&self.nodes, &mut out);
        out
    }

    pub fn render(&self, ctx: &Context) -> Result<Rendered, TemplateError> {
        let text = self.render_text(ctx)?;
        Ok(split_system(&text))
    }

    /// Renders without separating the system block.
    pub fn render_text(&self, ctx: &Context) -> Result<String, TemplateError> {
        let mut out = String::new();
        // Same walk with every substituted value blanked out, so literal
        // pieces that join into "{{" across an elided block are caught.
        let mut skeleton = String::new();
        emit(&self.nodes, ctx, &mut out, &mut skeleton)?;
        for marker in ["{{", "{%"] {
            if let Some(i) = skeleton.find(marker) {
                let end = (i + 40).min(skeleton.len());
                let end = (end..=skeleton.len()).find(|&e| skeleton.is_char_boundary(e)).unwrap();
                return Err(TemplateError::Unrendered(skeleton[i..end].to_string()));
            }
        }
        Ok(out)
    }
}

pub fn extract_placeholders(body: &str) -> Result<BTreeSet<String>, TemplateError> {
    Ok(Template::parse("", body)?.placeholders())
}

fn collect(nodes: &[Node], out: &mut BTreeSet<String>) {
    for n in nodes {
        match n {
            Node::Text(_) => {}
            Node::Var { name, .. } => {
                out.insert(name.clone());
            }
            Node::If { cond, then, otherwise } => {
                out.insert(cond.clone());
                collect(then, out);
                collect(otherwise, out);
            }
        }
    }
}

fn emit(nodes: &[Node], ctx: &Context, out: &mut String, skeleton: &mut String) -> Result<(), TemplateError> {
    for n in nodes {
        match n {
            Node::Text(t) => {
                out.push_str(t);
                skeleton.push_str(t);
            }
            Node::Var { name, default } => {
                let value = match (ctx.get(name), default) {
                    (Some(v), Some(d)) if !v.truthy() => d.clone(),
                    (Some(v), _) => v.to_string(),
                    (None, Some(d)) => d.clone(),
                    (None, None) => return Err(TemplateError::MissingKey(name.clone())),
                };
                out.push_str(&value);
                skeleton.push('\u{0}');
            }
            Node::If { cond, then, otherwise } => {
                let branch = if ctx.get(cond).is_some_and(Value::truthy) { then } else { otherwise };
                emit(branch, ctx, out, skeleton)?;
            }
        }
    }
    Ok(())
}

fn split_system(text: &str) -> Rendered {
    let (Some(open), Some(close)) = (text.find(SYSTEM_OPEN), text.find(SYSTEM_CLOSE)) else {
        return Rendered { system_text: String::new(), user_text: text.to_string() };
    };
    if close < open {
        return Rendered { system_text: String::new(), user_text: text.to_string() };
    }
    let system = text[open + SYSTEM_OPEN.len()..close].trim().to_string();
    let after = &text[close + SYSTEM_CLOSE.len()..];
    let after = after.strip_prefix('\n').unwrap_or(after);
    Rendered { system_text: system, user_text: format!("{}{}", &text[..open], after) }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_var(inner: &str, offset: usize) -> Result<Token, TemplateError> {
    let bad = |reason: &str| TemplateError::Malformed { offset, reason: reason.to_string() };
    let (name, filter) = match inner.split_once('|') {
        Some((n, f)) => (n.trim(), Some(f.trim())),
        None => (inner.trim(), None),
    };
    if !is_ident(name) {
        return Err(bad(&format!("invalid name {name:?}")));
    }
    let default = match filter {
        None => None,
        Some(f) => {
            let arg = f
                .strip_prefix("default(")
                .and_then(|r| r.strip_suffix(')'))
                .map(str::trim)
                .ok_or_else(|| bad(&format!("unsupported filter {f:?}")))?;
            let lit = arg
                .strip_prefix('"')
                .and_then(|r| r.strip_suffix('"'))
                .or_else(|| arg.strip_prefix('\'').and_then(|r| r.strip_suffix('\'')))
                .ok_or_else(|| bad("default() takes one quoted string"))?;
            Some(lit.to_string())
        }
    };
    Ok(Token::Var { name: name.to_string(), default })
}

fn parse_tag(inner: &str, offset: usize) -> Result<Token, TemplateError> {
    let words: Vec<&str> = inner.split_whitespace().collect();
    match words.as_slice() {
        ["if", name] if is_ident(name) => Ok(Token::If(name.to_string(), offset)),
        ["else"] => Ok(Token::Else(offset)),
        ["endif"] => Ok(Token::EndIf(offset)),
        _ => Err(TemplateError::Malformed { offset, reason: format!("unsupported tag {:?}", inner.trim()) }),
    }
}

fn lex(body: &str) -> Result<Vec<Token>, TemplateError> {
    let mut tokens = Vec::new();
    let mut line_start = 0;
    for line in body.split_inclusive('\n') {
        let trimmed = line.trim();
        let lone_tag = trimmed.starts_with("{%")
            && trimmed.ends_with("%}")
            && trimmed.matches("{%").count() == 1
            && !trimmed.contains("{{");
        if lone_tag {
            let offset = line_start + line.find("{%").unwrap();
            tokens.push(parse_tag(&trimmed[2..trimmed.len() - 2], offset)?);
        } else {
            lex_inline(line, line_start, &mut tokens)?;
        }
        line_start += line.len();
    }
    Ok(tokens)
}

fn lex_inline(line: &str, base: usize, tokens: &mut Vec<Token>) -> Result<(), TemplateError> {
    let mut rest = line;
    let mut pos = base;
    loop {
        let next = [rest.find("{{"), rest.find("{%")].into_iter().flatten().min();
        // "{{%" is a literal brace followed by a tag.
        let next = next.map(|i| if rest[i..].starts_with("{{%") { i + 1 } else { i });
        let Some(i) = next else {
            push_text(tokens, rest);
            return Ok(());
        };
        push_text(tokens, &rest[..i]);
        let is_var = rest[i..].starts_with("{{");
        let close = if is_var { "}}" } else { "%}" };
        let offset = pos + i;
        let end = rest[i + 2..].find(close).ok_or_else(|| TemplateError::Malformed {
            offset,
            reason: format!("missing {close:?}"),
        })?;
        let inner = &rest[i + 2..i + 2 + end];
        tokens.push(if is_var { parse_var(inner, offset)? } else { parse_tag(inner, offset)? });
        let consumed = i + 2 + end + 2;
        rest = &rest[consumed..];
        pos += consumed;
    }
}

fn push_text(tokens: &mut Vec<Token>, s: &str) {
    if s.is_empty() {
        return;
    }
    if let Some(Token::Text(t)) = tokens.last_mut() {
        t.push_str(s);
    } else {
        tokens.push(Token::Text(s.to_string()));
    }
}

struct Frame {
    cond: String,
    offset: usize,
    then: Vec<Node>,
    otherwise: Option<Vec<Node>>,
}

fn sink<'a>(root: &'a mut Vec<Node>, stack: &'a mut [Frame]) -> &'a mut Vec<Node> {
    match stack.last_mut() {
        Some(f) => f.otherwise.as_mut().unwrap_or(&mut f.then),
        None => root,
    }
}

fn build(tokens: Vec<Token>) -> Result<Vec<Node>, TemplateError> {
    let mut root = Vec::new();
    let mut stack: Vec<Frame> = Vec::new();
    for tok in tokens {
        match tok {
            Token::Text(t) => sink(&mut root, &mut stack).push(Node::Text(t)),
            Token::Var { name, default } => sink(&mut root, &mut stack).push(Node::Var { name, default }),
            Token::If(cond, offset) => {
                if stack.len() == MAX_DEPTH {
                    return Err(TemplateError::TooDeep { offset });
                }
                stack.push(Frame { cond, offset, then: Vec::new(), otherwise: None });
            }
            Token::Else(offset) => match stack.last_mut() {
                Some(f) if f.otherwise.is_none() => f.otherwise = Some(Vec::new()),
                Some(_) => return Err(TemplateError::Unbalanced(format!("second else at byte {offset}"))),
                None => return Err(TemplateError::Unbalanced(format!("else without if at byte {offset}"))),
            },
            Token::EndIf(offset) => {
                let f = stack
                    .pop()
                    .ok_or_else(|| TemplateError::Unbalanced(format!("endif without if at byte {offset}")))?;
                let node = Node::If { cond: f.cond, then: f.then, otherwise: f.otherwise.unwrap_or_default() };
                sink(&mut root, &mut stack).push(node);
            }
        }
    }
    if let Some(f) = stack.last() {
        return Err(TemplateError::Unbalanced(format!("if {} at byte {} is never closed", f.cond, f.offset)));
    }
    Ok(root)
}
