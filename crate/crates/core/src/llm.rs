//! Chat-completion gateway: pluggable backends, structured decisions, and
//! usage metering.
//!
//! Structured decisions are requested as a fenced JSON block in plain chat
//! and parsed leniently, so any chat backend works. The scripted backend
//! replays an ordered list of replies and makes runs fully deterministic.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_MODEL: &str = "claude-3-5-sonnet-20241022";
pub const API_KEY_ENV: &str = "USE_ENGINE_API_KEY";
pub const BASE_URL_ENV: &str = "USE_ENGINE_BASE_URL";
pub const DEFAULT_BASE_URL: &str = "https://api.anthropic.com/v1";
pub const MAX_DECISION_ATTEMPTS: usize = 3;
const DEFAULT_PRICES: &str = include_str!("prices.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

/// Failure reported by a backend for a single attempt.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("script exhausted")]
    ScriptExhausted,
    #[error("{0}")]
    Fatal(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("no valid structured reply after {} attempts: {}", raw.len(), violations.join("; "))]
pub struct DecisionError {
    pub violations: Vec<String>,
    /// Every raw completion received, in order.
    pub raw: Vec<String>,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LlmError {
    #[error("no messages to send")]
    EmptyMessages,
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("script exhausted")]
    ScriptExhausted,
    #[error("backend unavailable after {attempts} attempts: {message}")]
    RetriesExhausted { attempts: usize, message: String },
    #[error("backend error: {0}")]
    Backend(String),
    #[error(transparent)]
    Decision(#[from] DecisionError),
    #[error("empty metering label")]
    EmptyLabel,
}

pub trait ChatBackend: Send + Sync {
    /// One completion attempt. `label` names the caller (action or
    /// Meta-Agent) and is only informational for real backends.
    fn complete(&self, label: &str, messages: &[ChatMessage], params: &DecodeParams) -> Result<Completion, BackendError>;

    fn model(&self) -> &str;
}

/// One entry of a scripted-backend script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Rendered as a fenced JSON block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    /// If set, the reply is only valid for a caller with this label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<String>,
}

impl ScriptedReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: Some(text.into()),
            choice: None,
            usage: None,
            expect: None,
        }
    }

    pub fn choice(value: Value) -> Self {
        Self {
            text: None,
            choice: Some(value),
            usage: None,
            expect: None,
        }
    }

    pub fn with_usage(mut self, prompt_tokens: u64, completion_tokens: u64) -> Self {
        self.usage = Some(Usage {
            prompt_tokens,
            completion_tokens,
        });
        self
    }

    pub fn expecting(mut self, label: impl Into<String>) -> Self {
        self.expect = Some(label.into());
        self
    }

    pub fn render(&self) -> String {
        match (&self.text, &self.choice) {
            (Some(t), None) => t.clone(),
            (None, Some(c)) => fenced_json(c),
            (Some(t), Some(c)) => format!("{t}\n\n{}", fenced_json(c)),
            (None, None) => String::new(),
        }
    }
}

pub fn fenced_json(value: &Value) -> String {
    format!(
        "```json\n{}\n```",
        serde_json::to_string_pretty(value).unwrap_or_else(|_| value.to_string())
    )
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub reply: Vec<ScriptedReply>,
}

impl Script {
    pub fn from_toml(text: &str) -> Result<Self, LlmError> {
        let script: Script = toml::from_str(text).map_err(|e| LlmError::Backend(format!("invalid script: {e}")))?;
        for (i, r) in script.reply.iter().enumerate() {
            if r.text.is_none() && r.choice.is_none() {
                return Err(LlmError::Backend(format!("script reply {} has neither `text` nor `choice`", i + 1)));
            }
        }
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Backend(format!("cannot read script {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("script serializes")
    }
}

/// Rough token estimate used when a scripted reply carries no usage.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

/// Replays a fixed list of replies in order.
#[derive(Debug)]
pub struct ScriptedBackend {
    model: String,
    queue: Mutex<VecDeque<ScriptedReply>>,
}

impl ScriptedBackend {
    pub fn new(script: Script, model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            queue: Mutex::new(script.reply.into()),
        }
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("poisoned").len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, label: &str, messages: &[ChatMessage], _params: &DecodeParams) -> Result<Completion, BackendError> {
        let mut queue = self.queue.lock().expect("poisoned");
        let reply = queue.pop_front().ok_or(BackendError::ScriptExhausted)?;
        if let Some(expected) = &reply.expect {
            if expected != label {
                return Err(BackendError::Fatal(format!(
                    "script expected a call from `{expected}` but `{label}` asked"
                )));
            }
        }
        let text = reply.render();
        let usage = reply.usage.unwrap_or_else(|| Usage {
            prompt_tokens: messages.iter().map(|m| estimate_tokens(&m.content)).sum(),
            completion_tokens: estimate_tokens(&text),
        });
        Ok(Completion { text, usage })
    }

    fn model(&self) -> &str {
        &self.model
    }
}

/// OpenAI-compatible `/chat/completions` endpoint.
#[derive(Debug)]
pub struct LiveBackend {
    base_url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl LiveBackend {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(600)).build(),
        }
    }

    /// Base URL from `USE_ENGINE_BASE_URL`, key from `USE_ENGINE_API_KEY`.
    pub fn from_env(model: impl Into<String>) -> Self {
        Self::new(
            std::env::var(BASE_URL_ENV).unwrap_or_else(|_| DEFAULT_BASE_URL.into()),
            model,
            std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        )
    }
}

impl ChatBackend for LiveBackend {
    fn complete(&self, _label: &str, messages: &[ChatMessage], params: &DecodeParams) -> Result<Completion, BackendError> {
        let key = self
            .api_key
            .as_deref()
            .ok_or_else(|| BackendError::Auth(format!("{API_KEY_ENV} is not set")))?;
        let body = serde_json::json!({
            "model": self.model,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        });
        let response = self
            .agent
            .post(&format!("{}/chat/completions", self.base_url))
            .set("Authorization", &format!("Bearer {key}"))
            .set("x-api-key", key)
            .send_json(body);
        let response = match response {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) => {
                let detail = r.into_string().unwrap_or_default();
                return Err(match code {
                    401 | 403 => BackendError::Auth(format!("HTTP {code}: {detail}")),
                    408 | 409 | 429 | 500..=599 => BackendError::Transient(format!("HTTP {code}: {detail}")),
                    _ => BackendError::Fatal(format!("HTTP {code}: {detail}")),
                });
            }
            Err(e) => return Err(BackendError::Transient(e.to_string())),
        };
        let json: Value = response
            .into_json()
            .map_err(|e| BackendError::Transient(format!("unreadable response: {e}")))?;
        let text = json
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Fatal(format!("response without message content: {json}")))?
            .to_string();
        let tokens = |key: &str| json.pointer(&format!("/usage/{key}")).and_then(Value::as_u64).unwrap_or(0);
        Ok(Completion {
            text,
            usage: Usage {
                prompt_tokens: tokens("prompt_tokens"),
                completion_tokens: tokens("completion_tokens"),
            },
        })
    }

    fn model(&self) -> &str {
        &self.model
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub input_per_million: f64,
    pub output_per_million: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    pub models: BTreeMap<String, ModelPrice>,
}

impl Default for PriceTable {
    fn default() -> Self {
        Self::from_toml(DEFAULT_PRICES).expect("bundled price table parses")
    }
}

impl PriceTable {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let table: PriceTable = toml::from_str(text).map_err(|e| e.to_string())?;
        if table
            .models
            .values()
            .any(|p| p.input_per_million < 0.0 || p.output_per_million < 0.0)
        {
            return Err("prices must be non-negative".into());
        }
        Ok(table)
    }

    pub fn cost(&self, model: &str, usage: Usage) -> Option<f64> {
        let p = self.models.get(model)?;
        Some(
            usage.prompt_tokens as f64 * p.input_per_million / 1e6
                + usage.completion_tokens as f64 * p.output_per_million / 1e6,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub label: String,
    pub model: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// `None` when the model has no price entry.
    pub cost_usd: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost_usd: f64,
    pub unpriced_calls: u64,
}

impl UsageTotals {
    fn add(&mut self, r: &UsageRecord) {
        self.calls += 1;
        self.prompt_tokens += r.prompt_tokens;
        self.completion_tokens += r.completion_tokens;
        match r.cost_usd {
            Some(c) => self.cost_usd += c,
            None => self.unpriced_calls += 1,
        }
    }
}

/// Serializable view of a ledger (records only; wall times are kept apart
/// so ledger files stay deterministic).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub records: Vec<UsageRecord>,
    pub totals: UsageTotals,
    pub by_label: BTreeMap<String, UsageTotals>,
}

impl LedgerSnapshot {
    pub fn from_records(records: Vec<UsageRecord>) -> Self {
        let mut totals = UsageTotals::default();
        let mut by_label: BTreeMap<String, UsageTotals> = BTreeMap::new();
        for r in &records {
            totals.add(r);
            by_label.entry(r.label.clone()).or_default().add(r);
        }
        Self {
            records,
            totals,
            by_label,
        }
    }
}

#[derive(Debug, Default)]
struct LedgerInner {
    records: Vec<UsageRecord>,
    wall_times: Vec<f64>,
}

/// Append-only usage ledger; safe to share between concurrent runs.
#[derive(Debug, Default)]
pub struct UsageLedger {
    prices: PriceTable,
    inner: Mutex<LedgerInner>,
}

impl UsageLedger {
    pub fn new(prices: PriceTable) -> Self {
        Self {
            prices,
            inner: Mutex::default(),
        }
    }

    pub fn prices(&self) -> &PriceTable {
        &self.prices
    }

    pub fn meter(&self, label: &str, model: &str, usage: Usage) -> Result<UsageRecord, LlmError> {
        self.meter_timed(label, model, usage, 0.0)
    }

    /// `wall_time` in seconds.
    pub fn meter_timed(&self, label: &str, model: &str, usage: Usage, wall_time: f64) -> Result<UsageRecord, LlmError> {
        if label.trim().is_empty() {
            return Err(LlmError::EmptyLabel);
        }
        let record = UsageRecord {
            label: label.to_string(),
            model: model.to_string(),
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            cost_usd: self.prices.cost(model, usage),
        };
        if record.cost_usd.is_none() {
            log::debug!("no price entry for model `{model}`; metering tokens only");
        }
        let mut inner = self.inner.lock().expect("poisoned");
        inner.records.push(record.clone());
        inner.wall_times.push(wall_time);
        Ok(record)
    }

    pub fn records(&self) -> Vec<UsageRecord> {
        self.inner.lock().expect("poisoned").records.clone()
    }

    pub fn wall_times(&self) -> Vec<f64> {
        self.inner.lock().expect("poisoned").wall_times.clone()
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot::from_records(self.records())
    }

    pub fn totals(&self) -> UsageTotals {
        self.snapshot().totals
    }

    pub fn by_label(&self) -> BTreeMap<String, UsageTotals> {
        self.snapshot().by_label
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldType {
    String,
    Integer,
    Bool,
    Enum(Vec<String>),
    StringList,
}

impl FieldType {
    fn describe(&self) -> String {
        match self {
            FieldType::String => "string".into(),
            FieldType::Integer => "integer".into(),
            FieldType::Bool => "boolean".into(),
            FieldType::StringList => "list of strings".into(),
            FieldType::Enum(options) => format!(
                "one of {}",
                options.iter().map(|o| format!("\"{o}\"")).collect::<Vec<_>>().join(", ")
            ),
        }
    }

    /// Normalized value, or a violation message.
    fn check(&self, value: &Value) -> Result<Value, String> {
        match (self, value) {
            (FieldType::String, Value::String(_)) => Ok(value.clone()),
            (FieldType::Integer, Value::Number(n)) if n.is_i64() || n.is_u64() => Ok(value.clone()),
            (FieldType::Bool, Value::Bool(_)) => Ok(value.clone()),
            (FieldType::Enum(options), Value::String(s)) if options.contains(s) => Ok(value.clone()),
            (FieldType::Enum(_), Value::String(s)) => Err(format!("`{s}` is not {}", self.describe())),
            (FieldType::StringList, Value::Array(items)) if items.iter().all(Value::is_string) => Ok(value.clone()),
            (FieldType::StringList, Value::String(s)) => Ok(Value::Array(vec![Value::String(s.clone())])),
            _ => Err(format!("expected {}, got {value}", self.describe())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub ty: FieldType,
    pub required: bool,
    pub description: String,
}

impl FieldSpec {
    pub fn required(name: &str, ty: FieldType, description: &str) -> Self {
        Self {
            name: name.into(),
            ty,
            required: true,
            description: description.into(),
        }
    }

    pub fn optional(name: &str, ty: FieldType, description: &str) -> Self {
        Self {
            required: false,
            ..Self::required(name, ty, description)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub description: String,
    pub fields: Vec<FieldSpec>,
}

/// Shape a structured decision must have.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schema {
    Object(Vec<FieldSpec>),
    /// An object whose `tag` field picks one variant; the remaining fields
    /// follow that variant.
    Tagged { tag: String, variants: Vec<Variant> },
}

fn check_fields(obj: &Map<String, Value>, fields: &[FieldSpec], out: &mut Map<String, Value>) -> Result<(), String> {
    for f in fields {
        match obj.get(&f.name) {
            None | Some(Value::Null) if f.required => return Err(format!("missing required field `{}`", f.name)),
            None | Some(Value::Null) => {}
            Some(v) => {
                let v = f.ty.check(v).map_err(|e| format!("field `{}`: {e}", f.name))?;
                out.insert(f.name.clone(), v);
            }
        }
    }
    Ok(())
}

fn describe_fields(out: &mut String, fields: &[FieldSpec], indent: &str) {
    for f in fields {
        let _ = writeln!(
            out,
            "{indent}- `{}` ({}{}): {}",
            f.name,
            f.ty.describe(),
            if f.required { "" } else { ", optional" },
            f.description
        );
    }
}

impl Schema {
    /// Validates and normalizes a value: unknown fields are dropped.
    pub fn validate(&self, value: &Value) -> Result<Value, String> {
        let obj = value.as_object().ok_or_else(|| "reply must be a JSON object".to_string())?;
        let mut out = Map::new();
        match self {
            Schema::Object(fields) => check_fields(obj, fields, &mut out)?,
            Schema::Tagged { tag, variants } => {
                let name = obj
                    .get(tag)
                    .and_then(Value::as_str)
                    .ok_or_else(|| format!("missing required field `{tag}`"))?;
                let variant = variants.iter().find(|v| v.name == name).ok_or_else(|| {
                    format!(
                        "unknown {tag} `{name}`; expected one of {}",
                        variants.iter().map(|v| v.name.as_str()).collect::<Vec<_>>().join(", ")
                    )
                })?;
                out.insert(tag.clone(), Value::String(name.to_string()));
                check_fields(obj, &variant.fields, &mut out)?;
            }
        }
        Ok(Value::Object(out))
    }

    /// Instructions describing the expected reply block.
    pub fn describe(&self) -> String {
        let mut out = String::from("Reply with exactly one JSON object inside a ```json fenced block.\n");
        match self {
            Schema::Object(fields) => {
                out.push_str("Fields:\n");
                describe_fields(&mut out, fields, "");
            }
            Schema::Tagged { tag, variants } => {
                let _ = writeln!(out, "The `{tag}` field selects one of the following; add the listed fields:");
                for v in variants {
                    let _ = writeln!(out, "* `{}`: {}", v.name, v.description);
                    describe_fields(&mut out, &v.fields, "  ");
                }
            }
        }
        out
    }
}

/// Finds the first JSON object in a completion: a fenced block if present,
/// otherwise the first parseable `{ ... }` span.
pub fn extract_json(text: &str) -> Option<Value> {
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let Some(end) = after[body_start..].find("```") else { break };
        let body = after[body_start..body_start + end].trim();
        if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(body) {
            return Some(v);
        }
        rest = &after[body_start + end + 3..];
    }
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(v @ Value::Object(_))) = stream.next() {
            return Some(v);
        }
    }
    None
}

pub fn prompt_digest(messages: &[ChatMessage]) -> String {
    let mut hasher = Sha256::new();
    for m in messages {
        hasher.update(format!("{:?}", m.role).as_bytes());
        hasher.update([0]);
        hasher.update(m.content.as_bytes());
        hasher.update([0]);
    }
    let hex = format!("{:x}", hasher.finalize());
    hex[..16].to_string()
}

/// One prompt/reply pair, kept for the trajectory log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub label: String,
    pub prompt_digest: String,
    /// Content of the final message sent.
    pub prompt: String,
    pub reply: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// Backend + metering + transcript capture for one run.
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    ledgers: Vec<Arc<UsageLedger>>,
    params: DecodeParams,
    retry: RetryPolicy,
    transcript: Mutex<Vec<Exchange>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("model", &self.backend.model())
            .field("params", &self.params)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, ledger: Arc<UsageLedger>, params: DecodeParams) -> Self {
        Self {
            backend,
            ledgers: vec![ledger],
            params,
            retry: RetryPolicy::default(),
            transcript: Mutex::default(),
        }
    }

    /// Gateway over a scripted backend with its own fresh ledger.
    pub fn scripted(script: Script) -> Self {
        Self::new(
            Arc::new(ScriptedBackend::new(script, DEFAULT_MODEL)),
            Arc::new(UsageLedger::default()),
            DecodeParams::default(),
        )
    }

    /// Also meter into a ledger shared with other runs.
    pub fn with_shared_ledger(mut self, ledger: Arc<UsageLedger>) -> Self {
        self.ledgers.push(ledger);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn model(&self) -> &str {
        self.backend.model()
    }

    pub fn params(&self) -> DecodeParams {
        self.params
    }

    /// The run's own ledger.
    pub fn ledger(&self) -> &Arc<UsageLedger> {
        &self.ledgers[0]
    }

    /// Drains the exchanges recorded since the last call.
    pub fn take_transcript(&self) -> Vec<Exchange> {
        std::mem::take(&mut *self.transcript.lock().expect("poisoned"))
    }

    pub fn chat(&self, label: &str, messages: &[ChatMessage]) -> Result<String, LlmError> {
        if messages.is_empty() {
            return Err(LlmError::EmptyMessages);
        }
        if label.trim().is_empty() {
            return Err(LlmError::EmptyLabel);
        }
        let mut last = String::new();
        for attempt in 0..self.retry.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt as u32 - 1));
            }
            let start = Instant::now();
            match self.backend.complete(label, messages, &self.params) {
                Ok(c) => {
                    let wall = start.elapsed().as_secs_f64();
                    for ledger in &self.ledgers {
                        ledger.meter_timed(label, self.backend.model(), c.usage, wall)?;
                    }
                    self.transcript.lock().expect("poisoned").push(Exchange {
                        label: label.to_string(),
                        prompt_digest: prompt_digest(messages),
                        prompt: messages.last().map(|m| m.content.clone()).unwrap_or_default(),
                        reply: c.text.clone(),
                        usage: c.usage,
                    });
                    return Ok(c.text);
                }
                Err(BackendError::Transient(msg)) => {
                    log::warn!("{label}: transient backend failure (attempt {}): {msg}", attempt + 1);
                    last = msg;
                }
                Err(BackendError::Auth(msg)) => return Err(LlmError::Auth(msg)),
                Err(BackendError::ScriptExhausted) => return Err(LlmError::ScriptExhausted),
                Err(BackendError::Fatal(msg)) => return Err(LlmError::Backend(msg)),
            }
        }
        Err(LlmError::RetriesExhausted {
            attempts: self.retry.max_attempts,
            message: last,
        })
    }

    /// Asks for a reply matching `schema`, repairing up to
    /// [`MAX_DECISION_ATTEMPTS`] times in total.
    pub fn select_structured(&self, label: &str, messages: &[ChatMessage], schema: &Schema) -> Result<Value, LlmError> {
        let mut conversation = messages.to_vec();
        let mut raw = Vec::new();
        let mut violations = Vec::new();
        for _ in 0..MAX_DECISION_ATTEMPTS {
            let reply = self.chat(label, &conversation)?;
            let outcome = match extract_json(&reply) {
                None => Err("no JSON object found in the reply".to_string()),
                Some(v) => schema.validate(&v),
            };
            raw.push(reply.clone());
            match outcome {
                Ok(v) => return Ok(v),
                Err(violation) => {
                    conversation.push(ChatMessage::assistant(reply));
                    conversation.push(ChatMessage::user(format!(
                        "Your reply could not be used: {violation}.\n{}",
                        schema.describe()
                    )));
                    violations.push(violation);
                }
            }
        }
        Err(DecisionError { violations, raw }.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn gateway(replies: Vec<ScriptedReply>) -> Gateway {
        Gateway::scripted(Script { reply: replies }).with_retry(RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(1),
        })
    }

    fn action_schema() -> Schema {
        Schema::Tagged {
            tag: "action".into(),
            variants: vec![
                Variant {
                    name: "ExecuteTests".into(),
                    description: "run tests".into(),
                    fields: vec![
                        FieldSpec::required("tests", FieldType::StringList, "test files"),
                        FieldSpec::optional("diffs", FieldType::StringList, "diff ids"),
                    ],
                },
                Variant {
                    name: "Terminate".into(),
                    description: "stop".into(),
                    fields: vec![FieldSpec::required("chosen", FieldType::String, "diff id")],
                },
            ],
        }
    }

    #[test]
    fn scripted_reply_and_usage() {
        let gw = gateway(vec![ScriptedReply::text("A").with_usage(10, 2)]);
        assert_eq!(gw.chat("EditCode", &[ChatMessage::user("hi")]).unwrap(), "A");
        let totals = gw.ledger().totals();
        assert_eq!((totals.prompt_tokens, totals.completion_tokens), (10, 2));
        assert_eq!(gw.chat("EditCode", &[ChatMessage::user("hi")]), Err(LlmError::ScriptExhausted));
        assert_eq!(gw.take_transcript().len(), 1);
    }

    #[test]
    fn expect_label_mismatch_is_error() {
        let gw = gateway(vec![ScriptedReply::text("A").expecting("MetaAgent")]);
        assert!(matches!(gw.chat("EditCode", &[ChatMessage::user("x")]), Err(LlmError::Backend(_))));
    }

    #[test]
    fn empty_messages_rejected() {
        let gw = gateway(vec![ScriptedReply::text("A")]);
        assert_eq!(gw.chat("x", &[]), Err(LlmError::EmptyMessages));
    }

    struct Flaky {
        failures: Mutex<usize>,
        auth: bool,
    }

    impl ChatBackend for Flaky {
        fn complete(&self, _: &str, _: &[ChatMessage], _: &DecodeParams) -> Result<Completion, BackendError> {
            if self.auth {
                return Err(BackendError::Auth("bad key".into()));
            }
            let mut left = self.failures.lock().unwrap();
            if *left > 0 {
                *left -= 1;
                return Err(BackendError::Transient("503".into()));
            }
            Ok(Completion {
                text: "ok".into(),
                usage: Usage {
                    prompt_tokens: 1,
                    completion_tokens: 1,
                },
            })
        }

        fn model(&self) -> &str {
            DEFAULT_MODEL
        }
    }

    fn flaky(failures: usize, auth: bool) -> Gateway {
        Gateway::new(
            Arc::new(Flaky {
                failures: Mutex::new(failures),
                auth,
            }),
            Arc::new(UsageLedger::default()),
            DecodeParams::default(),
        )
        .with_retry(RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(1),
        })
    }

    #[test]
    fn transient_failures_are_retried_up_to_three_attempts() {
        assert_eq!(flaky(2, false).chat("l", &[ChatMessage::user("x")]).unwrap(), "ok");
        let err = flaky(3, false).chat("l", &[ChatMessage::user("x")]).unwrap_err();
        assert!(matches!(err, LlmError::RetriesExhausted { attempts: 3, .. }));
    }

    #[test]
    fn auth_failure_is_distinct_and_unmetered() {
        let gw = flaky(0, true);
        assert!(matches!(gw.chat("l", &[ChatMessage::user("x")]), Err(LlmError::Auth(_))));
        assert_eq!(gw.ledger().totals().calls, 0);
        assert_eq!(gw.ledger().totals().cost_usd, 0.0);
    }

    #[test]
    fn live_backend_without_key_is_auth_error() {
        let backend = LiveBackend::new("http://127.0.0.1:9", DEFAULT_MODEL, None);
        let err = backend
            .complete("l", &[ChatMessage::user("x")], &DecodeParams::default())
            .unwrap_err();
        assert!(matches!(err, BackendError::Auth(_)));
    }

    #[test]
    fn structured_choice_parses() {
        let gw = gateway(vec![ScriptedReply::choice(json!({"action": "ExecuteTests", "tests": ["tests/test_a.py"]}))]);
        let v = gw
            .select_structured("MetaAgent", &[ChatMessage::user("pick")], &action_schema())
            .unwrap();
        assert_eq!(v, json!({"action": "ExecuteTests", "tests": ["tests/test_a.py"]}));
    }

    #[test]
    fn unknown_action_triggers_one_repair() {
        let gw = gateway(vec![
            ScriptedReply::choice(json!({"action": "Deploy"})),
            ScriptedReply::text("Sure.\n{\"action\": \"Terminate\", \"chosen\": \"d1\", \"extra\": 1} thanks"),
        ]);
        let v = gw
            .select_structured("MetaAgent", &[ChatMessage::user("pick")], &action_schema())
            .unwrap();
        assert_eq!(v, json!({"action": "Terminate", "chosen": "d1"}));
        let transcript = gw.take_transcript();
        assert_eq!(transcript.len(), 2);
        assert!(transcript[1].prompt.contains("unknown action `Deploy`"));
    }

    #[test]
    fn three_invalid_replies_fail_with_all_raw() {
        let gw = gateway(vec![
            ScriptedReply::text("no json"),
            ScriptedReply::choice(json!({"action": "Terminate"})),
            ScriptedReply::choice(json!({"action": "ExecuteTests", "tests": 3})),
            ScriptedReply::text("unused"),
        ]);
        match gw.select_structured("MetaAgent", &[ChatMessage::user("pick")], &action_schema()) {
            Err(LlmError::Decision(e)) => {
                assert_eq!(e.raw.len(), 3);
                assert_eq!(e.violations.len(), 3);
                assert!(e.violations[1].contains("chosen"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cost_arithmetic() {
        let ledger = UsageLedger::default();
        let rec = ledger
            .meter(
                "EditCode",
                DEFAULT_MODEL,
                Usage {
                    prompt_tokens: 1000,
                    completion_tokens: 500,
                },
            )
            .unwrap();
        assert!((rec.cost_usd.unwrap() - 0.0105).abs() < 1e-12);
        ledger
            .meter(
                "EditCode",
                DEFAULT_MODEL,
                Usage {
                    prompt_tokens: 1000,
                    completion_tokens: 500,
                },
            )
            .unwrap();
        let by = ledger.by_label();
        assert_eq!(by["EditCode"].calls, 2);
        assert!((by["EditCode"].cost_usd - 0.021).abs() < 1e-12);
        assert!(ledger.meter(" ", DEFAULT_MODEL, Usage::default()).is_err());
    }

    #[test]
    fn unknown_model_meters_tokens_only() {
        let ledger = UsageLedger::default();
        let rec = ledger
            .meter(
                "x",
                "mystery-model",
                Usage {
                    prompt_tokens: 5,
                    completion_tokens: 5,
                },
            )
            .unwrap();
        assert_eq!(rec.cost_usd, None);
        let t = ledger.totals();
        assert_eq!((t.calls, t.unpriced_calls, t.prompt_tokens), (1, 1, 5));
    }

    #[test]
    fn script_round_trip_and_validation() {
        let text = r#"
[[reply]]
expect = "MetaAgent"
choice = { action = "Terminate", chosen = "empty" }

[[reply]]
text = "free text"
usage = { prompt_tokens = 3, completion_tokens = 4 }
"#;
        let script = Script::from_toml(text).unwrap();
        assert_eq!(script.reply.len(), 2);
        assert_eq!(Script::from_toml(&script.to_toml()).unwrap().reply, script.reply);
        assert!(Script::from_toml("[[reply]]\nexpect = \"x\"\n").is_err());
    }

    #[test]
    fn extract_json_variants() {
        assert_eq!(extract_json("```json\n{\"a\": 1}\n```"), Some(json!({"a": 1})));
        assert_eq!(extract_json("prefix {\"a\": {\"b\": 2}} suffix"), Some(json!({"a": {"b": 2}})));
        assert_eq!(extract_json("```\nnot json\n``` then {\"ok\": true}"), Some(json!({"ok": true})));
        assert_eq!(extract_json("nothing here"), None);
    }
}
