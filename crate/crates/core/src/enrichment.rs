//! Geo-temporal prompts, reply parsing, completion providers and the context
//! cache.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use chrono::{DateTime, Datelike, NaiveDate, SecondsFormat, Utc};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::corpus::Interaction;
use crate::io::write_atomic;

pub const DEFAULT_TEMPLATE: &str = "v1";
const MAX_SUMMARY_CHARS: usize = 2000;

#[derive(Debug, thiserror::Error)]
pub enum EnrichError {
    #[error("unknown prompt template {0:?}")]
    UnknownTemplate(String),
    #[error("invalid prompt request: {0}")]
    InvalidRequest(String),
    #[error("reply is not JSON: {0}")]
    MalformedResponse(String),
    #[error("reply does not match the context schema: {0}")]
    SchemaError(String),
    #[error("provider failed: {0}")]
    Provider(String),
    #[error("no context for {} key(s) after retries, first: {}", .0.len(), .0.first().map(|k| k.to_string()).unwrap_or_default())]
    ProviderExhausted(Vec<ContextKey>),
    #[error("cache file line {line}: {reason}")]
    CacheFormat { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Time bucket used to group interactions before prompting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    #[default]
    Day,
    Week,
}

impl Bucket {
    fn datetime(ts: i64) -> DateTime<Utc> {
        DateTime::from_timestamp(ts, 0).unwrap_or_default()
    }

    fn start_date(self, ts: i64) -> NaiveDate {
        let date = Self::datetime(ts).date_naive();
        match self {
            Bucket::Day => date,
            Bucket::Week => date - chrono::Days::new(date.weekday().num_days_from_monday() as u64),
        }
    }

    /// `YYYY-MM-DD` for days, ISO week `YYYY-Www` for weeks.
    pub fn label(self, ts: i64) -> String {
        match self {
            Bucket::Day => self.start_date(ts).format("%Y-%m-%d").to_string(),
            Bucket::Week => {
                let w = Self::datetime(ts).date_naive().iso_week();
                format!("{}-W{:02}", w.year(), w.week())
            }
        }
    }

    /// Timestamp of midnight UTC at the start of the bucket containing `ts`.
    pub fn start(self, ts: i64) -> i64 {
        self.start_date(ts).and_hms_opt(0, 0, 0).expect("midnight exists").and_utc().timestamp()
    }
}

impl std::str::FromStr for Bucket {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "day" => Ok(Bucket::Day),
            "week" => Ok(Bucket::Week),
            other => Err(format!("unknown bucket {other:?} (expected day or week)")),
        }
    }
}

/// `(bucket label, location)`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContextKey {
    pub bucket: String,
    pub location: String,
}

impl ContextKey {
    pub fn new(bucket: impl Into<String>, location: impl Into<String>) -> Self {
        Self { bucket: bucket.into(), location: location.into() }
    }

    pub fn of(interaction: &Interaction, bucket: Bucket) -> Self {
        Self::new(bucket.label(interaction.timestamp_utc), interaction.location.trim())
    }
}

impl std::fmt::Display for ContextKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}|{}", self.bucket, self.location)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptRequest {
    pub timestamp_utc: i64,
    pub location: String,
    pub template_version: String,
}

const TEMPLATE_V1: &str = "\
Describe the real-world context around a moment in time and a place.

UTC time: {timestamp}
Location: {location}

List events from shortly before this time that people in this region would \
have been aware of: public holidays, cultural or religious celebrations, \
politics, sports, film, music and TV releases, fashion, well-known people \
in the news, and large social events. Then write a 2-3 sentence summary of \
the overall context and how it may shape what people choose to watch, read \
or listen to.

Reply with a single JSON object and nothing else, using exactly these keys:
{\"events\": [\"<event>\", ...], \"summary\": \"<2-3 sentences>\"}
";

/// Template versions that [`build_prompt`] can render.
pub fn templates() -> &'static [&'static str] {
    &["v1"]
}

pub fn build_prompt(req: &PromptRequest) -> Result<String, EnrichError> {
    let template = match req.template_version.as_str() {
        "v1" => TEMPLATE_V1,
        other => return Err(EnrichError::UnknownTemplate(other.to_string())),
    };
    let location = req.location.trim();
    if location.is_empty() {
        return Err(EnrichError::InvalidRequest("location is empty".into()));
    }
    let iso = DateTime::from_timestamp(req.timestamp_utc, 0)
        .ok_or_else(|| EnrichError::InvalidRequest(format!("timestamp {} out of range", req.timestamp_utc)))?
        .to_rfc3339_opts(SecondsFormat::Secs, true);
    Ok(template.replace("{timestamp}", &iso).replace("{location}", location))
}

/// The validated body of a reply.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextPayload {
    pub events: Vec<String>,
    pub summary: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeoTemporalContext {
    pub key: ContextKey,
    pub events: Vec<String>,
    pub summary: String,
    pub provider_id: String,
}

impl GeoTemporalContext {
    /// Text handed to the encoder: events joined, then the summary.
    pub fn encoder_text(&self) -> String {
        let mut s = self.events.join("; ");
        if !s.is_empty() {
            s.push_str(". ");
        }
        s.push_str(&self.summary);
        s
    }
}

fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let body = rest.split_once('\n').map_or("", |(_, b)| b);
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

fn coerce_event(v: &Value) -> Option<String> {
    let s = match v {
        Value::String(s) => s.trim().to_string(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        Value::Object(map) => map
            .values()
            .filter_map(coerce_event)
            .collect::<Vec<_>>()
            .join(": "),
        Value::Array(items) => items.iter().filter_map(coerce_event).collect::<Vec<_>>().join(", "),
        Value::Null => String::new(),
    };
    (!s.is_empty()).then_some(s)
}

/// Parses an LLM reply. Markdown fences are stripped; if the remainder is not
/// JSON, the outermost `{...}` span is tried before giving up.
pub fn parse_context_response(raw: &str) -> Result<ContextPayload, EnrichError> {
    let body = strip_fences(raw);
    let value: Value = match serde_json::from_str(body) {
        Ok(v) => v,
        Err(first) => match (body.find('{'), body.rfind('}')) {
            (Some(a), Some(b)) if a < b => serde_json::from_str(&body[a..=b])
                .map_err(|_| EnrichError::MalformedResponse(first.to_string()))?,
            _ => return Err(EnrichError::MalformedResponse(first.to_string())),
        },
    };
    let obj = value.as_object().ok_or_else(|| EnrichError::SchemaError("reply is not an object".into()))?;
    let events = match obj.get("events") {
        Some(Value::Array(items)) => items.iter().filter_map(coerce_event).collect(),
        Some(other) => coerce_event(other).into_iter().collect(),
        None => return Err(EnrichError::SchemaError("missing `events`".into())),
    };
    let summary = match obj.get("summary") {
        Some(v) => coerce_event(v).unwrap_or_default(),
        None => return Err(EnrichError::SchemaError("missing `summary`".into())),
    };
    if summary.is_empty() {
        return Err(EnrichError::SchemaError("`summary` is empty".into()));
    }
    if summary.chars().count() > MAX_SUMMARY_CHARS {
        return Err(EnrichError::SchemaError(format!("`summary` longer than {MAX_SUMMARY_CHARS} characters")));
    }
    Ok(ContextPayload { events, summary })
}

/// A text-in/text-out completion backend.
pub trait Provider: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, prompt: &str) -> Result<String, EnrichError>;
}

fn prompt_field<'a>(prompt: &'a str, name: &str) -> Option<&'a str> {
    prompt.lines().find_map(|l| l.strip_prefix(name)).map(str::trim)
}

/// Deterministic offline provider. The reply depends only on the seed and
/// the time and location lines of the prompt.
#[derive(Clone, Debug)]
pub struct MockProvider {
    seed: u64,
}

const MOCK_KINDS: &[&str] = &[
    "street festival",
    "football final",
    "film premiere",
    "heat wave",
    "election debate",
    "music awards",
    "harvest fair",
    "marathon",
    "fashion week",
    "national holiday",
    "storm warning",
    "album release",
];
const MOCK_MOODS: &[&str] = &["festive", "quiet", "tense", "relaxed", "busy", "nostalgic"];

impl MockProvider {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl Provider for MockProvider {
    fn id(&self) -> String {
        format!("mock:{}", self.seed)
    }

    fn complete(&self, prompt: &str) -> Result<String, EnrichError> {
        let time = prompt_field(prompt, "UTC time:").unwrap_or("");
        let location = prompt_field(prompt, "Location:").unwrap_or("");
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(time.as_bytes())
            .chain_update([0u8])
            .chain_update(location.as_bytes())
            .finalize();
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        let tag = hex::encode(&digest[..3]);
        let n = 2 + (digest[31] % 3) as usize;
        let events: Vec<String> = MOCK_KINDS
            .choose_multiple(&mut rng, n)
            .map(|k| format!("{k} in {location} ({tag})"))
            .collect();
        let mood = MOCK_MOODS.choose(&mut rng).expect("non-empty");
        let summary = format!(
            "Around {time} the mood in {location} is {mood}. People are talking about the {}.",
            events[0]
        );
        Ok(serde_json::json!({ "events": events, "summary": summary }).to_string())
    }
}

/// Serves recorded replies, keyed by exact prompt text.
#[derive(Clone, Debug, Default)]
pub struct ReplayProvider {
    replies: BTreeMap<String, String>,
}

impl ReplayProvider {
    pub fn new(replies: BTreeMap<String, String>) -> Self {
        Self { replies }
    }

    /// Reads JSONL lines of `{"prompt": ..., "response": ...}`.
    pub fn load(path: &Path) -> Result<Self, EnrichError> {
        #[derive(Deserialize)]
        struct Row {
            prompt: String,
            response: String,
        }
        let mut replies = BTreeMap::new();
        for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(line)
                .map_err(|e| EnrichError::CacheFormat { line: i + 1, reason: e.to_string() })?;
            replies.insert(row.prompt, row.response);
        }
        Ok(Self { replies })
    }
}

impl Provider for ReplayProvider {
    fn id(&self) -> String {
        "replay".into()
    }

    fn complete(&self, prompt: &str) -> Result<String, EnrichError> {
        self.replies
            .get(prompt)
            .cloned()
            .ok_or_else(|| EnrichError::Provider("no recorded reply for this prompt".into()))
    }
}

/// OpenAI-compatible chat completion endpoint.
#[derive(Clone, Debug)]
pub struct HttpProvider {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl HttpProvider {
    pub const ENDPOINT_VAR: &'static str = "GEOTREC_LLM_ENDPOINT";
    pub const API_KEY_VAR: &'static str = "GEOTREC_LLM_API_KEY";
    pub const MODEL_VAR: &'static str = "GEOTREC_LLM_MODEL";

    pub fn from_env() -> Result<Self, EnrichError> {
        let endpoint = std::env::var(Self::ENDPOINT_VAR)
            .map_err(|_| EnrichError::Provider(format!("set {} to the chat completions URL", Self::ENDPOINT_VAR)))?;
        Ok(Self {
            endpoint,
            api_key: std::env::var(Self::API_KEY_VAR).ok(),
            model: std::env::var(Self::MODEL_VAR).unwrap_or_else(|_| "gpt-4o-mini".into()),
            timeout: Duration::from_secs(60),
        })
    }
}

impl Provider for HttpProvider {
    fn id(&self) -> String {
        format!("http:{}", self.model)
    }

    fn complete(&self, prompt: &str) -> Result<String, EnrichError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{ "role": "user", "content": prompt }],
        });
        let mut req = agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let reply: Value = req
            .send_json(&body)
            .map_err(|e| EnrichError::Provider(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| EnrichError::Provider(e.to_string()))?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| EnrichError::Provider("reply has no choices[0].message.content".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct CacheLine {
    bucket: String,
    location: String,
    template_version: String,
    events: Vec<String>,
    summary: String,
    provider_id: String,
}

type CacheKey = (ContextKey, String);

/// Contexts keyed by `(bucket, location, template_version)`, optionally
/// backed by a JSONL file. Readers never observe a partially inserted entry.
#[derive(Debug, Default)]
pub struct ContextCache {
    path: Option<PathBuf>,
    entries: RwLock<BTreeMap<CacheKey, GeoTemporalContext>>,
}

impl ContextCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens the cache at `path`, loading it when the file exists.
    pub fn open(path: &Path) -> Result<Self, EnrichError> {
        let mut entries = BTreeMap::new();
        if path.exists() {
            for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let row: CacheLine = serde_json::from_str(line)
                    .map_err(|e| EnrichError::CacheFormat { line: i + 1, reason: e.to_string() })?;
                let key = ContextKey::new(row.bucket, row.location);
                let ctx = GeoTemporalContext {
                    key: key.clone(),
                    events: row.events,
                    summary: row.summary,
                    provider_id: row.provider_id,
                };
                entries.insert((key, row.template_version), ctx);
            }
        }
        Ok(Self { path: Some(path.to_path_buf()), entries: RwLock::new(entries) })
    }

    pub fn get(&self, key: &ContextKey, template: &str) -> Option<GeoTemporalContext> {
        self.entries.read().expect("cache lock").get(&(key.clone(), template.to_string())).cloned()
    }

    pub fn insert(&self, template: &str, ctx: GeoTemporalContext) {
        self.entries.write().expect("cache lock").insert((ctx.key.clone(), template.to_string()), ctx);
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All entries, sorted by key.
    pub fn to_jsonl(&self) -> String {
        let entries = self.entries.read().expect("cache lock");
        let mut out = String::new();
        for ((key, template), ctx) in entries.iter() {
            let line = CacheLine {
                bucket: key.bucket.clone(),
                location: key.location.clone(),
                template_version: template.clone(),
                events: ctx.events.clone(),
                summary: ctx.summary.clone(),
                provider_id: ctx.provider_id.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("cache line serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes the backing file atomically. No-op for in-memory caches.
    pub fn persist(&self) -> Result<(), EnrichError> {
        if let Some(path) = &self.path {
            write_atomic(path, self.to_jsonl().as_bytes())?;
        }
        Ok(())
    }

    pub fn contexts(&self, template: &str) -> BTreeMap<ContextKey, GeoTemporalContext> {
        self.entries
            .read()
            .expect("cache lock")
            .iter()
            .filter(|((_, t), _)| t == template)
            .map(|((k, _), v)| (k.clone(), v.clone()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnrichConfig {
    pub bucket: Bucket,
    pub template_version: String,
    /// Attempts per key, including the first.
    pub max_attempts: usize,
    /// Delay before the second attempt; doubled for each further attempt.
    pub backoff_ms: u64,
    /// Concurrent provider calls.
    pub parallelism: usize,
    /// When set, keys that stay unresolved are reported in
    /// [`EnrichOutcome::misses`] instead of failing the run.
    pub allow_misses: bool,
    /// Replace every interaction's location with this value, collapsing
    /// contexts to time only.
    pub location_override: Option<String>,
}

impl Default for EnrichConfig {
    fn default() -> Self {
        Self {
            bucket: Bucket::Day,
            template_version: DEFAULT_TEMPLATE.into(),
            max_attempts: 3,
            backoff_ms: 200,
            parallelism: 4,
            allow_misses: false,
            location_override: None,
        }
    }
}

impl EnrichConfig {
    pub fn key_of(&self, interaction: &Interaction) -> ContextKey {
        let mut key = ContextKey::of(interaction, self.bucket);
        if let Some(loc) = &self.location_override {
            key.location = loc.clone();
        }
        key
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnrichOutcome {
    pub contexts: BTreeMap<ContextKey, GeoTemporalContext>,
    pub provider_calls: usize,
    pub cache_hits: usize,
    pub misses: Vec<ContextKey>,
}

/// Distinct context keys needed for `log`, with a representative timestamp
/// (the bucket start) for each.
pub fn required_keys(log: &[Interaction], cfg: &EnrichConfig) -> BTreeMap<ContextKey, i64> {
    log.iter().map(|r| (cfg.key_of(r), cfg.bucket.start(r.timestamp_utc))).collect()
}

/// Resolves one context per distinct `(bucket, location)` key in `log`,
/// consulting `cache` first and the provider for the rest. New contexts are
/// inserted into the cache, which is persisted before returning.
pub fn enrich(
    log: &[Interaction],
    provider: &dyn Provider,
    cache: &ContextCache,
    cfg: &EnrichConfig,
) -> Result<EnrichOutcome, EnrichError> {
    let template = cfg.template_version.as_str();
    if !templates().contains(&template) {
        return Err(EnrichError::UnknownTemplate(template.to_string()));
    }
    let needed = required_keys(log, cfg);
    let mut contexts = BTreeMap::new();
    let mut pending = Vec::new();
    for (key, ts) in &needed {
        match cache.get(key, template) {
            Some(ctx) => {
                contexts.insert(key.clone(), ctx);
            }
            None => pending.push((key.clone(), *ts)),
        }
    }
    let cache_hits = contexts.len();

    let calls = AtomicUsize::new(0);
    let next = AtomicUsize::new(0);
    let misses = Mutex::new(BTreeSet::new());
    let workers = cfg.parallelism.clamp(1, pending.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((key, ts)) = pending.get(i) else { break };
                match fetch_one(provider, key, *ts, cfg, &calls) {
                    Some(ctx) => cache.insert(template, ctx),
                    None => {
                        misses.lock().expect("miss lock").insert(key.clone());
                    }
                }
            });
        }
    });
    let misses: Vec<ContextKey> = misses.into_inner().expect("miss lock").into_iter().collect();
    for (key, _) in &pending {
        if let Some(ctx) = cache.get(key, template) {
            contexts.insert(key.clone(), ctx);
        }
    }
    cache.persist()?;
    if !misses.is_empty() && !cfg.allow_misses {
        return Err(EnrichError::ProviderExhausted(misses));
    }
    Ok(EnrichOutcome { contexts, provider_calls: calls.into_inner(), cache_hits, misses })
}

fn fetch_one(
    provider: &dyn Provider,
    key: &ContextKey,
    ts: i64,
    cfg: &EnrichConfig,
    calls: &AtomicUsize,
) -> Option<GeoTemporalContext> {
    let req = PromptRequest {
        timestamp_utc: ts,
        location: key.location.clone(),
        template_version: cfg.template_version.clone(),
    };
    let prompt = build_prompt(&req).ok()?;
    for attempt in 0..cfg.max_attempts.max(1) {
        if attempt > 0 && cfg.backoff_ms > 0 {
            std::thread::sleep(Duration::from_millis(cfg.backoff_ms << (attempt - 1)));
        }
        calls.fetch_add(1, Ordering::Relaxed);
        let parsed = provider.complete(&prompt).and_then(|raw| parse_context_response(&raw));
        if let Ok(p) = parsed {
            return Some(GeoTemporalContext {
                key: key.clone(),
                events: p.events,
                summary: p.summary,
                provider_id: provider.id(),
            });
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(ts: i64, loc: &str) -> PromptRequest {
        PromptRequest { timestamp_utc: ts, location: loc.into(), template_version: "v1".into() }
    }

    #[test]
    fn prompt_contains_iso_time_and_location() {
        // 2000-07-05T12:00:00Z
        let p = build_prompt(&req(962_798_400, "New Hampshire, USA")).unwrap();
        assert!(p.contains("2000-07-05T12:00:00Z"), "{p}");
        assert!(p.contains("New Hampshire, USA"));
        assert_eq!(p, build_prompt(&req(962_798_400, "New Hampshire, USA")).unwrap());
        assert!(matches!(build_prompt(&req(1, "  ")), Err(EnrichError::InvalidRequest(_))));
        let mut bad = req(1, "X");
        bad.template_version = "v9".into();
        assert!(matches!(build_prompt(&bad), Err(EnrichError::UnknownTemplate(_))));
    }

    #[test]
    fn buckets() {
        // Wednesday 2000-07-05 12:00 UTC.
        let ts = 962_798_400;
        assert_eq!(Bucket::Day.label(ts), "2000-07-05");
        assert_eq!(Bucket::Day.start(ts), 962_755_200);
        assert_eq!(Bucket::Week.label(ts), "2000-W27");
        assert_eq!(Bucket::Week.start(ts), 962_755_200 - 2 * 86_400);
    }

    #[test]
    fn parses_plain_and_fenced_replies() {
        let raw = r#"{"events":["Independence Day"],"summary":"Post-holiday summer weekend."}"#;
        let plain = parse_context_response(raw).unwrap();
        assert_eq!(plain.events, vec!["Independence Day"]);
        let fenced = parse_context_response(&format!("```json\n{raw}\n```")).unwrap();
        assert_eq!(plain, fenced);
        let chatty = parse_context_response(&format!("Sure! Here it is:\n{raw}\nHope this helps.")).unwrap();
        assert_eq!(plain, chatty);
    }

    #[test]
    fn schema_and_syntax_errors() {
        assert!(matches!(parse_context_response(r#"{"events":["a"]}"#), Err(EnrichError::SchemaError(_))));
        assert!(matches!(parse_context_response(r#"{"summary":"s"}"#), Err(EnrichError::SchemaError(_))));
        assert!(matches!(
            parse_context_response(r#"{"events":[],"summary":"  "}"#),
            Err(EnrichError::SchemaError(_))
        ));
        assert!(matches!(parse_context_response("no json here"), Err(EnrichError::MalformedResponse(_))));
        let long = format!(r#"{{"events":[],"summary":"{}"}}"#, "x".repeat(2001));
        assert!(matches!(parse_context_response(&long), Err(EnrichError::SchemaError(_))));
    }

    #[test]
    fn events_are_coerced_to_strings() {
        let raw = r#"{"events":["a", 7, {"name":"Cup final","date":"Jul 2"}, null, ""],"summary":"s","extra":1}"#;
        let p = parse_context_response(raw).unwrap();
        assert_eq!(p.events, vec!["a", "7", "Jul 2: Cup final"]);
    }

    #[test]
    fn mock_provider_is_deterministic_and_location_sensitive() {
        let m = MockProvider::new(7);
        let a = build_prompt(&req(962_755_200, "Oslo, Norway")).unwrap();
        let b = build_prompt(&req(962_755_200, "Lima, Peru")).unwrap();
        assert_eq!(m.complete(&a).unwrap(), m.complete(&a).unwrap());
        let pa = parse_context_response(&m.complete(&a).unwrap()).unwrap();
        let pb = parse_context_response(&m.complete(&b).unwrap()).unwrap();
        assert_ne!(pa.events, pb.events);
        assert_ne!(m.complete(&a).unwrap(), MockProvider::new(8).complete(&a).unwrap());
    }
}
