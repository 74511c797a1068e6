use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use geotrec_core::corpus::Interaction;
use geotrec_core::enrichment::*;
use proptest::prelude::*;

const T0: i64 = 1_600_000_000;

struct Counting {
    calls: AtomicUsize,
}

impl Provider for Counting {
    fn id(&self) -> String {
        "counting".into()
    }

    fn complete(&self, prompt: &str) -> Result<String, EnrichError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let loc = prompt.lines().find_map(|l| l.strip_prefix("Location: ")).unwrap_or("?");
        Ok(format!("{{\"events\": [\"fair in {loc}\"], \"summary\": \"A calm day in {loc}.\"}}"))
    }
}

/// Replies with malformed text for the first `bad` calls.
struct Flaky {
    bad: usize,
    calls: Mutex<usize>,
}

impl Provider for Flaky {
    fn id(&self) -> String {
        "flaky".into()
    }

    fn complete(&self, _prompt: &str) -> Result<String, EnrichError> {
        let mut n = self.calls.lock().unwrap();
        *n += 1;
        if *n <= self.bad {
            Ok("Sure! Here is some context without any JSON".into())
        } else {
            Ok(r#"{"events": ["concert"], "summary": "Busy evening."}"#.into())
        }
    }
}

fn log_with_keys(n_keys: usize, rows_per_key: usize) -> Vec<Interaction> {
    (0..n_keys)
        .flat_map(|k| {
            (0..rows_per_key).map(move |r| {
                Interaction::new(format!("u{r}"), format!("i{k}"), T0 + (k / 3) as i64 * 86_400 + r as i64, format!("L{}", k % 3))
            })
        })
        .collect()
}

fn fast() -> EnrichConfig {
    EnrichConfig { backoff_ms: 0, ..EnrichConfig::default() }
}

#[test]
fn one_call_per_distinct_key_and_warm_cache_is_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    let log = log_with_keys(30, 4);
    assert_eq!(required_keys(&log, &fast()).len(), 30);

    let p = Counting { calls: AtomicUsize::new(0) };
    let cache = ContextCache::open(&path).unwrap();
    let out = enrich(&log, &p, &cache, &fast()).unwrap();
    assert_eq!(out.contexts.len(), 30);
    assert!(p.calls.load(Ordering::SeqCst) <= 30);
    assert_eq!(out.provider_calls, p.calls.load(Ordering::SeqCst));

    let p2 = Counting { calls: AtomicUsize::new(0) };
    let reopened = ContextCache::open(&path).unwrap();
    let again = enrich(&log, &p2, &reopened, &fast()).unwrap();
    assert_eq!(p2.calls.load(Ordering::SeqCst), 0);
    assert_eq!(again.cache_hits, 30);
    assert_eq!(again.contexts, out.contexts);
}

#[test]
fn retries_malformed_replies() {
    let log = log_with_keys(1, 1);
    let p = Flaky { bad: 2, calls: Mutex::new(0) };
    let out = enrich(&log, &p, &ContextCache::in_memory(), &fast()).unwrap();
    assert_eq!(*p.calls.lock().unwrap(), 3);
    assert_eq!(out.contexts.len(), 1);
    assert_eq!(out.contexts.values().next().unwrap().events, vec!["concert"]);
}

#[test]
fn exhausted_keys_are_reported() {
    let log = log_with_keys(2, 1);
    let p = Flaky { bad: usize::MAX, calls: Mutex::new(0) };
    match enrich(&log, &p, &ContextCache::in_memory(), &fast()) {
        Err(EnrichError::ProviderExhausted(keys)) => assert_eq!(keys.len(), 2),
        other => panic!("expected ProviderExhausted, got {other:?}"),
    }
    let lenient = EnrichConfig { allow_misses: true, ..fast() };
    let out = enrich(&log, &p, &ContextCache::in_memory(), &lenient).unwrap();
    assert_eq!(out.misses.len(), 2);
    assert!(out.contexts.is_empty());
}

#[test]
fn mock_provider_is_deterministic() {
    let log = log_with_keys(6, 2);
    let a = enrich(&log, &MockProvider::new(3), &ContextCache::in_memory(), &fast()).unwrap();
    let b = enrich(&log, &MockProvider::new(3), &ContextCache::in_memory(), &fast()).unwrap();
    assert_eq!(a.contexts, b.contexts);
}

#[test]
fn location_override_collapses_locations() {
    let log = log_with_keys(9, 1);
    let cfg = EnrichConfig { location_override: Some("Anywhere".into()), ..fast() };
    let keys = required_keys(&log, &cfg);
    assert_eq!(keys.len(), 3);
    assert!(keys.keys().all(|k| k.location == "Anywhere"));
}

#[test]
fn cache_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let cache = ContextCache::open(&path).unwrap();
    let ctx = GeoTemporalContext {
        key: ContextKey::new("2020-01-01", "Oslo"),
        events: vec!["New Year".into()],
        summary: "Quiet holiday.".into(),
        provider_id: "p".into(),
    };
    cache.insert("v1", ctx.clone());
    cache.persist().unwrap();
    let back = ContextCache::open(&path).unwrap();
    assert_eq!(back.get(&ctx.key, "v1"), Some(ctx.clone()));
    assert_eq!(back.get(&ctx.key, "v2"), None);
    assert_eq!(back.to_jsonl(), cache.to_jsonl());
}

#[test]
fn corrupt_cache_line_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    std::fs::write(&path, "not json\n").unwrap();
    assert!(matches!(ContextCache::open(&path), Err(EnrichError::CacheFormat { line: 1, .. })));
}

proptest! {
    #[test]
    fn reply_parse_inverts_serialization(
        events in prop::collection::vec("[a-zA-Z0-9 ,.'-]{1,30}", 0..6),
        summary in "[a-zA-Z][a-zA-Z0-9 ,.]{0,200}",
    ) {
        let events: Vec<String> = events.into_iter().map(|e| e.trim().to_string()).filter(|e| !e.is_empty()).collect();
        let summary = summary.trim().to_string();
        let payload = ContextPayload { events, summary };
        let raw = serde_json::to_string(&payload).unwrap();
        prop_assert_eq!(parse_context_response(&raw).unwrap(), payload.clone());
        prop_assert_eq!(parse_context_response(&format!("```json\n{raw}\n```")).unwrap(), payload);
    }

    #[test]
    fn calls_never_exceed_distinct_keys(n_keys in 1usize..20, rows in 1usize..4) {
        let log = log_with_keys(n_keys, rows);
        let p = Counting { calls: AtomicUsize::new(0) };
        let out = enrich(&log, &p, &ContextCache::in_memory(), &fast()).unwrap();
        prop_assert!(p.calls.load(Ordering::SeqCst) <= required_keys(&log, &fast()).len());
        prop_assert_eq!(out.contexts.len(), n_keys);
    }
}
