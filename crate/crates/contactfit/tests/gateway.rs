mod common;

use std::time::Duration;

use common::{chat_body, tiny_png, StubServer};
use contactfit::error::AppError;
use contactfit::gateway::{CacheMode, Gateway, PromptTemplate, QuerySpec, RetryPolicy};
use contactfit_core::Mode;

fn gateway(dir: &std::path::Path, mode: CacheMode, url: &str) -> Gateway {
    let mut g = Gateway::new(dir, mode);
    g.endpoint = Some(url.to_string());
    g.api_key = Some("test-key".into());
    g.retry = RetryPolicy { attempts: 3, initial_backoff: Duration::from_millis(5) };
    g.timeout = Duration::from_secs(10);
    g
}

fn spec() -> QuerySpec {
    QuerySpec::new(&tiny_png(), None, PromptTemplate::for_mode(Mode::TwoPerson)).unwrap()
}

#[test]
fn record_writes_twenty_samples_then_replay_reads_them_offline() {
    let server = StubServer::start(vec![(200, chat_body("| Person 1 | Person 2 |\n|---|---|\n| hand | hand |"))]);
    let cache = tempfile::tempdir().unwrap();
    let spec = spec();

    let recorded = gateway(cache.path(), CacheMode::Record, &server.url).sample(&spec).unwrap();
    assert_eq!(recorded.len(), 20);
    assert!(recorded.iter().enumerate().all(|(i, r)| r.sample_index == i && r.text.contains("| hand | hand |")));
    let entry = cache.path().join(spec.cache_key());
    let files = std::fs::read_dir(&entry).unwrap().count();
    assert!(files >= 20, "{files} files in cache entry");
    let bodies = server.requests.lock().unwrap().clone();
    assert_eq!(bodies.len(), 20);
    let body: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(body["temperature"], 0.7);
    assert_eq!(body["n"], 1);

    let before = server.connection_count();
    let replayed = gateway(cache.path(), CacheMode::Replay, &server.url).sample(&spec).unwrap();
    assert_eq!(replayed, recorded);
    std::thread::sleep(Duration::from_millis(50));
    assert_eq!(server.connection_count(), before, "replay opened a connection");
}

#[test]
fn replay_miss_is_a_cache_error_and_opens_no_socket() {
    let server = StubServer::start(vec![(200, chat_body("x"))]);
    let cache = tempfile::tempdir().unwrap();
    let err = gateway(cache.path(), CacheMode::Replay, &server.url).sample(&spec()).unwrap_err();
    assert!(matches!(err, AppError::CacheMiss { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
    std::thread::sleep(Duration::from_millis(50));
    assert_eq!(server.connection_count(), 0);
}

#[test]
fn transient_server_errors_are_retried() {
    let mut script = vec![(503, "busy".to_string()), (429, "slow down".to_string())];
    script.push((200, chat_body("no contact")));
    let server = StubServer::start(script);
    let cache = tempfile::tempdir().unwrap();
    let mut g = gateway(cache.path(), CacheMode::Record, &server.url);
    g.max_in_flight = 1;
    let out = g.sample(&spec()).unwrap();
    assert_eq!(out.len(), 20);
    assert_eq!(server.requests.lock().unwrap().len(), 22);
}

#[test]
fn client_errors_fail_without_touching_the_cache() {
    let server = StubServer::start(vec![(400, "{\"error\":\"bad request\"}".to_string())]);
    let cache = tempfile::tempdir().unwrap();
    let spec = spec();
    let err = gateway(cache.path(), CacheMode::Record, &server.url).sample(&spec).unwrap_err();
    assert!(matches!(err, AppError::Network { attempts: 1, .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert!(!cache.path().join(spec.cache_key()).exists());
}

#[test]
fn record_without_endpoint_is_rejected() {
    let cache = tempfile::tempdir().unwrap();
    let err = Gateway::new(cache.path(), CacheMode::Record).sample(&spec()).unwrap_err();
    assert!(matches!(err, AppError::Validation(_)), "{err}");
}
