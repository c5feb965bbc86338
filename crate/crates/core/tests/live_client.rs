//! The chat-completions client against a local stub server.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use mqgate::backend::{Backend, BackendError, BackendRequest, OpenAiClient, OpenAiConfig, ResponseSource};
use mqgate::prompt::{render, DecodingParams, PromptTemplate};
use mqgate::MultiQueryJob;

#[derive(Default)]
struct Stub {
    script: Mutex<VecDeque<(u16, String)>>,
    seen: Mutex<Vec<(Option<String>, Value)>>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    delay_ms: u64,
}

async fn handle(State(stub): State<Arc<Stub>>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, String) {
    let now = stub.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    stub.peak.fetch_max(now, Ordering::SeqCst);
    let auth = headers.get("authorization").and_then(|v| v.to_str().ok()).map(str::to_string);
    stub.seen.lock().unwrap().push((auth, body));
    if stub.delay_ms > 0 {
        tokio::time::sleep(Duration::from_millis(stub.delay_ms)).await;
    }
    let (status, body) = stub.script.lock().unwrap().pop_front().unwrap_or((200, ok_body("done", true)));
    stub.in_flight.fetch_sub(1, Ordering::SeqCst);
    (StatusCode::from_u16(status).unwrap(), body)
}

fn ok_body(content: &str, with_usage: bool) -> String {
    let mut v = json!({
        "id": "chatcmpl-1",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
    });
    if with_usage {
        v["usage"] = json!({"prompt_tokens": 123, "completion_tokens": 45, "total_tokens": 168});
    }
    v.to_string()
}

async fn start(stub: Arc<Stub>) -> String {
    let app = Router::new().route("/v1/chat/completions", post(handle)).with_state(stub);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}/v1")
}

fn client(base: &str, key: Option<&str>) -> OpenAiClient {
    let mut cfg = OpenAiConfig::new(base);
    cfg.api_key = key.map(str::to_string);
    cfg.backoff_base = Duration::from_millis(1);
    OpenAiClient::new(cfg).unwrap()
}

fn request(params: DecodingParams) -> BackendRequest {
    let job = MultiQueryJob::from_texts(
        "t1",
        "Alice: the budget is \"tight\" … really.\nBob: ünïcödé\ttabs\nAlice: ok",
        ["What about the budget?", "Who spoke last?"],
    )
    .unwrap();
    let prompt = render(&job, &PromptTemplate::json_default(), &params).unwrap();
    BackendRequest::new(prompt, params, "gpt-4o")
}

#[tokio::test]
async fn wire_payload_matches_chat_schema() {
    let stub = Arc::new(Stub::default());
    let base = start(stub.clone()).await;
    let params = DecodingParams { max_input_tokens: 20_000, max_output_tokens: 321, temperature: 0.25 };
    let req = request(params);
    let resp = client(&base, Some("sk-test")).complete(&req).await.unwrap();

    assert_eq!(resp.text, "done");
    assert_eq!((resp.usage.input_tokens, resp.usage.output_tokens, resp.usage.estimated), (123, 45, false));
    assert_eq!(resp.source, ResponseSource::Live);

    let seen = stub.seen.lock().unwrap();
    let (auth, body) = &seen[0];
    assert_eq!(auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(body["model"], "gpt-4o");
    assert_eq!(body["temperature"], 0.25);
    assert_eq!(body["max_tokens"], 321);
    assert_eq!(body["messages"].as_array().unwrap().len(), 1);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"].as_str().unwrap().as_bytes(), req.prompt.text.as_bytes());
}

#[tokio::test]
async fn missing_usage_is_estimated() {
    let stub = Arc::new(Stub::default());
    stub.script.lock().unwrap().push_back((200, ok_body("four words right here", false)));
    let base = start(stub).await;
    let req = request(DecodingParams::default());
    let resp = client(&base, None).complete(&req).await.unwrap();
    assert!(resp.usage.estimated);
    assert_eq!(resp.usage.output_tokens, 6);
    assert_eq!(resp.usage.input_tokens, mqgate::prompt::estimate_tokens(&req.prompt.text) as u64);
}

#[tokio::test]
async fn transient_statuses_are_retried() {
    let stub = Arc::new(Stub::default());
    stub.script.lock().unwrap().extend([(503, "busy".to_string()), (429, "slow down".to_string())]);
    let base = start(stub.clone()).await;
    let resp = client(&base, None).complete(&request(DecodingParams::default())).await.unwrap();
    assert_eq!(resp.text, "done");
    assert_eq!(stub.seen.lock().unwrap().len(), 3);
}

#[tokio::test]
async fn gives_up_after_three_attempts() {
    let stub = Arc::new(Stub::default());
    stub.script.lock().unwrap().extend((0..5).map(|_| (500, "boom".to_string())));
    let base = start(stub.clone()).await;
    let err = client(&base, None).complete(&request(DecodingParams::default())).await.unwrap_err();
    assert!(matches!(err, BackendError::Transport { attempts: 3, .. }), "{err:?}");
    assert_eq!(stub.seen.lock().unwrap().len(), 3);
}

#[tokio::test]
async fn auth_and_context_errors_are_not_retried() {
    let stub = Arc::new(Stub::default());
    stub.script.lock().unwrap().extend([
        (401, "bad key".to_string()),
        (400, r#"{"error":{"code":"context_length_exceeded"}}"#.to_string()),
        (413, "too large".to_string()),
        (400, r#"{"error":"bad temperature"}"#.to_string()),
    ]);
    let base = start(stub.clone()).await;
    let c = client(&base, Some("k"));
    let req = request(DecodingParams::default());
    assert!(matches!(c.complete(&req).await, Err(BackendError::Auth(_))));
    assert!(matches!(c.complete(&req).await, Err(BackendError::ContextLength(_))));
    assert!(matches!(c.complete(&req).await, Err(BackendError::ContextLength(_))));
    assert!(matches!(c.complete(&req).await, Err(BackendError::Http { status: 400, .. })));
    assert_eq!(stub.seen.lock().unwrap().len(), 4);
}

#[tokio::test]
async fn malformed_success_body() {
    let stub = Arc::new(Stub::default());
    stub.script.lock().unwrap().push_back((200, "{\"choices\": []}".to_string()));
    let base = start(stub).await;
    let err = client(&base, None).complete(&request(DecodingParams::default())).await.unwrap_err();
    assert!(matches!(err, BackendError::Malformed(_)), "{err:?}");
}

#[tokio::test]
async fn unreachable_host_is_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let err = client(&format!("http://{addr}/v1"), None).complete(&request(DecodingParams::default())).await.unwrap_err();
    assert!(matches!(err, BackendError::Transport { attempts: 3, .. }));
}

#[tokio::test]
async fn in_flight_requests_respect_the_bound() {
    let stub = Arc::new(Stub { delay_ms: 60, ..Stub::default() });
    let base = start(stub.clone()).await;
    let mut cfg = OpenAiConfig::new(base);
    cfg.max_concurrency = 2;
    let c = Arc::new(OpenAiClient::new(cfg).unwrap());
    let req = Arc::new(request(DecodingParams::default()));
    let tasks: Vec<_> = (0..6)
        .map(|_| {
            let (c, req) = (c.clone(), req.clone());
            tokio::spawn(async move { c.complete(&req).await.unwrap() })
        })
        .collect();
    for t in tasks {
        t.await.unwrap();
    }
    assert_eq!(stub.seen.lock().unwrap().len(), 6);
    assert_eq!(stub.peak.load(Ordering::SeqCst), 2);
}
