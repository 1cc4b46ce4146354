use std::sync::Arc;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use flowsight_core::embed::{EmbedError, EmbedderKind, EmbedderSpec, RemoteEmbedder};
use flowsight_core::generation::{build_prompt, GenerationError, LlmClient, LlmKind, LlmSpec, RemoteLlm};
use flowsight_core::kb::{CollectionId, Metadata, MetadataFilter};
use flowsight_core::retrieval::{CrossScorer, Gate, RemoteScorer, RetrievalItem, RetrievalResult, ScorerError, ScorerKind, ScorerSpec, StageCounts};
use flowsight_core::Embedder;
use parking_lot::Mutex;
use serde_json::{json, Value};

#[derive(Default)]
struct Seen {
    bodies: Mutex<Vec<(String, Option<String>, Value)>>,
}

fn auth(h: &HeaderMap) -> Option<String> {
    h.get("authorization").and_then(|v| v.to_str().ok()).map(String::from)
}

async fn embed(State(s): State<Arc<Seen>>, h: HeaderMap, Json(b): Json<Value>) -> (StatusCode, Json<Value>) {
    s.bodies.lock().push(("embed".into(), auth(&h), b.clone()));
    let n = b["inputs"].as_array().map_or(0, Vec::len);
    if b["inputs"][0] == "short" {
        return (StatusCode::OK, Json(json!({ "vectors": [[1.0, 0.0]] })));
    }
    let vectors: Vec<Value> = (0..n).map(|i| json!([3.0, 4.0 + i as f64, 0.0, 0.0])).collect();
    (StatusCode::OK, Json(json!({ "vectors": vectors })))
}

async fn score(State(s): State<Arc<Seen>>, h: HeaderMap, Json(b): Json<Value>) -> Json<Value> {
    s.bodies.lock().push(("score".into(), auth(&h), b.clone()));
    let pairs = b["pairs"].as_array().unwrap();
    if pairs[0][1] == "same" {
        return Json(json!({ "scores": vec![2.5; pairs.len()] }));
    }
    Json(json!({ "scores": (0..pairs.len()).map(|i| -1.0 + i as f64).collect::<Vec<_>>() }))
}

async fn chat(State(s): State<Arc<Seen>>, h: HeaderMap, Json(b): Json<Value>) -> Json<Value> {
    s.bodies.lock().push(("chat".into(), auth(&h), b.clone()));
    let content = "VERDICT: attack\nFlood.\nJUSTIFICATION: Both echo records [A1] [A2] show it.\nMITIGATIONS:\n1. Rate-limit ICMP.";
    Json(json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] }))
}

async fn broken() -> StatusCode {
    StatusCode::INTERNAL_SERVER_ERROR
}

/// Starts the fake backends on an ephemeral port in a background runtime.
fn serve() -> (String, Arc<Seen>) {
    let seen = Arc::new(Seen::default());
    let app = Router::new()
        .route("/embed", post(embed))
        .route("/score", post(score))
        .route("/chat", post(chat))
        .route("/broken", post(broken))
        .with_state(seen.clone());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let l = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(l.local_addr().unwrap()).unwrap();
            axum::serve(l, app).await.unwrap();
        });
    });
    (format!("http://{}", rx.recv().unwrap()), seen)
}

#[test]
fn embedder_wire_format_and_errors() {
    let (base, seen) = serve();
    std::env::set_var("FLOWSIGHT_TEST_EMBED_KEY", "ek");
    let spec = |path: &str, dim| EmbedderSpec {
        kind: EmbedderKind::Remote,
        dim,
        endpoint: Some(format!("{base}{path}")),
        model: Some("mini".into()),
        api_key_env: Some("FLOWSIGHT_TEST_EMBED_KEY".into()),
        ..EmbedderSpec::default()
    };
    let e = RemoteEmbedder::from_spec(&spec("/embed", 4)).unwrap();
    let vs = e.embed_batch(&["a", "b"]).unwrap();
    assert_eq!(vs[0].as_slice(), &[0.6, 0.8, 0.0, 0.0]);
    assert!((vs[1].norm() - 1.0).abs() < 1e-6);
    let (kind, token, body) = seen.bodies.lock()[0].clone();
    assert_eq!(kind, "embed");
    assert_eq!(token.as_deref(), Some("Bearer ek"));
    assert_eq!(body, json!({"model": "mini", "inputs": ["a", "b"]}));

    assert!(matches!(e.embed("short"), Err(EmbedError::DimensionMismatch { expected: 4, actual: 2 })));
    assert!(matches!(e.embed("  "), Err(EmbedError::EmptyText)));
    let broken = RemoteEmbedder::from_spec(&spec("/broken", 4)).unwrap();
    assert!(matches!(broken.embed("x"), Err(EmbedError::RemoteUnavailable(_))));
    let missing = EmbedderSpec { api_key_env: Some("FLOWSIGHT_TEST_UNSET_VAR".into()), ..spec("/embed", 4) };
    assert!(RemoteEmbedder::from_spec(&missing).is_err());
}

#[test]
fn scorer_normalizes_per_batch() {
    let (base, seen) = serve();
    let spec = ScorerSpec {
        kind: ScorerKind::Remote,
        endpoint: Some(format!("{base}/score")),
        model: Some("ce".into()),
        ..ScorerSpec::default()
    };
    let s = RemoteScorer::from_spec(&spec).unwrap();
    assert_eq!(s.score_batch("q", &["a", "b", "c"]).unwrap(), vec![0.0, 0.5, 1.0]);
    assert_eq!(s.score_batch("q", &["same", "x"]).unwrap(), vec![0.5, 0.5]);
    assert_eq!(s.score_batch("q", &[]).unwrap(), Vec::<f64>::new());
    let body = seen.bodies.lock()[0].2.clone();
    assert_eq!(body, json!({"model": "ce", "pairs": [["q", "a"], ["q", "b"], ["q", "c"]]}));
    assert!(seen.bodies.lock()[0].1.is_none());
    let down = RemoteScorer::from_spec(&ScorerSpec { endpoint: Some(format!("{base}/broken")), ..spec }).unwrap();
    assert!(matches!(down.score_batch("q", &["a"]), Err(ScorerError::ScorerUnavailable(_))));
}

fn evidence() -> RetrievalResult {
    let it = |id: &str| RetrievalItem {
        entry_id: id.into(),
        collection: CollectionId::Anomaly,
        summary: format!("host 203.0.113.5 sent an ICMP echo request to 10.3.0.5 ({id})"),
        meta: Metadata { record_id: id.into(), ..Default::default() },
        sim_score: 0.8,
        rerank_score: 0.6,
    };
    RetrievalResult {
        items: vec![it("A1"), it("A2")],
        gate: Gate::Passed,
        diagnostics: vec![],
        counts: StageCounts::default(),
        filter: MetadataFilter::match_all(),
    }
}

#[test]
fn chat_request_shape_and_overflow() {
    let (base, seen) = serve();
    std::env::set_var("FLOWSIGHT_TEST_LLM_KEY", "lk");
    let spec = LlmSpec {
        kind: LlmKind::Remote,
        endpoint: Some(format!("{base}/chat")),
        model: Some("m".into()),
        api_key_env: Some("FLOWSIGHT_TEST_LLM_KEY".into()),
        ..LlmSpec::default()
    };
    let llm = RemoteLlm::from_spec(&spec).unwrap();
    let r = evidence();
    let p = build_prompt("Is 10.3.0.5 flooded?", &r, None).unwrap();
    let raw = llm.complete(&p).unwrap();
    let v = flowsight_core::generation::parse_verdict(&raw, &r).unwrap();
    assert_eq!(v.citations, vec!["A1", "A2"]);
    let (_, token, body) = seen.bodies.lock()[0].clone();
    assert_eq!(token.as_deref(), Some("Bearer lk"));
    assert_eq!(body["model"], "m");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][0]["content"], p.system_text);
    assert_eq!(body["messages"][1]["content"], p.user_text());

    let tiny = RemoteLlm::from_spec(&LlmSpec { context_tokens: 10, ..spec.clone() }).unwrap();
    let calls = seen.bodies.lock().len();
    assert!(matches!(tiny.complete(&p), Err(GenerationError::ContextOverflow(_))));
    assert_eq!(seen.bodies.lock().len(), calls);
    let down = RemoteLlm::from_spec(&LlmSpec { endpoint: Some(format!("{base}/broken")), ..spec }).unwrap();
    assert!(matches!(down.complete(&p), Err(GenerationError::RemoteUnavailable(_))));
}
