use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use convrec::config::RunConfig;
use convrec::eval;
use convrec::pipeline;
use convrec::session::{self, Prompt, SessionStatus};
use convrec_service::{router, MetricsSnapshot, Service, WireSession};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

/// Trained once per test binary and shared read-only.
fn trained() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let cfg = config(&dir, &dir.join("unused"));
        pipeline::gen_data(&cfg).unwrap();
        pipeline::pretrain_fm(&cfg).unwrap();
        pipeline::pretrain_active(&cfg).unwrap();
        pipeline::pretrain_negative(&cfg).unwrap();
        pipeline::train_policy(&cfg).unwrap();
        dir
    })
}

fn config(out: &Path, transcripts: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.run.output_dir = out.to_string_lossy().into_owned();
    for (k, v) in [
        ("data.users", "30"),
        ("data.items", "40"),
        ("data.attributes", "12"),
        ("data.topic_size", "4"),
        ("fm.dim", "8"),
        ("fm.epochs", "3"),
        ("active.episodes", "10"),
        ("negative.episodes", "10"),
        ("policy.train_sessions", "20"),
        ("policy.batch_size", "8"),
        ("eval.variants", "full"),
        ("session.top_k", "1"),
    ] {
        c.set(k, v).unwrap();
    }
    c.service.transcripts = transcripts.to_string_lossy().into_owned();
    c
}

fn service(transcripts: &Path) -> Arc<Service> {
    Arc::new(Service::open(&config(trained(), transcripts)).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

async fn create(app: &Router, body: Value) -> WireSession {
    let (status, v) = call(app, "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    serde_json::from_value(v).unwrap()
}

fn target_of(p: &Prompt) -> Value {
    match p {
        Prompt::Ask { attribute } => json!(attribute),
        Prompt::Recommend { items } => json!(items),
    }
}

async fn answer(app: &Router, s: &WireSession, response: &str) -> (StatusCode, Value) {
    let target = target_of(s.prompt.as_ref().expect("pending prompt"));
    call(app, "POST", &format!("/sessions/{}/feedback", s.token), Some(json!({"response": response, "target": target}))).await
}

async fn reject_until_done(app: &Router, mut s: WireSession) -> WireSession {
    while !s.status.is_terminal() {
        let (status, v) = answer(app, &s, "reject").await;
        assert_eq!(status, StatusCode::OK, "{v}");
        let next: WireSession = serde_json::from_value(v).unwrap();
        assert_eq!(next.turn, s.turn + 1);
        s = next;
    }
    s
}

fn code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap()
}

#[tokio::test]
async fn missing_checkpoints_make_creation_unavailable() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config(out.path(), &out.path().join("t"));
    let app = router(Arc::new(Service::open(&cfg).unwrap()));
    let (status, v) = call(&app, "POST", "/sessions", Some(json!({}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(code(&v), "model_unavailable");
    let (status, v) = call(&app, "GET", "/metrics", None).await;
    assert_eq!(status, StatusCode::OK);
    let m: MetricsSnapshot = serde_json::from_value(v).unwrap();
    assert_eq!((m.active_sessions, m.completed_sessions, m.aborted_sessions), (0, 0, 0));
    assert_eq!(m.success_rate, None);
}

#[tokio::test]
async fn sessions_get_distinct_tokens_and_a_first_prompt() {
    let t = tempfile::tempdir().unwrap();
    let app = router(service(t.path()));
    let a = create(&app, json!({"user": 0})).await;
    let b = create(&app, json!({"user": 0})).await;
    assert_ne!(a.token, b.token);
    assert!(a.prompt.is_some());
    assert_eq!(a.turn, 0);
    assert_eq!(a.status, SessionStatus::Active);
    assert!(!a.cold_start);
    let (status, v) = call(&app, "GET", &format!("/sessions/{}", a.token), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_value::<WireSession>(v).unwrap(), a);
}

#[tokio::test]
async fn unknown_users_start_cold() {
    let t = tempfile::tempdir().unwrap();
    let app = router(service(t.path()));
    for body in [json!({"user": 999_999}), json!({}), json!({"user": 35})] {
        let s = create(&app, body).await;
        assert!(s.cold_start);
        assert_eq!(s.user, None);
        assert!(s.prompt.is_some());
    }
}

#[tokio::test]
async fn error_codes() {
    let t = tempfile::tempdir().unwrap();
    let app = router(service(t.path()));
    let (status, v) = call(&app, "GET", "/sessions/nope", None).await;
    assert_eq!((status, code(&v)), (StatusCode::NOT_FOUND, "session_not_found"));
    let (status, v) = call(&app, "POST", "/sessions/nope/feedback", Some(json!({"response": "accept", "target": 1}))).await;
    assert_eq!((status, code(&v)), (StatusCode::NOT_FOUND, "session_not_found"));

    let s = create(&app, json!({"user": 1})).await;
    let url = format!("/sessions/{}/feedback", s.token);
    let (status, v) = call(&app, "POST", &url, Some(json!({"response": "maybe", "target": 1}))).await;
    assert_eq!((status, code(&v)), (StatusCode::BAD_REQUEST, "invalid_body"));
    let (status, v) = call(&app, "POST", &url, Some(json!({"response": "reject", "target": 123_456}))).await;
    assert_eq!((status, code(&v)), (StatusCode::CONFLICT, "target_mismatch"));
    let (_, v) = call(&app, "GET", &format!("/sessions/{}", s.token), None).await;
    assert_eq!(v["turn"], 0, "a conflicting answer must not advance the session");

    let done = reject_until_done(&app, s).await;
    let (status, v) = call(&app, "POST", &url, Some(json!({"response": "reject", "target": 1}))).await;
    assert_eq!((status, code(&v)), (StatusCode::GONE, "session_finished"));
    assert!(done.prompt.is_none());
}

#[tokio::test]
async fn rejections_run_to_the_turn_limit() {
    let t = tempfile::tempdir().unwrap();
    let app = router(service(t.path()));
    let s = create(&app, json!({"user": 2})).await;
    let done = reject_until_done(&app, s).await;
    assert_eq!(done.status, SessionStatus::MaxTurnFail);
    assert_eq!(done.turn, 15);
    assert_eq!(done.history.len(), 15);
}

#[tokio::test]
async fn accepting_a_recommended_item_succeeds() {
    let t = tempfile::tempdir().unwrap();
    let app = router(service(t.path()));
    let mut s = create(&app, json!({"user": 3})).await;
    loop {
        match s.prompt.clone().unwrap() {
            Prompt::Ask { .. } => {
                let (status, v) = answer(&app, &s, "reject").await;
                assert_eq!(status, StatusCode::OK);
                s = serde_json::from_value(v).unwrap();
            }
            Prompt::Recommend { items } => {
                let url = format!("/sessions/{}/feedback", s.token);
                let (status, v) = call(&app, "POST", &url, Some(json!({"response": "accept", "target": items[0]}))).await;
                assert_eq!(status, StatusCode::OK, "{v}");
                let done: WireSession = serde_json::from_value(v).unwrap();
                assert_eq!(done.status, SessionStatus::Success);
                assert_eq!(done.success_item, Some(items[0]));
                assert_eq!(done.turn, s.turn + 1);
                return;
            }
        }
    }
}

#[tokio::test]
async fn idle_sessions_are_aborted() {
    let t = tempfile::tempdir().unwrap();
    let mut cfg = config(trained(), t.path());
    cfg.service.timeout_secs = 0;
    let svc = Arc::new(Service::open(&cfg).unwrap());
    let app = router(svc.clone());
    let s = create(&app, json!({"user": 4})).await;
    assert_eq!(svc.sweep(Instant::now()).unwrap(), 1);
    let (status, v) = answer(&app, &s, "accept").await;
    assert_eq!((status, code(&v)), (StatusCode::GONE, "session_finished"));
    let m = svc.metrics();
    assert_eq!((m.active_sessions, m.aborted_sessions, m.completed_sessions), (0, 1, 0));
    let (_, v) = call(&app, "GET", &format!("/sessions/{}", s.token), None).await;
    assert_eq!(v["status"], "aborted");
}

/// Plays a mix of finished and unfinished sessions, interleaving turns.
async fn play_mixed(app: &Router) -> Vec<WireSession> {
    let mut open = Vec::new();
    for u in 0..6u32 {
        open.push(create(app, json!({"user": u})).await);
    }
    for round in 0..20 {
        for (k, s) in open.iter_mut().enumerate() {
            if s.status.is_terminal() || (k % 3 == 0 && round >= 2) {
                continue;
            }
            let response = if k % 3 == 1 && matches!(s.prompt, Some(Prompt::Recommend { .. })) && round >= 3 { "accept" } else { "reject" };
            let (status, v) = answer(app, s, response).await;
            assert_eq!(status, StatusCode::OK, "{v}");
            *s = serde_json::from_value(v).unwrap();
        }
    }
    open
}

#[tokio::test]
async fn restart_restores_sessions_and_metrics() {
    let t = tempfile::tempdir().unwrap();
    let app = router(service(t.path()));
    let sessions = play_mixed(&app).await;
    let (_, before) = call(&app, "GET", "/metrics", None).await;
    let unfinished: Vec<&WireSession> = sessions.iter().filter(|s| !s.status.is_terminal()).collect();
    assert!(!unfinished.is_empty());
    assert!(sessions.iter().any(|s| s.status.is_terminal()));

    let app2 = router(service(t.path()));
    let (_, after) = call(&app2, "GET", "/metrics", None).await;
    assert_eq!(before, after);
    for s in &sessions {
        let (status, v) = call(&app2, "GET", &format!("/sessions/{}", s.token), None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(&serde_json::from_value::<WireSession>(v).unwrap(), s);
    }
    // Restored sessions keep going.
    for s in unfinished {
        let (status, v) = answer(&app2, s, "reject").await;
        assert_eq!(status, StatusCode::OK, "{v}");
        assert_eq!(v["turn"], s.turn + 1);
    }
}

#[tokio::test]
async fn metrics_match_the_harness_on_stored_transcripts() {
    let t = tempfile::tempdir().unwrap();
    let app = router(service(t.path()));
    let mut last: Option<MetricsSnapshot> = None;
    for s in play_mixed(&app).await {
        if !s.status.is_terminal() {
            reject_until_done(&app, s).await;
        }
        let (_, v) = call(&app, "GET", "/metrics", None).await;
        let m: MetricsSnapshot = serde_json::from_value(v).unwrap();
        if let Some(prev) = &last {
            assert!(m.completed_sessions >= prev.completed_sessions);
            assert!(m.aborted_sessions >= prev.aborted_sessions);
            assert!(m.successes >= prev.successes);
        }
        last = Some(m);
    }
    let m = last.unwrap();
    assert_eq!(m.active_sessions, 0);

    let mut lines = Vec::new();
    for entry in std::fs::read_dir(t.path()).unwrap() {
        let f = std::fs::File::open(entry.unwrap().path()).unwrap();
        lines.extend(session::read_transcript(std::io::BufReader::new(f)).unwrap());
    }
    let all = eval::outcomes_from_transcripts(&lines).unwrap();
    let done: Vec<_> = all.into_iter().filter(|o| matches!(o.status, SessionStatus::Success | SessionStatus::MaxTurnFail)).collect();
    assert_eq!(m.completed_sessions, done.len());
    assert_eq!(m.success_rate, Some(eval::success_rate_at(&done, 15).unwrap()));
    assert_eq!(m.average_turns, Some(eval::average_turns(&done).unwrap()));
    assert_eq!(m.rec_ratio, eval::rec_ratio_curve(&done, 15).unwrap());
}
