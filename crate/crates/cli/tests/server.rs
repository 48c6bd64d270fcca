mod common;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use common::*;
use nriqa_cli::args::ServeArgs;
use nriqa_cli::commands;
use nriqa_cli::server::{self, AppState, SessionSummary, TrialDescriptor, VerdictReport, SESSION_LOG};
use nriqa_core::study::{self, SessionState, SessionStore};
use nriqa_core::{MeasureKind, ModelKind};
use serde_json::{json, Value};
use tempfile::{tempdir, TempDir};
use tower::ServiceExt;

struct Fixture {
    tmp: TempDir,
}

impl Fixture {
    /// One candidate set named `set_a` with three candidates.
    fn new() -> Self {
        let tmp = tempdir().unwrap();
        let img = scene(tmp.path(), "a.png", 31, 24);
        let args = attack_args(&img, ModelKind::Nss, MeasureKind::NegSsim, &tmp.path().join("set_a"));
        commands::attack(&args).unwrap();
        Self { tmp }
    }

    fn set_dir(&self) -> std::path::PathBuf {
        self.tmp.path().join("set_a")
    }

    fn state_dir(&self) -> std::path::PathBuf {
        self.tmp.path().join("study")
    }

    fn app(&self) -> Router {
        let state = server::load_state(&ServeArgs {
            sets: vec![self.set_dir()],
            host: "127.0.0.1".into(),
            port: 0,
            repetitions: 3,
            out: self.state_dir(),
        })
        .unwrap();
        server::router(state)
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn json_call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, if b.is_empty() { Value::Null } else { serde_json::from_slice(&b).unwrap() })
}

async fn create(app: &Router, seed: u64) -> String {
    let (s, v) = json_call(app, Method::POST, "/sessions", Some(json!({ "candidate_set": "set_a", "seed": seed }))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

async fn next(app: &Router, id: &str, observer: &str) -> Option<TrialDescriptor> {
    let (s, b) = call(app, Method::GET, &format!("/sessions/{id}/next-trial?observer={observer}"), None).await;
    match s {
        StatusCode::NO_CONTENT => None,
        StatusCode::OK => Some(serde_json::from_slice(&b).unwrap()),
        other => panic!("next-trial returned {other}"),
    }
}

async fn answer(app: &Router, id: &str, trial: usize, observer: &str, answer: &str) -> (StatusCode, Value) {
    json_call(
        app,
        Method::POST,
        &format!("/sessions/{id}/responses"),
        Some(json!({ "trial": trial, "observer": observer, "answer": answer, "response_ms": 420, "timestamp": 7 })),
    )
    .await
}

/// Answers "identical" exactly when the trial shows candidate 0 or 2.
fn policy(d: &TrialDescriptor) -> &'static str {
    let shown = [&d.image_a, &d.image_b];
    if shown.iter().any(|u| u.ends_with("candidate_00.png") || u.ends_with("candidate_02.png")) {
        "identical"
    } else {
        "different"
    }
}

async fn run_to_completion(app: &Router, id: &str, observer: &str) -> usize {
    let mut n = 0;
    while let Some(d) = next(app, id, observer).await {
        let (s, v) = answer(app, id, d.trial, observer, policy(&d)).await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
        n += 1;
    }
    n
}

#[tokio::test]
async fn trials_carry_the_presentation_timing_and_servable_images() {
    let f = Fixture::new();
    let app = f.app();
    let id = create(&app, 0).await;
    let d = next(&app, &id, "alice").await.unwrap();
    assert_eq!(d.display_ms, 1000);
    assert_eq!(d.blank_ms, 500);
    assert_eq!(d.session, id);
    let urls = [&d.image_a, &d.image_b];
    assert_eq!(urls.iter().filter(|u| u.ends_with("/initial.png")).count(), 1);
    for url in urls {
        let (s, bytes) = call(&app, Method::GET, url, None).await;
        assert_eq!(s, StatusCode::OK);
        let file = url.rsplit('/').next().unwrap();
        assert_eq!(bytes, fs::read(f.set_dir().join(file)).unwrap());
    }
    // The descriptor is all the page sees: no λ, distance or model.
    let raw = serde_json::to_value(&d).unwrap();
    let keys: Vec<&String> = raw.as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 6, "{keys:?}");
}

#[tokio::test]
async fn only_manifest_images_are_served() {
    let f = Fixture::new();
    let app = f.app();
    for path in ["/images/set_a/manifest.json", "/images/set_a/attack.run.json", "/images/other/initial.png", "/images/set_a/..%2Fa.png"] {
        let (s, _) = call(&app, Method::GET, path, None).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{path}");
    }
}

#[tokio::test]
async fn presentation_order_is_counterbalanced() {
    let f = Fixture::new();
    let app = f.app();
    let id = create(&app, 4).await;
    let mut perturbed_first = 0;
    let mut total = 0;
    while let Some(d) = next(&app, &id, "alice").await {
        if !d.image_a.ends_with("/initial.png") {
            perturbed_first += 1;
        }
        total += 1;
        answer(&app, &id, d.trial, "alice", "different").await;
    }
    assert_eq!(total, 9);
    assert!(perturbed_first > 0 && perturbed_first < total);
}

#[tokio::test]
async fn verdicts_match_an_offline_replay_of_the_log() {
    let f = Fixture::new();
    let app = f.app();
    let id = create(&app, 1).await;

    let (s, _) = json_call(&app, Method::GET, &format!("/sessions/{id}/verdicts"), None).await;
    assert_eq!(s, StatusCode::CONFLICT, "open sessions have no verdicts");

    assert_eq!(run_to_completion(&app, &id, "alice").await, 9);
    assert!(next(&app, &id, "alice").await.is_none());

    let (s, summary) = json_call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    let summary: SessionSummary = serde_json::from_value(summary).unwrap();
    assert_eq!((summary.trials, summary.answered, summary.responses), (9, 9, 9));
    assert_eq!(summary.state, SessionState::Complete);

    let (s, report) = json_call(&app, Method::GET, &format!("/sessions/{id}/verdicts"), None).await;
    assert_eq!(s, StatusCode::OK);
    let report: VerdictReport = serde_json::from_value(report).unwrap();
    assert_eq!(report.verdicts, vec![study::verdict(0, 3, 3), study::verdict(1, 3, 0), study::verdict(2, 3, 3)]);

    let offline = SessionStore::open(f.state_dir().join(SESSION_LOG)).unwrap();
    let replayed = offline.get(&id).unwrap().lock().unwrap().clone();
    assert_eq!(replayed.verdicts().unwrap(), report.verdicts);
    assert!(replayed.responses.iter().all(|r| r.response_ms == 420 && r.timestamp == 7));

    let set = load(&f.set_dir());
    let want = study::select_counterexample(&report.verdicts, &set).unwrap();
    let selected = report.selected.unwrap();
    assert_eq!(selected.candidate, want.index);
    assert!(selected.candidate == 0 || selected.candidate == 2);
    assert_eq!(selected.image, format!("/images/set_a/{}", want.file_name()));
}

#[tokio::test]
async fn a_restarted_service_resumes_from_the_log() {
    let f = Fixture::new();
    let id = {
        let app = f.app();
        let id = create(&app, 2).await;
        for _ in 0..4 {
            let d = next(&app, &id, "bob").await.unwrap();
            answer(&app, &id, d.trial, "bob", policy(&d)).await;
        }
        id
    };
    let app = f.app();
    let (_, summary) = json_call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(summary["answered"], 4);
    assert_eq!(summary["state"], "open");
    assert_eq!(run_to_completion(&app, &id, "bob").await, 5);
    let (_, report) = json_call(&app, Method::GET, &format!("/sessions/{id}/verdicts"), None).await;
    assert_eq!(report["verdicts"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn bad_requests_get_precise_statuses() {
    let f = Fixture::new();
    let app = f.app();
    let (s, v) = json_call(&app, Method::GET, "/sessions/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["error"].as_str().unwrap().contains("nope"));
    let (s, _) = json_call(&app, Method::POST, "/sessions", Some(json!({ "candidate_set": "missing" }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json_call(&app, Method::POST, "/sessions", Some(json!({ "candidate_set": "set_a", "repetitions": 0 }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let id = create(&app, 0).await;
    let (s, _) = answer(&app, &id, 999, "carol", "identical").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let d = next(&app, &id, "carol").await.unwrap();
    assert_eq!(answer(&app, &id, d.trial, "carol", "identical").await.0, StatusCode::CREATED);
    assert_eq!(answer(&app, &id, d.trial, "carol", "different").await.0, StatusCode::CONFLICT);
    let (s, _) = call(&app, Method::POST, &format!("/sessions/{id}/responses"), Some(json!({ "trial": 0 }))).await;
    assert!(s.is_client_error());
}

#[tokio::test]
async fn force_close_reports_only_fully_answered_candidates() {
    let f = Fixture::new();
    let app = f.app();
    let id = create(&app, 3).await;
    let plan = {
        let store = SessionStore::open(f.state_dir().join(SESSION_LOG)).unwrap();
        let plan = store.get(&id).unwrap().lock().unwrap().plan.clone();
        plan
    };
    // Answer every trial of candidate 1 and nothing else.
    for t in plan.iter().filter(|t| t.candidate == 1) {
        assert_eq!(answer(&app, &id, t.id, "dan", "identical").await.0, StatusCode::CREATED);
    }
    let (s, v) = json_call(&app, Method::POST, &format!("/sessions/{id}/close"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["state"], "force-closed");
    assert!(next(&app, &id, "dan").await.is_none());
    let (_, report) = json_call(&app, Method::GET, &format!("/sessions/{id}/verdicts"), None).await;
    let report: VerdictReport = serde_json::from_value(report).unwrap();
    assert_eq!(report.verdicts, vec![study::verdict(1, 3, 3)]);
    assert_eq!(report.selected.unwrap().candidate, 1);
    let (s, _) = answer(&app, &id, plan[0].id, "erin", "identical").await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn sets_can_be_opened_by_directory() {
    let f = Fixture::new();
    let state = Arc::new(AppState::new(SessionStore::in_memory(), 2));
    let app = server::router(state.clone());
    let dir = f.set_dir();
    let (s, v) = json_call(&app, Method::POST, "/sessions", Some(json!({ "candidate_set": dir.to_str().unwrap() }))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let id = v["id"].as_str().unwrap();
    let d = next(&app, id, "x").await.unwrap();
    assert!(d.image_a.starts_with("/images/set_a/"));
    assert_eq!(state.store().ids(), vec![id.to_string()]);
    assert!(Path::new(&dir).join("manifest.json").exists());
}
