//! HTTP front of the yes-no study.
//!
//! Routes:
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/sessions` | `{candidate_set, repetitions?, seed?}` → `{id}` |
//! | GET | `/sessions/{id}` | progress summary |
//! | GET | `/sessions/{id}/next-trial?observer=` | trial descriptor, or 204 when done |
//! | POST | `/sessions/{id}/responses` | `{trial, observer, answer, response_ms?, timestamp?}` |
//! | POST | `/sessions/{id}/close` | force-close with partial data |
//! | GET | `/sessions/{id}/verdicts` | verdicts and the selected counterexample |
//! | GET | `/images/{set}/{name}` | the PNG bytes exactly as stored |
//!
//! Every accepted response is appended to the session log before it is
//! acknowledged, so a restart replays to the same state.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nriqa_core::attack::INITIAL;
use nriqa_core::study::{self, Answer, JndVerdict, SessionState, SessionStore, TrialResponse};
use nriqa_core::CandidateSet;
use serde::{Deserialize, Serialize};

use crate::args::ServeArgs;
use crate::commands::{load_set, set_name};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

pub const SESSION_LOG: &str = "sessions.jsonl";

struct LoadedSet {
    dir: PathBuf,
    set: Arc<CandidateSet>,
}

pub struct AppState {
    store: SessionStore,
    sets: RwLock<BTreeMap<String, LoadedSet>>,
    repetitions: usize,
}

impl AppState {
    pub fn new(store: SessionStore, repetitions: usize) -> Self {
        Self {
            store,
            sets: RwLock::new(BTreeMap::new()),
            repetitions,
        }
    }

    /// Loads a candidate-set directory and exposes it under its directory name.
    pub fn add_set(&self, dir: &Path) -> CliResult<String> {
        let set = load_set(dir)?;
        let name = set_name(dir);
        self.sets.write().expect("set registry").insert(
            name.clone(),
            LoadedSet {
                dir: dir.to_path_buf(),
                set: Arc::new(set),
            },
        );
        Ok(name)
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    fn set(&self, name: &str) -> Option<(PathBuf, Arc<CandidateSet>)> {
        self.sets
            .read()
            .expect("set registry")
            .get(name)
            .map(|s| (s.dir.clone(), s.set.clone()))
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn not_found(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, msg.into())
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_summary))
        .route("/sessions/{id}/next-trial", get(next_trial))
        .route("/sessions/{id}/responses", post(record_response))
        .route("/sessions/{id}/close", post(close_session))
        .route("/sessions/{id}/verdicts", get(verdicts))
        .route("/images/{set}/{name}", get(image))
        .with_state(state)
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    /// Registered set name, or a directory to load.
    pub candidate_set: String,
    pub repetitions: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let name = if app.set(&req.candidate_set).is_some() {
        req.candidate_set.clone()
    } else if Path::new(&req.candidate_set).is_dir() {
        app.add_set(Path::new(&req.candidate_set))
            .map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?
    } else {
        return Err(not_found(format!("unknown candidate set {:?}", req.candidate_set)));
    };
    let (_, set) = app.set(&name).expect("just registered");
    let candidates = set.candidates.iter().map(|c| c.index).collect();
    let id = app
        .store
        .create(name, candidates, req.repetitions.unwrap_or(app.repetitions), req.seed)
        .map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "id": id }))))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub candidate_set: String,
    pub trials: usize,
    pub answered: usize,
    pub responses: usize,
    pub state: SessionState,
}

async fn session_summary(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionSummary>> {
    let session = app.store.get(&id).ok_or_else(|| not_found(format!("unknown session {id}")))?;
    let s = session.lock().expect("session lock");
    let mut answered: Vec<usize> = s.responses.iter().map(|r| r.trial).collect();
    answered.sort_unstable();
    answered.dedup();
    Ok(Json(SessionSummary {
        id: s.header.id.clone(),
        candidate_set: s.header.candidate_set.clone(),
        trials: s.plan.len(),
        answered: answered.len(),
        responses: s.responses.len(),
        state: s.state,
    }))
}

#[derive(Debug, Deserialize)]
pub struct ObserverQuery {
    pub observer: String,
}

/// What the trial UI needs to run one presentation. Carries no λ, distance
/// or model so the page cannot leak them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDescriptor {
    pub session: String,
    pub trial: usize,
    pub image_a: String,
    pub image_b: String,
    pub display_ms: u64,
    pub blank_ms: u64,
}

async fn next_trial(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ObserverQuery>,
) -> ApiResult<Response> {
    let session = app.store.get(&id).ok_or_else(|| not_found(format!("unknown session {id}")))?;
    let s = session.lock().expect("session lock");
    let Some(trial) = s.next_trial(&q.observer) else {
        return Ok(StatusCode::NO_CONTENT.into_response());
    };
    let (_, set) = app
        .set(&s.header.candidate_set)
        .ok_or_else(|| not_found(format!("candidate set {:?} is not loaded", s.header.candidate_set)))?;
    let candidate = set
        .get(trial.candidate)
        .ok_or_else(|| not_found(format!("candidate {} missing from set", trial.candidate)))?;
    let url = |name: &str| format!("/images/{}/{name}", s.header.candidate_set);
    let (perturbed, initial) = (url(&candidate.file_name()), url(INITIAL));
    let (image_a, image_b) = if trial.perturbed_first {
        (perturbed, initial)
    } else {
        (initial, perturbed)
    };
    Ok(Json(TrialDescriptor {
        session: id,
        trial: trial.id,
        image_a,
        image_b,
        display_ms: study::DISPLAY_MS,
        blank_ms: study::BLANK_MS,
    })
    .into_response())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseBody {
    pub trial: usize,
    pub observer: String,
    pub answer: Answer,
    #[serde(default)]
    pub response_ms: u64,
    pub timestamp: Option<u64>,
}

async fn record_response(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<ResponseBody>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let session = app.store.get(&id).ok_or_else(|| not_found(format!("unknown session {id}")))?;
    if session.lock().expect("session lock").trial(body.trial).is_none() {
        return Err(not_found(format!("unknown trial {}", body.trial)));
    }
    let timestamp = body.timestamp.unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64)
    });
    let response = TrialResponse {
        trial: body.trial,
        observer: body.observer,
        answer: body.answer,
        response_ms: body.response_ms,
        timestamp,
    };
    app.store
        .record(&id, response)
        .map_err(|e| ApiError(StatusCode::CONFLICT, e.to_string()))?;
    let state = session.lock().expect("session lock").state;
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "recorded": true, "state": state }))))
}

async fn close_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    app.store.force_close(&id).map_err(|e| not_found(e.to_string()))?;
    let state = app.store.get(&id).expect("closed session exists").lock().expect("session lock").state;
    Ok(Json(serde_json::json!({ "state": state })))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedView {
    pub candidate: usize,
    pub lambda: f64,
    pub fidelity: f64,
    pub delta: f64,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictReport {
    pub session: String,
    pub state: SessionState,
    pub verdicts: Vec<JndVerdict>,
    pub selected: Option<SelectedView>,
}

async fn verdicts(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<VerdictReport>> {
    let session = app.store.get(&id).ok_or_else(|| not_found(format!("unknown session {id}")))?;
    let s = session.lock().expect("session lock").clone();
    let verdicts = s.verdicts().map_err(|e| ApiError(StatusCode::CONFLICT, e.to_string()))?;
    let (_, set) = app
        .set(&s.header.candidate_set)
        .ok_or_else(|| not_found(format!("candidate set {:?} is not loaded", s.header.candidate_set)))?;
    let selected = study::select_counterexample(&verdicts, &set).map(|c| SelectedView {
        candidate: c.index,
        lambda: c.lambda,
        fidelity: c.fidelity,
        delta: c.delta,
        image: format!("/images/{}/{}", s.header.candidate_set, c.file_name()),
    });
    Ok(Json(VerdictReport {
        session: id,
        state: s.state,
        verdicts,
        selected,
    }))
}

async fn image(State(app): State<Arc<AppState>>, UrlPath((set_id, name)): UrlPath<(String, String)>) -> ApiResult<Response> {
    let (dir, set) = app.set(&set_id).ok_or_else(|| not_found(format!("unknown candidate set {set_id:?}")))?;
    // Only files the manifest names; nothing else in the directory is reachable.
    if name != INITIAL && !set.candidates.iter().any(|c| c.file_name() == name) {
        return Err(not_found(format!("no image {name:?} in {set_id:?}")));
    }
    let bytes = fs::read(dir.join(&name)).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

/// Builds state from the log in `out` and the given set directories.
pub fn load_state(a: &ServeArgs) -> CliResult<Arc<AppState>> {
    fs::create_dir_all(&a.out).map_err(|e| CliError::environment(format!("cannot create {}: {e}", a.out.display())))?;
    let store = SessionStore::open(a.out.join(SESSION_LOG))?;
    let app = AppState::new(store, a.repetitions);
    for dir in &a.sets {
        app.add_set(dir)?;
    }
    Ok(Arc::new(app))
}

pub fn serve(a: &ServeArgs) -> CliResult<()> {
    let app = load_state(a)?;
    let mut m = RunManifest::new("serve", a, None);
    for dir in &a.sets {
        m.input(&dir.join(nriqa_core::attack::MANIFEST))?;
    }
    m.output(SESSION_LOG);
    m.write(&a.out)?;

    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::environment(format!("cannot bind {addr}: {e}")))?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(app))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
