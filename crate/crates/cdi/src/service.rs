//! JSON-over-HTTP facade for discovery sessions.
//!
//! Every mutation of a session goes through its mutation lock; a request
//! that finds the lock taken gets `409`. Readers always see the last
//! committed state. Mutating requests may carry a `request_id`: a repeated
//! id gets the first response back and changes nothing. Accepted mutations
//! are appended to the session's event log before they are committed, so a
//! restarted service rebuilds every session by replay.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cdi_core::corpus::Corpus;
use cdi_core::discovery::{
    advance_iteration, apply_feedback, finalize, init_session, validate_feedback, DiscoveryConfig, Feedback,
    IterationRecord, SessionEvent, SessionState, SessionStatus,
};
use cdi_core::pipeline::StageReport;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::OwnedMutexGuard;

use crate::formats::eventlog::LoggedEvent;
use crate::store::{SessionHandle, Store};
use crate::Error;

/// An HTTP error: status plus a JSON body.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn busy() -> Self {
        Self::new(StatusCode::CONFLICT, "another mutation of this session is in progress")
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Core(cdi_core::Error::InvalidFeedback(v)) => {
                return Self {
                    status: StatusCode::UNPROCESSABLE_ENTITY,
                    body: json!({ "error": "invalid feedback", "violations": v }),
                }
            }
            Error::Core(cdi_core::Error::InvalidStatus(_)) => StatusCode::CONFLICT,
            Error::Binary { .. } | Error::Text { .. } | Error::CountMismatch { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Config(_) | Error::Json(_) => StatusCode::BAD_REQUEST,
            Error::Core(cdi_core::Error::InvalidArgument(_)) => StatusCode::BAD_REQUEST,
            Error::Core(_) | Error::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<cdi_core::Error> for ApiError {
    fn from(e: cdi_core::Error) -> Self {
        Error::Core(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// A response remembered for request-id idempotency.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Stored {
    status: u16,
    body: Value,
}

impl IntoResponse for Stored {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::OK);
        (status, Json(self.body)).into_response()
    }
}

struct SessionSlot {
    handle: SessionHandle,
    corpus: Arc<Corpus>,
    state: RwLock<SessionState>,
    mutation: Arc<tokio::sync::Mutex<()>>,
    responses: Mutex<HashMap<String, Stored>>,
    training: AtomicBool,
}

impl SessionSlot {
    fn cached(&self, request_id: &Option<String>) -> Option<Stored> {
        let id = request_id.as_ref()?;
        self.responses.lock().unwrap().get(id).cloned()
    }

    fn remember(&self, request_id: &Option<String>, stored: &Stored) {
        if let Some(id) = request_id {
            self.responses.lock().unwrap().insert(id.clone(), stored.clone());
        }
    }

    fn lock(&self) -> ApiResult<OwnedMutexGuard<()>> {
        self.mutation.clone().try_lock_owned().map_err(|_| ApiError::busy())
    }

    fn snapshot(&self) -> SessionState {
        self.state.read().unwrap().clone()
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct Job {
    pub job_id: String,
    pub session_id: String,
    pub status: JobStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage_reports: Option<Vec<StageReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<IterationRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Shared service state.
pub struct AppState {
    store: Store,
    corpora: Mutex<HashMap<String, Arc<Corpus>>>,
    sessions: tokio::sync::Mutex<HashMap<String, Arc<SessionSlot>>>,
    created: Mutex<HashMap<String, SessionHandle>>,
    creating: tokio::sync::Mutex<()>,
    jobs: Mutex<HashMap<String, Job>>,
}

impl AppState {
    pub fn new(store: Store) -> crate::Result<Arc<Self>> {
        let mut created = HashMap::new();
        for id in store.list_sessions()? {
            let handle = store.session_handle(&id)?;
            if let Some(r) = handle.request_id.clone() {
                created.insert(r, handle);
            }
        }
        Ok(Arc::new(Self {
            store,
            corpora: Mutex::new(HashMap::new()),
            sessions: tokio::sync::Mutex::new(HashMap::new()),
            created: Mutex::new(created),
            creating: tokio::sync::Mutex::new(()),
            jobs: Mutex::new(HashMap::new()),
        }))
    }

    fn corpus(&self, id: &str) -> crate::Result<Arc<Corpus>> {
        if let Some(c) = self.corpora.lock().unwrap().get(id) {
            return Ok(c.clone());
        }
        let c = Arc::new(self.store.load_corpus(id)?);
        self.corpora.lock().unwrap().insert(id.to_string(), c.clone());
        Ok(c)
    }

    /// The live slot of a session, restoring it from the store on first use.
    async fn slot(self: &Arc<Self>, id: &str) -> ApiResult<Arc<SessionSlot>> {
        let mut sessions = self.sessions.lock().await;
        if let Some(s) = sessions.get(id) {
            return Ok(s.clone());
        }
        let this = self.clone();
        let owned = id.to_string();
        let slot = tokio::task::spawn_blocking(move || -> crate::Result<SessionSlot> {
            let handle = this.store.session_handle(&owned)?;
            let corpus = this.corpus(&handle.corpus_id)?;
            let (state, log) = this.store.restore_session(&owned, &corpus)?;
            let responses = log
                .iter()
                .filter_map(|e| {
                    let r = e.response.clone()?;
                    Some((e.request_id.clone()?, serde_json::from_value::<Stored>(r).ok()?))
                })
                .collect();
            Ok(SessionSlot {
                handle,
                corpus,
                state: RwLock::new(state),
                mutation: Arc::new(tokio::sync::Mutex::new(())),
                responses: Mutex::new(responses),
                training: AtomicBool::new(false),
            })
        })
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
        let slot = Arc::new(slot);
        sessions.insert(id.to_string(), slot.clone());
        Ok(slot)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/corpora", post(upload_corpus))
        .route("/corpora/{id}", get(get_corpus))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/state", get(get_state))
        .route("/sessions/{id}/proposals", get(get_proposals))
        .route("/sessions/{id}/feedback", post(post_feedback))
        .route("/sessions/{id}/iterate", post(post_iterate))
        .route("/sessions/{id}/finalize", post(post_finalize))
        .route("/sessions/{id}/history", get(get_history))
        .route("/jobs/{id}", get(get_job))
        .layer(DefaultBodyLimit::max(1 << 30))
        .with_state(state)
}

/// Serves the API on `listener` until the process is stopped.
pub async fn serve(listener: tokio::net::TcpListener, store: Store) -> std::io::Result<()> {
    let state = AppState::new(store).map_err(std::io::Error::other)?;
    axum::serve(listener, router(state)).await
}

async fn upload_corpus(State(app): State<Arc<AppState>>, mut form: Multipart) -> ApiResult<Response> {
    let (mut dataset, mut embeddings) = (None, None);
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
        match name.as_str() {
            "dataset" => dataset = Some(bytes),
            "embeddings" => embeddings = Some(bytes),
            other => return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("unexpected field `{other}`"))),
        }
    }
    let (Some(d), Some(e)) = (dataset, embeddings) else {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "multipart body needs `dataset` (JSONL) and `embeddings` (CDIE) fields",
        ));
    };
    let store = app.store.clone();
    let info = tokio::task::spawn_blocking(move || store.register_corpus(&d, &e))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

async fn get_corpus(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(app.store.corpus_info(&id)?).into_response())
}

#[derive(Deserialize)]
struct CreateSession {
    corpus_id: String,
    #[serde(default)]
    config: DiscoveryConfig,
    #[serde(default)]
    request_id: Option<String>,
}

async fn create_session(State(app): State<Arc<AppState>>, Json(req): Json<CreateSession>) -> ApiResult<Response> {
    let _serial = app.creating.lock().await;
    if let Some(r) = &req.request_id {
        if let Some(h) = app.created.lock().unwrap().get(r) {
            return Ok((StatusCode::CREATED, Json(h.clone())).into_response());
        }
    }
    let info = app.store.corpus_info(&req.corpus_id)?;
    let corpus = app.corpus(&req.corpus_id)?;
    let store = app.store.clone();
    let c = corpus.clone();
    let (handle, state) = tokio::task::spawn_blocking(move || -> crate::Result<(SessionHandle, SessionState)> {
        let (state, _) = init_session(&c, &req.config)?;
        let handle = store.create_session(&info, req.request_id.clone())?;
        let event = LoggedEvent::new(&SessionEvent::Init { config: req.config.clone() }, req.config.seed, req.request_id);
        store.append_event(&handle.session_id, &event)?;
        store.write_snapshot(&handle.session_id, 1, &state)?;
        Ok((handle, state))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    if let Some(r) = &handle.request_id {
        app.created.lock().unwrap().insert(r.clone(), handle.clone());
    }
    let slot = Arc::new(SessionSlot {
        handle: handle.clone(),
        corpus,
        state: RwLock::new(state),
        mutation: Arc::new(tokio::sync::Mutex::new(())),
        responses: Mutex::new(HashMap::new()),
        training: AtomicBool::new(false),
    });
    app.sessions.lock().await.insert(handle.session_id.clone(), slot);
    tracing::info!(session = %handle.session_id, corpus = %handle.corpus_id, "session created");
    Ok((StatusCode::CREATED, Json(handle)).into_response())
}

#[derive(Serialize)]
struct IntentCount {
    name: String,
    count: usize,
}

fn summary(slot: &SessionSlot, s: &SessionState) -> Value {
    let intents: Vec<IntentCount> = s
        .intents
        .iter()
        .map(|name| IntentCount {
            name: name.clone(),
            count: s.labeled.values().filter(|v| *v == name).count(),
        })
        .collect();
    json!({
        "session_id": slot.handle.session_id,
        "corpus_id": slot.handle.corpus_id,
        "created_at": slot.handle.created_at,
        "status": s.status,
        "training": slot.training.load(Ordering::SeqCst),
        "iteration": s.iteration,
        "k_t": s.k_t,
        "corpus_size": s.corpus_size,
        "labeled": s.labeled.len(),
        "unlabeled": s.unlabeled.len(),
        "labeled_pct": s.labeled_pct(),
        "intents": intents,
        "feedback_pending": s.feedback_pending,
        "termination": s.termination,
    })
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let slot = app.slot(&id).await?;
    let s = slot.snapshot();
    Ok(Json(summary(&slot, &s)).into_response())
}

async fn get_state(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let slot = app.slot(&id).await?;
    Ok(Json(slot.snapshot()).into_response())
}

async fn get_proposals(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let slot = app.slot(&id).await?;
    let s = slot.state.read().unwrap();
    Ok(Json(json!({
        "iteration": s.iteration,
        "gamma": s.config.gamma(s.iteration),
        "status": s.status,
        "proposals": s.proposals,
    }))
    .into_response())
}

async fn get_history(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let slot = app.slot(&id).await?;
    let s = slot.state.read().unwrap();
    Ok(Json(json!({ "records": s.history })).into_response())
}

async fn get_job(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let jobs = app.jobs.lock().unwrap();
    let job = jobs
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("job `{id}` not found")))?;
    Ok(Json(job).into_response())
}

#[derive(Deserialize)]
struct FeedbackRequest {
    #[serde(flatten)]
    feedback: Feedback,
    #[serde(default)]
    request_id: Option<String>,
}

/// Logs `event` with its response, then commits `next` as the live state.
fn commit(app: &AppState, slot: &SessionSlot, event: &SessionEvent, request_id: &Option<String>, stored: &Stored, next: SessionState) -> ApiResult<()> {
    let mut logged = LoggedEvent::new(event, next.config.seed, request_id.clone());
    logged.response = Some(serde_json::to_value(stored).map_err(Error::from)?);
    app.store.append_event(&slot.handle.session_id, &logged)?;
    *slot.state.write().unwrap() = next;
    slot.remember(request_id, stored);
    Ok(())
}

async fn post_feedback(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<FeedbackRequest>,
) -> ApiResult<Response> {
    let slot = app.slot(&id).await?;
    if let Some(r) = slot.cached(&req.request_id) {
        return Ok(r.into_response());
    }
    let _guard = slot.lock()?;
    if let Some(r) = slot.cached(&req.request_id) {
        return Ok(r.into_response());
    }
    let mut next = slot.snapshot();
    if next.status != SessionStatus::AwaitingFeedback {
        return Err(cdi_core::Error::InvalidStatus(next.status).into());
    }
    let violations = validate_feedback(&next, &slot.corpus, &req.feedback);
    if !violations.is_empty() {
        return Err(cdi_core::Error::InvalidFeedback(violations).into());
    }
    apply_feedback(&mut next, &slot.corpus, &req.feedback)?;
    let stored = Stored {
        status: 200,
        body: json!({
            "request_id": req.request_id,
            "accepted": req.feedback.accepted_count(),
            "labeled": next.labeled.len(),
            "unlabeled": next.unlabeled.len(),
            "intents": next.intents,
        }),
    };
    let event = SessionEvent::Feedback { feedback: req.feedback };
    commit(&app, &slot, &event, &req.request_id, &stored, next)?;
    Ok(stored.into_response())
}

#[derive(Deserialize, Default)]
struct MutationRequest {
    #[serde(default)]
    request_id: Option<String>,
}

async fn post_iterate(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Option<Json<MutationRequest>>,
) -> ApiResult<Response> {
    let req = body.map(|b| b.0).unwrap_or_default();
    let slot = app.slot(&id).await?;
    if let Some(r) = slot.cached(&req.request_id) {
        return Ok(r.into_response());
    }
    let guard = slot.lock()?;
    if let Some(r) = slot.cached(&req.request_id) {
        return Ok(r.into_response());
    }
    let state = slot.snapshot();
    if state.status == SessionStatus::Converged {
        return Err(cdi_core::Error::InvalidStatus(state.status).into());
    }
    let job_id = format!("j{}", uuid::Uuid::new_v4().simple());
    let stored = Stored {
        status: 202,
        body: json!({ "job_id": job_id, "request_id": req.request_id }),
    };
    let mut job = Job {
        job_id: job_id.clone(),
        session_id: id.clone(),
        status: JobStatus::Running,
        stage_reports: None,
        record: None,
        warning: None,
        error: None,
    };
    if !state.feedback_pending {
        job.status = JobStatus::Done;
        job.warning = Some("no feedback since the last iteration; nothing to train on".into());
        app.jobs.lock().unwrap().insert(job_id, job);
        return Ok(stored.into_response());
    }
    app.jobs.lock().unwrap().insert(job_id.clone(), job);
    slot.remember(&req.request_id, &stored);
    slot.training.store(true, Ordering::SeqCst);

    let (app2, slot2, request_id, stored2) = (app.clone(), slot.clone(), req.request_id.clone(), stored.clone());
    tokio::task::spawn_blocking(move || {
        let _guard = guard;
        let mut next = state;
        let outcome = advance_iteration(&mut next, &slot2.corpus)
            .map_err(ApiError::from)
            .and_then(|out| {
                commit(&app2, &slot2, &SessionEvent::Advance, &request_id, &stored2, next.clone())?;
                let n = app2.store.events(&slot2.handle.session_id)?.len();
                app2.store.write_snapshot(&slot2.handle.session_id, n, &next)?;
                Ok(out)
            });
        slot2.training.store(false, Ordering::SeqCst);
        let mut jobs = app2.jobs.lock().unwrap();
        let job = jobs.get_mut(&job_id).expect("job registered");
        match outcome {
            Ok(out) => {
                job.status = JobStatus::Done;
                job.stage_reports = Some(out.reports);
                job.record = out.record;
            }
            Err(e) => {
                tracing::error!(job = %job_id, error = %e.body, "iteration failed");
                if let Some(r) = &request_id {
                    slot2.responses.lock().unwrap().remove(r);
                }
                job.status = JobStatus::Failed;
                job.error = Some(e.body["error"].as_str().unwrap_or("iteration failed").to_string());
            }
        }
    });
    Ok(stored.into_response())
}

async fn post_finalize(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Option<Json<MutationRequest>>,
) -> ApiResult<Response> {
    let req = body.map(|b| b.0).unwrap_or_default();
    let slot = app.slot(&id).await?;
    if let Some(r) = slot.cached(&req.request_id) {
        return Ok(r.into_response());
    }
    let _guard = slot.lock()?;
    let mut next = slot.snapshot();
    finalize(&mut next);
    let stored = Stored {
        status: 200,
        body: summary(&slot, &next),
    };
    commit(&app, &slot, &SessionEvent::Finalize, &req.request_id, &stored, next)?;
    Ok(stored.into_response())
}
