//! HTTP interface to a running smart-home simulation.
//!
//! One session is served at a time. State-changing requests are journaled
//! to JSON Lines files and replayed when the service starts again.

pub mod config;
pub mod session;
pub mod store;

use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::broadcast;

use sas_core::orchestrator::{Answer, InterventionState};

pub use config::ServiceConfig;
pub use session::{ServiceError, Session, StateView, WhatIfReport};

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownScenario(_)
            | ServiceError::UnknownIntervention(_)
            | ServiceError::UnknownTrace(_)
            | ServiceError::UnknownPlan(_) => StatusCode::NOT_FOUND,
            ServiceError::NoScenario | ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Sim(_) | ServiceError::Store(_) | ServiceError::Replay { .. } => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

struct Inner {
    session: Mutex<Session>,
    changed: broadcast::Sender<u64>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        Ok(AppState::new(Session::open(config)?))
    }

    pub fn new(session: Session) -> Self {
        let (changed, _) = broadcast::channel(64);
        AppState {
            inner: Arc::new(Inner {
                session: Mutex::new(session),
                changed,
            }),
        }
    }

    pub fn session(&self) -> MutexGuard<'_, Session> {
        self.inner.session.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn notify(&self, generation: u64) {
        let _ = self.inner.changed.send(generation);
    }

    /// Runs a state-changing operation and wakes stream subscribers.
    fn mutate<T>(&self, f: impl FnOnce(&mut Session) -> Result<T, ServiceError>) -> Result<T, ServiceError> {
        let mut s = self.session();
        let out = f(&mut s);
        let generation = s.generation();
        drop(s);
        self.notify(generation);
        out
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/state", get(get_state))
        .route("/stream", get(get_stream))
        .route("/interventions", get(list_interventions))
        .route("/interventions/{id}/answer", post(post_answer))
        .route("/traces/{id}", get(get_trace))
        .route("/plans/{id}", get(get_plan))
        .route("/whatif", post(post_whatif))
        .route("/report", get(get_report))
        .route("/scenarios", get(list_scenarios))
        .route("/scenario/start", post(start_scenario))
        .route("/scenario/advance", post(advance_scenario))
        .with_state(state)
}

pub async fn serve(config: ServiceConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    config.validate()?;
    let bind = config.bind.clone();
    let state = AppState::open(config)?;
    let listener = tokio::net::TcpListener::bind(&bind).await?;
    axum::serve(listener, router(state)).await?;
    Ok(())
}

async fn get_state(State(app): State<AppState>) -> Json<StateView> {
    Json(app.session().state())
}

#[derive(Deserialize)]
struct StreamQuery {
    since: Option<u64>,
    /// `false` closes the stream once the backlog is sent.
    follow: Option<bool>,
}

struct Follower {
    app: AppState,
    changed: broadcast::Receiver<u64>,
    generation: u64,
    last: u64,
    queue: VecDeque<SseEvent>,
    follow: bool,
}

impl Follower {
    fn refill(&mut self) {
        let s = self.app.session();
        if s.generation() != self.generation {
            self.generation = s.generation();
            self.last = 0;
            self.queue.push_back(
                SseEvent::default()
                    .event("reset")
                    .data(json!({ "generation": self.generation }).to_string()),
            );
        }
        for m in s.stream_since(self.last) {
            self.last = m.seq;
            self.queue.push_back(
                SseEvent::default()
                    .id(m.seq.to_string())
                    .event(m.payload.kind())
                    .data(serde_json::to_string(&m).expect("stream messages serialize")),
            );
        }
    }
}

fn follow(f: Follower) -> impl Stream<Item = Result<SseEvent, Infallible>> {
    futures::stream::unfold(f, |mut f| async move {
        loop {
            if let Some(e) = f.queue.pop_front() {
                return Some((Ok(e), f));
            }
            if !f.follow {
                return None;
            }
            match f.changed.recv().await {
                Ok(_) | Err(broadcast::error::RecvError::Lagged(_)) => f.refill(),
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    })
}

/// Server-sent events in loop order. `since` (or `Last-Event-ID`) skips
/// messages the client already has.
async fn get_stream(
    State(app): State<AppState>,
    Query(q): Query<StreamQuery>,
    headers: HeaderMap,
) -> Sse<impl Stream<Item = Result<SseEvent, Infallible>>> {
    let since = q.since.or_else(|| {
        headers
            .get("last-event-id")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok())
    });
    let changed = app.inner.changed.subscribe();
    let generation = app.session().generation();
    let mut f = Follower {
        app,
        changed,
        generation,
        last: since.unwrap_or(0),
        queue: VecDeque::new(),
        follow: q.follow.unwrap_or(true),
    };
    f.refill();
    Sse::new(follow(f)).keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
}

#[derive(Deserialize)]
struct InterventionQuery {
    state: Option<InterventionState>,
}

async fn list_interventions(
    State(app): State<AppState>,
    Query(q): Query<InterventionQuery>,
) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(app.session().interventions(q.state)?))
}

#[derive(Deserialize)]
struct AnswerBody {
    answer: Answer,
}

async fn post_answer(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<AnswerBody>,
) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(app.mutate(|s| s.answer(&id, body.answer))?))
}

async fn get_trace(State(app): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(app.session().trace(&id)?))
}

async fn get_plan(State(app): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(app.session().plan(&id)?))
}

#[derive(Deserialize)]
struct WhatIfBody {
    constraint: String,
}

async fn post_whatif(State(app): State<AppState>, Json(body): Json<WhatIfBody>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(app.session().whatif(&body.constraint)?))
}

async fn get_report(State(app): State<AppState>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(app.session().report()?))
}

async fn list_scenarios() -> Json<&'static [&'static str]> {
    Json(&sas_core::sim::SCENARIOS)
}

#[derive(Deserialize)]
struct StartBody {
    name: String,
    #[serde(default = "yes")]
    interactive: bool,
    seed: Option<u64>,
}

fn yes() -> bool {
    true
}

async fn start_scenario(State(app): State<AppState>, Json(body): Json<StartBody>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(app.mutate(|s| s.start(&body.name, body.interactive, body.seed))?))
}

#[derive(Deserialize)]
struct AdvanceBody {
    minutes: u64,
}

async fn advance_scenario(
    State(app): State<AppState>,
    Json(body): Json<AdvanceBody>,
) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(app.mutate(|s| s.advance(body.minutes))?))
}
