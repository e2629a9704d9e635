//! HTTP service around one tuning session.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gaintune::action_space::Action;
use gaintune::clf_plant::EpisodeMetrics;
use gaintune::session::{
    now_millis, FeedbackEvent, HistoryEntry, Session, SessionConfig, SessionError, SessionSummary,
};
use serde::{Deserialize, Serialize};

/// Server-side settings plus the live session.
pub struct Service {
    session: Option<Session>,
    log_path: Option<PathBuf>,
    /// Used when `POST /session` has an empty body.
    default_config: Option<SessionConfig>,
    /// Grid paths in posted configs are read relative to this directory.
    config_dir: PathBuf,
    /// New sessions are logged here; `None` keeps them in memory only.
    log_dir: Option<PathBuf>,
}

impl Service {
    pub fn new(default_config: Option<SessionConfig>, config_dir: PathBuf, log_dir: Option<PathBuf>) -> Self {
        Self {
            session: None,
            log_path: None,
            default_config,
            config_dir,
            log_dir,
        }
    }

    pub fn start(&mut self, config: SessionConfig) -> Result<(), SessionError> {
        let config = config.resolve(&self.config_dir)?;
        let (session, path) = match &self.log_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = unused_log_path(dir);
                (Session::start_logged(config, &path)?, Some(path))
            }
            None => (Session::start(config)?, None),
        };
        self.session = Some(session);
        self.log_path = path;
        Ok(())
    }

    /// Continues the session recorded at `path`.
    pub fn resume(&mut self, path: &Path) -> Result<(), SessionError> {
        self.session = Some(Session::load(path)?);
        self.log_path = Some(path.to_path_buf());
        Ok(())
    }

    pub fn session(&self) -> Option<&Session> {
        self.session.as_ref()
    }
}

fn unused_log_path(dir: &Path) -> PathBuf {
    let stamp = now_millis();
    let mut path = dir.join(format!("session-{stamp}.jsonl"));
    let mut n = 1;
    while path.exists() {
        path = dir.join(format!("session-{stamp}-{n}.jsonl"));
        n += 1;
    }
    path
}

pub type Shared = Arc<Mutex<Service>>;

#[derive(Debug, Serialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub summary: SessionSummary,
    pub log: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CurrentAction {
    pub iteration: usize,
    pub complete: bool,
    pub action: Action,
    pub previous: Option<Action>,
    pub metrics: Option<EpisodeMetrics>,
}

#[derive(Debug, Deserialize)]
pub struct AutoQuery {
    #[serde(default = "one")]
    pub steps: usize,
}

fn one() -> usize {
    1
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match e {
            SessionError::StaleIteration { .. } | SessionError::Completed(_) => StatusCode::CONFLICT,
            SessionError::Malformed(_) | SessionError::Config(_) | SessionError::Grid(_) | SessionError::WrongSource(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn lock(shared: &Shared) -> MutexGuard<'_, Service> {
    shared.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn no_session() -> ApiError {
    ApiError(StatusCode::NOT_FOUND, "no session started".into())
}

fn view(service: &Service) -> Result<SessionView, ApiError> {
    let session = service.session.as_ref().ok_or_else(no_session)?;
    Ok(SessionView {
        summary: session.summary(),
        log: service.log_path.clone(),
    })
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("invalid JSON: {e}")))
}

async fn get_session(State(shared): State<Shared>) -> Result<Json<SessionView>, ApiError> {
    Ok(Json(view(&lock(&shared))?))
}

async fn post_session(State(shared): State<Shared>, body: Bytes) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let mut service = lock(&shared);
    let config = if body.iter().all(u8::is_ascii_whitespace) {
        service
            .default_config
            .clone()
            .ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, "no config given and no default configured".into()))?
    } else {
        parse_json(&body)?
    };
    service.start(config)?;
    Ok((StatusCode::CREATED, Json(view(&service)?)))
}

async fn post_feedback(State(shared): State<Shared>, body: Bytes) -> Result<Json<SessionView>, ApiError> {
    let event: FeedbackEvent = parse_json(&body)?;
    let mut service = lock(&shared);
    service.session.as_mut().ok_or_else(no_session)?.submit(event)?;
    Ok(Json(view(&service)?))
}

/// Applies feedback from the configured oracle or autorater.
async fn post_auto(State(shared): State<Shared>, Query(q): Query<AutoQuery>) -> Result<Json<SessionView>, ApiError> {
    let mut service = lock(&shared);
    let session = service.session.as_mut().ok_or_else(no_session)?;
    for _ in 0..q.steps {
        if session.is_complete() {
            break;
        }
        let event = session.generated_feedback()?;
        session.submit(event)?;
    }
    Ok(Json(view(&service)?))
}

async fn current_action(State(shared): State<Shared>) -> Result<Json<CurrentAction>, ApiError> {
    let service = lock(&shared);
    let session = service.session.as_ref().ok_or_else(no_session)?;
    let st = session.state();
    Ok(Json(CurrentAction {
        iteration: st.iteration,
        complete: session.is_complete(),
        action: st.current.clone(),
        previous: st.previous.clone(),
        metrics: st.current_metrics,
    }))
}

async fn history(State(shared): State<Shared>) -> Result<Json<Vec<HistoryEntry>>, ApiError> {
    let service = lock(&shared);
    let session = service.session.as_ref().ok_or_else(no_session)?;
    Ok(Json(session.state().history.clone()))
}

async fn posterior(State(shared): State<Shared>) -> Result<Json<serde_json::Value>, ApiError> {
    let service = lock(&shared);
    let session = service.session.as_ref().ok_or_else(no_session)?;
    Ok(Json(serde_json::json!({ "actions": session.posterior_summary() })))
}

pub fn router(shared: Shared) -> Router {
    Router::new()
        .route("/session", get(get_session).post(post_session))
        .route("/session/feedback", post(post_feedback))
        .route("/session/auto", post(post_auto))
        .route("/session/current-action", get(current_action))
        .route("/session/history", get(history))
        .route("/session/posterior", get(posterior))
        .with_state(shared)
}
