//! HTTP/JSON API over debugging sessions.
//!
//! The data root holds datasets under `datasets/<name>/` and one directory per
//! session under `sessions/<id>/`. Sessions are loaded lazily and saved after
//! every state change.

pub mod api;
pub mod views;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use gbmdebug::persist::{load_session, read_session_header, save_session};
use gbmdebug::protocol::{Author, DebugSession, Feedback, FeedbackAction, SessionConfig, SessionState};
use gbmdebug::shapes::{generate, DataConfig, Dataset, ImageId};
use gbmdebug::trainer::{MetricsRecord, TrainEvent};

use api::{ApiError, ApiResult, Reply};
use views::{ConceptCard, ExplanationCard, MetricsPage, RoundStarted, SessionView};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("server failed: {0}")]
    Serve(std::io::Error),
    #[error("cannot prepare data root {path}: {source}")]
    DataRoot { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub data_root: PathBuf,
    pub addr: SocketAddr,
}

struct Slot {
    session: Mutex<DebugSession>,
    /// Epochs of the round in flight, not yet in the session history.
    live: Mutex<Vec<MetricsRecord>>,
    last_error: Mutex<Option<String>>,
}

pub struct AppState {
    root: PathBuf,
    sessions: Mutex<HashMap<String, Arc<Slot>>>,
    datasets: Mutex<HashMap<String, Arc<Dataset>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 64
        && name.bytes().all(|c| c.is_ascii_alphanumeric() || c == b'-' || c == b'_')
}

fn check_name(what: &str, name: &str) -> Result<(), ApiError> {
    if valid_name(name) {
        Ok(())
    } else {
        Err(ApiError::invalid(format!("{what} {name:?} must be 1-64 characters of [A-Za-z0-9_-]")))
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let text = if body.is_empty() { &b"{}"[..] } else { body };
    serde_json::from_slice(text).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

impl AppState {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            sessions: Mutex::new(HashMap::new()),
            datasets: Mutex::new(HashMap::new()),
        }
    }

    fn dataset_dir(&self, name: &str) -> PathBuf {
        self.root.join("datasets").join(name)
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    fn dataset(&self, name: &str) -> Result<Arc<Dataset>, ApiError> {
        check_name("dataset", name)?;
        if let Some(d) = lock(&self.datasets).get(name) {
            return Ok(Arc::clone(d));
        }
        let dir = self.dataset_dir(name);
        if !dir.join("manifest.json").is_file() {
            return Err(ApiError::not_found(format!("unknown dataset {name:?}")));
        }
        let d = Arc::new(Dataset::load(&dir)?);
        lock(&self.datasets).insert(name.to_string(), Arc::clone(&d));
        Ok(d)
    }

    /// Generates the dataset unless it already exists with the same config.
    fn ensure_dataset(&self, name: &str, config: &DataConfig) -> Result<Arc<Dataset>, ApiError> {
        check_name("dataset", name)?;
        if self.dataset_dir(name).join("manifest.json").is_file() {
            let d = self.dataset(name)?;
            if d.config() != config {
                return Err(ApiError::conflict(format!("dataset {name:?} exists with a different config")));
            }
            return Ok(d);
        }
        let d = Arc::new(generate(config)?);
        d.save(&self.dataset_dir(name))?;
        lock(&self.datasets).insert(name.to_string(), Arc::clone(&d));
        Ok(d)
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        if !valid_name(id) {
            return Err(ApiError::not_found(format!("unknown session {id:?}")));
        }
        if let Some(s) = lock(&self.sessions).get(id) {
            return Ok(Arc::clone(s));
        }
        let dir = self.session_dir(id);
        if !dir.join("session.json").is_file() {
            return Err(ApiError::not_found(format!("unknown session {id:?}")));
        }
        let header = read_session_header(&dir)?;
        let name = header
            .dataset_ref
            .ok_or_else(|| ApiError::internal(format!("session {id:?} does not record its dataset")))?;
        let session = load_session(&dir, self.dataset(&name)?)?;
        let slot = Arc::new(Slot {
            session: Mutex::new(session),
            live: Mutex::new(Vec::new()),
            last_error: Mutex::new(None),
        });
        Ok(Arc::clone(lock(&self.sessions).entry(id.to_string()).or_insert(slot)))
    }

    fn fresh_id(&self) -> String {
        let taken = lock(&self.sessions);
        (1..)
            .map(|n| format!("session-{n}"))
            .find(|id| !taken.contains_key(id) && !self.session_dir(id).exists())
            .expect("unbounded range")
    }

    fn save(&self, session: &DebugSession) -> Result<(), ApiError> {
        save_session(&self.session_dir(&session.id), session)?;
        Ok(())
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CreateSession {
    pub id: Option<String>,
    /// Name of the dataset under the data root.
    pub dataset: String,
    /// Generates the dataset first when it does not exist yet.
    pub generate: Option<DataConfig>,
    pub config: Option<SessionConfig>,
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<SessionView> {
    let req: CreateSession = parse(&body)?;
    let id = match req.id {
        Some(id) => {
            check_name("session id", &id)?;
            id
        }
        None => app.fresh_id(),
    };
    let view = blocking(move || {
        if lock(&app.sessions).contains_key(&id) || app.session_dir(&id).exists() {
            return Err(ApiError::conflict(format!("session {id:?} already exists")));
        }
        let dataset = match &req.generate {
            Some(config) => app.ensure_dataset(&req.dataset, config)?,
            None => app.dataset(&req.dataset)?,
        };
        let mut session = DebugSession::new(id.clone(), dataset, req.config.unwrap_or_default())?;
        session.dataset_ref = Some(req.dataset);
        app.save(&session)?;
        let view = SessionView::of(&session);
        lock(&app.sessions).insert(
            id,
            Arc::new(Slot {
                session: Mutex::new(session),
                live: Mutex::new(Vec::new()),
                last_error: Mutex::new(None),
            }),
        );
        Ok(view)
    })
    .await?;
    tracing::info!(id = %view.id, "session created");
    Ok(Reply(StatusCode::CREATED, view))
}

async fn get_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<SessionView> {
    let view = blocking(move || {
        let slot = app.slot(&id)?;
        let s = lock(&slot.session);
        Ok(SessionView::of(&s))
    })
    .await?;
    Ok(Reply(StatusCode::OK, view))
}

async fn concepts(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Vec<ConceptCard>> {
    let cards = blocking(move || {
        let slot = app.slot(&id)?;
        let s = lock(&slot.session);
        if s.state == SessionState::Training {
            return Err(ApiError::conflict("session is training"));
        }
        let packets = s.assess()?;
        Ok(packets
            .into_iter()
            .map(|p| ConceptCard::of(&s, p))
            .collect::<gbmdebug::Result<Vec<_>>>()?)
    })
    .await?;
    Ok(Reply(StatusCode::OK, cards))
}

#[derive(Debug, Deserialize)]
pub struct ExplainQuery {
    pub image: String,
    /// Defaults to the image's label.
    pub class: Option<usize>,
}

async fn explanations(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ExplainQuery>,
) -> ApiResult<ExplanationCard> {
    let card = blocking(move || {
        let slot = app.slot(&id)?;
        let s = lock(&slot.session);
        if s.round == 0 {
            return Err(ApiError::conflict("session has not been trained yet"));
        }
        let image: ImageId = q.image.parse()?;
        let sample = s
            .dataset()
            .get(image)
            .ok_or_else(|| ApiError::not_found(format!("unknown image {image}")))?;
        let class = q.class.unwrap_or(sample.scene.label);
        let view = s.explain(image, class)?;
        Ok(ExplanationCard::of(&sample.image, view))
    })
    .await?;
    Ok(Reply(StatusCode::OK, card))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeedbackRequest {
    #[serde(default)]
    pub author: Option<Author>,
    #[serde(flatten)]
    pub action: FeedbackAction,
}

async fn feedback(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Feedback> {
    let slot = app.slot(&id)?;
    let req: FeedbackRequest = parse(&body)?;
    let accepted = blocking(move || {
        let mut s = lock(&slot.session);
        let accepted = s.submit_feedback(req.action, req.author.unwrap_or(Author::Human))?.clone();
        app.save(&s)?;
        Ok(accepted)
    })
    .await?;
    Ok(Reply(StatusCode::CREATED, accepted))
}

async fn oracle(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Vec<Feedback>> {
    let slot = app.slot(&id)?;
    let accepted = blocking(move || {
        let mut s = lock(&slot.session);
        if s.round == 0 {
            return Err(ApiError::conflict("session has not been trained yet"));
        }
        let mut accepted = Vec::new();
        for action in s.scripted_oracle()? {
            accepted.push(s.submit_feedback(action, Author::ScriptedOracle)?.clone());
        }
        app.save(&s)?;
        Ok(accepted)
    })
    .await?;
    Ok(Reply(StatusCode::CREATED, accepted))
}

async fn start_round(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<RoundStarted> {
    let slot = app.slot(&id)?;
    let job = {
        let mut s = lock(&slot.session);
        s.begin_round()?
    };
    let round = job.round();
    lock(&slot.live).clear();
    *lock(&slot.last_error) = None;
    let worker = Arc::clone(&slot);
    tokio::task::spawn_blocking(move || {
        let outcome = job.run(&mut |e| {
            if let TrainEvent::Epoch(r) = e {
                lock(&worker.live).push(r.clone());
            }
        });
        let mut s = lock(&worker.session);
        let result = s.finish_round(outcome).map_err(ApiError::from).and_then(|()| app.save(&s));
        lock(&worker.live).clear();
        match result {
            Ok(()) => tracing::info!(id = %s.id, round, state = %s.state, "round finished"),
            Err(e) => {
                tracing::warn!(id = %s.id, round, error = %e.body.message, "round failed");
                *lock(&worker.last_error) = Some(e.body.message);
            }
        }
    });
    Ok(Reply(
        StatusCode::ACCEPTED,
        RoundStarted {
            round,
            state: SessionState::Training,
        },
    ))
}

#[derive(Debug, Default, Deserialize)]
pub struct MetricsQuery {
    #[serde(default)]
    pub since: usize,
}

async fn metrics(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<MetricsQuery>,
) -> ApiResult<MetricsPage> {
    let slot = app.slot(&id)?;
    let s = lock(&slot.session);
    let live = lock(&slot.live);
    let records: Vec<MetricsRecord> = s
        .history
        .records
        .iter()
        .chain(live.iter())
        .filter(|r| r.epoch >= q.since)
        .cloned()
        .collect();
    let next = records.last().map_or(q.since, |r| r.epoch + 1);
    let page = MetricsPage {
        state: s.state,
        round: s.round,
        records,
        next,
        stable: s.state == SessionState::Stable,
        last_error: lock(&slot.last_error).clone(),
    };
    Ok(Reply(StatusCode::OK, page))
}

async fn not_found() -> ApiError {
    ApiError::not_found("no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/concepts", get(concepts))
        .route("/sessions/{id}/explanations", get(explanations))
        .route("/sessions/{id}/feedback", post(feedback))
        .route("/sessions/{id}/oracle", post(oracle))
        .route("/sessions/{id}/rounds", post(start_round))
        .route("/sessions/{id}/metrics", get(metrics))
        .fallback(not_found)
        .with_state(state)
}

fn prepare_root(root: &Path) -> Result<(), ServiceError> {
    for sub in ["datasets", "sessions"] {
        let path = root.join(sub);
        std::fs::create_dir_all(&path).map_err(|source| ServiceError::DataRoot { path, source })?;
    }
    Ok(())
}

/// Serves the API until the process is stopped.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    prepare_root(&config.data_root)?;
    let listener = tokio::net::TcpListener::bind(config.addr)
        .await
        .map_err(|source| ServiceError::Bind {
            addr: config.addr,
            source,
        })?;
    tracing::info!(addr = %config.addr, root = %config.data_root.display(), "listening");
    axum::serve(listener, router(Arc::new(AppState::new(config.data_root))))
        .await
        .map_err(ServiceError::Serve)
}
