use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use memeforge_core::ingest::load_manifest;
use memeforge_core::store::read_predictions;
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::error::{AnnotateError, Result};
use crate::journal::{Journal, Judgment};
use crate::state::AnnotationState;
use crate::tasks::build_tasks;

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub preds: PathBuf,
    pub manifest: PathBuf,
    pub log: PathBuf,
    pub addr: SocketAddr,
    /// Built UI assets served at `/`.
    pub static_dir: Option<PathBuf>,
    /// Accepted annotator ids; any id when absent.
    pub annotators: Option<BTreeSet<String>>,
}

/// Shared service state. Reads take the state lock; writes go through the
/// journal lock first so the log order is the application order.
pub struct AppState {
    state: RwLock<AnnotationState>,
    journal: Mutex<Journal>,
    images: HashMap<String, PathBuf>,
    static_dir: Option<PathBuf>,
}

impl AppState {
    /// Loads predictions and manifest, builds the task pool and replays the
    /// judgment log.
    pub fn load(config: &ServeConfig) -> Result<Self> {
        let preds = read_predictions(std::fs::File::open(&config.preds)?)?;
        let manifest = load_manifest(&config.manifest)?;
        let tasks = build_tasks(&preds, &manifest)?;
        let mut state = AnnotationState::new(tasks, config.annotators.clone());
        let (journal, records) = Journal::open(&config.log)?;
        let n = records.len();
        state.replay(records)?;
        log::info!(
            "{} tasks, {n} judgments replayed from {}",
            state.tasks().len(),
            config.log.display()
        );
        Ok(Self {
            state: RwLock::new(state),
            journal: Mutex::new(journal),
            images: manifest.into_iter().map(|r| (r.id, r.path)).collect(),
            static_dir: config.static_dir.clone(),
        })
    }

    /// Snapshot of the current state.
    pub fn snapshot(&self) -> AnnotationState {
        self.state.read().expect("state lock").clone()
    }

    fn submit(&self, mut j: Judgment) -> Result<(usize, usize)> {
        if j.timestamp == 0 {
            j.timestamp = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0);
        }
        let mut journal = self.journal.lock().expect("journal lock");
        self.state.read().expect("state lock").validate(&j)?;
        journal.append(&j)?;
        let mut state = self.state.write().expect("state lock");
        let who = j.annotator.clone();
        state.apply(j)?;
        Ok(state.progress(&who))
    }
}

impl IntoResponse for AnnotateError {
    fn into_response(self) -> Response {
        let status = match &self {
            AnnotateError::UnknownAnnotator(_) => StatusCode::FORBIDDEN,
            AnnotateError::UnknownTask(_) => StatusCode::NOT_FOUND,
            AnnotateError::MalformedVerdict(_) => StatusCode::UNPROCESSABLE_ENTITY,
            AnnotateError::InsufficientJudgments => StatusCode::CONFLICT,
            e if e.is_user_error() => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{self}");
        }
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

async fn next_task(State(app): State<Arc<AppState>>, Query(q): Query<NextQuery>) -> Result<Response> {
    let who = q.annotator.unwrap_or_default();
    let state = app.state.read().expect("state lock");
    let task = state.next_task(&who)?.cloned();
    let (judged, total) = state.progress(&who);
    Ok(Json(json!({
        "done": task.is_none(),
        "task": task,
        "judged": judged,
        "total": total,
    }))
    .into_response())
}

async fn submit_judgment(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Response> {
    let j: Judgment = serde_json::from_slice(&body).map_err(|e| AnnotateError::MalformedVerdict(e.to_string()))?;
    let task_id = j.task_id;
    let (judged, total) = tokio::task::spawn_blocking(move || app.submit(j))
        .await
        .map_err(|e| AnnotateError::Io(std::io::Error::other(e)))??;
    Ok(Json(json!({ "ok": true, "task_id": task_id, "judged": judged, "total": total })).into_response())
}

async fn agreement(State(app): State<Arc<AppState>>) -> Result<Response> {
    let a = app.state.read().expect("state lock").agreement()?;
    Ok(Json(a).into_response())
}

async fn export(State(app): State<Arc<AppState>>) -> Response {
    Json(app.state.read().expect("state lock").export()).into_response()
}

fn content_type(path: &std::path::Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

async fn image(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let Some(path) = app.images.get(&id) else {
        return (
            StatusCode::NOT_FOUND,
            Json(json!({ "error": format!("unknown image `{id}`") })),
        )
            .into_response();
    };
    match tokio::fs::read(path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(path))], bytes).into_response(),
        Err(e) => {
            log::warn!("cannot read {}: {e}", path.display());
            (
                StatusCode::NOT_FOUND,
                Json(json!({ "error": format!("image `{id}` is unreadable") })),
            )
                .into_response()
        }
    }
}

const PLACEHOLDER: &str = "<!doctype html><title>memeforge review</title>\
<p>The review UI is not installed. Start the service with a static directory \
to serve it; the JSON API lives under <code>/api</code>.</p>";

pub fn router(app: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/judgments", post(submit_judgment))
        .route("/api/agreement", get(agreement))
        .route("/api/export", get(export))
        .route("/api/images/{id}", get(image));
    let api = match &app.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER) })),
    };
    api.with_state(app)
}

/// Runs the service until Ctrl-C.
pub async fn serve(config: ServeConfig) -> Result<()> {
    let app = Arc::new(AppState::load(&config)?);
    let listener = tokio::net::TcpListener::bind(config.addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
