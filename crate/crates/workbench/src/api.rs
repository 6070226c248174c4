//! HTTP API. Long work is queued on the job worker and answered with 202.

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use crate::error::WorkbenchError;
use crate::jobs::JobQueue;
use crate::manifest::RunRequest;
use crate::pipeline::{parse_targets, EditRequest, VisualizationRequest, Workbench};

#[derive(Clone)]
pub struct AppState {
    pub workbench: Arc<Workbench>,
    pub jobs: Arc<JobQueue>,
}

impl AppState {
    pub fn new(workbench: Workbench) -> Self {
        Self {
            workbench: Arc::new(workbench),
            jobs: Arc::new(JobQueue::new()),
        }
    }
}

impl WorkbenchError {
    pub fn status(&self) -> StatusCode {
        use neurodebug::Error as E;
        match self {
            WorkbenchError::UnknownRun(_) | WorkbenchError::UnknownJob(_) => StatusCode::NOT_FOUND,
            WorkbenchError::NoRanking(_) => StatusCode::CONFLICT,
            WorkbenchError::UnknownNeuron { .. } | WorkbenchError::InvalidRequest(_) | WorkbenchError::Json(_) => {
                StatusCode::BAD_REQUEST
            }
            WorkbenchError::Core(
                E::InvalidConfig(_)
                | E::NeuronOutOfRange { .. }
                | E::ClassOutOfRange { .. }
                | E::EncoderUnavailable(_)
                | E::EmptyMistakeSet,
            ) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for WorkbenchError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, WorkbenchError>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| WorkbenchError::InvalidRequest(format!("worker task failed: {e}")))?
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| WorkbenchError::InvalidRequest(e.to_string()))
}

fn accepted(body: Value) -> Response {
    (StatusCode::ACCEPTED, Json(body)).into_response()
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

async fn create_run(State(s): State<AppState>, body: axum::body::Bytes) -> ApiResult<Response> {
    let request: RunRequest = parse_body(&body)?;
    let wb = s.workbench.clone();
    let manifest = blocking(move || wb.create_run(&request)).await?;
    let run_id = manifest.run_id.clone();
    let wb = s.workbench.clone();
    let id = run_id.clone();
    let job = s.jobs.submit(format!("inspect-{run_id}"), "inspect", &run_id, move || {
        let m = wb.execute_run(&id)?;
        Ok(json!({ "status": m.status }))
    });
    Ok(accepted(json!({ "run_id": run_id, "job": job })))
}

async fn list_runs(State(s): State<AppState>) -> ApiResult<Json<Value>> {
    let wb = s.workbench.clone();
    let runs = blocking(move || wb.store.list()).await?;
    Ok(Json(json!({ "runs": runs })))
}

async fn get_run(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let m = s.workbench.manifest(&id)?;
    Ok(Json(m).into_response())
}

async fn get_ranking(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(json_bytes(s.workbench.ranking_bytes(&id)?))
}

async fn create_visualization(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> ApiResult<Response> {
    let request: VisualizationRequest = parse_body(&body)?;
    s.workbench.check_visualization(&id, &request)?;
    let key = request.key()?;
    let wb = s.workbench.clone();
    let run_id = id.clone();
    let job = s.jobs.submit(format!("visualize-{id}-{key}"), "visualize", &id, move || {
        Ok(serde_json::to_value(wb.visualize(&run_id, &request)?)?)
    });
    Ok(accepted(json!({ "run_id": id, "key": key, "job": job })))
}

/// Gallery indexes with a `url` next to each stored path.
async fn get_gallery(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let wb = s.workbench.clone();
    let run_id = id.clone();
    let galleries = blocking(move || wb.gallery(&run_id)).await?;
    let mut out = serde_json::to_value(&galleries)?;
    for g in out.as_array_mut().into_iter().flatten() {
        for e in g["entries"].as_array_mut().into_iter().flatten() {
            for field in ["image", "masked_image", "trace"] {
                if let Some(rel) = e[field].as_str() {
                    let url = format!("/files/{id}/{rel}");
                    e[format!("{field}_url")] = Value::String(url);
                }
            }
        }
    }
    Ok(Json(json!({ "run_id": id, "galleries": out })))
}

async fn create_edit(State(s): State<AppState>, Path(id): Path<String>, body: axum::body::Bytes) -> ApiResult<Response> {
    let request: EditRequest = parse_body(&body)?;
    let wb = s.workbench.clone();
    let run_id = id.clone();
    let plan = blocking(move || wb.check_edit(&run_id, &request)).await?;
    let key = Workbench::edit_key(&plan)?;
    let wb = s.workbench.clone();
    let run_id = id.clone();
    let job_plan = plan.clone();
    let job = s.jobs.submit(format!("edit-{id}-{key}"), "edit", &id, move || {
        Ok(serde_json::to_value(wb.edit(&run_id, &job_plan)?)?)
    });
    Ok(accepted(json!({ "run_id": id, "key": key, "plan": plan, "job": job })))
}

async fn get_metrics(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let wb = s.workbench.clone();
    let view = blocking(move || wb.metrics(&id)).await?;
    Ok(Json(view).into_response())
}

#[derive(Debug, Deserialize)]
struct SuggestQuery {
    targets: String,
}

async fn get_suggest_o(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<SuggestQuery>,
) -> ApiResult<Json<Value>> {
    let targets = parse_targets(&q.targets)?;
    let wb = s.workbench.clone();
    let t = targets.clone();
    let o = blocking(move || {
        wb.manifest(&id)?;
        wb.suggest_o(&id, &t)
    })
    .await?;
    Ok(Json(json!({ "targets": targets, "o": o })))
}

async fn get_job(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(s.jobs.get(&id)?).into_response())
}

pub fn router(state: AppState) -> Router {
    let files = ServeDir::new(state.workbench.store.root());
    let ui = state.workbench.config.ui_dir.clone();
    let router = Router::new()
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/ranking", get(get_ranking))
        .route("/runs/{id}/visualizations", post(create_visualization))
        .route("/runs/{id}/gallery", get(get_gallery))
        .route("/runs/{id}/edits", post(create_edit))
        .route("/runs/{id}/metrics", get(get_metrics))
        .route("/runs/{id}/suggest-o", get(get_suggest_o))
        .route("/jobs/{id}", get(get_job))
        .nest_service("/files", files)
        .with_state(state);
    match ui {
        Some(dir) => router.fallback_service(ServeDir::new(dir)),
        None => router,
    }
}

/// Serve until the process is stopped.
pub async fn serve(state: AppState, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}
