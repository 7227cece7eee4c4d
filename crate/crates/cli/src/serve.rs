//! HTTP/JSON service: a FIFO job queue over a fixed pool of generation
//! workers, plus paste-only previews that bypass the queue.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use clap::Args;
use objinsert_core::harness::{knob_ranges, mask_image, CompositeRequest, OutputFiles, Pipeline};
use objinsert_core::imageio::encode_png;
use objinsert_core::metrics::RegionSpec;
use objinsert_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{load_registry, PipelineArgs};

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Manifest whose objects and backgrounds are served as assets.
    #[arg(long)]
    pub assets: Option<PathBuf>,
    /// Job outputs go to `<out-dir>/<job-id>/`.
    #[arg(long, default_value = "runs/serve")]
    pub out_dir: PathBuf,
    /// Concurrent generation jobs.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub status: JobStatus,
    pub request: CompositeRequest,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<OutputFiles>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub submitted_at: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<u64>,
}

#[derive(Default)]
struct JobStore {
    jobs: Mutex<BTreeMap<String, Job>>,
    next: AtomicU64,
}

impl JobStore {
    fn update(&self, id: &str, f: impl FnOnce(&mut Job)) {
        if let Some(job) = self.jobs.lock().unwrap().get_mut(id) {
            f(job);
        }
    }

    fn get(&self, id: &str) -> Option<Job> {
        self.jobs.lock().unwrap().get(id).cloned()
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    pipeline: Arc<Pipeline>,
    jobs: Arc<JobStore>,
    queue: mpsc::Sender<String>,
    out_dir: PathBuf,
    /// `Err` holds why the default backend could not be loaded.
    ready: Arc<std::result::Result<(), String>>,
}

/// Loads the default profile once so a broken config is reported up front.
fn check_backend(pipeline: &Pipeline) -> Result<()> {
    let profile = pipeline.default_profile();
    let (_, channels) = profile.geometry()?;
    profile.instantiate((channels, 1, 1)).map(drop)
}

impl AppState {
    /// Starts `workers` generation threads; they exit when the state is dropped.
    pub fn new(pipeline: Pipeline, out_dir: PathBuf, workers: usize) -> Self {
        let pipeline = Arc::new(pipeline);
        let ready = check_backend(&pipeline).map_err(|e| e.to_string());
        if let Err(e) = &ready {
            log::error!("backend not ready: {e}");
        }
        let (tx, rx) = mpsc::channel::<String>();
        let rx = Arc::new(Mutex::new(rx));
        let jobs = Arc::new(JobStore::default());
        for _ in 0..workers.max(1) {
            let (rx, jobs, pipeline, out_dir) = (rx.clone(), jobs.clone(), pipeline.clone(), out_dir.clone());
            std::thread::spawn(move || loop {
                let Ok(id) = rx.lock().unwrap().recv() else { break };
                run_job(&pipeline, &jobs, &out_dir, &id);
            });
        }
        Self {
            pipeline,
            jobs,
            queue: tx,
            out_dir,
            ready: Arc::new(ready),
        }
    }

    pub fn out_dir(&self) -> &std::path::Path {
        &self.out_dir
    }
}

fn run_job(pipeline: &Pipeline, jobs: &JobStore, out_dir: &std::path::Path, id: &str) {
    let Some(job) = jobs.get(id) else { return };
    jobs.update(id, |j| j.status = JobStatus::Running);
    let result = pipeline
        .generate(&job.request)
        .and_then(|g| g.write_outputs(&out_dir.join(id)));
    jobs.update(id, |j| {
        j.finished_at = Some(now());
        match result {
            Ok(files) => {
                j.status = JobStatus::Done;
                j.result = Some(files);
            }
            Err(e) => {
                log::warn!("job {id} failed: {e}");
                j.status = JobStatus::Failed;
                j.error = Some(e.to_string());
            }
        }
    });
}

/// JSON error body: `{"error": .., "field": ..}`.
pub struct ApiError(StatusCode, String, Option<String>);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = if e.is_validation() {
            StatusCode::BAD_REQUEST
        } else {
            StatusCode::SERVICE_UNAVAILABLE
        };
        ApiError(status, e.to_string(), e.field().map(str::to_string))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1, "field": self.2}))).into_response()
    }
}

fn not_found(what: String) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, what, None)
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn parse_request(body: &Bytes) -> ApiResult<CompositeRequest> {
    let text = std::str::from_utf8(body).map_err(|e| Error::validation("request", e.to_string()))?;
    Ok(CompositeRequest::from_json(text)?)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None))?
        .map_err(ApiError::from)
}

async fn submit_job(State(s): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let req = parse_request(&body)?;
    if let Err(e) = s.ready.as_ref() {
        return Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, format!("backend not ready: {e}"), None));
    }
    let pipeline = s.pipeline.clone();
    let checked = req.clone();
    blocking(move || pipeline.resolve(&checked).map(drop)).await?;
    let id = format!("job-{:06}", s.jobs.next.fetch_add(1, Ordering::Relaxed) + 1);
    s.jobs.jobs.lock().unwrap().insert(
        id.clone(),
        Job {
            id: id.clone(),
            status: JobStatus::Queued,
            request: req,
            result: None,
            error: None,
            submitted_at: now(),
            finished_at: None,
        },
    );
    s.queue
        .send(id.clone())
        .map_err(|_| ApiError(StatusCode::SERVICE_UNAVAILABLE, "job queue closed".into(), None))?;
    Ok((StatusCode::ACCEPTED, Json(json!({"id": id, "status": JobStatus::Queued}))))
}

async fn get_job(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    s.jobs.get(&id).map(Json).ok_or_else(|| not_found(format!("unknown job `{id}`")))
}

async fn get_job_image(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = s.jobs.get(&id).ok_or_else(|| not_found(format!("unknown job `{id}`")))?;
    let Some(files) = job.result else {
        return Err(ApiError(StatusCode::CONFLICT, format!("job `{id}` is {:?}", job.status), None));
    };
    let bytes = tokio::fs::read(&files.image)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn assets(State(s): State<AppState>) -> Json<objinsert_core::harness::AssetListing> {
    Json(s.pipeline.registry().listing())
}

async fn renders(State(s): State<AppState>, Path(object): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let renders = s
        .pipeline
        .registry()
        .renders(&object)
        .ok_or_else(|| not_found(format!("unknown object `{object}`")))?;
    let views: Vec<&str> = renders.iter().map(|r| r.view_tag.as_str()).collect();
    Ok(Json(json!({"object": object, "view_tags": views})))
}

async fn preview(State(s): State<AppState>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req = parse_request(&body)?;
    let pipeline = s.pipeline.clone();
    blocking(move || {
        let pasted = pipeline.preview(&req)?;
        let b64 = |bytes: Vec<u8>| base64::engine::general_purpose::STANDARD.encode(bytes);
        let bbox = RegionSpec::from_mask(&pasted.mask).ok();
        Ok(Json(json!({
            "width": pasted.coarse.width(),
            "height": pasted.coarse.height(),
            "coarse_png": b64(encode_png(&pasted.coarse)?),
            "mask_png": b64(encode_png(&mask_image(&pasted.mask))?),
            "mask_bbox": bbox,
        })))
    })
    .await
}

async fn healthz(State(s): State<AppState>) -> Response {
    let profile = s.pipeline.default_profile().to_string();
    match s.ready.as_ref() {
        Ok(()) => Json(json!({"status": "ok", "backend_profile": profile})).into_response(),
        Err(e) => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({"status": "not_ready", "backend_profile": profile, "error": e})),
        )
            .into_response(),
    }
}

async fn knobs() -> Json<serde_json::Value> {
    Json(json!({"knobs": knob_ranges()}))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/jobs", post(submit_job))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/image", get(get_job_image))
        .route("/assets", get(assets))
        .route("/renders/{object}", get(renders))
        .route("/preview", post(preview))
        .route("/healthz", get(healthz))
        .route("/knobs", get(knobs))
        .with_state(state)
}

pub fn serve(args: &ServeArgs) -> Result<i32> {
    let registry = load_registry(args.assets.as_deref())?;
    let pipeline = args.pipeline.pipeline(registry)?;
    let state = AppState::new(pipeline, args.out_dir.clone(), args.workers);
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("<runtime>", e))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.addr)
            .await
            .map_err(|e| Error::io(args.addr.to_string(), e))?;
        log::info!("listening on {}", args.addr);
        axum::serve(listener, router(state))
            .await
            .map_err(|e| Error::io(args.addr.to_string(), e))
    })?;
    Ok(0)
}
