//! Long-running HTTP service: pipeline runs, batch annotation and the review
//! workflow over datasets persisted in the data directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use groundseg_core::backend::{fixture, BackendEndpoint, Backends, Capability, ImagePayload, RemoteBackend};
use groundseg_core::pipeline::{
    builtin_pipeline, run_auto_annotate, run_grounded_inpaint, run_grounded_sam, run_promptable_mesh,
    AutoAnnotateOptions, EditMode, PhraseSource, PipelineError, RunContext,
};
use groundseg_core::store::{filtered_export, CocoDocument, ReviewVerdict, StoreError, VerdictStore};
use groundseg_core::GroundedSamConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::files::{to_json_pretty, write_atomic};
use crate::CliError;

const DATASET_SUFFIX: &str = ".coco.json";
const VERDICT_SUFFIX: &str = ".verdicts.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_retries() -> u32 {
    2
}
fn default_backoff_ms() -> u64 {
    100
}
fn default_listen() -> String {
    "127.0.0.1:8080".into()
}
fn default_workers() -> usize {
    4
}
fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub endpoints: BTreeMap<Capability, EndpointConfig>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture_dir: Option<PathBuf>,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default)]
    pub defaults: GroundedSamConfig,
}

impl ServiceConfig {
    /// Checks pool size, thresholds and that every built-in pipeline's
    /// capabilities have an endpoint.
    pub fn validate(&self) -> Result<(), String> {
        if self.workers == 0 {
            return Err("workers must be at least 1".into());
        }
        self.defaults.validate().map_err(|e| e.to_string())?;
        for cap in [
            Capability::Detector,
            Capability::Segmenter,
            Capability::Inpainter,
            Capability::MeshRecoverer,
        ] {
            if !self.endpoints.contains_key(&cap) {
                return Err(format!("missing endpoint for required capability '{cap}'"));
            }
        }
        if !self.endpoints.contains_key(&Capability::Tagger) && !self.endpoints.contains_key(&Capability::Captioner) {
            return Err("missing endpoint for capability 'tagger' (or 'captioner')".into());
        }
        for e in self.backend_endpoints() {
            e.validate().map_err(|err| err.to_string())?;
        }
        Ok(())
    }

    pub fn backend_endpoints(&self) -> Vec<BackendEndpoint> {
        self.endpoints
            .iter()
            .map(|(cap, e)| BackendEndpoint {
                capability: *cap,
                base_url: e.base_url.clone(),
                timeout_ms: e.timeout_ms,
                max_retries: e.max_retries,
                backoff_base_ms: e.backoff_base_ms,
            })
            .collect()
    }
}

struct Dataset {
    doc: CocoDocument,
    verdicts: VerdictStore,
}

pub struct AppState {
    backends: Backends,
    remote: Arc<RemoteBackend>,
    defaults: GroundedSamConfig,
    workers: usize,
    permits: Arc<Semaphore>,
    data_dir: PathBuf,
    fixtures: Vec<ImagePayload>,
    datasets: Mutex<BTreeMap<String, Dataset>>,
}

impl AppState {
    /// Connects backends, loads fixtures and reopens persisted datasets.
    pub fn build(config: &ServiceConfig) -> Result<Arc<Self>, CliError> {
        config.validate().map_err(CliError::Usage)?;
        let remote = Arc::new(RemoteBackend::new(config.backend_endpoints()));
        let fixtures = match &config.fixture_dir {
            Some(dir) => fixture::suite_payloads(&fixture::load_dir(dir).map_err(crate::commands::fixture_err)?),
            None => Vec::new(),
        };
        std::fs::create_dir_all(&config.data_dir)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", config.data_dir.display())))?;
        let datasets = load_datasets(&config.data_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
        Ok(Arc::new(Self {
            backends: Backends::uniform(remote.clone()),
            remote,
            defaults: config.defaults,
            workers: config.workers,
            permits: Arc::new(Semaphore::new(config.workers)),
            data_dir: config.data_dir.clone(),
            fixtures,
            datasets: Mutex::new(datasets),
        }))
    }
}

fn load_datasets(dir: &Path) -> Result<BTreeMap<String, Dataset>, StoreError> {
    let io = |source| StoreError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let Some(id) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(DATASET_SUFFIX))
            .map(str::to_string)
        else {
            continue;
        };
        let text = std::fs::read_to_string(&path).map_err(|source| StoreError::Io {
            path: path.clone(),
            source,
        })?;
        let doc = CocoDocument::from_json(&text).map_err(|e| StoreError::Parse {
            what: path.display().to_string(),
            message: e.to_string(),
        })?;
        doc.validate()?;
        let verdicts = VerdictStore::open(&dir.join(format!("{id}{VERDICT_SUFFIX}")), doc.annotation_ids())?;
        out.insert(id, Dataset { doc, verdicts });
    }
    Ok(out)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/readyz", get(readyz))
        .route("/v1/pipelines/{name}/run", post(run_pipeline))
        .route("/v1/annotate/batch", post(annotate_batch))
        .route("/v1/review/queue", get(review_queue))
        .route("/v1/review/verdicts", post(review_verdicts))
        .route("/v1/datasets/{id}/export", get(export_dataset))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid-request", message)
    }

    fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::InvalidInput(_) | PipelineError::InvalidConfig(_) => StatusCode::BAD_REQUEST,
            PipelineError::TargetNotFound { .. } => StatusCode::NOT_FOUND,
            PipelineError::Backend { .. } => StatusCode::BAD_GATEWAY,
            PipelineError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "message": self.message}))).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("request body: {e}")))
}

/// Applies `{"key": value}` overrides onto the service defaults.
fn merge_config(defaults: &GroundedSamConfig, overrides: Option<&Value>) -> Result<GroundedSamConfig, ApiError> {
    let Some(o) = overrides else {
        return Ok(*defaults);
    };
    let Value::Object(o) = o else {
        return Err(ApiError::bad_request("config must be an object"));
    };
    let Value::Object(mut base) = serde_json::to_value(defaults).expect("config serializes") else {
        unreachable!("config serializes to an object")
    };
    for (k, v) in o {
        if !base.contains_key(k) {
            return Err(ApiError::bad_request(format!("unknown config key '{k}'")));
        }
        base.insert(k.clone(), v.clone());
    }
    let cfg: GroundedSamConfig =
        serde_json::from_value(Value::Object(base)).map_err(|e| ApiError::bad_request(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Runs `f` on the blocking pool once a worker permit is free.
async fn blocking<T, F>(state: &Arc<AppState>, f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    let permit = state
        .permits
        .clone()
        .acquire_owned()
        .await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "shutting-down", "service is stopping"))?;
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        f()
    })
    .await
    .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))?
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunRequest {
    image: ImagePayload,
    #[serde(default)]
    phrases: Vec<String>,
    #[serde(default)]
    source: Option<PhraseSource>,
    #[serde(default)]
    mode: Option<String>,
    #[serde(default)]
    prompt: Option<String>,
    #[serde(default)]
    top_only: bool,
    #[serde(default)]
    config: Option<Value>,
    #[serde(default)]
    seed: Option<u64>,
}

async fn run_pipeline(State(state): State<Arc<AppState>>, UrlPath(name): UrlPath<String>, body: Bytes) -> ApiResult {
    if builtin_pipeline(&name).is_none() {
        return Err(ApiError::not_found("unknown-pipeline", format!("no pipeline named '{name}'")));
    }
    let req: RunRequest = parse_body(&body)?;
    let cfg = merge_config(&state.defaults, req.config.as_ref())?;
    let ctx = RunContext::new(req.seed, chrono::Utc::now());
    let st = state.clone();
    blocking(&state, move || {
        let b = &st.backends;
        let image = &req.image;
        let result = match name.as_str() {
            "grounded-sam" => {
                let anns = run_grounded_sam(image, &req.phrases, &cfg, b.detector.as_ref(), b.segmenter.as_ref(), &ctx)?;
                let provenance = anns.first().map(|a| a.provenance.clone());
                json!({"annotations": anns, "provenance": provenance})
            }
            "auto-annotate" => {
                let source = req.source.unwrap_or(PhraseSource::Tags);
                let opts = AutoAnnotateOptions {
                    continue_on_error: false,
                    workers: 1,
                };
                let out = run_auto_annotate(std::slice::from_ref(image), source, &cfg, b, &opts, &ctx)?;
                let provenance = out.document.info.provenance.clone();
                json!({"document": out.document, "provenance": provenance})
            }
            "grounded-inpaint" => {
                let mode = match (req.mode.as_deref().unwrap_or("replace"), req.prompt) {
                    ("replace", Some(p)) => EditMode::Replace(p),
                    ("replace", None) => return Err(ApiError::bad_request("replace mode needs a prompt")),
                    ("remove", _) => EditMode::Remove,
                    (other, _) => return Err(ApiError::bad_request(format!("unknown edit mode '{other}'"))),
                };
                let out = run_grounded_inpaint(image, &req.phrases, &mode, req.top_only, &cfg, b, &ctx)?;
                let provenance = out.report.matched.first().map(|a| a.provenance.clone());
                json!({"image": out.image, "report": out.report, "provenance": provenance})
            }
            "promptable-mesh" => {
                let [person] = req.phrases.as_slice() else {
                    return Err(ApiError::bad_request("promptable-mesh takes exactly one phrase"));
                };
                let pairs = run_promptable_mesh(image, person, &cfg, b, &ctx)?;
                let provenance = pairs.first().map(|p| p.annotation.provenance.clone());
                let items: Vec<Value> = pairs
                    .iter()
                    .map(|p| json!({"annotation": p.annotation, "mesh": p.mesh}))
                    .collect();
                json!({"results": items, "provenance": provenance})
            }
            _ => unreachable!("checked against the built-in list"),
        };
        let mut result = result;
        result["pipeline"] = json!(name);
        Ok(Json(result))
    })
    .await
}

fn valid_dataset_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        && !id.starts_with('.')
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchRequest {
    dataset: String,
    /// Defaults to every fixture scene.
    #[serde(default)]
    images: Option<Vec<ImagePayload>>,
    #[serde(default)]
    source: Option<PhraseSource>,
    #[serde(default)]
    config: Option<Value>,
    #[serde(default)]
    continue_on_error: bool,
    #[serde(default)]
    seed: Option<u64>,
    /// Overwrite an existing dataset of the same name, dropping its verdicts.
    #[serde(default)]
    replace: bool,
}

async fn annotate_batch(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: BatchRequest = parse_body(&body)?;
    if !valid_dataset_id(&req.dataset) {
        return Err(ApiError::bad_request(format!("invalid dataset id '{}'", req.dataset)));
    }
    let cfg = merge_config(&state.defaults, req.config.as_ref())?;
    let images = match req.images {
        Some(i) => i,
        None if state.fixtures.is_empty() => {
            return Err(ApiError::bad_request("no images given and no fixture directory configured"))
        }
        None => state.fixtures.clone(),
    };
    if !req.replace && state.datasets.lock().unwrap().contains_key(&req.dataset) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "dataset-exists",
            format!("dataset '{}' exists; set replace to overwrite", req.dataset),
        ));
    }
    let ctx = RunContext::new(req.seed, chrono::Utc::now());
    let st = state.clone();
    blocking(&state, move || {
        let opts = AutoAnnotateOptions {
            continue_on_error: req.continue_on_error,
            workers: st.workers,
        };
        let source = req.source.unwrap_or(PhraseSource::Tags);
        let out = run_auto_annotate(&images, source, &cfg, &st.backends, &opts, &ctx)?;
        let doc = out.document;

        let mut datasets = st.datasets.lock().unwrap();
        let doc_path = st.data_dir.join(format!("{}{DATASET_SUFFIX}", req.dataset));
        let log_path = st.data_dir.join(format!("{}{VERDICT_SUFFIX}", req.dataset));
        write_atomic(&doc_path, doc.to_json().as_bytes())
            .map_err(|e| ApiError::internal(format!("{}: {e}", doc_path.display())))?;
        if log_path.exists() {
            std::fs::remove_file(&log_path).map_err(|e| ApiError::internal(format!("{}: {e}", log_path.display())))?;
        }
        let verdicts =
            VerdictStore::open(&log_path, doc.annotation_ids()).map_err(|e| ApiError::internal(e.to_string()))?;
        let summary = json!({
            "dataset": req.dataset,
            "images": images.len() - out.failures.len(),
            "annotations": doc.annotations.len(),
            "categories": doc.categories.len(),
            "failures": out.failures,
            "provenance": doc.info.provenance,
        });
        datasets.insert(req.dataset, Dataset { doc, verdicts });
        Ok(Json(summary))
    })
    .await
}

#[derive(Deserialize)]
struct DatasetQuery {
    dataset: Option<String>,
    limit: Option<usize>,
}

/// The named dataset, or the only one when none is named.
fn pick_dataset<'a>(
    datasets: &'a mut BTreeMap<String, Dataset>,
    name: Option<&str>,
) -> Result<(String, &'a mut Dataset), ApiError> {
    let key = match name {
        Some(n) => n.to_string(),
        None if datasets.len() == 1 => datasets.keys().next().cloned().expect("one dataset"),
        None if datasets.is_empty() => return Err(ApiError::not_found("unknown-dataset", "no datasets yet")),
        None => return Err(ApiError::bad_request("several datasets exist; pass ?dataset=")),
    };
    match datasets.get_mut(&key) {
        Some(d) => Ok((key, d)),
        None => Err(ApiError::not_found("unknown-dataset", format!("no dataset '{key}'"))),
    }
}

async fn review_queue(State(state): State<Arc<AppState>>, Query(q): Query<DatasetQuery>) -> ApiResult {
    let limit = q.limit.unwrap_or(20).min(1000);
    let mut datasets = state.datasets.lock().unwrap();
    let (name, ds) = pick_dataset(&mut datasets, q.dataset.as_deref())?;
    let reviewed = ds.verdicts.current();
    let pending: Vec<_> = ds.doc.annotations.iter().filter(|a| !reviewed.contains_key(&a.id)).collect();
    let items: Vec<Value> = pending
        .iter()
        .take(limit)
        .map(|a| {
            json!({
                "annotation_id": a.id,
                "image": ds.doc.images.iter().find(|i| i.id == a.image_id),
                "category": ds.doc.category_name(a.category_id),
                "bbox": a.bbox,
                "segmentation": a.segmentation,
                "score": a.score,
            })
        })
        .collect();
    Ok(Json(json!({
        "dataset": name,
        "unreviewed": pending.len(),
        "items": items,
    })))
}

async fn review_verdicts(State(state): State<Arc<AppState>>, Query(q): Query<DatasetQuery>, body: Bytes) -> ApiResult {
    let verdicts: Vec<ReviewVerdict> = parse_body(&body)?;
    let mut datasets = state.datasets.lock().unwrap();
    let (name, ds) = pick_dataset(&mut datasets, q.dataset.as_deref())?;
    let known = ds.doc.annotation_ids();
    if let Some(v) = verdicts.iter().find(|v| !known.contains(&v.annotation_id)) {
        return Err(ApiError::not_found(
            "unknown-annotation",
            format!("dataset '{name}' has no annotation {}", v.annotation_id),
        ));
    }
    let count = verdicts.len();
    for v in verdicts {
        ds.verdicts.record(v).map_err(|e| ApiError::internal(e.to_string()))?;
    }
    Ok(Json(json!({
        "dataset": name,
        "recorded": count,
        "reviewed": ds.verdicts.current().len(),
    })))
}

#[derive(Deserialize)]
struct ExportQuery {
    #[serde(default)]
    filtered: bool,
    #[serde(default)]
    drop_unreviewed: bool,
}

async fn export_dataset(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ExportQuery>,
) -> Result<Response, ApiError> {
    let mut datasets = state.datasets.lock().unwrap();
    let (_, ds) = pick_dataset(&mut datasets, Some(&id))?;
    let doc = if q.filtered {
        filtered_export(&ds.doc, ds.verdicts.current(), q.drop_unreviewed)
    } else {
        ds.doc.clone()
    };
    Ok((
        [(axum::http::header::CONTENT_TYPE, "application/json")],
        to_json_pretty(&doc),
    )
        .into_response())
}

async fn readyz(State(state): State<Arc<AppState>>) -> Response {
    let remote = state.remote.clone();
    let probe = tokio::task::spawn_blocking(move || remote.probe(Duration::from_millis(500))).await;
    let Ok(probe) = probe else {
        return ApiError::internal("probe failed").into_response();
    };
    let ready = probe.values().all(|&ok| ok);
    let backends: BTreeMap<String, bool> = probe.into_iter().map(|(c, ok)| (c.to_string(), ok)).collect();
    let status = if ready {
        StatusCode::OK
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    };
    (status, Json(json!({"ready": ready, "backends": backends}))).into_response()
}
