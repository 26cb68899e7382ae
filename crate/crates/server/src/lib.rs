//! JSON service over a trained bundle and one cohort's feature file.
//!
//! The bundle and cohort form an immutable [`Snapshot`]. Handlers clone the
//! current `Arc<Snapshot>` and never mutate it; `POST /admin/reload` builds
//! a fresh snapshot from disk and swaps it in.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use olit_core::bundle::ModelBundle;
use olit_core::carttree::Condition;
use olit_core::experiment::{cohort_summary, CohortSummary};
use olit_core::intervene::DEFAULT_INTERVENTION_WEEK;
use olit_core::pipeline::{
    self, load_model, parse_targets, student_record, what_if, Cohort, PipelineError, RiskPolicy, StrategyOutput,
    StudentRecord, WhatIf,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tower_http::cors::CorsLayer;

pub const DEFAULT_PORT: u16 = 8080;
pub const ADMIN_TOKEN_ENV: &str = "OLIT_ADMIN_TOKEN";

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("invalid CORS origin {0:?}")]
    BadOrigin(String),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Files a snapshot is (re)loaded from.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSource {
    pub bundle: PathBuf,
    pub features: PathBuf,
}

/// Everything a request may read.
#[derive(Debug)]
pub struct Snapshot {
    pub bundle: ModelBundle,
    pub cohort: Cohort,
    pub summary: CohortSummary,
}

impl Snapshot {
    pub fn new(bundle: ModelBundle, cohort: Cohort) -> Result<Snapshot, PipelineError> {
        let summary = cohort_summary(&cohort.raw)?;
        Ok(Snapshot { bundle, cohort, summary })
    }

    pub fn load(source: &SnapshotSource) -> Result<Snapshot, PipelineError> {
        let bundle = load_model(&source.bundle)?;
        let cohort = Cohort::load(&bundle, &source.features)?;
        Snapshot::new(bundle, cohort)
    }
}

pub struct AppState {
    snapshot: RwLock<Arc<Snapshot>>,
    source: Option<SnapshotSource>,
    admin_token: Option<String>,
    policy: RiskPolicy,
}

impl AppState {
    pub fn new(
        snapshot: Snapshot,
        source: Option<SnapshotSource>,
        admin_token: Option<String>,
        policy: RiskPolicy,
    ) -> Self {
        AppState { snapshot: RwLock::new(Arc::new(snapshot)), source, admin_token, policy }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock poisoned").clone()
    }

    fn swap(&self, next: Snapshot) {
        *self.snapshot.write().expect("snapshot lock poisoned") = Arc::new(next);
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into() }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let (status, code) = match &e {
            PipelineError::UnknownStudent(_) => (StatusCode::NOT_FOUND, "unknown_student"),
            PipelineError::UnknownFeature(_) => (StatusCode::BAD_REQUEST, "unknown_feature"),
            PipelineError::ValueOutOfRange { .. } => (StatusCode::BAD_REQUEST, "value_out_of_range"),
            PipelineError::Invalid(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status.is_server_error() {
            log::error!("{e}");
        }
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.code, message: self.message })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudentDetail {
    #[serde(flatten)]
    pub record: StudentRecord,
    pub leaf_id: usize,
    pub path: Vec<Condition>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WhatIfRequest {
    pub student_id: String,
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
}

#[derive(Debug, Deserialize)]
struct StrategyQuery {
    target: Option<String>,
    week: Option<u32>,
}

async fn list_students(State(state): State<Arc<AppState>>) -> ApiResult<Vec<StudentRecord>> {
    let snap = state.snapshot();
    Ok(Json(pipeline::predict(&snap.bundle, &snap.cohort, None, &state.policy)?))
}

async fn get_student(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<StudentDetail> {
    let snap = state.snapshot();
    let (record, leaf) = student_record(&snap.bundle, &snap.cohort, &id, &state.policy)?;
    Ok(Json(StudentDetail { record, leaf_id: leaf.leaf_id, path: leaf.conditions }))
}

async fn get_strategy(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<StrategyQuery>,
) -> ApiResult<StrategyOutput> {
    let snap = state.snapshot();
    let targets = parse_targets(q.target.as_deref().unwrap_or("4,5"))?;
    let week = q.week.unwrap_or(DEFAULT_INTERVENTION_WEEK);
    Ok(Json(pipeline::strategy(&snap.bundle, &snap.cohort, &id, &targets, week)?))
}

async fn post_whatif(State(state): State<Arc<AppState>>, Json(req): Json<WhatIfRequest>) -> ApiResult<WhatIf> {
    let snap = state.snapshot();
    let row = snap.cohort.row(&req.student_id)?;
    Ok(Json(what_if(&snap.bundle, &req.student_id, row, &req.overrides)?))
}

async fn get_summary(State(state): State<Arc<AppState>>) -> Json<CohortSummary> {
    Json(state.snapshot().summary.clone())
}

async fn get_table1(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let snap = state.snapshot();
    match &snap.bundle.table1 {
        Some(t) => Ok(Json(t).into_response()),
        None => Err(ApiError::new(
            StatusCode::CONFLICT,
            "bundle_missing_component",
            "bundle was trained without the weekly logistic models",
        )),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReloadResponse {
    pub students: usize,
    pub config_hash: String,
}

async fn post_reload(State(state): State<Arc<AppState>>, headers: HeaderMap) -> Result<Json<ReloadResponse>, ApiError> {
    let Some(expected) = &state.admin_token else {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "reload_disabled", format!("{ADMIN_TOKEN_ENV} is not set")));
    };
    let given =
        headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer "));
    if given != Some(expected.as_str()) {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong admin token"));
    }
    let Some(source) = state.source.clone() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "no_source", "snapshot was not loaded from files"));
    };
    let next = tokio::task::spawn_blocking(move || Snapshot::load(&source))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "reload_failed", e.to_string()))?;
    let body =
        ReloadResponse { students: next.cohort.raw.n_rows(), config_hash: next.bundle.metadata.config_hash.clone() };
    state.swap(next);
    log::info!("snapshot reloaded: {} students", body.students);
    Ok(Json(body))
}

/// All routes. `cors_origin` allows one browser origin to call the API.
pub fn router(state: Arc<AppState>, cors_origin: Option<HeaderValue>) -> Router {
    let app = Router::new()
        .route("/students", get(list_students))
        .route("/students/{id}", get(get_student))
        .route("/students/{id}/strategy", get(get_strategy))
        .route("/whatif", post(post_whatif))
        .route("/cohort/summary", get(get_summary))
        .route("/experiment/table1", get(get_table1))
        .route("/admin/reload", post(post_reload))
        .with_state(state);
    match cors_origin {
        Some(origin) => app.layer(
            CorsLayer::new()
                .allow_origin(origin)
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION]),
        ),
        None => app,
    }
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub source: SnapshotSource,
    pub addr: SocketAddr,
    pub cors_origin: Option<String>,
    pub admin_token: Option<String>,
    pub policy: RiskPolicy,
}

/// Loads the snapshot and serves until ctrl-c.
pub async fn serve(cfg: ServeConfig) -> Result<(), ServerError> {
    let origin = cfg
        .cors_origin
        .as_deref()
        .map(|o| HeaderValue::from_str(o).map_err(|_| ServerError::BadOrigin(o.to_string())))
        .transpose()?;
    let snapshot = Snapshot::load(&cfg.source)?;
    let state = Arc::new(AppState::new(snapshot, Some(cfg.source), cfg.admin_token, cfg.policy));
    let listener =
        tokio::net::TcpListener::bind(cfg.addr).await.map_err(|source| ServerError::Bind { addr: cfg.addr, source })?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, origin))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
