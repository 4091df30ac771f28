//! HTTP front end for the annotation questionnaires.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use kg2mmkg_core::annotation::{self, AnnotationError, Rating, Store, REAL_SOURCE};
use kg2mmkg_core::pipeline::{self, Layout, Method};

/// Where session candidates come from.
#[derive(Clone, Debug)]
pub struct Sources {
    pub layout: Layout,
    pub methods: Vec<Method>,
    pub reals: Option<PathBuf>,
}

#[derive(Clone)]
pub struct AppState {
    store: Arc<Mutex<Store>>,
    sources: Arc<Sources>,
}

impl AppState {
    pub fn new(store: Store, sources: Sources) -> Self {
        Self {
            store: Arc::new(Mutex::new(store)),
            sources: Arc::new(sources),
        }
    }
}

pub struct ApiError(StatusCode, String);

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub dataset: String,
    pub sample_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Add a real image slot next to the generated ones.
    #[serde(default)]
    pub include_real: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session: String,
    pub n_items: usize,
    pub slots_per_item: usize,
    /// Entities dropped because an image was missing.
    pub n_excluded: usize,
}

async fn create_session(State(st): State<AppState>, Json(req): Json<CreateSession>) -> ApiResult<Json<SessionCreated>> {
    let src = &st.sources;
    let reals = if req.include_real {
        Some(src.reals.as_deref().ok_or_else(|| {
            ApiError(
                StatusCode::UNPROCESSABLE_ENTITY,
                "no real image directory configured".into(),
            )
        })?)
    } else {
        None
    };
    let candidates = pipeline::annotation_candidates(&src.layout, &src.methods, reals)
        .map_err(|e| ApiError(StatusCode::CONFLICT, e.to_string()))?;
    let mut names: Vec<String> = src.methods.iter().map(|m| m.name().to_owned()).collect();
    if req.include_real {
        names.push(REAL_SOURCE.to_owned());
    }
    let mut store = st.store.lock().expect("store lock");
    let id = store.next_session_id();
    let (session, warnings) = annotation::create_session(&id, &req.dataset, candidates, &names, req.sample_size, req.seed)?;
    for w in &warnings {
        tracing::warn!(session = %id, "{w}");
    }
    let created = SessionCreated {
        session: id,
        n_items: session.items.len(),
        slots_per_item: names.len(),
        n_excluded: warnings.iter().filter(|w| w.contains(" excluded: ")).count(),
    };
    store.add_session(session)?;
    Ok(Json(created))
}

#[derive(Debug, Deserialize)]
struct AnnotatorQuery {
    annotator: String,
}

async fn session_items(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<AnnotatorQuery>,
) -> ApiResult<Json<annotation::ItemsView>> {
    Ok(Json(st.store.lock().expect("store lock").items_view(&id, &q.annotator)?))
}

#[derive(Debug, Deserialize)]
struct SlotQuery {
    slot: String,
}

async fn item_image(State(st): State<AppState>, Path(id): Path<String>, Query(q): Query<SlotQuery>) -> ApiResult<Response> {
    let path = st.store.lock().expect("store lock").slot_image(&id, &q.slot)?.to_owned();
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError(StatusCode::NOT_FOUND, format!("image unavailable: {e}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn submit_rating(State(st): State<AppState>, Json(r): Json<Rating>) -> ApiResult<Json<serde_json::Value>> {
    st.store.lock().expect("store lock").submit(r)?;
    Ok(Json(serde_json::json!({ "ok": true })))
}

async fn results(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<annotation::SessionResults>> {
    Ok(Json(st.store.lock().expect("store lock").aggregate(&id)?))
}

/// The JSON API, plus the questionnaire bundle at `/` when `ui` is given.
pub fn router(state: AppState, ui: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/items", get(session_items))
        .route("/sessions/{id}/results", get(results))
        .route("/items/{id}", get(item_image))
        .route("/ratings", post(submit_rating))
        .with_state(state);
    match ui {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}
