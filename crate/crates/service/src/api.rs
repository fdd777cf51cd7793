use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use premsel_core::corpus::{parse_rendered_state, render_premise, render_state, PremiseId, ProofState};
use premsel_core::pipeline::{search, SearchParams};
use premsel_core::Exec;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::config::ServiceConfig;
use crate::state::{Engine, InsertError, NewPremise};

#[derive(Clone)]
pub struct AppState {
    pub config: Arc<ServiceConfig>,
    /// `None` until an index is loaded; every data endpoint answers 503.
    pub engine: Option<Arc<Engine>>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        tracing::error!(error = %e, "request failed");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

fn engine(state: &AppState) -> Result<Arc<Engine>, ApiError> {
    state
        .engine
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "index not loaded"))
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

/// A state given either as rendered text or as structured cases.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum StateInput {
    Text(String),
    Structured(ProofState),
}

impl StateInput {
    /// Canonical rendering, or a 400 for empty or malformed states.
    fn render(&self) -> Result<String, ApiError> {
        let state = match self {
            StateInput::Text(t) => parse_rendered_state(t).map_err(|e| ApiError::bad_request(e.to_string()))?,
            StateInput::Structured(s) => s.clone(),
        };
        if state.cases.is_empty() || state.cases.iter().any(|c| c.goal.trim().is_empty()) {
            return Err(ApiError::bad_request("state needs at least one case with a goal"));
        }
        Ok(render_state(&state))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    pub state: StateInput,
    pub k: Option<usize>,
    pub k1: Option<usize>,
    #[serde(default)]
    pub rerank: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub premise_id: PremiseId,
    pub name: String,
    pub module: String,
    pub rendered: String,
    pub cfr_score: f32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rerank_probability: Option<f64>,
    pub final_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub results: Vec<SearchResult>,
    pub k: usize,
    pub k1: usize,
    pub rerank: bool,
}

async fn search_handler(State(state): State<AppState>, body: Bytes) -> Result<Json<SearchResponse>, ApiError> {
    let engine = engine(&state)?;
    let req: SearchRequest = parse_body(&body)?;
    let text = req.state.render()?;
    let params = SearchParams {
        k: req.k.unwrap_or(state.config.default_k),
        k1: req.k1.unwrap_or(state.config.default_k1),
        rerank: req.rerank,
    };
    if params.k == 0 {
        return Err(ApiError::bad_request("k must be at least 1"));
    }
    if params.rerank && params.k > params.k1 {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("k ({}) exceeds k1 ({}) with re-ranking", params.k, params.k1),
        ));
    }
    if params.rerank && engine.models.reranker.is_none() {
        return Err(ApiError::bad_request("re-ranking requested but no re-ranker is loaded"));
    }
    let results = tokio::task::spawn_blocking(move || {
        let snap = engine.snapshot();
        let hits = search(
            &engine.models.retriever,
            &snap.index,
            engine.models.reranker.as_ref(),
            &snap.corpus,
            &text,
            params,
            Exec::default(),
        )?;
        hits.into_iter()
            .map(|h| {
                let p = snap
                    .corpus
                    .get(h.id)
                    .ok_or_else(|| premsel_core::Error::InvalidArgument(format!("index id {} is not in the corpus", h.id)))?;
                Ok(SearchResult {
                    premise_id: h.id,
                    name: p.name.clone(),
                    module: p.module.clone(),
                    rendered: render_premise(p).full_text,
                    cfr_score: h.cfr_score,
                    rerank_probability: h.rerank_probability,
                    final_rank: h.final_rank,
                })
            })
            .collect::<premsel_core::Result<Vec<_>>>()
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(ApiError::internal)?;
    Ok(Json(SearchResponse {
        results,
        k: params.k,
        k1: params.k1,
        rerank: params.rerank,
    }))
}

async fn add_premise(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let engine = engine(&state)?;
    let rec: NewPremise = parse_body(&body)?;
    let id = tokio::task::spawn_blocking(move || engine.insert(rec))
        .await
        .map_err(ApiError::internal)?
        .map_err(|e| match e {
            InsertError::Duplicate(_) => ApiError::new(StatusCode::CONFLICT, e.to_string()),
            InsertError::Invalid(_) => ApiError::bad_request(e.to_string()),
            InsertError::Service(_) => ApiError::internal(e),
        })?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

async fn get_premise(State(state): State<AppState>, Path(id): Path<PremiseId>) -> Result<Json<serde_json::Value>, ApiError> {
    let snap = engine(&state)?.snapshot();
    let p = snap
        .corpus
        .get(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no premise with id {id}")))?;
    Ok(Json(json!({
        "id": p.id,
        "name": p.name,
        "module": p.module,
        "args": p.args,
        "goal": p.goal,
        "rendered": render_premise(p).full_text,
    })))
}

async fn health(State(state): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    engine(&state)?;
    Ok(Json(json!({ "status": "ok" })))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub corpus_size: usize,
    pub index_rows: usize,
    pub index_fingerprint: String,
    pub mode: String,
    pub dim: usize,
    pub rerank_enabled: bool,
}

async fn stats(State(state): State<AppState>) -> Result<Json<Stats>, ApiError> {
    let engine = engine(&state)?;
    let snap = engine.snapshot();
    Ok(Json(Stats {
        corpus_size: snap.corpus.len(),
        index_rows: snap.index.len(),
        index_fingerprint: snap.index.fingerprint().to_string(),
        mode: snap.index.mode().to_string(),
        dim: snap.index.dim(),
        rerank_enabled: engine.models.reranker.is_some(),
    }))
}

fn cors(origin: &str) -> CorsLayer {
    let allow = if origin == "*" {
        AllowOrigin::any()
    } else {
        match HeaderValue::from_str(origin) {
            Ok(v) => AllowOrigin::exact(v),
            Err(_) => {
                tracing::warn!(origin, "invalid CORS origin; cross-origin requests disabled");
                AllowOrigin::list([])
            }
        }
    };
    CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers([header::CONTENT_TYPE])
}

pub fn router(state: AppState) -> Router {
    let limit = state.config.max_body_bytes;
    let cors = cors(&state.config.cors_origin);
    Router::new()
        .route("/api/search", post(search_handler))
        .route("/api/premises", post(add_premise))
        .route("/api/premises/{id}", get(get_premise))
        .route("/api/health", get(health))
        .route("/api/stats", get(stats))
        .layer(DefaultBodyLimit::max(limit))
        .layer(cors)
        .with_state(state)
}
