//! JSON inference service over a trained VICTOR model: catalog browsing,
//! outfit scoring with per-item mismatch flags, and replacement search.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};

use misfitlab::catalog::{load_corpus, Catalog, Garment};
use misfitlab::flip::FeatureCache;
use misfitlab::victor::{BatchedOutfits, VictorConfig, VictorModel};

pub const ENV_MODEL: &str = "MISFITLAB_MODEL";
pub const ENV_CATALOG: &str = "MISFITLAB_CATALOG";
pub const ENV_FEATURES: &str = "MISFITLAB_FEATURES";
pub const ENV_PORT: &str = "MISFITLAB_PORT";

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const DEFAULT_TOP_K: usize = 5;
/// Substituted outfits scored per forward pass in `/recommend`.
const RECOMMEND_CHUNK: usize = 256;
/// Swatch grid side.
const SWATCH_SIDE: usize = 4;

/// Immutable state shared by every request.
pub struct AppState {
    pub model: VictorModel,
    pub catalog: Catalog,
    pub cache: FeatureCache,
    pub model_hash: String,
}

impl AppState {
    pub fn new(model: VictorModel, catalog: Catalog, cache: FeatureCache) -> misfitlab::Result<Self> {
        if cache.dim != model.config.feature_dim {
            return Err(misfitlab::Error::Config(format!(
                "feature cache width {} does not match the model's feature_dim {}",
                cache.dim, model.config.feature_dim
            )));
        }
        let model_hash = model.hash();
        Ok(Self { model, catalog, cache, model_hash })
    }

    /// Reads the model file, `corpus.json` and the feature cache.
    pub fn load(model: &Path, corpus: &Path, features: &Path) -> misfitlab::Result<Self> {
        let m = VictorModel::load(model)?;
        let c = load_corpus(corpus)?;
        let f = FeatureCache::load(features)?;
        Self::new(m, c.catalog, f)
    }
}

/// Error body `{code, message, details}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    pub details: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>, details: serde_json::Value) -> Self {
        Self { status: status.as_u16(), code: code.into(), message: message.into(), details }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message, serde_json::Value::Null)
    }

    fn unknown_garment(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_garment", format!("unknown garment id `{id}`"), serde_json::json!({ "garment_id": id }))
    }

    fn unprocessable(code: &str, message: impl Into<String>, details: serde_json::Value) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message, details)
    }

    fn internal(e: misfitlab::Error) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string(), serde_json::Value::Null)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub model_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelInfo {
    pub model_hash: String,
    pub config: VictorConfig,
    pub feature_provenance: misfitlab::flip::Provenance,
    pub feature_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CatalogItem {
    pub id: String,
    pub category_id: usize,
    pub category_name: String,
    /// Row-major colours of a coarse grid over the rendered image.
    pub swatch: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CatalogPage {
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub pages: usize,
    pub items: Vec<CatalogItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoreRequest {
    pub garment_ids: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ItemScore {
    pub garment_id: String,
    pub mismatch_probability: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoreResponse {
    pub model_version: String,
    pub threshold: f64,
    pub oc_r: f64,
    pub items: Vec<ItemScore>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RecommendRequest {
    pub garment_ids: Vec<String>,
    #[serde(default)]
    pub target_position: Option<usize>,
    #[serde(default)]
    pub candidate_pool: Option<Vec<String>>,
    #[serde(default)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Candidate {
    pub garment_id: String,
    /// Compatibility of the outfit with this garment substituted.
    pub oc_r: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PositionCandidates {
    pub position: usize,
    pub garment_id: String,
    pub category_id: usize,
    pub mismatch_probability: f64,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RecommendResponse {
    pub model_version: String,
    pub threshold: f64,
    pub baseline_oc_r: f64,
    pub positions: Vec<PositionCandidates>,
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new().allow_origin(Any).allow_methods(Any).allow_headers(Any);
    Router::new()
        .route("/health", get(health))
        .route("/model", get(model_info))
        .route("/catalog", get(catalog))
        .route("/score", post(score))
        .route("/recommend", post(recommend))
        .layer(cors)
        .with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn health(State(s): State<Arc<AppState>>) -> Json<Health> {
    Json(Health { status: "ok".into(), version: env!("CARGO_PKG_VERSION").into(), model_hash: s.model_hash.clone() })
}

async fn model_info(State(s): State<Arc<AppState>>) -> Json<ModelInfo> {
    Json(ModelInfo {
        model_hash: s.model_hash.clone(),
        config: s.model.config.clone(),
        feature_provenance: s.cache.provenance,
        feature_hash: s.cache.content_hash.clone(),
    })
}

fn parse_usize(q: &HashMap<String, String>, key: &str) -> Result<Option<usize>, ApiError> {
    q.get(key)
        .map(|v| v.parse::<usize>().map_err(|_| ApiError::bad_request(format!("`{key}` must be a non-negative integer, got `{v}`"))))
        .transpose()
}

fn threshold(q: &HashMap<String, String>) -> Result<f64, ApiError> {
    match q.get("threshold") {
        None => Ok(0.5),
        Some(v) => match v.parse::<f64>() {
            Ok(t) if t > 0.0 && t < 1.0 => Ok(t),
            _ => Err(ApiError::bad_request(format!("`threshold` must lie in (0, 1), got `{v}`"))),
        },
    }
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

fn hex(rgb: [f32; 3]) -> String {
    let c = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(rgb[0]), c(rgb[1]), c(rgb[2]))
}

/// Corner pixel of every cell of a 4×4 grid over the render.
pub fn swatch(g: &Garment) -> Option<Vec<String>> {
    let img = g.image.as_ref()?;
    let (h, w) = (img.height, img.width);
    if h < SWATCH_SIDE || w < SWATCH_SIDE {
        return None;
    }
    let mut out = Vec::with_capacity(SWATCH_SIDE * SWATCH_SIDE);
    for r in 0..SWATCH_SIDE {
        for c in 0..SWATCH_SIDE {
            let (y, x) = (r * h / SWATCH_SIDE, c * w / SWATCH_SIDE);
            let px = |ch: usize| img.data[(ch * h + y) * w + x];
            out.push(hex([px(0), px(1), px(2)]));
        }
    }
    Some(out)
}

async fn catalog(State(s): State<Arc<AppState>>, Query(q): Query<HashMap<String, String>>) -> ApiResult<CatalogPage> {
    let page = parse_usize(&q, "page")?.unwrap_or(0);
    let page_size = parse_usize(&q, "page_size")?.unwrap_or(DEFAULT_PAGE_SIZE);
    if page_size == 0 {
        return Err(ApiError::bad_request("`page_size` must be positive"));
    }
    let category = parse_usize(&q, "category")?;
    let matching: Vec<&Garment> = s.catalog.garments().iter().filter(|g| category.is_none_or(|c| g.category_id == c)).collect();
    let total = matching.len();
    let pages = total.div_ceil(page_size);
    let items = matching
        .iter()
        .skip(page.saturating_mul(page_size))
        .take(page_size)
        .map(|g| CatalogItem { id: g.id.clone(), category_id: g.category_id, category_name: g.category_name.clone(), swatch: swatch(g) })
        .collect();
    Ok(Json(CatalogPage { page, page_size, total, pages, items }))
}

fn check_outfit(s: &AppState, ids: &[String]) -> Result<Vec<Vec<f64>>, ApiError> {
    let max = s.model.config.max_items;
    if ids.len() < 2 || ids.len() > max {
        return Err(ApiError::unprocessable(
            "outfit_size",
            format!("outfits must have 2..={max} garments, got {}", ids.len()),
            serde_json::json!({ "n": ids.len(), "min": 2, "max": max }),
        ));
    }
    ids.iter()
        .map(|id| {
            s.catalog.get(id).ok_or_else(|| ApiError::unknown_garment(id))?;
            s.cache.features(id, s.model.config.multimodal).ok_or_else(|| ApiError::unknown_garment(id))
        })
        .collect()
}

/// Scores many outfits of equal length in batched eval-mode passes.
fn score_rows(model: &VictorModel, outfits: &[Vec<Vec<f64>>]) -> Result<Vec<(f64, Vec<f64>)>, ApiError> {
    let mut out = Vec::with_capacity(outfits.len());
    for chunk in outfits.chunks(RECOMMEND_CHUNK) {
        let t_ocr = vec![0.0; chunk.len()];
        let t_mid: Vec<Vec<f64>> = chunk.iter().map(|o| vec![0.0; o.len()]).collect();
        let batch = BatchedOutfits::from_features(chunk, &t_ocr, &t_mid, None).map_err(ApiError::internal)?;
        let (y, m) = model.predict(&batch).map_err(ApiError::internal)?;
        out.extend(y.into_iter().zip(m));
    }
    Ok(out)
}

async fn score(
    State(s): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
    body: Bytes,
) -> ApiResult<ScoreResponse> {
    let threshold = threshold(&q)?;
    let req: ScoreRequest = parse_body(&body)?;
    let rows = check_outfit(&s, &req.garment_ids)?;
    let (oc_r, mid) = score_rows(&s.model, &[rows])?.remove(0);
    let items = req
        .garment_ids
        .iter()
        .zip(mid)
        .map(|(id, p)| ItemScore { garment_id: id.clone(), mismatch_probability: p, flagged: p > threshold })
        .collect();
    Ok(Json(ScoreResponse { model_version: s.model_hash.clone(), threshold, oc_r, items }))
}

async fn recommend(
    State(s): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
    body: Bytes,
) -> ApiResult<RecommendResponse> {
    let threshold = threshold(&q)?;
    let req: RecommendRequest = parse_body(&body)?;
    let ids = &req.garment_ids;
    let rows = check_outfit(&s, ids)?;
    let top_k = req.top_k.unwrap_or(DEFAULT_TOP_K);
    if top_k == 0 {
        return Err(ApiError::bad_request("`top_k` must be positive"));
    }
    let (baseline, mid) = score_rows(&s.model, std::slice::from_ref(&rows))?.remove(0);
    let targets: Vec<usize> = match req.target_position {
        Some(p) if p >= ids.len() => {
            return Err(ApiError::unprocessable(
                "target_position",
                format!("target_position {p} is outside the {}-garment outfit", ids.len()),
                serde_json::json!({ "target_position": p, "n": ids.len() }),
            ))
        }
        Some(p) => vec![p],
        None => (0..ids.len()).filter(|&i| mid[i] > threshold).collect(),
    };
    if let Some(pool) = &req.candidate_pool {
        if let Some(bad) = pool.iter().find(|id| s.catalog.get(id).is_none() || s.cache.features(id, false).is_none()) {
            return Err(ApiError::unknown_garment(bad));
        }
    }
    let multimodal = s.model.config.multimodal;
    let mut positions = Vec::with_capacity(targets.len());
    for pos in targets {
        let original = s.catalog.get(&ids[pos]).expect("checked");
        let others: Vec<&String> = ids.iter().enumerate().filter(|(i, _)| *i != pos).map(|(_, id)| id).collect();
        let eligible = |g: &Garment| g.category_id == original.category_id && !others.contains(&&g.id);
        let pool: Vec<&Garment> = match &req.candidate_pool {
            Some(p) => p.iter().map(|id| s.catalog.get(id).expect("checked")).filter(|g| eligible(g)).collect(),
            None => s.catalog.garments().iter().filter(|g| eligible(g) && s.cache.features(&g.id, multimodal).is_some()).collect(),
        };
        if pool.is_empty() {
            return Err(ApiError::unprocessable(
                "empty_pool",
                format!("no candidate of category `{}` is left for position {pos}", original.category_name),
                serde_json::json!({ "position": pos, "category_id": original.category_id }),
            ));
        }
        let outfits: Vec<Vec<Vec<f64>>> = pool
            .iter()
            .map(|g| {
                let mut o = rows.clone();
                o[pos] = s.cache.features(&g.id, multimodal).expect("filtered");
                o
            })
            .collect();
        let scores = score_rows(&s.model, &outfits)?;
        let mut candidates: Vec<Candidate> = pool
            .iter()
            .zip(&scores)
            .map(|(g, (y, _))| Candidate { garment_id: g.id.clone(), oc_r: *y })
            .collect();
        candidates.sort_by(|a, b| b.oc_r.total_cmp(&a.oc_r));
        candidates.truncate(top_k);
        positions.push(PositionCandidates {
            position: pos,
            garment_id: ids[pos].clone(),
            category_id: original.category_id,
            mismatch_probability: mid[pos],
            candidates,
        });
    }
    Ok(Json(RecommendResponse { model_version: s.model_hash.clone(), threshold, baseline_oc_r: baseline, positions }))
}
