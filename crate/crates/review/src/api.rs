//! HTTP API. Every error body is `{"error": {"code": ..., "message": ...}}`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{PathRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, put};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;
use tracing::{error, info};

use crate::pipeline::RoundParams;
use crate::store::{
    ClusterSort, RoundStatus, Store, StoreError, DEFAULT_PAGE_LIMIT, DEFAULT_SIMILAR_K,
};
use crate::tags::{Label, TagError};
use crate::thumbnails::ThumbnailError;

const THUMBNAIL_CACHE_CONTROL: &str = "public, max-age=31536000, immutable";

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
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
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            error!(code = self.code, message = %self.message, "request failed");
        }
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        use StatusCode as S;
        let (status, code) = match &e {
            StoreError::ProjectNotFound(_) => (S::NOT_FOUND, "project_not_found"),
            StoreError::DuplicateName(_) => (S::CONFLICT, "duplicate_name"),
            StoreError::EmptyName => (S::BAD_REQUEST, "invalid_request"),
            StoreError::CorpusUnreadable { .. } => (S::UNPROCESSABLE_ENTITY, "corpus_unreadable"),
            StoreError::InvalidParams(_) => (S::BAD_REQUEST, "invalid_params"),
            StoreError::KTooLarge { .. } => (S::UNPROCESSABLE_ENTITY, "k_too_large"),
            StoreError::RoundNotFound(_) => (S::NOT_FOUND, "round_not_found"),
            StoreError::RoundNotComplete { .. } => (S::CONFLICT, "round_not_complete"),
            StoreError::ClusterNotFound { .. } => (S::NOT_FOUND, "cluster_not_found"),
            StoreError::ImageNotFound(_) => (S::NOT_FOUND, "image_not_found"),
            StoreError::ImageNotIndexed(_) => (S::CONFLICT, "image_not_indexed"),
            StoreError::Stage(_) => (S::INTERNAL_SERVER_ERROR, "stage_failed"),
            StoreError::Tag(TagError::UnknownLabel(_) | TagError::UntaggedWrite) => {
                (S::BAD_REQUEST, "invalid_label")
            }
            StoreError::Tag(TagError::EmptyAuthor) => (S::BAD_REQUEST, "invalid_request"),
            StoreError::Report(_) => (S::INTERNAL_SERVER_ERROR, "conservation_violation"),
            StoreError::Thumbnail(ThumbnailError::BadKey(_)) => (S::BAD_REQUEST, "invalid_request"),
            _ => (S::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

fn path<T>(p: Result<Path<T>, PathRejection>) -> ApiResult<T> {
    p.map(|Path(v)| v)
        .map_err(|e| ApiError::bad_request(e.body_text()))
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    q.map(|Query(v)| v)
        .map_err(|e| ApiError::bad_request(e.body_text()))
}

/// Run store work off the async workers.
async fn blocking<T, F>(store: &Arc<Store>, f: F) -> ApiResult<T>
where
    F: FnOnce(&Store) -> Result<T, StoreError> + Send + 'static,
    T: Send + 'static,
{
    let store = store.clone();
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/api/projects", get(list_projects).post(create_project))
        .route("/api/projects/{id}", get(get_project))
        .route("/api/projects/{id}/stats", get(project_stats))
        .route("/api/projects/{id}/tags", get(tag_events))
        .route("/api/projects/{id}/rounds", axum::routing::post(start_round))
        .route("/api/projects/{id}/rounds/{n}", get(get_round))
        .route("/api/projects/{id}/rounds/{n}/clusters", get(list_clusters))
        .route("/api/projects/{id}/rounds/{n}/clusters/{c}/images", get(cluster_images))
        .route("/api/projects/{id}/rounds/{n}/clusters/{c}/tag", put(tag_cluster))
        .route("/api/projects/{id}/rounds/{n}/report", get(report))
        .route("/api/projects/{id}/rounds/{n}/similar/{image_id}", get(similar))
        .route("/api/thumbnails/{hash}", get(thumbnail))
        .fallback(|| async {
            ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
        })
        .layer(CorsLayer::permissive())
        .with_state(store)
}

/// Serve until the process receives Ctrl-C.
pub async fn serve(store: Arc<Store>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!(addr = %listener.local_addr()?, "review service listening");
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn list_projects(State(store): State<Arc<Store>>) -> ApiResult<Response> {
    let projects = blocking(&store, |s| Ok(s.list_projects())).await?;
    Ok(Json(json!({ "projects": projects })).into_response())
}

#[derive(Deserialize)]
struct CreateProject {
    name: String,
    corpus_root: PathBuf,
}

async fn create_project(State(store): State<Arc<Store>>, body: Bytes) -> ApiResult<Response> {
    let req: CreateProject = parse_body(&body)?;
    let project = blocking(&store, move |s| s.create_project(&req.name, &req.corpus_root)).await?;
    Ok((StatusCode::CREATED, Json(project)).into_response())
}

async fn get_project(
    State(store): State<Arc<Store>>,
    id: Result<Path<String>, PathRejection>,
) -> ApiResult<Response> {
    let id = path(id)?;
    Ok(Json(blocking(&store, move |s| s.project(&id)).await?).into_response())
}

async fn project_stats(
    State(store): State<Arc<Store>>,
    id: Result<Path<String>, PathRejection>,
) -> ApiResult<Response> {
    let id = path(id)?;
    Ok(Json(blocking(&store, move |s| s.stats(&id)).await?).into_response())
}

async fn tag_events(
    State(store): State<Arc<Store>>,
    id: Result<Path<String>, PathRejection>,
) -> ApiResult<Response> {
    let id = path(id)?;
    let events = blocking(&store, move |s| s.tag_events(&id)).await?;
    Ok(Json(json!({ "events": events })).into_response())
}

#[derive(Serialize)]
struct RoundStarted {
    round: u32,
    status: RoundStatus,
    k: usize,
}

async fn start_round(
    State(store): State<Arc<Store>>,
    id: Result<Path<String>, PathRejection>,
    body: Bytes,
) -> ApiResult<Response> {
    let id = path(id)?;
    let params: RoundParams = if body.iter().all(u8::is_ascii_whitespace) {
        RoundParams::default()
    } else {
        parse_body(&body)?
    };
    let ticket = blocking(&store, move |s| s.start_round(&id, params)).await?;
    let started = RoundStarted {
        round: ticket.round(),
        status: RoundStatus::Running,
        k: ticket.k(),
    };
    tokio::task::spawn_blocking(move || ticket.run());
    Ok((StatusCode::ACCEPTED, Json(started)).into_response())
}

async fn get_round(
    State(store): State<Arc<Store>>,
    p: Result<Path<(String, u32)>, PathRejection>,
) -> ApiResult<Response> {
    let (id, n) = path(p)?;
    Ok(Json(blocking(&store, move |s| s.round_info(&id, n)).await?).into_response())
}

#[derive(Deserialize, Default)]
struct ClusterQuery {
    sort: Option<String>,
}

async fn list_clusters(
    State(store): State<Arc<Store>>,
    p: Result<Path<(String, u32)>, PathRejection>,
    q: Result<Query<ClusterQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let (id, n) = path(p)?;
    let sort = match query(q)?.sort.as_deref() {
        None | Some("size") | Some("size_desc") => ClusterSort::SizeDesc,
        Some("size_asc") => ClusterSort::SizeAsc,
        Some("index") => ClusterSort::Index,
        Some(other) => {
            return Err(ApiError::bad_request(format!(
                "unknown sort '{other}' (size_desc, size_asc or index)"
            )))
        }
    };
    let clusters = blocking(&store, move |s| s.clusters(&id, n, sort)).await?;
    Ok(Json(json!({ "round": n, "clusters": clusters })).into_response())
}

#[derive(Deserialize)]
struct PageQuery {
    offset: Option<usize>,
    limit: Option<usize>,
}

async fn cluster_images(
    State(store): State<Arc<Store>>,
    p: Result<Path<(String, u32, usize)>, PathRejection>,
    q: Result<Query<PageQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let (id, n, c) = path(p)?;
    let q = query(q)?;
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(DEFAULT_PAGE_LIMIT);
    if limit == 0 {
        return Err(ApiError::bad_request("limit must be at least 1"));
    }
    let page = blocking(&store, move |s| s.cluster_images(&id, n, c, offset, limit)).await?;
    Ok(Json(page).into_response())
}

#[derive(Deserialize)]
struct TagBody {
    label: String,
    #[serde(default)]
    note: String,
    author: String,
}

async fn tag_cluster(
    State(store): State<Arc<Store>>,
    p: Result<Path<(String, u32, usize)>, PathRejection>,
    body: Bytes,
) -> ApiResult<Response> {
    let (id, n, c) = path(p)?;
    let body: TagBody = parse_body(&body)?;
    let label: Label = body
        .label
        .parse()
        .map_err(|e: TagError| ApiError::from(StoreError::Tag(e)))?;
    let event =
        blocking(&store, move |s| s.tag_cluster(&id, n, c, label, &body.note, &body.author)).await?;
    Ok(Json(event).into_response())
}

#[derive(Deserialize)]
struct ReportQuery {
    format: Option<String>,
}

async fn report(
    State(store): State<Arc<Store>>,
    p: Result<Path<(String, u32)>, PathRejection>,
    q: Result<Query<ReportQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let (id, n) = path(p)?;
    let format = query(q)?.format.unwrap_or_else(|| "structured".into());
    let report = blocking(&store, move |s| s.report(&id, n)).await?;
    match format.as_str() {
        "structured" | "json" => Ok(Json(report).into_response()),
        "csv" => {
            let csv = report.to_csv().map_err(|e| ApiError::from(StoreError::Report(e)))?;
            Ok((
                [
                    (header::CONTENT_TYPE, "text/csv; charset=utf-8".to_string()),
                    (
                        header::CONTENT_DISPOSITION,
                        format!("attachment; filename=\"round-{n}-report.csv\""),
                    ),
                ],
                csv,
            )
                .into_response())
        }
        other => Err(ApiError::bad_request(format!(
            "unknown format '{other}' (csv or structured)"
        ))),
    }
}

#[derive(Deserialize)]
struct SimilarQuery {
    k: Option<usize>,
    checks: Option<usize>,
}

async fn similar(
    State(store): State<Arc<Store>>,
    p: Result<Path<(String, u32, String)>, PathRejection>,
    q: Result<Query<SimilarQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let (id, n, image_id) = path(p)?;
    let q = query(q)?;
    let k = q.k.unwrap_or(DEFAULT_SIMILAR_K);
    if k == 0 {
        return Err(ApiError::bad_request("k must be at least 1"));
    }
    if q.checks == Some(0) {
        return Err(ApiError::bad_request("checks must be at least 1"));
    }
    let result =
        blocking(&store, move |s| s.similar_images(&id, n, &image_id, k, q.checks)).await?;
    Ok(Json(result).into_response())
}

async fn thumbnail(
    State(store): State<Arc<Store>>,
    p: Result<Path<String>, PathRejection>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let hash = path(p)?;
    let etag = format!("\"{}\"", hash.to_ascii_lowercase());
    let lookup = hash.clone();
    let bytes = blocking(&store, move |s| Ok(s.thumbnails().get(&lookup)?)).await?;
    let Some(bytes) = bytes else {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "thumbnail_not_found",
            format!("no thumbnail for {hash}"),
        ));
    };
    let cache_headers = [
        (header::CACHE_CONTROL, HeaderValue::from_static(THUMBNAIL_CACHE_CONTROL)),
        (header::ETAG, HeaderValue::from_str(&etag).expect("hex etag is a valid header")),
    ];
    if headers
        .get(header::IF_NONE_MATCH)
        .is_some_and(|v| v.as_bytes() == etag.as_bytes())
    {
        return Ok((StatusCode::NOT_MODIFIED, cache_headers).into_response());
    }
    Ok((
        cache_headers,
        [(header::CONTENT_TYPE, HeaderValue::from_static("image/png"))],
        bytes,
    )
        .into_response())
}
