//! HTTP API for interactive inference.
//!
//! `POST /v1/predict`, `POST /v1/refine`, `GET /v1/health` and
//! `GET /v1/typelib/{id}`. Request bodies are parsed strictly and schema
//! errors name the offending field.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::RawFunction;
use crate::error::Error;
use crate::io;
use crate::predict::{FunctionOut, PredictOptions, Predictor, VariableConstraint};
use crate::typelib::{TypeLibrary, TypeRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub function: RawFunction,
    #[serde(default)]
    pub options: PredictOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineRequest {
    pub function: RawFunction,
    #[serde(default)]
    pub constraints: Vec<VariableConstraint>,
    #[serde(default)]
    pub options: PredictOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_loaded: bool,
    pub type_count: Option<usize>,
    pub name_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeInfo {
    pub id: usize,
    pub canonical: String,
    pub layout_signature: Option<String>,
    pub struct_related: bool,
    pub record: TypeRecord,
}

impl TypeInfo {
    pub fn lookup(lib: &TypeLibrary, id: usize) -> Option<TypeInfo> {
        let entry = lib.get(id)?;
        Some(TypeInfo {
            id,
            canonical: entry.canonical(),
            layout_signature: entry.layout_signature().ok(),
            struct_related: entry.is_struct_related(),
            record: lib.record(id)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                kind: kind.into(),
                message: message.into(),
                path: None,
            },
        }
    }

    fn not_loaded() -> Self {
        ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", "no model is loaded")
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        let (status, kind) = match &e {
            Error::Schema { path, .. } => {
                let mut err = ApiError::new(StatusCode::BAD_REQUEST, "schema", message);
                err.body.path = Some(path.clone());
                return err;
            }
            Error::InvalidFunction { .. } | Error::Type(_) => (StatusCode::BAD_REQUEST, "invalid_function"),
            Error::Constraint(_) => (StatusCode::UNPROCESSABLE_ENTITY, "constraint"),
            Error::Config(_) | Error::Decode(_) => (StatusCode::BAD_REQUEST, "options"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, kind, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

/// Shared handler state; `None` until a model is loaded.
#[derive(Clone, Default)]
pub struct AppState {
    pub predictor: Option<Arc<Predictor>>,
}

impl AppState {
    pub fn new(predictor: Predictor) -> Self {
        AppState {
            predictor: Some(Arc::new(predictor)),
        }
    }

    fn predictor(&self) -> Result<Arc<Predictor>, ApiError> {
        self.predictor.clone().ok_or_else(ApiError::not_loaded)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/predict", post(predict))
        .route("/v1/refine", post(refine))
        .route("/v1/health", get(health))
        .route("/v1/typelib/{id}", get(typelib_entry))
        .with_state(state)
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let text = std::str::from_utf8(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "schema", e.to_string()))?;
    Ok(io::from_json_str("request body", text)?)
}

async fn run_blocking(
    p: Arc<Predictor>,
    f: impl FnOnce(&Predictor) -> crate::Result<FunctionOut> + Send + 'static,
) -> Result<Json<FunctionOut>, ApiError> {
    let out = tokio::task::spawn_blocking(move || f(&p))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(out))
}

async fn predict(State(state): State<AppState>, body: Bytes) -> Result<Json<FunctionOut>, ApiError> {
    let req: PredictRequest = parse(&body)?;
    let p = state.predictor()?;
    run_blocking(p, move |p| p.predict(&req.function, &req.options)).await
}

async fn refine(State(state): State<AppState>, body: Bytes) -> Result<Json<FunctionOut>, ApiError> {
    let req: RefineRequest = parse(&body)?;
    let p = state.predictor()?;
    run_blocking(p, move |p| p.refine(&req.function, &req.constraints, &req.options)).await
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    let p = state.predictor.as_ref();
    Json(Health {
        status: "ok".into(),
        model_loaded: p.is_some(),
        type_count: p.map(|p| p.vocab.types.len()),
        name_count: p.map(|p| p.vocab.names.len()),
    })
}

async fn typelib_entry(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<TypeInfo>, ApiError> {
    let id: usize = id
        .parse()
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "schema", format!("type id `{id}` is not a number")))?;
    let p = state.predictor()?;
    TypeInfo::lookup(&p.vocab.types, id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no type with id {id}")))
}

/// Serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: AppState) -> crate::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(addr.to_string(), e))?;
    tracing::info!(%addr, model_loaded = state.predictor.is_some(), "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(addr.to_string(), e))
}
