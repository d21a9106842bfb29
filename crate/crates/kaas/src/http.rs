//! HTTP/1.1 front end.
//!
//! | method | path                  | body                               |
//! |--------|-----------------------|------------------------------------|
//! | POST   | `/v1/invoke`          | JSON request in, JSON response out |
//! | GET    | `/v1/health`          | `ok`                               |
//! | GET    | `/v1/stats`           | per-executor counters              |
//! | PUT    | `/v1/objects/<key>`   | raw object bytes                   |
//! | GET    | `/v1/objects/<key>`   | raw object bytes                   |
//! | DELETE | `/v1/objects/<key>`   |                                    |

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kaas_core::protocol::{ErrorKind, KaasResponse};
use kaas_core::store::{StoreError, StoreKey};
use serde::Serialize;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::codec::{decode_request, encode_response, Strictness};
use crate::config::ServerConfig;
use crate::service::{ExecutorStats, KaasService};

type AppState = Arc<KaasService>;

pub fn router(service: Arc<KaasService>) -> Router {
    Router::new()
        .route("/v1/invoke", post(invoke))
        .route("/v1/health", get(health))
        .route("/v1/stats", get(stats))
        .route("/v1/objects/{*key}", get(get_object).put(put_object).delete(delete_object))
        .with_state(service)
}

fn json_response(status: StatusCode, resp: &KaasResponse) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], encode_response(resp)).into_response()
}

async fn invoke(State(svc): State<AppState>, body: Bytes) -> Response {
    let mode = if svc.strict_schema() {
        Strictness::Strict
    } else {
        Strictness::Lenient
    };
    let req = match decode_request(&body, mode) {
        Ok(req) => req,
        Err(e) => {
            let resp = KaasResponse::error("", ErrorKind::MalformedRequest, e.to_string());
            return json_response(StatusCode::BAD_REQUEST, &resp);
        }
    };
    let resp = svc.invoke(req).await;
    let code = match resp.status.error_kind() {
        Some(ErrorKind::InvalidRequest) => StatusCode::BAD_REQUEST,
        _ => StatusCode::OK,
    };
    json_response(code, &resp)
}

async fn health() -> &'static str {
    "ok"
}

#[derive(Serialize)]
struct StatsBody {
    executors: Vec<ExecutorStats>,
}

async fn stats(State(svc): State<AppState>) -> Json<StatsBody> {
    Json(StatsBody {
        executors: svc.stats(),
    })
}

fn store_error(e: StoreError) -> Response {
    let code = match e {
        StoreError::InvalidKey(_) => StatusCode::BAD_REQUEST,
        StoreError::NotFound(_) => StatusCode::NOT_FOUND,
        StoreError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
    };
    (code, e.to_string()).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, StoreError> + Send + 'static) -> Result<T, StoreError> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(StoreError::Io(e.to_string())))
}

async fn get_object(State(svc): State<AppState>, Path(key): Path<String>) -> Response {
    let store = svc.store().clone();
    match blocking(move || store.get(&StoreKey::new(key)?)).await {
        Ok(bytes) => (StatusCode::OK, [(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response(),
        Err(e) => store_error(e),
    }
}

async fn put_object(State(svc): State<AppState>, Path(key): Path<String>, body: Bytes) -> Response {
    let store = svc.store().clone();
    match blocking(move || store.put(&StoreKey::new(key)?, &body)).await {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => store_error(e),
    }
}

async fn delete_object(State(svc): State<AppState>, Path(key): Path<String>) -> Response {
    let store = svc.store().clone();
    match blocking(move || store.delete(&StoreKey::new(key)?)).await {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => store_error(e),
    }
}

/// A running server; dropping the handle does not stop it, call
/// [`shutdown`](Self::shutdown).
#[derive(Debug)]
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub service: Arc<KaasService>,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
}

impl ServerHandle {
    pub async fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        self.task.await.map_err(std::io::Error::other)?
    }

    /// Runs until the server stops on its own or `signal` resolves.
    pub async fn run_until(self, signal: impl std::future::Future<Output = ()>) -> std::io::Result<()> {
        signal.await;
        self.shutdown().await
    }
}

/// Validates `cfg`, opens the store, starts the executors and binds.
pub async fn serve(cfg: &ServerConfig) -> anyhow::Result<ServerHandle> {
    cfg.service.validate()?;
    let store = cfg.store.open()?;
    let service = Arc::new(KaasService::start(&cfg.service, store)?);
    let listener = TcpListener::bind((cfg.bind.as_str(), cfg.port)).await?;
    let addr = listener.local_addr()?;
    let (stop, stopped) = oneshot::channel::<()>();
    let app = router(service.clone());
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stopped.await;
            })
            .await
    });
    tracing::info!(%addr, executors = cfg.service.executors, "kaasd listening");
    Ok(ServerHandle {
        addr,
        service,
        stop: Some(stop),
        task,
    })
}
