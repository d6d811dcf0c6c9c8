// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;
use virm_core::virm::{VirmError, VirmService};
use virm_core::DomainConfig;

use crate::Identity;

pub const DEFAULT_PORT: u16 = 18700;

/// Error body returned with every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error_code: String,
    pub detail: String,
}

struct ApiError(StatusCode, ErrorBody);

impl From<VirmError> for ApiError {
    fn from(e: VirmError) -> Self {
        let status = match &e {
            VirmError::UnknownWorkspace(_) => StatusCode::NOT_FOUND,
            VirmError::BadState { .. } | VirmError::Busy { .. } => StatusCode::CONFLICT,
            VirmError::InsufficientCapacity { .. } => StatusCode::INSUFFICIENT_STORAGE,
            VirmError::Validation(_)
            | VirmError::InvalidRequest(_)
            | VirmError::UnknownImage(_)
            | VirmError::ClockReversal { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            VirmError::Engine(_) | VirmError::Remote { .. } | VirmError::Transport(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        let detail = match &e {
            VirmError::UnknownWorkspace(id) => id.clone(),
            other => other.to_string(),
        };
        ApiError(
            status,
            ErrorBody {
                error_code: e.code().to_string(),
                detail,
            },
        )
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError(
            StatusCode::UNPROCESSABLE_ENTITY,
            ErrorBody {
                error_code: "INVALID_REQUEST".into(),
                detail: r.body_text(),
            },
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn ok(body: serde_json::Value) -> ApiResult {
    Ok((StatusCode::OK, Json(body)).into_response())
}

#[derive(Deserialize)]
struct CreateBody {
    image_id: String,
    size_gb: f64,
    domain: DomainConfig,
}

#[derive(Deserialize)]
struct ContextBody {
    files: BTreeMap<String, String>,
}

/// Either a relative step or an absolute target.
#[derive(Deserialize)]
struct ClockBody {
    advance_s: Option<f64>,
    advance_to: Option<f64>,
}

type Svc = State<Arc<VirmService>>;

async fn identity() -> Json<Identity> {
    Json(Identity::current())
}

async fn create(State(s): Svc, body: Result<Json<CreateBody>, JsonRejection>) -> ApiResult {
    let Json(b) = body?;
    let r = s.request_diskspace(&b.image_id, b.size_gb, &b.domain)?;
    Ok((StatusCode::CREATED, Json(r)).into_response())
}

async fn mount(State(s): Svc, Path(id): Path<String>) -> ApiResult {
    s.mount_diskspace(&id)?;
    ok(json!({}))
}

async fn unmount(State(s): Svc, Path(id): Path<String>) -> ApiResult {
    s.unmount_diskspace(&id)?;
    ok(json!({}))
}

async fn context(
    State(s): Svc,
    Path(id): Path<String>,
    body: Result<Json<ContextBody>, JsonRejection>,
) -> ApiResult {
    let Json(b) = body?;
    s.write_context(&id, &b.files)?;
    ok(json!({}))
}

async fn start(State(s): Svc, Path(id): Path<String>) -> ApiResult {
    s.start_vm(&id)?;
    ok(json!({}))
}

async fn stop(State(s): Svc, Path(id): Path<String>) -> ApiResult {
    let r = s.stop_vm(&id)?;
    ok(json!({ "busy_until": r.busy_until }))
}

async fn remove(State(s): Svc, Path(id): Path<String>) -> ApiResult {
    s.remove_diskspace(&id)?;
    ok(json!({}))
}

async fn heartbeat(State(s): Svc, Path(id): Path<String>) -> ApiResult {
    let expires_at = s.heartbeat(&id)?;
    ok(json!({ "expires_at": expires_at }))
}

async fn status(State(s): Svc, Path(id): Path<String>) -> ApiResult {
    let st = s.status(&id)?;
    ok(serde_json::to_value(st).expect("status serializes"))
}

async fn clock_now(State(s): Svc) -> ApiResult {
    ok(json!({ "now": s.now() }))
}

async fn clock_tick(State(s): Svc, body: Result<Json<ClockBody>, JsonRejection>) -> ApiResult {
    let Json(b) = body?;
    let target = match (b.advance_s, b.advance_to) {
        (Some(dt), None) if dt >= 0.0 => s.now() + dt,
        (None, Some(t)) => t,
        _ => {
            return Err(VirmError::InvalidRequest(
                "give exactly one of advance_s (>= 0) or advance_to".into(),
            )
            .into())
        }
    };
    let expired = s.advance_clock_to(target)?;
    ok(json!({ "now": s.now(), "expired": expired }))
}

/// Routes of the v1 API plus the harness clock endpoint.
pub fn router(service: Arc<VirmService>) -> Router {
    Router::new()
        .route("/v1/identity", get(identity))
        .route("/v1/workspace", post(create))
        .route("/v1/workspace/:id", get(status).delete(remove))
        .route("/v1/workspace/:id/mount", post(mount))
        .route("/v1/workspace/:id/unmount", post(unmount))
        .route("/v1/workspace/:id/context", put(context))
        .route("/v1/workspace/:id/start", post(start))
        .route("/v1/workspace/:id/stop", post(stop))
        .route("/v1/workspace/:id/heartbeat", post(heartbeat))
        .route("/v1/_clock", get(clock_now).post(clock_tick))
        .with_state(service)
}

pub async fn serve(listener: tokio::net::TcpListener, service: Arc<VirmService>) -> std::io::Result<()> {
    axum::serve(listener, router(service)).await
}

/// A server running on its own thread. Dropping the handle stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Bind `addr` (port 0 picks a free port) and serve on a background thread.
pub fn spawn_server(service: Arc<VirmService>, addr: SocketAddr) -> std::io::Result<ServerHandle> {
    let std_listener = std::net::TcpListener::bind(addr)?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name("virm-http".into())
        .spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread()
                .enable_all()
                .build()
                .expect("tokio runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
                let app = router(service);
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        })?;
    tracing::debug!(%addr, "workspace service listening");
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
