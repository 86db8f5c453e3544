//! HTTP front for a local token model, speaking the remote logits protocol.

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use musicform_core::backend::{serve_logits, BackendError, LogitsRequest};
use musicform_core::TokenModel;

use crate::api::ErrorBody;

pub fn router(model: Arc<dyn TokenModel>) -> Router {
    Router::new()
        .route("/v1/info", get(info))
        .route("/v1/logits", post(logits))
        .with_state(model)
}

async fn info(State(model): State<Arc<dyn TokenModel>>) -> impl IntoResponse {
    let mut info = model.info().clone();
    // usize::MAX does not survive a JSON round trip through some clients.
    info.max_context = info.max_context.min(1 << 20);
    Json(info)
}

async fn logits(State(model): State<Arc<dyn TokenModel>>, Json(req): Json<LogitsRequest>) -> Response {
    match serve_logits(model.as_ref(), &req) {
        Ok(resp) => Json(resp).into_response(),
        Err(e) => {
            let code = match e {
                BackendError::ShapeMismatch(_) => "shape_mismatch",
                BackendError::Protocol(_) => "protocol",
                BackendError::Unavailable(_) => "unavailable",
            };
            let status = if code == "unavailable" {
                StatusCode::SERVICE_UNAVAILABLE
            } else {
                StatusCode::BAD_REQUEST
            };
            (status, Json(ErrorBody { code: code.into(), message: e.to_string() })).into_response()
        }
    }
}

pub async fn serve(listener: tokio::net::TcpListener, model: Arc<dyn TokenModel>) -> std::io::Result<()> {
    axum::serve(listener, router(model)).await
}
