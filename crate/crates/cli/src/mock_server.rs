//! HTTP front for [`MockBackend`], speaking the v1 backend wire protocol.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use groundseg_core::backend::wire::{
    CaptionRequest, CaptionResponse, DetectRequest, DetectResponse, ErrorBody, InpaintRequest, InpaintResponse,
    MeshRequest, MeshResponse, SegmentRequest, SegmentResponse, TagRequest, TagResponse, V1,
};
use groundseg_core::backend::{
    BackendError, Captioner, Detector, Inpainter, MeshRecoverer, MockBackend, Segmenter, Tagger,
};
use serde::de::DeserializeOwned;
use serde::Serialize;

type Mock = Arc<MockBackend>;

pub fn router(mock: Mock) -> Router {
    Router::new()
        .route("/healthz", get(|| async { Json(serde_json::json!({"status": "ok"})) }))
        .route("/v1/detect", post(detect))
        .route("/v1/segment", post(segment))
        .route("/v1/tag", post(tag))
        .route("/v1/caption", post(caption))
        .route("/v1/inpaint", post(inpaint))
        .route("/v1/mesh", post(mesh))
        .with_state(mock)
}

fn status_for(e: &BackendError) -> StatusCode {
    match e {
        BackendError::UnknownScene(_) => StatusCode::NOT_FOUND,
        BackendError::InvalidRequest(_) | BackendError::DimensionMismatch(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, BackendError> {
    serde_json::from_slice(body).map_err(|e| BackendError::InvalidRequest(e.to_string()))
}

fn respond<T: Serialize>(result: Result<T, BackendError>) -> Response {
    match result {
        Ok(v) => Json(v).into_response(),
        Err(e) => (status_for(&e), Json(ErrorBody::from(&e))).into_response(),
    }
}

async fn detect(State(m): State<Mock>, body: Bytes) -> Response {
    respond(parse::<DetectRequest>(&body).and_then(|r| {
        Ok(DetectResponse {
            version: V1,
            detections: m.detect(&r.image, &r.phrases, r.box_threshold)?,
        })
    }))
}

async fn segment(State(m): State<Mock>, body: Bytes) -> Response {
    respond(parse::<SegmentRequest>(&body).and_then(|r| {
        Ok(SegmentResponse {
            version: V1,
            masks: m.segment(&r.image, &r.boxes)?,
        })
    }))
}

async fn tag(State(m): State<Mock>, body: Bytes) -> Response {
    respond(parse::<TagRequest>(&body).and_then(|r| {
        Ok(TagResponse {
            version: V1,
            tags: m.tag(&r.image)?,
        })
    }))
}

async fn caption(State(m): State<Mock>, body: Bytes) -> Response {
    respond(parse::<CaptionRequest>(&body).and_then(|r| {
        Ok(CaptionResponse {
            version: V1,
            caption: m.caption(&r.image)?,
        })
    }))
}

async fn inpaint(State(m): State<Mock>, body: Bytes) -> Response {
    respond(parse::<InpaintRequest>(&body).and_then(|r| {
        Ok(InpaintResponse {
            version: V1,
            image: m.inpaint(&r.image, &r.region, &r.prompt)?,
        })
    }))
}

async fn mesh(State(m): State<Mock>, body: Bytes) -> Response {
    respond(parse::<MeshRequest>(&body).and_then(|r| Ok(MeshResponse::from(&m.recover_mesh(&r.image, &r.person_box)?))))
}

pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
