//! HTTP surface: the participant websocket plus bearer-protected admin
//! endpoints for config upload, session creation and export download.

use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use duplexkit_core::config::MatrixMode;
use duplexkit_core::export::{export_csv, export_json, CsvTable};
use duplexkit_core::{
    ConfigError, InterruptionMatrix, ModelConfig, PersonaCatalog, SessionConfig, Style,
};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::mpsc;

use crate::hub::{Hub, Reservation};
use crate::live::run_connection;
use crate::protocol::{ClientMessage, ErrorCode, ServerMessage};

pub const ADMIN_TOKEN_ENV: &str = "DUPLEXKIT_ADMIN_TOKEN";

pub fn router(hub: Arc<Hub>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/ws", get(ws))
        .route("/config", get(get_config))
        .route("/config/{kind}", put(put_config))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}/{file}", get(session_export))
        .route("/exports/{file}", get(study_export))
        .with_state(hub)
}

struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: String,
    violations: Vec<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status,
            code,
            detail: detail.into(),
            violations: Vec::new(),
        }
    }

    fn config(err: ConfigError) -> Self {
        let code = match err {
            ConfigError::UnknownPersona(_) => "unknown_persona",
            _ => "config",
        };
        Self {
            status: StatusCode::BAD_REQUEST,
            code,
            violations: err.violations().iter().map(|v| v.to_string()).collect(),
            detail: err.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": {"code": self.code, "detail": self.detail}});
        if !self.violations.is_empty() {
            body["error"]["violations"] = json!(self.violations);
        }
        (self.status, Json(body)).into_response()
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

fn authorize(hub: &Hub, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(expected) = hub.options().admin_token.as_deref() else {
        return Err(ApiError::new(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            format!("admin endpoints are disabled; set {ADMIN_TOKEN_ENV}"),
        ));
    };
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    match presented {
        Some(token) if constant_time_eq(token.as_bytes(), expected.as_bytes()) => Ok(()),
        _ => Err(ApiError::new(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "missing or wrong bearer token",
        )),
    }
}

async fn health(State(hub): State<Arc<Hub>>) -> Json<Value> {
    let study = hub.study();
    Json(json!({
        "status": "ready",
        "personas": study.personas.len(),
        "active_sessions": hub.active_sessions(),
    }))
}

#[derive(Debug, Deserialize)]
struct WsQuery {
    session_id: Option<String>,
}

async fn ws(State(hub): State<Arc<Hub>>, Query(q): Query<WsQuery>, upgrade: WebSocketUpgrade) -> Response {
    let reserved = match q.session_id {
        Some(id) => match hub.take_reservation(&id) {
            Some(r) => Some((id, r)),
            None => {
                return ApiError::new(StatusCode::NOT_FOUND, "no_session", format!("no reserved session {id:?}"))
                    .into_response()
            }
        },
        None => None,
    };
    upgrade.on_upgrade(move |socket| serve_socket(socket, hub, reserved))
}

async fn serve_socket(mut socket: WebSocket, hub: Arc<Hub>, reserved: Option<(String, Reservation)>) {
    let (in_tx, in_rx) = mpsc::channel(64);
    let (out_tx, mut out_rx) = mpsc::channel(256);
    let actor = tokio::spawn(run_connection(hub, in_rx, out_tx.clone(), reserved));

    loop {
        tokio::select! {
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(text))) => text,
                    Some(Ok(Message::Binary(_))) => {
                        let _ = out_tx.send(ServerMessage::error(ErrorCode::BadMessage, "binary frames are not accepted")).await;
                        continue;
                    }
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                match serde_json::from_str::<ClientMessage>(text.as_str()) {
                    Ok(msg) => {
                        if in_tx.send(msg).await.is_err() {
                            break;
                        }
                    }
                    Err(err) => {
                        let _ = out_tx.send(ServerMessage::error(ErrorCode::BadMessage, err.to_string())).await;
                    }
                }
            }
            outgoing = out_rx.recv() => {
                let Some(msg) = outgoing else { break };
                let text = serde_json::to_string(&msg).expect("server messages serialize");
                if socket.send(Message::Text(text.into())).await.is_err() {
                    break;
                }
            }
        }
    }
    drop(in_tx);
    // Flush whatever the actor emits while it winds down (e.g. session_ended).
    drop(out_tx);
    while let Some(msg) = out_rx.recv().await {
        let text = serde_json::to_string(&msg).expect("server messages serialize");
        if socket.send(Message::Text(text.into())).await.is_err() {
            break;
        }
    }
    let _ = actor.await;
    let _ = socket.send(Message::Close(None)).await;
}

async fn get_config(State(hub): State<Arc<Hub>>, headers: HeaderMap) -> Result<Json<Value>, ApiError> {
    authorize(&hub, &headers)?;
    let study = hub.study();
    Ok(Json(json!({
        "persona": study.personas,
        "interruption": study.matrix,
        "persona_interruption": study.persona_matrices,
        "session": study.session,
        "model": study.model,
    })))
}

#[derive(Debug, Deserialize)]
struct ConfigQuery {
    persona_id: Option<String>,
}

fn require_probabilistic(matrix: &InterruptionMatrix) -> Result<(), ApiError> {
    if matrix.mode == MatrixMode::Probabilistic {
        return Ok(());
    }
    Err(ApiError::new(
        StatusCode::BAD_REQUEST,
        "config",
        "uploaded matrices drive style B and must use mode \"probabilistic\"; styles A and C need no matrix",
    ))
}

async fn put_config(
    State(hub): State<Arc<Hub>>,
    headers: HeaderMap,
    Path(kind): Path<String>,
    Query(q): Query<ConfigQuery>,
    body: String,
) -> Result<Json<Value>, ApiError> {
    authorize(&hub, &headers)?;
    let accepted: Value = match kind.as_str() {
        "persona" => {
            let catalog = PersonaCatalog::from_json(&body).map_err(ApiError::config)?;
            hub.update_study(|s| {
                if let Some(orphan) = s.persona_matrices.keys().find(|id| catalog.get(id).is_none()) {
                    return Err(ConfigError::UnknownPersona(orphan.clone()));
                }
                s.personas = catalog.clone();
                Ok(())
            })
            .map_err(ApiError::config)?;
            json!({"personas": catalog.personas.iter().map(|p| &p.persona_id).collect::<Vec<_>>()})
        }
        "interruption" => {
            let matrix = InterruptionMatrix::from_json(&body).map_err(ApiError::config)?;
            require_probabilistic(&matrix)?;
            hub.update_study(|s| {
                match &q.persona_id {
                    Some(id) if s.personas.get(id).is_none() => {
                        return Err(ConfigError::UnknownPersona(id.clone()));
                    }
                    Some(id) => {
                        s.persona_matrices.insert(id.clone(), matrix.clone());
                    }
                    None => s.matrix = matrix.clone(),
                }
                Ok(())
            })
            .map_err(ApiError::config)?;
            json!({"persona_id": q.persona_id, "matrix": matrix})
        }
        "session" => {
            let cfg = SessionConfig::from_json(&body).map_err(ApiError::config)?;
            hub.update_study(|s| {
                s.session = cfg.clone();
                Ok(())
            })
            .map_err(ApiError::config)?;
            json!({"max_turns": cfg.max_turns, "questions": cfg.survey.len()})
        }
        "model" => {
            let cfg = ModelConfig::from_json(&body).map_err(ApiError::config)?;
            hub.update_study(|s| {
                s.model = cfg.clone();
                Ok(())
            })
            .map_err(ApiError::config)?;
            serde_json::to_value(&cfg).expect("model config serializes")
        }
        other => {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "not_found",
                format!("unknown config kind {other:?}"),
            ))
        }
    };
    tracing::info!(%kind, "configuration updated");
    Ok(Json(json!({"status": "ok", "kind": kind, "accepted": accepted})))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    persona_id: String,
    style: Style,
    #[serde(default)]
    seed: Option<u64>,
}

async fn create_session(
    State(hub): State<Arc<Hub>>,
    headers: HeaderMap,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    authorize(&hub, &headers)?;
    hub.study()
        .matrix_for(&req.persona_id, req.style)
        .map_err(ApiError::config)?;
    let session_id = uuid::Uuid::new_v4().to_string();
    hub.reserve(
        session_id.clone(),
        Reservation {
            persona_id: req.persona_id,
            style: req.style,
            seed: req.seed,
        },
    );
    Ok((
        StatusCode::CREATED,
        Json(json!({"session_id": session_id, "ws_path": format!("/ws?session_id={session_id}")})),
    ))
}

async fn list_sessions(State(hub): State<Arc<Hub>>, headers: HeaderMap) -> Result<Json<Value>, ApiError> {
    authorize(&hub, &headers)?;
    Ok(Json(json!({"sessions": hub.sessions()})))
}

fn download(content_type: &'static str, bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, content_type)], bytes).into_response()
}

fn export_failed(err: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", err.to_string())
}

async fn session_export(
    State(hub): State<Arc<Hub>>,
    headers: HeaderMap,
    Path((id, file)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    authorize(&hub, &headers)?;
    let record = match hub.record(&id) {
        None => return Err(ApiError::new(StatusCode::NOT_FOUND, "no_session", format!("no session {id:?}"))),
        Some(None) => {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "session_active",
                "the session is still in dialogue",
            ))
        }
        Some(Some(r)) => r,
    };
    match file.as_str() {
        "export.json" => Ok(download("application/json", export_json(&record).map_err(export_failed)?)),
        "export.csv" => Ok(download(
            "text/csv; charset=utf-8",
            export_csv(&[record], CsvTable::Events).map_err(export_failed)?,
        )),
        _ => Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no export {file:?}"))),
    }
}

async fn study_export(
    State(hub): State<Arc<Hub>>,
    headers: HeaderMap,
    Path(file): Path<String>,
) -> Result<Response, ApiError> {
    authorize(&hub, &headers)?;
    let table = match file.as_str() {
        "events.csv" => CsvTable::Events,
        "survey.csv" => CsvTable::Survey,
        "aggregate.csv" => CsvTable::Aggregate,
        _ => return Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no export {file:?}"))),
    };
    let records = hub.finished_records();
    if records.is_empty() && table != CsvTable::Aggregate {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "no_session", "no finished sessions yet"));
    }
    Ok(download(
        "text/csv; charset=utf-8",
        export_csv(&records, table).map_err(export_failed)?,
    ))
}
