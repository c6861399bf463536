//! HTTP service hosting live sessions: creation, slot claiming, a replayed
//! live event stream, human input routing and finished transcripts.

pub mod input;
pub mod stream;

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use parlor_core::backend::EndpointBackend;
use parlor_core::canonical::to_canonical_string;
use parlor_core::config::{parse_config, ExperimentConfig};
use parlor_core::engine::{run_session, RunOptions};
use parlor_core::human::HumanInput;
use parlor_core::participants::PersonFactory;
use parlor_core::transcript::{EventRecord, EventSink, JsonlSink, TranscriptError, TRANSCRIPT_EXTENSION};
use serde_json::{json, Value};

use crate::input::{Action, GatewayInput, Rejection};
use crate::stream::LineLog;

pub const NDJSON: &str = "application/x-ndjson";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionStatus {
    Created,
    Running,
    Ended(String),
    Failed(String),
}

impl SessionStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SessionStatus::Created => "created",
            SessionStatus::Running => "running",
            SessionStatus::Ended(_) => "ended",
            SessionStatus::Failed(_) => "failed",
        }
    }

    fn finished(&self) -> bool {
        matches!(self, SessionStatus::Ended(_) | SessionStatus::Failed(_))
    }
}

pub struct SessionHandle {
    pub id: String,
    config: ExperimentConfig,
    input: Arc<GatewayInput>,
    log: Arc<LineLog>,
    status: Mutex<SessionStatus>,
    transcript: PathBuf,
}

impl SessionHandle {
    pub fn status(&self) -> SessionStatus {
        self.status.lock().unwrap().clone()
    }
}

/// Writes each event to the transcript file, then to the live stream.
struct GatewaySink {
    file: JsonlSink<std::io::BufWriter<fs::File>>,
    log: Arc<LineLog>,
}

impl EventSink for GatewaySink {
    fn write_event(&mut self, record: &EventRecord) -> Result<(), TranscriptError> {
        self.file.write_event(record)?;
        self.log.push(record.to_line());
        Ok(())
    }
}

#[derive(Clone)]
pub struct AppState {
    sessions: Arc<Mutex<HashMap<String, Arc<SessionHandle>>>>,
    data_dir: PathBuf,
    endpoint: Option<EndpointBackend>,
}

impl AppState {
    /// Transcripts go to `data_dir`; non-scripted persons use `endpoint`.
    pub fn new(data_dir: impl Into<PathBuf>, endpoint: Option<EndpointBackend>) -> io::Result<Self> {
        let data_dir = data_dir.into();
        fs::create_dir_all(&data_dir)?;
        Ok(Self {
            sessions: Arc::default(),
            data_dir,
            endpoint,
        })
    }

    pub fn session(&self, id: &str) -> Option<Arc<SessionHandle>> {
        self.sessions.lock().unwrap().get(id).cloned()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info))
        .route("/sessions/{id}/start", post(start_session))
        .route("/sessions/{id}/events", get(stream_events))
        .route("/sessions/{id}/claims/{person}", post(claim_slot))
        .route("/sessions/{id}/input", post(submit_input))
        .route("/sessions/{id}/transcript", get(transcript))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> io::Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), "gateway listening");
    axum::serve(listener, router(state)).await
}

fn reply(status: StatusCode, body: Value) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], to_canonical_string(&body)).into_response()
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    reply(status, json!({"error": message.into()}))
}

fn unknown_session(id: &str) -> Response {
    error(StatusCode::NOT_FOUND, format!("unknown session {id:?}"))
}

async fn create_session(State(state): State<AppState>, body: String) -> Response {
    let config = match parse_config(&body) {
        Ok(c) => c,
        Err(e) => {
            let violations: Vec<Value> = e
                .violations()
                .iter()
                .map(|v| json!({"path": v.path, "message": v.message}))
                .collect();
            return reply(
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({"error": e.to_string(), "violations": violations}),
            );
        }
    };
    let id = uuid::Uuid::new_v4().simple().to_string();
    let slots: Vec<String> = config.human_slots().iter().map(ToString::to_string).collect();
    let log = Arc::new(LineLog::default());
    let notices = log.clone();
    let input = GatewayInput::new(slots.clone(), move |v| notices.push(to_canonical_string(&v)));
    let handle = SessionHandle {
        id: id.clone(),
        transcript: state.data_dir.join(format!("{id}{TRANSCRIPT_EXTENSION}")),
        config,
        input: Arc::new(input),
        log,
        status: Mutex::new(SessionStatus::Created),
    };
    state.sessions.lock().unwrap().insert(id.clone(), Arc::new(handle));
    tracing::info!(session = %id, "session created");
    reply(StatusCode::CREATED, json!({"id": id, "human_slots": slots}))
}

async fn session_info(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let Some(handle) = state.session(&id) else {
        return unknown_session(&id);
    };
    let status = handle.status();
    let mut body = json!({
        "id": id,
        "state": status.as_str(),
        "human_slots": handle.input.slots(),
        "claimed": handle.input.claimed(),
    });
    match status {
        SessionStatus::Ended(reason) => body["end_reason"] = json!(reason),
        SessionStatus::Failed(e) => body["error"] = json!(e),
        _ => {}
    }
    reply(StatusCode::OK, body)
}

async fn start_session(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let Some(handle) = state.session(&id) else {
        return unknown_session(&id);
    };
    let factory = PersonFactory {
        endpoint: state.endpoint.clone(),
        human_input: Some(handle.input.clone() as Arc<dyn HumanInput>),
        request_log: None,
    };
    {
        let mut status = handle.status.lock().unwrap();
        if *status != SessionStatus::Created {
            return error(StatusCode::CONFLICT, format!("session is {}", status.as_str()));
        }
        *status = SessionStatus::Running;
    }
    let prepared = factory
        .build_all(&handle.config)
        .map_err(|e| (StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
        .and_then(|persons| {
            JsonlSink::create(&handle.transcript)
                .map(|file| (persons, file))
                .map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
        });
    let (persons, file) = match prepared {
        Ok(p) => p,
        Err((code, message)) => {
            *handle.status.lock().unwrap() = SessionStatus::Created;
            return error(code, message);
        }
    };
    let runner = handle.clone();
    std::thread::spawn(move || {
        let mut sink = GatewaySink {
            file,
            log: runner.log.clone(),
        };
        let outcome = run_session(&runner.config, persons, &mut sink, RunOptions::default());
        let status = match outcome {
            Ok(result) => SessionStatus::Ended(result.end_reason.as_str().to_string()),
            Err(e) => {
                tracing::error!(session = %runner.id, error = %e, "session failed");
                SessionStatus::Failed(e.to_string())
            }
        };
        *runner.status.lock().unwrap() = status;
        runner.log.close();
    });
    reply(StatusCode::ACCEPTED, json!({"id": id, "state": "running"}))
}

async fn stream_events(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let Some(handle) = state.session(&id) else {
        return unknown_session(&id);
    };
    (
        [(header::CONTENT_TYPE, NDJSON), (header::CACHE_CONTROL, "no-cache")],
        Body::from_stream(handle.log.follow()),
    )
        .into_response()
}

async fn claim_slot(State(state): State<AppState>, Path((id, person)): Path<(String, String)>) -> Response {
    let Some(handle) = state.session(&id) else {
        return unknown_session(&id);
    };
    if !handle.input.is_slot(&person) {
        return error(StatusCode::NOT_FOUND, format!("{person:?} is not a human slot"));
    }
    match handle.input.claim(&person) {
        Some(token) => reply(StatusCode::OK, json!({"person": person, "token": token})),
        None => error(StatusCode::CONFLICT, format!("{person:?} is already claimed")),
    }
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

async fn submit_input(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: String,
) -> Response {
    let Some(handle) = state.session(&id) else {
        return unknown_session(&id);
    };
    let Ok(body) = serde_json::from_str::<Value>(&body) else {
        return error(StatusCode::BAD_REQUEST, "body must be a JSON object");
    };
    let field = |k: &str| body.get(k).and_then(Value::as_str);
    let (Some(person), Some(request_id), Some(action)) = (field("person"), field("request_id"), field("action")) else {
        return error(StatusCode::BAD_REQUEST, "person, request_id and action are required");
    };
    let Some(action) = Action::parse(action) else {
        return error(StatusCode::BAD_REQUEST, format!("unknown action {action:?}"));
    };
    let token = bearer(&headers).unwrap_or_default();
    match handle.input.submit(person, token, request_id, action, field("content")) {
        Ok(()) => reply(StatusCode::OK, json!({"status": "accepted", "request_id": request_id})),
        Err(r) => {
            let code = if r == Rejection::Unclaimed {
                StatusCode::FORBIDDEN
            } else {
                StatusCode::CONFLICT
            };
            reply(
                code,
                json!({"status": "rejected", "reason": r.as_str(), "request_id": request_id}),
            )
        }
    }
}

async fn transcript(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let Some(handle) = state.session(&id) else {
        return unknown_session(&id);
    };
    let status = handle.status();
    if !status.finished() {
        return error(StatusCode::CONFLICT, format!("session is {}", status.as_str()));
    }
    match tokio::fs::read(&handle.transcript).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, NDJSON)], bytes).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}
