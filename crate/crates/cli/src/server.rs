//! HTTP service: sessions with live knob changes and streamed generation.
//!
//! Every handler validates its request completely before any model work
//! starts. Each session runs at most one generation at a time, and a knob
//! change applies to the next generation call, never to a running one.
//!
//! | Route | Purpose |
//! |-------|---------|
//! | `POST /v1/sessions` | create a session |
//! | `GET /v1/sessions/{id}` | session state |
//! | `PATCH /v1/sessions/{id}/config` | partial config update |
//! | `POST /v1/sessions/{id}/generate` | newline-delimited JSON event stream |
//! | `POST /v1/sessions/{id}/accept` | append an accepted segment |
//! | `GET /v1/attributes` | available checkpoints and attribute models |
//! | `GET /v1/presets/skeleton` | story skeleton prefixes |

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::{Body, Bytes};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::mpsc;

use latent_steer::attribute::{AttributeTarget, ObjectiveSign};
use latent_steer::eval::{generate_weighted, WdOptions};
use latent_steer::lm::TransformerLm;
use latent_steer::steer::{
    generate_ranked, generate_streaming, SampleRecord, SteeringConfig, SteeringPatch, TokenEvent, Variant,
};
use latent_steer::Error;

use crate::models::{Catalog, ModelStore, DEFAULT_CHECKPOINT};

/// Content type of the generation event stream.
pub const NDJSON: &str = "application/x-ndjson";

const SKELETON: &str = include_str!("../../../data/prefixes/skeleton.txt");

/// Default story skeleton, one prefix per segment.
pub fn skeleton_prefixes() -> Vec<String> {
    SKELETON.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
}

// ── Errors ────────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    Conflict(String),
    /// 422; `field` names the offending request field when known.
    Invalid {
        field: Option<String>,
        message: String,
    },
    Internal(String),
}

impl ApiError {
    fn invalid(field: &str, message: impl Into<String>) -> Self {
        ApiError::Invalid { field: Some(field.to_string()), message: message.into() }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidField { field, .. } => {
                ApiError::Invalid { field: Some(field.to_string()), message: e.to_string() }
            }
            Error::Contract(_) | Error::Capacity { .. } | Error::Config(_) | Error::Attribute(_) => {
                ApiError::Invalid { field: None, message: e.to_string() }
            }
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, field, message) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, None, m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, None, m),
            ApiError::Invalid { field, message } => (StatusCode::UNPROCESSABLE_ENTITY, field, message),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, None, m),
        };
        (status, Json(json!({ "error": message, "field": field }))).into_response()
    }
}

/// Parses a JSON body; malformed bodies and unknown fields are 422. The
/// field is recovered from serde's backtick quoting when present.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let bytes: &[u8] = if body.is_empty() { b"{}" } else { body };
    serde_json::from_slice(bytes).map_err(|e| {
        let message = e.to_string();
        let field = message.split('`').nth(1).filter(|_| message.contains("field")).map(String::from);
        ApiError::Invalid { field, message }
    })
}

// ── Sessions ──────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttributeRef {
    Bow { name: String },
    Discriminator { name: String, class: String },
}

struct Session {
    checkpoint: String,
    attribute: Option<AttributeRef>,
    lm: Arc<TransformerLm<f32>>,
    target: Option<Arc<AttributeTarget<f32>>>,
    config: SteeringConfig,
    segments: Vec<String>,
    generating: bool,
    generations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub checkpoint: String,
    pub attribute: Option<AttributeRef>,
    pub effective_config: SteeringConfig,
    pub segments: Vec<String>,
    pub generating: bool,
    pub generations: u64,
}

fn view(id: &str, s: &Session) -> SessionView {
    SessionView {
        session_id: id.to_string(),
        checkpoint: s.checkpoint.clone(),
        attribute: s.attribute.clone(),
        effective_config: s.config.clone(),
        segments: s.segments.clone(),
        generating: s.generating,
        generations: s.generations,
    }
}

type SessionRef = Arc<Mutex<Session>>;

pub struct AppState {
    store: Arc<ModelStore>,
    sessions: RwLock<HashMap<String, SessionRef>>,
}

impl AppState {
    fn session(&self, id: &str) -> Result<SessionRef, ApiError> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("no session `{id}`")))
    }
}

pub fn router(store: Arc<ModelStore>) -> Router {
    let state = Arc::new(AppState { store, sessions: RwLock::default() });
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/config", patch(patch_config))
        .route("/v1/sessions/{id}/generate", post(start_generation))
        .route("/v1/sessions/{id}/accept", post(accept_segment))
        .route("/v1/attributes", get(list_attributes))
        .route("/v1/presets/skeleton", get(skeleton))
        .with_state(state)
}

/// Serves `router(store)` on `listener` until the process ends.
pub async fn serve(listener: tokio::net::TcpListener, store: Arc<ModelStore>) -> std::io::Result<()> {
    axum::serve(listener, router(store)).await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    checkpoint: Option<String>,
    /// A bag-of-words list, or a discriminator when `class` is given.
    attribute: Option<String>,
    class: Option<String>,
    #[serde(default)]
    config: SteeringPatch,
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SessionView>, ApiError> {
    let req: CreateSession = parse(&body)?;
    let checkpoint = req.checkpoint.unwrap_or_else(|| DEFAULT_CHECKPOINT.to_string());
    let store = state.store.clone();
    // Loading touches the disk; keep it off the async workers.
    let session = tokio::task::spawn_blocking(move || -> Result<Session, ApiError> {
        let lm = store
            .lm(&checkpoint)
            .map_err(|e| ApiError::invalid("checkpoint", format!("checkpoint `{checkpoint}`: {e}")))?;
        let (attribute, target, base) = match (req.attribute, req.class) {
            (None, None) => (None, None, SteeringConfig::bow_defaults()),
            (None, Some(_)) => return Err(ApiError::invalid("class", "`class` needs a discriminator `attribute`")),
            (Some(name), None) => {
                let bag =
                    store.bow(&name, lm.tokenizer()).map_err(|e| ApiError::invalid("attribute", e.to_string()))?;
                let target = AttributeTarget::bow(bag, ObjectiveSign::Plus);
                (Some(AttributeRef::Bow { name }), Some(target), SteeringConfig::bow_defaults())
            }
            (Some(name), Some(class)) => {
                let d = store.discriminator(&name).map_err(|e| ApiError::invalid("attribute", e.to_string()))?;
                let idx = d.class_index(&class).ok_or_else(|| {
                    ApiError::invalid("class", format!("`{class}` is not one of {:?}", d.class_names))
                })?;
                if d.d_model() != lm.config().d_model {
                    return Err(ApiError::invalid("attribute", "discriminator width does not match the checkpoint"));
                }
                let target = AttributeTarget::discriminator((*d).clone(), idx, ObjectiveSign::Plus)?;
                (Some(AttributeRef::Discriminator { name, class }), Some(target), SteeringConfig::discrim_defaults())
            }
        };
        let config = base.patched(&req.config)?;
        Ok(Session {
            checkpoint,
            attribute,
            lm,
            target: target.map(Arc::new),
            config,
            segments: Vec::new(),
            generating: false,
            generations: 0,
        })
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let out = view(&id, &session);
    state.sessions.write().expect("session table poisoned").insert(id, Arc::new(Mutex::new(session)));
    Ok(Json(out))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<SessionView>, ApiError> {
    let session = state.session(&id)?;
    let s = session.lock().expect("session poisoned");
    Ok(Json(view(&id, &s)))
}

async fn patch_config(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<serde_json::Value>, ApiError> {
    let session = state.session(&id)?;
    let patch: SteeringPatch = parse(&body)?;
    let mut s = session.lock().expect("session poisoned");
    if s.generating {
        return Err(ApiError::Conflict("config changes are rejected while a generation is running".into()));
    }
    s.config = s.config.patched(&patch)?;
    Ok(Json(json!({ "effective_config": s.config })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AcceptRequest {
    text: String,
}

async fn accept_segment(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SessionView>, ApiError> {
    let session = state.session(&id)?;
    let req: AcceptRequest = parse(&body)?;
    let mut s = session.lock().expect("session poisoned");
    s.segments.push(req.text);
    Ok(Json(view(&id, &s)))
}

async fn list_attributes(State(state): State<Arc<AppState>>) -> Result<Json<Catalog>, ApiError> {
    let store = state.store.clone();
    let catalog =
        tokio::task::spawn_blocking(move || store.catalog()).await.map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(catalog))
}

async fn skeleton() -> Json<serde_json::Value> {
    Json(json!({ "name": "skeleton", "prefixes": skeleton_prefixes() }))
}

// ── Generation ────────────────────────────────────────────────────────────

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateRequest {
    prefix: Option<String>,
    /// Continue the story through accepted segment `i` (0-based); `prefix`,
    /// when also given, is appended after it.
    continue_from_segment: Option<usize>,
    length: usize,
    /// Defaults to `BC` with an attribute and `B` without.
    variant: Option<Variant>,
}

/// One line of the generation stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamEvent {
    Token(TokenEvent),
    Done { sample_record: SampleRecord },
    Error { error: String },
}

fn ndjson_line(event: &StreamEvent) -> Bytes {
    let mut line = serde_json::to_vec(event).expect("events serialise");
    line.push(b'\n');
    Bytes::from(line)
}

struct Job {
    lm: Arc<TransformerLm<f32>>,
    target: Option<Arc<AttributeTarget<f32>>>,
    config: SteeringConfig,
    prompt: String,
    length: usize,
    variant: Variant,
}

/// Builds the job while holding the session lock, so validation and the
/// in-flight check are atomic.
fn prepare(s: &Session, req: GenerateRequest) -> Result<Job, ApiError> {
    let variant = req.variant.unwrap_or(if s.target.is_some() { Variant::BC } else { Variant::B });
    if variant != Variant::B && s.target.is_none() {
        return Err(ApiError::invalid("variant", format!("{variant} needs a session attribute")));
    }
    let mut parts: Vec<&str> = Vec::new();
    if let Some(i) = req.continue_from_segment {
        if i >= s.segments.len() {
            return Err(ApiError::invalid(
                "continue_from_segment",
                format!("segment {i} does not exist ({} accepted)", s.segments.len()),
            ));
        }
        parts.extend(s.segments[..=i].iter().map(String::as_str));
    }
    parts.extend(req.prefix.as_deref());
    let prompt = parts.join(" ");
    let prompt_tokens = s.lm.tokenizer().encode(&prompt).len();
    if prompt_tokens == 0 {
        return Err(ApiError::invalid("prefix", "the prompt must contain at least one token"));
    }
    if req.length == 0 {
        return Err(ApiError::invalid("length", "must be ≥ 1"));
    }
    let max = s.lm.config().max_context;
    if prompt_tokens + req.length > max {
        return Err(ApiError::invalid(
            "length",
            format!("prompt ({prompt_tokens} tokens) plus length {} exceeds the context of {max}", req.length),
        ));
    }
    Ok(Job {
        lm: s.lm.clone(),
        target: s.target.clone(),
        config: s.config.clone(),
        prompt,
        length: req.length,
        variant,
    })
}

/// Replays a finished passage as token events.
fn replay(lm: &TransformerLm<f32>, r: &SampleRecord, emit: &mut impl FnMut(&TokenEvent)) {
    for (index, &token_id) in r.generated().iter().enumerate() {
        emit(&TokenEvent {
            index,
            token_id,
            text: lm.tokenizer().token_piece(token_id, false),
            attr_ll: r.step_attr_ll.get(index).copied(),
            kl: r.step_kl.get(index).copied().unwrap_or(0.0),
        });
    }
}

/// Runs the library call matching `job.variant`. `B` and `BC` stream as
/// they sample; ranked and weighted-decoding passages are emitted once the
/// winner is known.
fn run_job(job: &Job, mut emit: impl FnMut(&TokenEvent)) -> Result<SampleRecord, Error> {
    let target = job.target.as_deref();
    match job.variant {
        Variant::B | Variant::BC => {
            generate_streaming(&job.lm, &job.prompt, job.length, target, &job.config, job.variant, emit)
        }
        Variant::BR | Variant::BCR => {
            let target = target.expect("checked in prepare");
            let best = generate_ranked(&job.lm, &job.prompt, job.length, target, &job.config, job.variant)?.best;
            replay(&job.lm, &best, &mut emit);
            Ok(best)
        }
        Variant::WD => {
            let target = target.expect("checked in prepare");
            let r =
                generate_weighted(&job.lm, &job.prompt, job.length, target, &WdOptions::default(), job.config.seed)?;
            replay(&job.lm, &r, &mut emit);
            Ok(r)
        }
    }
}

/// Clears the in-flight flag even if the generation panics.
struct InFlight(SessionRef);

impl Drop for InFlight {
    fn drop(&mut self) {
        if let Ok(mut s) = self.0.lock() {
            s.generating = false;
            s.generations += 1;
        }
    }
}

async fn start_generation(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    let req: GenerateRequest = parse(&body)?;
    let job = {
        let mut s = session.lock().expect("session poisoned");
        if s.generating {
            return Err(ApiError::Conflict(format!("session `{id}` is already generating")));
        }
        let job = prepare(&s, req)?;
        s.generating = true;
        job
    };
    let guard = InFlight(session);
    let (tx, rx) = mpsc::channel::<Bytes>(64);
    tokio::task::spawn_blocking(move || {
        // A dropped client only stops delivery; the passage still finishes
        // so the session's state stays consistent.
        let outcome = run_job(&job, |t| {
            let _ = tx.blocking_send(ndjson_line(&StreamEvent::Token(t.clone())));
        });
        // Release the session before the final event so a client reacting
        // to `done` can immediately patch or generate again.
        drop(guard);
        let last = match outcome {
            Ok(sample_record) => StreamEvent::Done { sample_record },
            Err(e) => StreamEvent::Error { error: e.to_string() },
        };
        let _ = tx.blocking_send(ndjson_line(&last));
    });
    let stream =
        futures::stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|b| (Ok::<_, Infallible>(b), rx)) });
    Ok(([(header::CONTENT_TYPE, NDJSON)], Body::from_stream(stream)).into_response())
}
