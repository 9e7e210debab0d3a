//! HTTP annotation service: sessions over manifest samples, prompt to
//! proposal round-trips through the foundation model, commits to the
//! append-only annotation log and budget progress.
//!
//! Masks cross the wire as run-length strings (`"W,H;"` then alternating
//! background/foreground run lengths). `?raster=true` on the prompt endpoint
//! adds a base64 PNG per proposal.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use distillseg_core::data::{Manifest, RasterImage};
use distillseg_core::gateway::{predict_masks, EmbeddingSource, EmbeddingStore, Embedding, MaskProposal};
use distillseg_core::mask::BinaryMask;
use distillseg_core::prompt::{AnnotationLog, AnnotationMode, AnnotationRecord, CommitMeta, Prompt};
use distillseg_core::Error as CoreError;

pub const ANNOTATOR_HEADER: &str = "x-annotator";
pub const DEFAULT_ANNOTATOR: &str = "anonymous";
pub const DEFAULT_SESSION_IDLE: Duration = Duration::from_secs(30 * 60);
pub const DEFAULT_BUDGETS: [usize; 6] = [5, 10, 15, 20, 25, 50];

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("no pending proposals in session `{0}`")]
    NoPendingProposals(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    fn kind(&self) -> &'static str {
        match self {
            ServiceError::Core(e) => match e {
                CoreError::UnknownSample(_) => "UnknownSample",
                CoreError::InvalidPrompt(_) => "InvalidPrompt",
                CoreError::ShapeMismatch(_) => "ShapeMismatch",
                CoreError::AdapterUnavailable(_) => "AdapterUnavailable",
                CoreError::InvalidPixelValue { .. } | CoreError::DecodeFailure(_) => "InvalidMask",
                _ => "Internal",
            },
            ServiceError::UnknownSession(_) => "UnknownSession",
            ServiceError::NoPendingProposals(_) => "NoPendingProposals",
            ServiceError::BadRequest(_) => "BadRequest",
            ServiceError::Internal(_) => "Internal",
        }
    }

    fn status(&self) -> StatusCode {
        match self.kind() {
            "UnknownSample" | "UnknownSession" => StatusCode::NOT_FOUND,
            "InvalidPrompt" | "ShapeMismatch" | "InvalidMask" | "BadRequest" => StatusCode::BAD_REQUEST,
            "NoPendingProposals" => StatusCode::CONFLICT,
            "AdapterUnavailable" => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub kind: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        let body = ErrorBody {
            error: self.to_string(),
            kind: self.kind().to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ServiceError>;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub session_idle: Duration,
    pub budgets: Vec<usize>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            session_idle: DEFAULT_SESSION_IDLE,
            budgets: DEFAULT_BUDGETS.to_vec(),
        }
    }
}

struct Session {
    sample_id: String,
    created_at: DateTime<Utc>,
    last_used: Instant,
    image: Arc<RasterImage>,
    embedding: Arc<Embedding>,
    prompts: Vec<Prompt>,
    /// Sorted by predicted IoU, descending.
    pending: Vec<MaskProposal>,
}

/// Wire view of a stored commit, replayed for duplicate nonces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordView {
    pub sample_id: String,
    pub rle: String,
    pub mode: AnnotationMode,
    pub predicted_iou: f64,
    pub annotator: String,
    pub created_at: DateTime<Utc>,
}

impl From<&AnnotationRecord> for RecordView {
    fn from(r: &AnnotationRecord) -> Self {
        Self {
            sample_id: r.sample_id.clone(),
            rle: r.mask.to_rle(),
            mode: r.mode,
            predicted_iou: r.predicted_iou,
            annotator: r.annotator.clone(),
            created_at: r.created_at,
        }
    }
}

struct Ledger {
    annotated: BTreeSet<String>,
    commits: HashMap<(String, String), RecordView>,
}

pub struct AppState {
    manifest: Arc<Manifest>,
    store: Arc<EmbeddingStore>,
    log: Arc<AnnotationLog>,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
    ledger: Mutex<Ledger>,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl AppState {
    /// Replays the log so progress and nonce idempotency survive restarts.
    pub fn new(store: Arc<EmbeddingStore>, log: AnnotationLog, config: ServiceConfig) -> Result<Arc<Self>, CoreError> {
        let mut ledger = Ledger {
            annotated: BTreeSet::new(),
            commits: HashMap::new(),
        };
        for (record, meta) in log.read_all()? {
            ledger.annotated.insert(record.sample_id.clone());
            if let Some(m) = meta {
                ledger.commits.insert((m.session_id, m.nonce), RecordView::from(&record));
            }
        }
        let manifest = Arc::new(store.manifest().clone());
        Ok(Arc::new(Self {
            manifest,
            store,
            log: Arc::new(log),
            config,
            sessions: Mutex::new(HashMap::new()),
            ledger: Mutex::new(ledger),
        }))
    }

    pub fn progress(&self) -> Progress {
        progress_of(&lock(&self.ledger).annotated, &self.config.budgets)
    }

    fn session(&self, id: &str) -> ApiResult<Arc<tokio::sync::Mutex<Session>>> {
        self.expire_idle();
        lock(&self.sessions)
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    fn expire_idle(&self) {
        let idle = self.config.session_idle;
        lock(&self.sessions).retain(|_, s| match s.try_lock() {
            Ok(s) => s.last_used.elapsed() < idle,
            Err(_) => true,
        });
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub annotated: usize,
    pub budgets: BTreeMap<usize, bool>,
}

/// Distinct annotated sample ids against each budget.
pub fn progress_of(annotated: &BTreeSet<String>, budgets: &[usize]) -> Progress {
    Progress {
        annotated: annotated.len(),
        budgets: budgets.iter().map(|&n| (n, annotated.len() >= n)).collect(),
    }
}

/// Progress reconstructed from the log alone.
pub fn replay_progress(log: &AnnotationLog, budgets: &[usize]) -> Result<Progress, CoreError> {
    let ids = log.records()?.into_iter().map(|r| r.sample_id).collect();
    Ok(progress_of(&ids, budgets))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(open_session))
        .route("/sessions/{id}/prompts", post(propose))
        .route("/sessions/{id}/commit", post(commit))
        .route("/images/{id}", get(image))
        .route("/progress", get(progress))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OpenSessionRequest {
    pub sample_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OpenSessionResponse {
    pub session_id: String,
    pub sample_id: String,
    pub width: u32,
    pub height: u32,
    pub created_at: DateTime<Utc>,
}

async fn open_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<OpenSessionRequest>,
) -> ApiResult<(StatusCode, Json<OpenSessionResponse>)> {
    let sample = state
        .manifest
        .get(&req.sample_id)
        .cloned()
        .ok_or_else(|| CoreError::UnknownSample(req.sample_id.clone()))?;
    let st = state.clone();
    let (image, embedding) = blocking(move || {
        let image = st.manifest.load_image(&sample)?;
        let embedding = st.store.embedding(&sample.id)?;
        Ok((image, embedding))
    })
    .await?;
    let session_id = uuid::Uuid::new_v4().to_string();
    let created_at = Utc::now();
    let resp = OpenSessionResponse {
        session_id: session_id.clone(),
        sample_id: req.sample_id.clone(),
        width: image.width,
        height: image.height,
        created_at,
    };
    let session = Session {
        sample_id: req.sample_id,
        created_at,
        last_used: Instant::now(),
        image: Arc::new(image),
        embedding: Arc::new(embedding),
        prompts: Vec::new(),
        pending: Vec::new(),
    };
    state.expire_idle();
    lock(&state.sessions).insert(session_id, Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(resp)))
}

#[derive(Debug, Default, Deserialize)]
pub struct ProposeQuery {
    #[serde(default)]
    pub raster: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireProposal {
    pub rle: String,
    pub predicted_iou: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub png_b64: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProposeResponse {
    pub proposals: Vec<WireProposal>,
}

async fn propose(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<ProposeQuery>,
    Json(prompt): Json<Prompt>,
) -> ApiResult<Json<ProposeResponse>> {
    let session = state.session(&id)?;
    let mut session = session.lock().await;
    session.last_used = Instant::now();
    let (image, embedding, model) = (session.image.clone(), session.embedding.clone(), state.store.model().clone());
    let p = prompt.clone();
    let mut proposals = blocking(move || {
        let mut model = model.lock().unwrap_or_else(|e| e.into_inner());
        Ok(predict_masks(model.as_mut(), &image, &embedding, &p)?)
    })
    .await?;
    proposals.sort_by(|a, b| b.predicted_iou.total_cmp(&a.predicted_iou));
    let wire = proposals
        .iter()
        .map(|p| WireProposal {
            rle: p.mask.to_rle(),
            predicted_iou: p.predicted_iou,
            png_b64: query.raster.then(|| B64.encode(p.mask.to_png_bytes())),
        })
        .collect();
    session.prompts.push(prompt);
    session.pending = proposals;
    Ok(Json(ProposeResponse { proposals: wire }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CommitRequest {
    #[serde(default)]
    pub proposal_index: Option<usize>,
    #[serde(default)]
    pub rle: Option<String>,
    pub nonce: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CommitResponse {
    pub record: RecordView,
    /// True when this nonce was already committed; nothing was appended.
    pub duplicate: bool,
}

async fn commit(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(req): Json<CommitRequest>,
) -> ApiResult<(StatusCode, Json<CommitResponse>)> {
    let key = (id.clone(), req.nonce.clone());
    if let Some(view) = lock(&state.ledger).commits.get(&key).cloned() {
        return Ok((StatusCode::OK, Json(CommitResponse { record: view, duplicate: true })));
    }
    let session = state.session(&id)?;
    let mut session = session.lock().await;
    session.last_used = Instant::now();
    // re-check under the session lock: a concurrent commit may have landed
    if let Some(view) = lock(&state.ledger).commits.get(&key).cloned() {
        return Ok((StatusCode::OK, Json(CommitResponse { record: view, duplicate: true })));
    }
    let (mask, predicted_iou) = match (req.proposal_index, &req.rle) {
        (Some(i), None) => {
            if session.pending.is_empty() {
                return Err(ServiceError::NoPendingProposals(id));
            }
            let p = session.pending.get(i).ok_or_else(|| {
                ServiceError::BadRequest(format!("proposal index {i} out of range 0..{}", session.pending.len()))
            })?;
            (p.mask.clone(), p.predicted_iou)
        }
        (None, Some(rle)) => (BinaryMask::from_rle(rle)?, 0.0),
        _ => {
            return Err(ServiceError::BadRequest(
                "exactly one of proposal_index and rle is required".into(),
            ))
        }
    };
    let annotator = headers
        .get(ANNOTATOR_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|s| !s.trim().is_empty())
        .unwrap_or(DEFAULT_ANNOTATOR)
        .to_string();
    let record = AnnotationRecord {
        sample_id: session.sample_id.clone(),
        mask,
        prompts: session.prompts.clone(),
        mode: AnnotationMode::ManualUi,
        predicted_iou,
        annotator,
        created_at: Utc::now(),
    };
    record.validate(session.image.width, session.image.height)?;
    let log = state.log.clone();
    let meta = CommitMeta {
        session_id: id,
        nonce: req.nonce,
    };
    let rec = record.clone();
    blocking(move || Ok(log.append(&rec, Some(meta))?)).await?;
    let view = RecordView::from(&record);
    {
        let mut ledger = lock(&state.ledger);
        ledger.annotated.insert(record.sample_id.clone());
        ledger.commits.insert(key, view.clone());
    }
    log::info!(
        "committed {} (session opened {})",
        record.sample_id,
        session.created_at.to_rfc3339()
    );
    Ok((StatusCode::CREATED, Json(CommitResponse { record: view, duplicate: false })))
}

async fn image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let sample = state
        .manifest
        .get(&id)
        .cloned()
        .ok_or_else(|| CoreError::UnknownSample(id.clone()))?;
    let st = state.clone();
    let bytes = blocking(move || Ok(st.manifest.load_image(&sample)?.to_png_bytes())).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn progress(State(state): State<Arc<AppState>>) -> Json<Progress> {
    Json(state.progress())
}
