//! HTTP session service for interactive annotation and adaptation.
//!
//! Every session wraps one 5 s chunk. The routes are documented in
//! `API.md` next to this crate's manifest.

mod session;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use melodapt::adaptation::{AdaptError, AdapterConfig, EpisodeReport, Heads, Method};
use melodapt::metrics::MelodyScores;
use melodapt::model::{ModelBundle, ModelError};
use melodapt::signal::{
    chunk, class_to_hz, decode_wav, hz_to_class, AudioClip, SignalError, Spectrogram, CHUNK_SAMPLES, MAX_CLASS,
    SAMPLE_RATE,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use session::{Models, Session, SessionMeta, SessionState};

/// Lowest voiced pitch the classifier represents.
pub const MIN_VOICED_HZ: f64 = 55.0;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Invalid(String),
    #[error("session {0} not found")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("storage: {0}")]
    Storage(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error("internal: {0}")]
    Internal(String),
}

impl ServiceError {
    fn status_and_code(&self) -> (StatusCode, &'static str) {
        match self {
            Self::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            Self::Invalid(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_value"),
            Self::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Self::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            Self::Signal(SignalError::InvalidPitch(_) | SignalError::ClassOutOfRange(_)) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid_value")
            }
            Self::Signal(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_audio"),
            Self::Adapt(e) => match e {
                AdaptError::Unsuggested(_) => (StatusCode::CONFLICT, "unsuggested_frame"),
                AdaptError::Conflict { .. } => (StatusCode::CONFLICT, "annotation_conflict"),
                AdaptError::IncompleteAnnotations { .. } => (StatusCode::CONFLICT, "incomplete_annotations"),
                AdaptError::NothingToAdapt => (StatusCode::CONFLICT, "nothing_to_adapt"),
                AdaptError::TooFewFrames { .. } => (StatusCode::CONFLICT, "frames_exhausted"),
                AdaptError::NonFinite(_) => (StatusCode::INTERNAL_SERVER_ERROR, "non_finite"),
                AdaptError::Precondition(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_value"),
                _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            },
            Self::Storage(_) | Self::Model(_) | Self::Internal(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, code) = self.status_and_code();
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            tracing::error!(error = %self, "request failed");
        }
        let body = ErrorBody {
            error: ErrorDetail {
                code: code.into(),
                message: self.to_string(),
            },
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

/// Audio the service can open by id instead of an upload. `clip` holds
/// only real samples; chunking pads it.
#[derive(Debug, Clone)]
pub struct CatalogEntry {
    pub clip: AudioClip,
    pub reference_hz: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Directory for session journals; `None` keeps sessions in memory.
    pub store: Option<PathBuf>,
    pub adapter: AdapterConfig,
    pub default_k: usize,
    pub max_upload_bytes: usize,
}

impl ServiceConfig {
    pub fn new(adapter: AdapterConfig) -> Self {
        Self {
            store: None,
            adapter,
            default_k: 10,
            max_upload_bytes: 64 << 20,
        }
    }
}

struct SessionHandle {
    session: Mutex<Session>,
    adapting: AtomicBool,
}

pub struct AppState {
    models: Arc<Models>,
    config: ServiceConfig,
    catalog: BTreeMap<String, CatalogEntry>,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
    next_id: AtomicU64,
}

impl Models {
    /// Split a trained bundle into the shared read-only parts.
    pub fn from_bundle(bundle: ModelBundle, method: Method) -> Result<Self, ServiceError> {
        let conf = bundle
            .confidence
            .ok_or_else(|| ServiceError::BadRequest("model has no confidence head".into()))?;
        if !bundle.base.is_frozen() {
            return Err(ServiceError::BadRequest("model features are not frozen".into()));
        }
        Ok(Self {
            heads: Heads::new(&bundle.base, &conf),
            theta: bundle.base.theta().clone(),
            psi: conf.psi().clone(),
            base: bundle.base,
            method,
        })
    }
}

fn lock_poisoned<T>(_: T) -> ServiceError {
    ServiceError::Internal("session lock poisoned".into())
}

impl AppState {
    /// Create the state, reloading any sessions found in the store.
    pub fn new(
        models: Models,
        config: ServiceConfig,
        catalog: BTreeMap<String, CatalogEntry>,
    ) -> Result<Arc<Self>, ServiceError> {
        let state = Arc::new(Self {
            models: Arc::new(models),
            config,
            catalog,
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        });
        if let Some(store) = &state.config.store {
            state.reload(store)?;
        }
        Ok(state)
    }

    fn reload(&self, store: &Path) -> Result<(), ServiceError> {
        let dir = store.join("sessions");
        if !dir.is_dir() {
            return Ok(());
        }
        let entries = std::fs::read_dir(&dir).map_err(|e| ServiceError::Storage(format!("{}: {e}", dir.display())))?;
        let mut max_id = 0;
        let mut sessions = self.sessions.write().map_err(lock_poisoned)?;
        for entry in entries.flatten() {
            let path = entry.path();
            if !path.join("meta.json").is_file() {
                continue;
            }
            let session = Session::load(&self.models, &path)?;
            if let Some(n) = session.meta.id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                max_id = max_id.max(n);
            }
            tracing::info!(id = %session.meta.id, iteration = session.adapter.iteration(), "restored session");
            sessions.insert(
                session.meta.id.clone(),
                Arc::new(SessionHandle {
                    session: Mutex::new(session),
                    adapting: AtomicBool::new(false),
                }),
            );
        }
        self.next_id.store(max_id + 1, Ordering::SeqCst);
        Ok(())
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .sessions
            .read()
            .map(|s| s.keys().cloned().collect())
            .unwrap_or_default();
        ids.sort();
        ids
    }

    fn handle(&self, id: &str) -> ApiResult<Arc<SessionHandle>> {
        self.sessions
            .read()
            .map_err(lock_poisoned)?
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    fn with_session<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> ApiResult<T>) -> ApiResult<T> {
        let handle = self.handle(id)?;
        let mut guard = handle.session.lock().map_err(lock_poisoned)?;
        f(&mut guard)
    }

    /// Cut audio into chunks and open one session per chunk.
    pub fn create_sessions(
        &self,
        source: &str,
        clip: AudioClip,
        reference_hz: Option<Vec<f64>>,
    ) -> ApiResult<Vec<String>> {
        let chunks = chunk(&clip, CHUNK_SAMPLES as f64 / SAMPLE_RATE as f64);
        if chunks.is_empty() {
            return Err(ServiceError::Invalid("audio is empty".into()));
        }
        let first = self.next_id.fetch_add(chunks.len() as u64, Ordering::SeqCst);
        let ids: Vec<String> = (0..chunks.len() as u64).map(|i| format!("s{:06}", first + i)).collect();
        let frames_per_chunk = melodapt::signal::FRAMES_PER_CHUNK;
        let mut created = Vec::new();
        for (i, c) in chunks.into_iter().enumerate() {
            let valid_frames = c.valid_frames();
            let reference = reference_hz.as_ref().map(|track| {
                let start = i * frames_per_chunk;
                (0..frames_per_chunk)
                    .map(|m| if m < valid_frames { track.get(start + m).copied().unwrap_or(0.0) } else { 0.0 })
                    .collect::<Vec<f64>>()
            });
            let meta = SessionMeta {
                id: ids[i].clone(),
                source: source.to_string(),
                chunk_index: i,
                linked: ids.clone(),
                valid_frames,
                has_reference: reference.is_some(),
                config: self.config.adapter,
            };
            let session = Session::create(&self.models, meta, c.clip, reference.as_deref(), self.config.store.as_deref())?;
            created.push(session);
        }
        let mut sessions = self.sessions.write().map_err(lock_poisoned)?;
        for s in created {
            sessions.insert(
                s.meta.id.clone(),
                Arc::new(SessionHandle {
                    session: Mutex::new(s),
                    adapting: AtomicBool::new(false),
                }),
            );
        }
        Ok(ids)
    }
}

fn validate_hz(hz: f64) -> ApiResult<u16> {
    let max_hz = class_to_hz(MAX_CLASS).expect("valid class");
    if !hz.is_finite() || hz < 0.0 || (hz > 0.0 && hz < MIN_VOICED_HZ) || hz > max_hz * 2f64.powf(0.5 / 96.0) {
        return Err(ServiceError::Invalid(format!(
            "pitch {hz} Hz must be 0 or within [{MIN_VOICED_HZ}, {max_hz:.1}]"
        )));
    }
    Ok(hz_to_class(hz)?)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateRequest {
    /// Base64 WAV bytes.
    #[serde(default)]
    pub audio_wav_base64: Option<String>,
    #[serde(default)]
    pub name: Option<String>,
    /// Optional reference f0 per frame of the whole upload, for scoring.
    #[serde(default)]
    pub reference_hz: Option<Vec<f64>>,
    #[serde(default)]
    pub episode_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateResponse {
    pub sessions: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SpectrogramImage {
    pub bins: usize,
    pub frames: usize,
    pub bin_hz: f64,
    pub frame_seconds: f64,
    /// Row-major u8 intensities, lowest frequency row first.
    pub data_base64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub source: String,
    pub chunk_index: usize,
    pub linked: Vec<String>,
    pub n_frames: usize,
    pub valid_frames: usize,
    pub iteration: usize,
    pub method: String,
    pub spectrogram: SpectrogramImage,
    pub predictions_hz: Vec<f64>,
    pub confidence: Vec<f32>,
    pub annotated: BTreeMap<usize, f64>,
    pub pending: Vec<usize>,
    pub query_scores: Option<MelodyScores>,
    pub parameters_checksum: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Suggestion {
    pub frame: usize,
    pub time_seconds: f64,
    pub predicted_hz: f64,
    pub confidence: f32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SuggestionsResponse {
    pub iteration: usize,
    pub suggestions: Vec<Suggestion>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationItem {
    pub frame: usize,
    #[serde(default)]
    pub hz: Option<f64>,
    #[serde(default)]
    pub class: Option<u16>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotateRequest {
    pub annotations: Vec<AnnotationItem>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotateResponse {
    pub accepted: usize,
    pub annotated: usize,
    pub pending: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AdaptResponse {
    pub iteration: usize,
    pub frames_used: usize,
    pub predictions_hz: Vec<f64>,
    pub confidence: Vec<f32>,
    /// Frames whose predicted class changed in this round.
    pub changed: Vec<usize>,
    pub classifier_losses: Vec<f64>,
    pub confidence_losses: Vec<f64>,
    pub query_before: Option<MelodyScores>,
    pub query_after: Option<MelodyScores>,
    pub parameters_checksum: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExportResponse {
    pub labels: String,
    pub report: EpisodeReport,
}

#[derive(Debug, Deserialize)]
pub struct SuggestQuery {
    pub k: Option<usize>,
}

#[derive(Debug, Deserialize)]
pub struct AudioQuery {
    pub frame: usize,
    pub radius: Option<f64>,
}

/// Downsample to a display image: frequency bins max-pooled in pairs,
/// log magnitude mapped to 0..=255 over an 80 dB range.
pub fn spectrogram_image(s: &Spectrogram) -> SpectrogramImage {
    let bins = s.n_bins.div_ceil(2);
    let mut db = Vec::with_capacity(bins * s.n_frames);
    for b in 0..bins {
        for m in 0..s.n_frames {
            let v = s.get(2 * b, m).max(if 2 * b + 1 < s.n_bins { s.get(2 * b + 1, m) } else { 0.0 });
            db.push(20.0 * (v.max(1e-10) as f64).log10());
        }
    }
    let top = db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data: Vec<u8> = db
        .iter()
        .map(|&d| (((d - top + 80.0) / 80.0).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    SpectrogramImage {
        bins,
        frames: s.n_frames,
        bin_hz: 2.0 * SAMPLE_RATE as f64 / melodapt::signal::WINDOW_LEN as f64,
        frame_seconds: s.hop_seconds(),
        data_base64: B64.encode(data),
    }
}

fn to_hz(classes: &[u16]) -> Vec<f64> {
    classes.iter().map(|&c| class_to_hz(c).expect("valid class")).collect()
}

fn checksum(session: &Session) -> String {
    format!(
        "{:016x}{:016x}",
        session.adapter.theta().checksum(),
        session.adapter.psi().checksum()
    )
}

fn view(session: &Session, method: Method) -> ApiResult<SessionView> {
    let predictions = session.adapter.predictions()?;
    Ok(SessionView {
        id: session.meta.id.clone(),
        source: session.meta.source.clone(),
        chunk_index: session.meta.chunk_index,
        linked: session.meta.linked.clone(),
        n_frames: session.adapter.n_frames(),
        valid_frames: session.meta.valid_frames,
        iteration: session.adapter.iteration(),
        method: method.label().into(),
        spectrogram: spectrogram_image(&session.spectrogram),
        predictions_hz: to_hz(&predictions.classes),
        confidence: session.adapter.confidence()?,
        annotated: session.state.human_hz.clone(),
        pending: session.adapter.state().pending.clone(),
        query_scores: session.query_scores()?,
        parameters_checksum: checksum(session),
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn create(State(app): State<Arc<AppState>>, Json(req): Json<CreateRequest>) -> ApiResult<(StatusCode, Json<CreateResponse>)> {
    let sessions = blocking(move || {
        let (name, clip, reference) = match (&req.audio_wav_base64, &req.episode_id) {
            (Some(b64), None) => {
                let bytes = B64
                    .decode(b64.trim())
                    .map_err(|e| ServiceError::BadRequest(format!("audio is not valid base64: {e}")))?;
                let name = req.name.clone().unwrap_or_else(|| "upload".into());
                let clip = decode_wav(&bytes, &name)?;
                if let Some(r) = &req.reference_hz {
                    if let Some(&bad) = r.iter().find(|v| !v.is_finite() || **v < 0.0) {
                        return Err(ServiceError::Invalid(format!("reference pitch {bad} is invalid")));
                    }
                }
                (name, clip, req.reference_hz.clone())
            }
            (None, Some(id)) => {
                let entry = app
                    .catalog
                    .get(id)
                    .ok_or_else(|| ServiceError::NotFound(format!("episode {id}")))?;
                (id.clone(), entry.clip.clone(), entry.reference_hz.clone())
            }
            _ => {
                return Err(ServiceError::BadRequest(
                    "provide exactly one of audio_wav_base64 or episode_id".into(),
                ))
            }
        };
        app.create_sessions(&name, clip, reference)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(CreateResponse { sessions })))
}

async fn get_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    let method = app.models.method;
    let v = blocking(move || app.with_session(&id, |s| view(s, method))).await?;
    Ok(Json(v))
}

async fn suggestions(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<SuggestQuery>,
) -> ApiResult<Json<SuggestionsResponse>> {
    let k = q.k.unwrap_or(app.config.default_k);
    let resp = blocking(move || {
        app.with_session(&id, |s| {
            let frames = s.suggest(k)?;
            let predictions = s.adapter.predictions()?;
            let conf = s.adapter.confidence()?;
            let hop = s.spectrogram.hop_seconds();
            Ok(SuggestionsResponse {
                iteration: s.adapter.iteration(),
                suggestions: frames
                    .iter()
                    .map(|&f| Suggestion {
                        frame: f,
                        time_seconds: f as f64 * hop,
                        predicted_hz: class_to_hz(predictions.classes[f]).expect("valid class"),
                        confidence: conf[f],
                    })
                    .collect(),
            })
        })
    })
    .await?;
    Ok(Json(resp))
}

async fn annotate(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<AnnotateRequest>,
) -> ApiResult<Json<AnnotateResponse>> {
    let resp = blocking(move || {
        if req.annotations.is_empty() {
            return Err(ServiceError::BadRequest("no annotations given".into()));
        }
        let mut items = Vec::with_capacity(req.annotations.len());
        let mut seen = BTreeMap::new();
        for a in &req.annotations {
            let (class, hz) = match (a.hz, a.class) {
                (Some(hz), None) => (validate_hz(hz)?, hz),
                (None, Some(c)) if c <= MAX_CLASS => (c, class_to_hz(c)?),
                (None, Some(c)) => return Err(ServiceError::Invalid(format!("class {c} out of range"))),
                _ => {
                    return Err(ServiceError::BadRequest(format!(
                        "frame {}: give exactly one of hz or class",
                        a.frame
                    )))
                }
            };
            if let Some(prev) = seen.insert(a.frame, class) {
                if prev != class {
                    return Err(ServiceError::Conflict(format!("frame {} annotated twice with different pitches", a.frame)));
                }
            }
            items.push((a.frame, class, hz));
        }
        app.with_session(&id, |s| {
            if let Some(&(f, _, _)) = items.iter().find(|(f, _, _)| *f >= s.meta.valid_frames) {
                return Err(ServiceError::Invalid(format!(
                    "frame {f} is outside the {} valid frames",
                    s.meta.valid_frames
                )));
            }
            let accepted = s.annotate(&items)?;
            Ok(AnnotateResponse {
                accepted,
                annotated: s.adapter.state().annotated.len(),
                pending: s
                    .adapter
                    .state()
                    .pending
                    .iter()
                    .copied()
                    .filter(|f| !s.adapter.state().annotated.contains_key(f))
                    .collect(),
            })
        })
    })
    .await?;
    Ok(Json(resp))
}

struct AdaptGuard(Arc<SessionHandle>);

impl Drop for AdaptGuard {
    fn drop(&mut self) {
        self.0.adapting.store(false, Ordering::SeqCst);
    }
}

async fn adapt(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<AdaptResponse>> {
    let handle = app.handle(&id)?;
    if handle
        .adapting
        .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
        .is_err()
    {
        return Err(ServiceError::Conflict(format!("session {id} is already adapting")));
    }
    let guard = AdaptGuard(handle);
    let resp = blocking(move || {
        let mut s = guard.0.session.lock().map_err(lock_poisoned)?;
        let before = s.adapter.predictions()?;
        let query_before = s.query_scores()?;
        let step = s.adapt()?;
        let after = s.adapter.predictions()?;
        Ok(AdaptResponse {
            iteration: step.iteration,
            frames_used: step.frames.len(),
            predictions_hz: to_hz(&after.classes),
            confidence: s.adapter.confidence()?,
            changed: (0..after.len()).filter(|&m| after.classes[m] != before.classes[m]).collect(),
            classifier_losses: step.classifier_losses,
            confidence_losses: step.confidence_losses,
            query_before,
            query_after: s.query_scores()?,
            parameters_checksum: checksum(&s),
        })
    })
    .await?;
    Ok(Json(resp))
}

async fn export(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<ExportResponse>> {
    let method = app.models.method;
    let resp = blocking(move || {
        app.with_session(&id, |s| {
            Ok(ExportResponse {
                labels: s.export_labels()?,
                report: s.report(method),
            })
        })
    })
    .await?;
    Ok(Json(resp))
}

async fn audio(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<AudioQuery>,
) -> ApiResult<Response> {
    let radius = q.radius.unwrap_or(0.25);
    if !(radius.is_finite() && radius > 0.0 && radius <= 5.0) {
        return Err(ServiceError::Invalid(format!("radius {radius} must be in (0, 5]")));
    }
    let bytes = app.with_session(&id, |s| {
        if q.frame >= s.adapter.n_frames() {
            return Err(ServiceError::Invalid(format!("frame {} out of range", q.frame)));
        }
        Ok(s.audio_slice(q.frame, radius))
    })?;
    Ok(([(header::CONTENT_TYPE, "audio/wav")], bytes).into_response())
}

async fn list(State(app): State<Arc<AppState>>) -> Json<Vec<String>> {
    Json(app.session_ids())
}

async fn health() -> &'static str {
    "ok"
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create).get(list))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/suggestions", get(suggestions))
        .route("/sessions/{id}/annotations", post(annotate))
        .route("/sessions/{id}/adapt", post(adapt))
        .route("/sessions/{id}/export", get(export))
        .route("/sessions/{id}/audio", get(audio))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Bind and serve until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state)).await
}
