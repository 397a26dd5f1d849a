//! HTTP/JSON service hosting annotation sessions under `/api/v1`.
//!
//! Edits to one session are serialized by a per-session async mutex (FIFO),
//! so concurrent requests are acknowledged in arrival order. Model inference
//! runs on blocking threads bounded by a semaphore.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, Semaphore};
use tower_http::services::ServeDir;

use crate::annotation::{self, Edit, EditSession, LiveReport, Outcome};
use crate::config::PipelineConfig;
use crate::error::Error;
use crate::grid::Roi;
use crate::image_io::{self, encode_rgba, GrayImage, Scale};
use crate::morphometry::HexNeighbors;
use crate::pipeline;
use crate::postprocess::{DecodeParams, LabelMap, RegionClass};
use crate::unet::{self, Net};

/// Everything the router needs besides the sessions themselves.
pub struct ServiceOptions {
    /// Session snapshots, uploads and exports live under this directory.
    pub state_dir: PathBuf,
    pub model: Option<Net>,
    pub decode: DecodeParams,
    pub hex_neighbors: HexNeighbors,
    pub workers: usize,
    pub static_dir: Option<PathBuf>,
}

impl ServiceOptions {
    /// Options from a pipeline config; the model is loaded when the weights
    /// file exists.
    pub fn from_config(config: &PipelineConfig) -> crate::Result<Self> {
        let model = if config.paths.weights.exists() {
            Some(unet::load_model(&config.paths.weights)?)
        } else {
            None
        };
        Ok(ServiceOptions {
            state_dir: config.paths.output_dir.join("service"),
            model,
            decode: config.postprocess.params(),
            hex_neighbors: config.morphometry.hex_neighbors,
            workers: config.service.workers,
            static_dir: config.paths.static_dir.clone(),
        })
    }
}

type Shared = Arc<Mutex<EditSession>>;

struct AppState {
    sessions: RwLock<HashMap<String, Shared>>,
    model: Option<Arc<Net>>,
    decode: DecodeParams,
    hex: HexNeighbors,
    workers: Arc<Semaphore>,
    state_dir: PathBuf,
}

impl AppState {
    fn session(&self, id: &str) -> Result<Shared, ApiError> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    fn sessions_dir(&self) -> PathBuf {
        self.state_dir.join("sessions")
    }

    fn persist(&self, id: &str, session: &EditSession) -> Result<(), ApiError> {
        let path = self.sessions_dir().join(format!("{id}.json"));
        std::fs::write(path, session.to_json()?).map_err(Error::from)?;
        Ok(())
    }

    async fn run_model(&self, image: GrayImage) -> Result<LabelMap, ApiError> {
        let model = self.model.clone().ok_or_else(|| {
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, Error::Weights("no model loaded".into()))
        })?;
        let _permit = self.workers.clone().acquire_owned().await.expect("semaphore closed");
        let decode = self.decode;
        tokio::task::spawn_blocking(move || pipeline::segment(&model, &image, &decode))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))?
            .map_err(ApiError::from)
    }
}

/// JSON error body: `{"error": kind, "message": text}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: String,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, e: Error) -> Self {
        ApiError { status, kind: e.kind().into(), message: e.to_string() }
    }

    fn not_found(id: &str) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            kind: "not_found".into(),
            message: format!("no session {id}"),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, kind: "bad_request".into(), message: message.into() }
    }

    fn internal(message: String) -> Self {
        ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, kind: "internal".into(), message }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e.kind() {
            "io" => StatusCode::INTERNAL_SERVER_ERROR,
            "weights" => StatusCode::SERVICE_UNAVAILABLE,
            "json" => StatusCode::BAD_REQUEST,
            "codec" | "unsupported_format" | "page_count" => StatusCode::UNSUPPORTED_MEDIA_TYPE,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError::new(status, e)
    }
}

impl From<serde_json::Error> for ApiError {
    fn from(e: serde_json::Error) -> Self {
        ApiError::bad_request(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.kind, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Builds the router, restoring any sessions saved under the state dir.
pub fn router(options: ServiceOptions) -> crate::Result<Router> {
    if options.workers == 0 {
        return Err(Error::Config("service needs at least one worker".into()));
    }
    let sessions_dir = options.state_dir.join("sessions");
    for dir in [&sessions_dir, &options.state_dir.join("uploads"), &options.state_dir.join("exports")] {
        std::fs::create_dir_all(dir).map_err(|e| Error::from(e).at_path(dir))?;
    }
    let sessions = restore_sessions(&sessions_dir)?;
    let state = Arc::new(AppState {
        sessions: RwLock::new(sessions),
        model: options.model.map(Arc::new),
        decode: options.decode,
        hex: options.hex_neighbors,
        workers: Arc::new(Semaphore::new(options.workers)),
        state_dir: options.state_dir,
    });
    let api = Router::new()
        .route("/health", get(health))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(session_info).delete(delete_session))
        .route("/sessions/{id}/image.png", get(image_png))
        .route("/sessions/{id}/overlay.png", get(overlay_png))
        .route("/sessions/{id}/labels", get(labels))
        .route("/sessions/{id}/edits", post(apply_edit))
        .route("/sessions/{id}/report", get(report))
        .route("/sessions/{id}/export", post(export))
        .route("/sessions/{id}/assist", post(assist))
        .with_state(state);
    let app = Router::new().nest("/api/v1", api);
    Ok(match options.static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    })
}

fn restore_sessions(dir: &Path) -> crate::Result<HashMap<String, Shared>> {
    let mut out = HashMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else { continue };
        let text = std::fs::read_to_string(&path)?;
        let session = EditSession::from_json(&text).map_err(|e| e.at_path(&path))?;
        out.insert(id, Arc::new(Mutex::new(session)));
    }
    Ok(out)
}

/// Binds `host:port` from the config and serves until the process exits.
pub async fn serve(config: &PipelineConfig) -> crate::Result<()> {
    let app = router(ServiceOptions::from_config(config)?)?;
    let addr = format!("{}:{}", config.service.host, config.service.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("cannot bind {addr}: {e}"))))?;
    eprintln!("endoseg: serving on http://{addr}");
    axum::serve(listener, app).await?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub roi: Roi,
    pub regions: usize,
    pub cells: usize,
    pub guttae: usize,
    pub edits: usize,
    pub undo_depth: usize,
    pub dirty: bool,
}

fn info(id: &str, s: &EditSession) -> SessionInfo {
    let map = s.label_map();
    SessionInfo {
        id: id.to_string(),
        width: map.width(),
        height: map.height(),
        roi: s.roi(),
        regions: map.region_count(),
        cells: map.count_class(RegionClass::Cell),
        guttae: map.count_class(RegionClass::Gutta),
        edits: s.edits().len(),
        undo_depth: s.undo_depth(),
        dirty: s.is_dirty(),
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "model": state.model.is_some() }))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<Vec<String>> {
    let mut ids: Vec<String> = state.sessions.read().expect("session table poisoned").keys().cloned().collect();
    ids.sort();
    Json(ids)
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct CreateQuery {
    /// Pre-populate regions by model inference.
    assist: bool,
    /// Ignore any initial segmentation contained in the upload.
    discard_masks: bool,
    /// Isotropic pixel size override in micrometres.
    scale_um: Option<f64>,
}

fn new_id() -> String {
    format!("{:016x}", rand::rng().random::<u64>())
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Query(q): Query<CreateQuery>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<SessionInfo>)> {
    if body.is_empty() {
        return Err(ApiError::bad_request("empty upload"));
    }
    let id = new_id();
    let ext = if body.starts_with(b"\x89PNG") { "png" } else { "tif" };
    let path = state.state_dir.join("uploads").join(format!("{id}.{ext}"));
    std::fs::write(&path, &body).map_err(Error::from)?;
    let loaded = pipeline::load_any(&path);
    let _ = std::fs::remove_file(&path);
    let (mut image, masks) = loaded?;
    if let Some(um) = q.scale_um {
        image.scale = Scale::new(um, um)?;
    }
    let masks = if q.discard_masks { None } else { masks };
    let mut session = annotation::begin_session(image, masks)?;
    if q.assist {
        let map = state.run_model(session.image().clone()).await?;
        session = EditSession::from_label_map(session.image().clone(), map, session.roi());
    }
    state.persist(&id, &session)?;
    let out = info(&id, &session);
    state
        .sessions
        .write()
        .expect("session table poisoned")
        .insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(out)))
}

async fn session_info(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionInfo>> {
    let shared = state.session(&id)?;
    let s = shared.lock().await;
    Ok(Json(info(&id, &s)))
}

async fn delete_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<StatusCode> {
    let removed = state.sessions.write().expect("session table poisoned").remove(&id);
    if removed.is_none() {
        return Err(ApiError::not_found(&id));
    }
    let _ = std::fs::remove_file(state.sessions_dir().join(format!("{id}.json")));
    Ok(StatusCode::NO_CONTENT)
}

fn png_response(png: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], png).into_response()
}

async fn image_png(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let shared = state.session(&id)?;
    let s = shared.lock().await;
    let img = s.image();
    let px = img.pixels.as_slice();
    let (lo, hi) = px.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut rgba = Vec::with_capacity(px.len() * 4);
    for &v in px {
        let g = ((v - lo) / span * 255.0).round() as u8;
        rgba.extend_from_slice(&[g, g, g, 255]);
    }
    Ok(png_response(encode_rgba(img.width(), img.height(), &rgba)?))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct TileQuery {
    x: Option<usize>,
    y: Option<usize>,
    w: Option<usize>,
    h: Option<usize>,
    /// Overlay opacity, 0..=255.
    alpha: Option<u8>,
}

pub const CELL_RGB: [u8; 3] = [0, 200, 70];
pub const GUTTA_RGB: [u8; 3] = [230, 40, 40];

/// RGBA overlay of a window: cells and guttae coloured, everything else
/// fully transparent.
pub fn render_overlay(map: &LabelMap, window: Roi, alpha: u8) -> Vec<u8> {
    let mut rgba = Vec::with_capacity(window.width * window.height * 4);
    let labels = map.labels();
    for y in window.y..window.y + window.height {
        for x in window.x..window.x + window.width {
            let px = match map.class_of(*labels.get(x, y)) {
                Some(RegionClass::Cell) => [CELL_RGB[0], CELL_RGB[1], CELL_RGB[2], alpha],
                Some(RegionClass::Gutta) => [GUTTA_RGB[0], GUTTA_RGB[1], GUTTA_RGB[2], alpha],
                None => [0, 0, 0, 0],
            };
            rgba.extend_from_slice(&px);
        }
    }
    rgba
}

async fn overlay_png(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<TileQuery>,
) -> ApiResult<Response> {
    let shared = state.session(&id)?;
    let s = shared.lock().await;
    let map = s.label_map();
    let (w, h) = (map.width(), map.height());
    let x = q.x.unwrap_or(0);
    let y = q.y.unwrap_or(0);
    let tw = q.w.unwrap_or(w.saturating_sub(x));
    let th = q.h.unwrap_or(h.saturating_sub(y));
    if tw == 0 || th == 0 || x + tw > w || y + th > h {
        return Err(ApiError::bad_request(format!("tile {x},{y} {tw}x{th} outside {w}x{h} image")));
    }
    let rgba = render_overlay(map, Roi::new(x, y, tw, th), q.alpha.unwrap_or(128));
    Ok(png_response(encode_rgba(tw, th, &rgba)?))
}

#[derive(Serialize)]
struct LabelsBody<'a> {
    #[serde(serialize_with = "annotation::label_map_serde::serialize")]
    map: &'a LabelMap,
}

async fn labels(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let shared = state.session(&id)?;
    let s = shared.lock().await;
    let body = serde_json::to_vec(&LabelsBody { map: s.label_map() })?;
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

/// Request body of the edits endpoint: an [`Edit`] or `{"op": "undo"}`.
#[derive(Debug, Clone, PartialEq)]
pub enum EditRequest {
    Edit(Edit),
    Undo,
}

impl EditRequest {
    pub fn parse(body: &[u8]) -> Result<Self, serde_json::Error> {
        let value: serde_json::Value = serde_json::from_slice(body)?;
        if value.get("op").and_then(|v| v.as_str()) == Some("undo") {
            return Ok(EditRequest::Undo);
        }
        serde_json::from_value(value).map(EditRequest::Edit)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditResponse {
    /// Number of committed edits after this request.
    pub seq: usize,
    pub outcome: Outcome,
    pub report: LiveReport,
}

async fn apply_edit(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<EditResponse>> {
    let request = EditRequest::parse(&body)?;
    let shared = state.session(&id)?;
    let mut s = shared.lock().await;
    let outcome = match request {
        EditRequest::Undo => {
            s.undo()?;
            Outcome::Applied { changed_pixels: 0 }
        }
        EditRequest::Edit(edit) => s.apply(edit)?,
    };
    state.persist(&id, &s)?;
    Ok(Json(EditResponse { seq: s.edits().len(), outcome, report: s.live_report(state.hex)? }))
}

async fn report(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<LiveReport>> {
    let shared = state.session(&id)?;
    let s = shared.lock().await;
    Ok(Json(s.live_report(state.hex)?))
}

/// Writes `exports/<id>.tif` (previous export kept as `.bak`) and returns
/// the file.
async fn export(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let shared = state.session(&id)?;
    let mut s = shared.lock().await;
    let path = state.state_dir.join("exports").join(format!("{id}.tif"));
    s.export(&path)?;
    state.persist(&id, &s)?;
    let bytes = std::fs::read(&path).map_err(Error::from)?;
    Ok(([(header::CONTENT_TYPE, "image/tiff")], bytes).into_response())
}

/// Replaces the session's regions with a model segmentation; the edit
/// history restarts from the new state.
async fn assist(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionInfo>> {
    let shared = state.session(&id)?;
    let mut s = shared.lock().await;
    let map = state.run_model(s.image().clone()).await?;
    *s = EditSession::from_label_map(s.image().clone(), map, s.roi());
    state.persist(&id, &s)?;
    Ok(Json(info(&id, &s)))
}

/// Reads the three-page export written by the export endpoint.
pub fn load_export(path: impl AsRef<Path>) -> crate::Result<EditSession> {
    let (image, masks) = image_io::load_three_page_mask(path)?;
    annotation::begin_session(image, Some(masks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use axum::body::Body;
    use axum::http::Request;
    use http_body_util::BodyExt;
    use tower::ServiceExt;

    fn app(dir: &Path) -> Router {
        router(ServiceOptions {
            state_dir: dir.to_path_buf(),
            model: None,
            decode: DecodeParams::default(),
            hex_neighbors: HexNeighbors::default(),
            workers: 1,
            static_dir: None,
        })
        .unwrap()
    }

    async fn call(app: &Router, method: &str, uri: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
        let req = Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap();
        let res = app.clone().oneshot(req).await.unwrap();
        let status = res.status();
        (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
    }

    fn upload(dir: &Path) -> Vec<u8> {
        let path = dir.join("in.tif");
        let img = GrayImage::new(Grid::from_fn(16, 12, |x, y| (x * 10 + y) as f32), Scale::default());
        let cells = Grid::from_fn(16, 12, |x, y| (2..8).contains(&x) && (2..10).contains(&y));
        image_io::save_microscope_tiff(&path, &img, Some(&cells)).unwrap();
        std::fs::read(path).unwrap()
    }

    #[tokio::test]
    async fn session_lifecycle() {
        let dir = tempfile::tempdir().unwrap();
        let app = app(dir.path());
        let (st, body) = call(&app, "POST", "/api/v1/sessions", upload(dir.path())).await;
        assert_eq!(st, StatusCode::CREATED);
        let info: SessionInfo = serde_json::from_slice(&body).unwrap();
        assert_eq!((info.width, info.height, info.cells), (16, 12, 1));

        let (st, body) = call(&app, "GET", &format!("/api/v1/sessions/{}/overlay.png?x=0&y=0&w=8&h=4", info.id), vec![]).await;
        assert_eq!(st, StatusCode::OK);
        assert!(body.starts_with(b"\x89PNG"));

        let split = br#"{"op":"split","label":1,"polyline":[[0,5],[15,5]]}"#.to_vec();
        let (st, body) = call(&app, "POST", &format!("/api/v1/sessions/{}/edits", info.id), split).await;
        assert_eq!(st, StatusCode::OK);
        let r: EditResponse = serde_json::from_slice(&body).unwrap();
        assert_eq!(r.seq, 1);
        assert_eq!(r.report.cell_areas.count, 2);

        let (st, body) = call(&app, "POST", &format!("/api/v1/sessions/{}/edits", info.id), br#"{"op":"merge","a":1,"b":7}"#.to_vec()).await;
        assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
        assert!(String::from_utf8(body).unwrap().contains("unknown_label"));

        let (st, _) = call(&app, "POST", &format!("/api/v1/sessions/{}/edits", info.id), br#"{"op":"undo"}"#.to_vec()).await;
        assert_eq!(st, StatusCode::OK);
        let (st, body) = call(&app, "POST", &format!("/api/v1/sessions/{}/export", info.id), vec![]).await;
        assert_eq!(st, StatusCode::OK);
        assert!(!body.is_empty());
    }

    #[tokio::test]
    async fn errors_are_structured() {
        let dir = tempfile::tempdir().unwrap();
        let app = app(dir.path());
        let (st, _) = call(&app, "GET", "/api/v1/sessions/nope/report", vec![]).await;
        assert_eq!(st, StatusCode::NOT_FOUND);
        let (st, _) = call(&app, "POST", "/api/v1/sessions", b"garbage".to_vec()).await;
        assert!(st.is_client_error());
        let (_, body) = call(&app, "POST", "/api/v1/sessions", upload(dir.path())).await;
        let info: SessionInfo = serde_json::from_slice(&body).unwrap();
        let (st, _) = call(&app, "POST", &format!("/api/v1/sessions/{}/edits", info.id), b"{".to_vec()).await;
        assert_eq!(st, StatusCode::BAD_REQUEST);
        let (st, body) = call(&app, "POST", &format!("/api/v1/sessions/{}/assist", info.id), vec![]).await;
        assert_eq!(st, StatusCode::SERVICE_UNAVAILABLE);
        assert!(String::from_utf8(body).unwrap().contains("weights"));
    }

    #[tokio::test]
    async fn sessions_survive_restart() {
        let dir = tempfile::tempdir().unwrap();
        let id = {
            let app = app(dir.path());
            let (_, body) = call(&app, "POST", "/api/v1/sessions", upload(dir.path())).await;
            serde_json::from_slice::<SessionInfo>(&body).unwrap().id
        };
        let app = app(dir.path());
        let (st, body) = call(&app, "GET", &format!("/api/v1/sessions/{id}"), vec![]).await;
        assert_eq!(st, StatusCode::OK);
        assert_eq!(serde_json::from_slice::<SessionInfo>(&body).unwrap().cells, 1);
    }
}
