//! HTTP session service: an analyst uploads a dataset, then alternates
//! between fetching the pending query and answering it.
//!
//! | method | path                      | purpose                              |
//! |--------|---------------------------|--------------------------------------|
//! | POST   | `/sessions`               | multipart upload, opens a session    |
//! | GET    | `/sessions/{id}/query`    | pending query (idempotent)           |
//! | POST   | `/sessions/{id}/label`    | answer the pending query             |
//! | GET    | `/sessions/{id}/curve`    | discovery curve and query log        |
//! | GET    | `/sessions/{id}/export`   | query log as CSV                     |
//! | GET    | `/models`                 | model ids found in the model dir     |
//!
//! Models are `<MODEL_DIR>/<id>.bin` files. Each session sits behind its own
//! mutex, so requests against one session are serialized.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use activeq::data::{parse_csv, save_csv, Label, Matrix, RawDataset};
use activeq::engine::{write_curve_csv, QueryRecord, QuerySession, SessionConfig, DEFAULT_BUDGET};
use activeq::features::{N_FEATURES, DEFAULT_K};
use activeq::{Error as CoreError, PolicyModel};
use axum::body::Bytes;
use axum::extract::multipart::MultipartError;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_UPLOAD_LIMIT: usize = 16 * 1024 * 1024;
const LABEL_COLUMN: &str = "label";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub model_dir: PathBuf,
    /// When set, every session writes `<id>.csv` and `<id>.json` here and is
    /// restored on startup.
    pub snapshot_dir: Option<PathBuf>,
    pub upload_limit: usize,
}

impl ServiceConfig {
    pub fn new(model_dir: impl Into<PathBuf>) -> Self {
        Self {
            model_dir: model_dir.into(),
            snapshot_dir: None,
            upload_limit: DEFAULT_UPLOAD_LIMIT,
        }
    }

    /// `MODEL_DIR` (default `models`) and optional `SNAPSHOT_DIR`.
    pub fn from_env() -> Self {
        let mut cfg = Self::new(std::env::var_os("MODEL_DIR").map(PathBuf::from).unwrap_or_else(|| "models".into()));
        cfg.snapshot_dir = std::env::var_os("SNAPSHOT_DIR").map(PathBuf::from);
        cfg
    }
}

/// `PORT`, default 8080.
pub fn port_from_env() -> Result<u16, String> {
    match std::env::var("PORT") {
        Ok(v) => v.parse().map_err(|_| format!("PORT must be a port number, got {v:?}")),
        Err(_) => Ok(DEFAULT_PORT),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ready,
    AwaitingLabel,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryView {
    pub instance_index: usize,
    pub raw_features: Vec<f64>,
    pub meta_features: [f64; N_FEATURES],
    pub probability: f64,
    pub queries_used: usize,
    pub budget: usize,
}

/// What a snapshot file holds; the dataset itself sits next to it as CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Snapshot {
    session_id: String,
    model: String,
    budget: usize,
    k: usize,
    seed: u64,
    created_unix: u64,
    log: Vec<QueryRecord>,
}

struct SessionRecord {
    id: String,
    model_id: String,
    model: Arc<PolicyModel>,
    cfg: SessionConfig,
    x: Matrix,
    session: QuerySession,
    created: SystemTime,
    pending: Option<QueryView>,
}

impl SessionRecord {
    fn status(&self) -> Status {
        if self.pending.is_some() {
            Status::AwaitingLabel
        } else if self.session.is_exhausted() {
            Status::Exhausted
        } else {
            Status::Ready
        }
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            session_id: self.id.clone(),
            model: self.model_id.clone(),
            budget: self.cfg.budget,
            k: self.cfg.k,
            seed: self.cfg.seed,
            created_unix: self.created.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            log: self.session.log().to_vec(),
        }
    }
}

pub struct AppState {
    config: ServiceConfig,
    models: Mutex<HashMap<String, Arc<PolicyModel>>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionRecord>>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            config,
            models: Mutex::new(HashMap::new()),
            sessions: RwLock::new(HashMap::new()),
        })
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session map poisoned").len()
    }

    fn model(&self, id: &str) -> Result<Arc<PolicyModel>, ApiError> {
        let valid = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c)) && !id.starts_with('.');
        if !valid {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown model {id:?}")));
        }
        if let Some(m) = self.models.lock().expect("model cache poisoned").get(id) {
            return Ok(m.clone());
        }
        let path = self.config.model_dir.join(format!("{id}.bin"));
        if !path.is_file() {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown model {id:?}")));
        }
        let model = PolicyModel::load(&path)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("model {id:?} is unreadable: {e}")))?;
        let model = Arc::new(model);
        self.models.lock().expect("model cache poisoned").insert(id.to_owned(), model.clone());
        Ok(model)
    }

    pub fn model_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = std::fs::read_dir(&self.config.model_dir)
            .into_iter()
            .flatten()
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_owned))
            .collect();
        ids.sort();
        ids
    }

    fn record(&self, id: &str) -> Result<Arc<Mutex<SessionRecord>>, ApiError> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id:?}")))
    }

    fn persist(&self, rec: &SessionRecord, dataset: Option<&RawDataset>) -> Result<(), ApiError> {
        let Some(dir) = &self.config.snapshot_dir else { return Ok(()) };
        let fail = |e: String| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("snapshot failed: {e}"));
        std::fs::create_dir_all(dir).map_err(|e| fail(e.to_string()))?;
        if let Some(ds) = dataset {
            save_csv(ds, dir.join(format!("{}.csv", rec.id))).map_err(|e| fail(e.to_string()))?;
        }
        let text = serde_json::to_string_pretty(&rec.snapshot()).expect("snapshot serializes");
        let tmp = dir.join(format!("{}.json.tmp", rec.id));
        std::fs::write(&tmp, text)
            .and_then(|_| std::fs::rename(&tmp, dir.join(format!("{}.json", rec.id))))
            .map_err(|e| fail(e.to_string()))
    }

    /// Replays every snapshot in the snapshot directory; returns how many
    /// sessions were restored.
    pub fn restore(&self) -> Result<usize, String> {
        let Some(dir) = &self.config.snapshot_dir else { return Ok(0) };
        let Ok(entries) = std::fs::read_dir(dir) else { return Ok(0) };
        let mut paths: Vec<PathBuf> = entries
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        let mut restored = 0;
        for path in paths {
            let rec = self.restore_one(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            self.sessions
                .write()
                .expect("session map poisoned")
                .insert(rec.id.clone(), Arc::new(Mutex::new(rec)));
            restored += 1;
        }
        Ok(restored)
    }

    fn restore_one(&self, path: &Path) -> Result<SessionRecord, String> {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        let snap: Snapshot = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let csv = path.with_extension("csv");
        let ds = activeq::data::load_csv(&csv, None).map_err(|e| e.to_string())?;
        let model = self.model(&snap.model).map_err(|e| e.message)?;
        let cfg = SessionConfig {
            budget: snap.budget,
            k: snap.k,
            seed: snap.seed,
            ..SessionConfig::default()
        };
        let session = QuerySession::replay(&ds.x, &cfg, &snap.log).map_err(|e| e.to_string())?;
        Ok(SessionRecord {
            id: snap.session_id,
            model_id: snap.model,
            model,
            cfg,
            x: ds.x,
            session,
            created: UNIX_EPOCH + std::time::Duration::from_secs(snap.created_unix),
            pending: None,
        })
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<MultipartError> for ApiError {
    fn from(e: MultipartError) -> Self {
        Self::new(e.status(), e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.upload_limit;
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/query", get(get_query))
        .route("/sessions/{id}/label", post(post_label))
        .route("/sessions/{id}/curve", get(get_curve))
        .route("/sessions/{id}/export", get(get_export))
        .route("/models", get(list_models))
        .layer(DefaultBodyLimit::max(limit))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

/// Restores snapshots, then serves on `0.0.0.0:port` until the process ends.
pub fn serve_blocking(config: ServiceConfig, port: u16) -> Result<(), String> {
    let state = AppState::new(config);
    let restored = state.restore()?;
    if restored > 0 {
        eprintln!("restored {restored} session(s)");
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    eprintln!("listening on 0.0.0.0:{port}");
    rt.block_on(serve(state, SocketAddr::from(([0, 0, 0, 0], port))))
        .map_err(|e| e.to_string())
}

struct Upload {
    file: Option<(String, Bytes)>,
    budget: usize,
    model: Option<String>,
    seed: u64,
    label_column: Option<String>,
}

async fn read_upload(mut multipart: Multipart) -> Result<Upload, ApiError> {
    let mut up = Upload {
        file: None,
        budget: DEFAULT_BUDGET,
        model: None,
        seed: 0,
        label_column: None,
    };
    while let Some(field) = multipart.next_field().await? {
        let name = field.name().unwrap_or_default().to_owned();
        match name.as_str() {
            "file" | "dataset" => {
                let file_name = field.file_name().unwrap_or("upload.csv").to_owned();
                up.file = Some((file_name, field.bytes().await?));
            }
            "budget" => {
                let text = field.text().await?;
                up.budget = text
                    .trim()
                    .parse()
                    .map_err(|_| ApiError::bad_request(format!("budget must be a non-negative integer, got {text:?}")))?;
            }
            "seed" => {
                let text = field.text().await?;
                up.seed = text
                    .trim()
                    .parse()
                    .map_err(|_| ApiError::bad_request(format!("seed must be a non-negative integer, got {text:?}")))?;
            }
            "model" | "model_id" => up.model = Some(field.text().await?.trim().to_owned()),
            "label_column" => up.label_column = Some(field.text().await?.trim().to_owned()),
            _ => {
                field.bytes().await?;
            }
        }
    }
    Ok(up)
}

fn header_names(bytes: &[u8]) -> Vec<String> {
    let first = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
    String::from_utf8_lossy(first).split(',').map(|h| h.trim().to_owned()).collect()
}

async fn create_session(State(state): State<Arc<AppState>>, multipart: Multipart) -> Result<Response, ApiError> {
    let up = read_upload(multipart).await?;
    let (file_name, bytes) = up.file.ok_or_else(|| ApiError::bad_request("missing multipart field \"file\""))?;
    let model_id = up.model.unwrap_or_else(|| "default".into());
    let model = state.model(&model_id)?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(ApiError::bad_request("empty file"));
    }
    // The label column, if present, is dropped; it never reaches the engine.
    let label_column = up
        .label_column
        .or_else(|| header_names(&bytes).iter().any(|h| h == LABEL_COLUMN).then(|| LABEL_COLUMN.to_owned()));
    let name = Path::new(&file_name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("upload")
        .to_owned();
    let parsed = parse_csv(bytes.as_ref(), name, label_column.as_deref()).map_err(|e| ApiError::bad_request(e.to_string()))?;
    if parsed.n() == 0 {
        return Err(ApiError::bad_request("dataset has no rows"));
    }
    let dataset = RawDataset::new(parsed.name, parsed.columns, parsed.x, None).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let cfg = SessionConfig {
        budget: up.budget,
        k: DEFAULT_K,
        seed: up.seed,
        ..SessionConfig::default()
    };
    let ds = dataset.clone();
    let session = tokio::task::spawn_blocking(move || QuerySession::open(&ds.x, &cfg))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError::bad_request(e.to_string()))?;

    let id = uuid::Uuid::new_v4().simple().to_string();
    let rec = SessionRecord {
        id: id.clone(),
        model_id: model_id.clone(),
        model,
        cfg,
        x: dataset.x.clone(),
        session,
        created: SystemTime::now(),
        pending: None,
    };
    state.persist(&rec, Some(&dataset))?;
    state
        .sessions
        .write()
        .expect("session map poisoned")
        .insert(id.clone(), Arc::new(Mutex::new(rec)));
    let body = json!({
        "session_id": id,
        "n": dataset.n(),
        "d": dataset.d(),
        "budget": cfg.budget,
        "model": model_id,
    });
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn get_query(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<QueryView>, ApiError> {
    let rec = state.record(&id)?;
    let mut rec = rec.lock().expect("session poisoned");
    if let Some(view) = &rec.pending {
        return Ok(Json(view.clone()));
    }
    if rec.session.is_exhausted() {
        return Err(ApiError::conflict("session exhausted: budget spent or every instance queried"));
    }
    let model = rec.model.clone();
    let (idx, _) = rec.session.next_query_with_model(&model).map_err(|e| match e {
        CoreError::BudgetExhausted | CoreError::AllQueried => ApiError::conflict(e.to_string()),
        other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
    })?;
    let meta = rec.session.features().row(idx);
    let probability = model
        .forward(&meta)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .query_probability();
    let view = QueryView {
        instance_index: idx,
        raw_features: rec.x.row(idx).to_vec(),
        meta_features: meta,
        probability,
        queries_used: rec.session.queries_used(),
        budget: rec.session.budget(),
    };
    rec.pending = Some(view.clone());
    Ok(Json(view))
}

fn parse_label_body(body: &[u8]) -> Result<(usize, Label), ApiError> {
    let v: Value = serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON: {e}")))?;
    let index = v
        .get("instance_index")
        .and_then(Value::as_u64)
        .ok_or_else(|| ApiError::unprocessable("instance_index must be a non-negative integer"))?;
    let answer = match v.get("answer").and_then(Value::as_str) {
        Some("anomaly") => Label::Anomaly,
        Some("normal") => Label::Normal,
        _ => return Err(ApiError::unprocessable("answer must be \"anomaly\" or \"normal\"")),
    };
    Ok((index as usize, answer))
}

async fn post_label(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let rec = state.record(&id)?;
    let (index, answer) = parse_label_body(&body)?;
    let mut rec = rec.lock().expect("session poisoned");
    let Some(pending) = &rec.pending else {
        return Err(ApiError::conflict("no query is awaiting a label; GET /query first"));
    };
    if pending.instance_index != index {
        return Err(ApiError::conflict(format!(
            "instance {index} is not the pending query (pending: {})",
            pending.instance_index
        )));
    }
    let point = rec
        .session
        .submit_label(index, answer)
        .map_err(|e| ApiError::conflict(e.to_string()))?;
    rec.pending = None;
    state.persist(&rec, None)?;
    Ok(Json(json!({
        "curve_point": point,
        "discovered_total": point.discovered,
        "status": rec.status(),
    })))
}

async fn get_curve(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    let rec = state.record(&id)?;
    let rec = rec.lock().expect("session poisoned");
    let log: Vec<Value> = rec
        .session
        .log()
        .iter()
        .map(|r| json!({ "instance_index": r.index, "answer": r.answer }))
        .collect();
    Ok(Json(json!({
        "session_id": rec.id,
        "curve": rec.session.curve(),
        "log": log,
        "discovered_total": rec.session.discovered(),
        "queries_used": rec.session.queries_used(),
        "budget": rec.session.budget(),
        "status": rec.status(),
    })))
}

async fn get_export(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let rec = state.record(&id)?;
    let log = rec.lock().expect("session poisoned").session.log().to_vec();
    let mut buf = Vec::new();
    write_curve_csv(&log, &mut buf).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], buf).into_response())
}

async fn list_models(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "models": state.model_ids() }))
}
