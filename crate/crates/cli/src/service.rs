//! HTTP and WebSocket inference service.
//!
//! * `GET /models` lists the loaded models with their geometry.
//! * `POST /predict` returns impulse responses and transfer functions as JSON.
//! * `GET /stream?model=<name>` upgrades to a WebSocket. Each JSON text
//!   message is an update; the reply is one binary frame (see [`crate::wire`])
//!   or a JSON text message `{"id": .., "error": ..}`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use roomop_core::eval::{predict_irs, time_grid, transfer_function};
use roomop_core::geometry::Aabb;
use roomop_core::pipeline::load_ensemble;
use roomop_core::specialization::Ensemble;
use serde::{Deserialize, Serialize};

use crate::wire::Frame;

pub const MAX_RECEIVERS: usize = 64;
pub const MAX_SAMPLES: usize = 65_536;

/// Loaded models by name.
#[derive(Clone, Default)]
pub struct Registry {
    models: Arc<BTreeMap<String, Arc<Ensemble>>>,
}

impl Registry {
    pub fn new(models: impl IntoIterator<Item = (String, Ensemble)>) -> Self {
        Self {
            models: Arc::new(models.into_iter().map(|(k, v)| (k, Arc::new(v))).collect()),
        }
    }

    /// Loads `name=path` or bare `path` specs; bare paths are named after
    /// their scenario.
    pub fn load(specs: &[String]) -> anyhow::Result<Self> {
        let mut models = BTreeMap::new();
        for spec in specs {
            let (name, path) = match spec.split_once('=') {
                Some((n, p)) => (Some(n.to_string()), p),
                None => (None, spec.as_str()),
            };
            let ens = load_ensemble(Path::new(path)).map_err(|e| anyhow::anyhow!("loading {path}: {e}"))?;
            let name = name.unwrap_or_else(|| ens.meta().scenario.clone());
            if models.insert(name.clone(), ens).is_some() {
                anyhow::bail!("model name `{name}` given twice");
            }
        }
        Ok(Self::new(models))
    }

    pub fn get(&self, name: &str) -> Result<Arc<Ensemble>, ApiError> {
        self.models.get(name).cloned().ok_or_else(|| {
            let known: Vec<&str> = self.models.keys().map(String::as_str).collect();
            ApiError::new(StatusCode::NOT_FOUND, format!("unknown model `{name}` (loaded: {})", known.join(", ")))
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<roomop_core::Error> for ApiError {
    fn from(e: roomop_core::Error) -> Self {
        use roomop_core::Error as E;
        let status = match e {
            E::InvalidParameter(_) | E::Uncovered { .. } | E::ShapeMismatch { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelInfo {
    pub name: String,
    pub scenario: String,
    pub dims: usize,
    pub room: Aabb,
    pub obstacles: Vec<Aabb>,
    pub source_region: Aabb,
    pub partitions: Option<Vec<Aabb>>,
    pub f_max: f64,
    pub c_phys: f64,
}

fn default_samples() -> usize {
    1000
}
fn default_rate() -> f64 {
    2000.0
}

/// Source, receivers and time grid for one prediction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IrQuery {
    pub source: Vec<f64>,
    pub receivers: Vec<Vec<f64>>,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_rate")]
    pub f_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictRequest {
    pub model: String,
    #[serde(flatten)]
    pub query: IrQuery,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReceiverResult {
    pub receiver: Vec<f64>,
    pub pressures: Vec<f64>,
    pub magnitude_db: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictResponse {
    pub model: String,
    pub f_s: f64,
    pub n_samples: usize,
    pub compute_ms: f64,
    /// Physical sample times in seconds.
    pub times: Vec<f64>,
    pub frequencies: Vec<f64>,
    pub results: Vec<ReceiverResult>,
}

pub struct Computed {
    pub compute_ms: f64,
    pub times: Vec<f64>,
    pub frequencies: Vec<f64>,
    pub results: Vec<ReceiverResult>,
}

/// Validates and evaluates one query on the calling thread.
pub fn compute(ens: &Ensemble, q: &IrQuery) -> Result<Computed, ApiError> {
    let bad = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m);
    if q.receivers.is_empty() || q.receivers.len() > MAX_RECEIVERS {
        return Err(bad(format!("need 1 to {MAX_RECEIVERS} receivers, got {}", q.receivers.len())));
    }
    if q.n_samples == 0 || q.n_samples > MAX_SAMPLES {
        return Err(bad(format!("n_samples must be in 1..={MAX_SAMPLES}, got {}", q.n_samples)));
    }
    if !(q.f_s.is_finite() && q.f_s > 0.0) {
        return Err(bad(format!("f_s must be positive, got {}", q.f_s)));
    }
    let t0 = Instant::now();
    let times = time_grid(q.n_samples, q.f_s);
    let irs = predict_irs(ens, &q.source, &q.receivers, &times)?;
    let mut frequencies = Vec::new();
    let results = irs
        .into_iter()
        .map(|ir| {
            let tf = transfer_function(&ir.pressures, q.f_s);
            frequencies = tf.frequencies;
            ReceiverResult {
                receiver: ir.receiver,
                pressures: ir.pressures,
                magnitude_db: tf.magnitude_db,
            }
        })
        .collect();
    Ok(Computed {
        compute_ms: t0.elapsed().as_secs_f64() * 1e3,
        times,
        frequencies,
        results,
    })
}

async fn compute_blocking(ens: Arc<Ensemble>, q: IrQuery) -> Result<Computed, ApiError> {
    tokio::task::spawn_blocking(move || compute(&ens, &q))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn models(State(reg): State<Registry>) -> Json<Vec<ModelInfo>> {
    Json(
        reg.models
            .iter()
            .map(|(name, ens)| {
                let m = ens.meta();
                ModelInfo {
                    name: name.clone(),
                    scenario: m.scenario.clone(),
                    dims: m.geometry.dims,
                    room: m.geometry.outer.clone(),
                    obstacles: m.geometry.obstacles.clone(),
                    source_region: m.source_region.bounds.clone(),
                    partitions: ens.partitioning.as_ref().map(|p| p.boxes.clone()),
                    f_max: m.f_max,
                    c_phys: m.c_phys,
                }
            })
            .collect(),
    )
}

async fn predict(State(reg): State<Registry>, Json(req): Json<PredictRequest>) -> Result<Json<PredictResponse>, ApiError> {
    let ens = reg.get(&req.model)?;
    let (f_s, n_samples) = (req.query.f_s, req.query.n_samples);
    let c = compute_blocking(ens, req.query).await?;
    Ok(Json(PredictResponse {
        model: req.model,
        f_s,
        n_samples,
        compute_ms: c.compute_ms,
        times: c.times,
        frequencies: c.frequencies,
        results: c.results,
    }))
}

#[derive(Deserialize)]
struct StreamParams {
    model: String,
}

/// One position update on the stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Update {
    #[serde(default)]
    pub id: u64,
    #[serde(flatten)]
    pub query: IrQuery,
}

async fn stream(State(reg): State<Registry>, Query(p): Query<StreamParams>, ws: WebSocketUpgrade) -> Result<Response, ApiError> {
    let ens = reg.get(&p.model)?;
    Ok(ws.on_upgrade(move |socket| run_stream(socket, ens)))
}

async fn run_stream(mut socket: WebSocket, ens: Arc<Ensemble>) {
    let mut seq = 0u64;
    while let Some(Ok(msg)) = socket.recv().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            _ => continue,
        };
        let reply = match serde_json::from_str::<Update>(&text) {
            Err(e) => error_message(0, &format!("malformed update: {e}")),
            Ok(u) => {
                let f_s = u.query.f_s;
                let samples = u.query.n_samples;
                match compute_blocking(ens.clone(), u.query).await {
                    Err(e) => error_message(u.id, &e.message),
                    Ok(c) => {
                        seq += 1;
                        let frame = Frame {
                            seq,
                            id: u.id,
                            compute_ms: c.compute_ms,
                            f_s,
                            samples,
                            bins: c.frequencies.len(),
                            pressures: c.results.iter().map(|r| r.pressures.iter().map(|&v| v as f32).collect()).collect(),
                            magnitude_db: c.results.iter().map(|r| r.magnitude_db.iter().map(|&v| v as f32).collect()).collect(),
                        };
                        Message::Binary(frame.encode().into())
                    }
                }
            }
        };
        if socket.send(reply).await.is_err() {
            break;
        }
    }
}

fn error_message(id: u64, message: &str) -> Message {
    Message::Text(serde_json::json!({ "id": id, "error": message }).to_string().into())
}

pub fn router(reg: Registry) -> Router {
    Router::new()
        .route("/models", get(models))
        .route("/predict", post(predict))
        .route("/stream", get(stream))
        .with_state(reg)
}

/// Serves until the process is stopped.
pub async fn serve(reg: Registry, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(reg)).await
}
