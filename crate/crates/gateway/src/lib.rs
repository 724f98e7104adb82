//! HTTP and WebSocket front of a [`Coordinator`].
//!
//! | method | path | body / query | reply |
//! |--------|------|--------------|-------|
//! | GET | `/status` | | [`ClusterSnapshot`] |
//! | GET | `/nodes` | | list of [`NodeDescriptor`] |
//! | POST | `/lifecycle/{action}` | `bringup`, `sync`, `launch`, `start` (`{"run_label"}`), `stop`, `finish` | [`ClusterSnapshot`] |
//! | POST | `/clock/advance` | `{"seconds"}` | [`ClusterSnapshot`] |
//! | GET | `/chunks` | `node`, `sensor`, `data=true` | list of [`ChunkInfo`] |
//! | GET | `/events` | WebSocket upgrade | one JSON [`ClusterEvent`] per text message |
//!
//! Errors come back as `{"error": "...", "phase": "..."}` with 409 for
//! requests the current phase forbids or a worker refused, 422 for config
//! problems and 500 otherwise.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use mapbot_core::cluster::run::detect_drops;
use mapbot_core::cluster::{ClusterError, ClusterEvent, ClusterSnapshot, CollectedChunk, Coordinator, NodeDescriptor, Phase};

const EVENT_BUFFER: usize = 4096;

/// Shared handle to the coordinator and its event stream.
#[derive(Clone)]
pub struct Gateway {
    coord: Arc<Mutex<Coordinator>>,
    events: broadcast::Sender<ClusterEvent>,
}

impl Gateway {
    pub fn new(mut coord: Coordinator) -> Self {
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        let tx = events.clone();
        coord.set_event_sink(move |e| {
            let _ = tx.send(e.clone());
        });
        Self {
            coord: Arc::new(Mutex::new(coord)),
            events,
        }
    }

    pub fn subscribe(&self) -> broadcast::Receiver<ClusterEvent> {
        self.events.subscribe()
    }

    pub fn snapshot(&self) -> ClusterSnapshot {
        self.coord.lock().expect("coordinator lock").snapshot()
    }

    /// Run `f` on the coordinator off the async runtime.
    async fn with<T: Send + 'static>(
        &self,
        f: impl FnOnce(&mut Coordinator) -> Result<T, ClusterError> + Send + 'static,
    ) -> Result<T, ApiError> {
        let coord = self.coord.clone();
        tokio::task::spawn_blocking(move || {
            let mut c = coord.lock().map_err(|_| ApiError::internal("coordinator lock poisoned"))?;
            f(&mut c).map_err(|e| ApiError::cluster(e, c.phase()))
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
    }

    /// Advance simulated time by one second whenever the cluster is recording.
    pub fn spawn_ticker(&self, period: Duration) -> tokio::task::JoinHandle<()> {
        let gw = self.clone();
        tokio::spawn(async move {
            let mut every = tokio::time::interval(period);
            every.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
            loop {
                every.tick().await;
                let r = gw
                    .with(|c| {
                        if c.phase() == Phase::Recording {
                            c.record_for(1.0)?;
                        }
                        Ok(())
                    })
                    .await;
                if let Err(e) = r {
                    log::warn!("tick: {}", e.message);
                }
            }
        })
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    phase: Phase,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    phase: Phase,
}

impl ApiError {
    fn cluster(e: ClusterError, phase: Phase) -> Self {
        let status = match &e {
            ClusterError::Phase { .. }
            | ClusterError::Transition { .. }
            | ClusterError::Nack { .. }
            | ClusterError::SyncFailed(_)
            | ClusterError::HelloTimeout { .. } => StatusCode::CONFLICT,
            ClusterError::Config(_) | ClusterError::DuplicateNode(_) | ClusterError::SensorLimit { .. } => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            message: e.to_string(),
            phase,
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: message.into(),
            phase: Phase::PoweredOff,
        }
    }

    fn bad_request(message: impl Into<String>, phase: Phase) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
            phase,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.message,
            phase: self.phase,
        };
        (self.status, Json(body)).into_response()
    }
}

/// One sealed chunk as listed by `GET /chunks`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkInfo {
    pub path: String,
    pub node_id: u8,
    pub sensor_id: String,
    pub chunk_index: u32,
    pub corrupt: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub records: usize,
    pub byte_length: usize,
    pub checksum: Option<u32>,
    /// Base64 file content, only with `data=true`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
}

impl ChunkInfo {
    fn from_collected(c: &CollectedChunk, root: &std::path::Path, data: bool) -> std::io::Result<Self> {
        let (records, byte_length, checksum, error) = match &c.result {
            Ok(rc) => (rc.records.len(), rc.byte_length, Some(rc.checksum), None),
            Err(e) => (0, std::fs::metadata(&c.path)?.len() as usize, None, Some(e.to_string())),
        };
        let data = if data {
            Some(base64::engine::general_purpose::STANDARD.encode(std::fs::read(&c.path)?))
        } else {
            None
        };
        Ok(Self {
            path: c.path.strip_prefix(root).unwrap_or(&c.path).to_string_lossy().into_owned(),
            node_id: c.node_id,
            sensor_id: c.sensor_id.clone(),
            chunk_index: c.chunk_index,
            corrupt: c.is_corrupt(),
            error,
            records,
            byte_length,
            checksum,
            data,
        })
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct StartBody {
    #[serde(default)]
    pub run_label: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct AdvanceBody {
    pub seconds: f64,
}

#[derive(Debug, Default, Deserialize)]
pub struct ChunkQuery {
    pub node: Option<u8>,
    pub sensor: Option<String>,
    #[serde(default)]
    pub data: bool,
}

pub fn router(gw: Gateway) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/nodes", get(nodes))
        .route("/lifecycle/{action}", post(lifecycle))
        .route("/clock/advance", post(advance))
        .route("/chunks", get(chunks))
        .route("/events", get(events))
        .with_state(gw)
}

/// Serve until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, gw: Gateway) -> std::io::Result<()> {
    axum::serve(listener, router(gw)).await
}

async fn status(State(gw): State<Gateway>) -> Result<Json<ClusterSnapshot>, ApiError> {
    gw.with(|c| Ok(c.snapshot())).await.map(Json)
}

async fn nodes(State(gw): State<Gateway>) -> Result<Json<Vec<NodeDescriptor>>, ApiError> {
    gw.with(|c| Ok(c.registry().values().cloned().collect())).await.map(Json)
}

async fn lifecycle(
    State(gw): State<Gateway>,
    Path(action): Path<String>,
    body: Option<Json<StartBody>>,
) -> Result<Json<ClusterSnapshot>, ApiError> {
    let label = body.and_then(|b| b.0.run_label);
    let snap = gw
        .with(move |c| {
            match action.as_str() {
                "bringup" => c.bringup().map(drop)?,
                "sync" => c.time_sync_phase().map(drop)?,
                "launch" => c.launch().map(drop)?,
                "start" => {
                    let label = label.unwrap_or_else(|| format!("run-{}", c.runs().len()));
                    c.start_recording(&label).map(drop)?
                }
                "stop" => {
                    c.stop_recording()?;
                    detect_drops(c)?;
                }
                "finish" => c.finish().map(drop)?,
                other => return Err(ClusterError::Other(format!("unknown action {other:?}"))),
            }
            Ok(c.snapshot())
        })
        .await
        .map_err(|e| {
            if e.message.starts_with("unknown action") {
                ApiError {
                    status: StatusCode::NOT_FOUND,
                    ..e
                }
            } else {
                e
            }
        })?;
    Ok(Json(snap))
}

async fn advance(State(gw): State<Gateway>, Json(body): Json<AdvanceBody>) -> Result<Json<ClusterSnapshot>, ApiError> {
    if !(body.seconds >= 0.0 && body.seconds.is_finite()) {
        return Err(ApiError::bad_request("seconds must be a finite value >= 0", gw.snapshot().phase));
    }
    gw.with(move |c| {
        c.record_for(body.seconds)?;
        Ok(c.snapshot())
    })
    .await
    .map(Json)
}

async fn chunks(State(gw): State<Gateway>, Query(q): Query<ChunkQuery>) -> Result<Json<Vec<ChunkInfo>>, ApiError> {
    gw.with(move |c| {
        let list = c.collect_chunks(q.node, q.sensor.as_deref())?;
        list.iter()
            .map(|x| ChunkInfo::from_collected(x, c.store_root(), q.data).map_err(ClusterError::Io))
            .collect()
    })
    .await
    .map(Json)
}

async fn events(State(gw): State<Gateway>, ws: WebSocketUpgrade) -> Response {
    let rx = gw.subscribe();
    ws.on_upgrade(move |socket| pump(socket, rx))
}

async fn pump(mut socket: WebSocket, mut rx: broadcast::Receiver<ClusterEvent>) {
    loop {
        tokio::select! {
            ev = rx.recv() => match ev {
                Ok(ev) => {
                    let text = serde_json::to_string(&ev).expect("events serialize");
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => log::warn!("websocket client lagged by {n} events"),
                Err(broadcast::error::RecvError::Closed) => return,
            },
            msg = socket.recv() => match msg {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}
