//! HTTP labeling and adaptation service.
//!
//! Each session lives in its own directory under the service root:
//!
//! ```text
//! <root>/<session_id>/session.json   metadata
//! <root>/<session_id>/config.toml    run configuration the session was created under
//! <root>/<session_id>/pairs.jsonl    every issued pair, appended before it is returned
//! <root>/<session_id>/labels.jsonl   labels, synced to disk before they are acknowledged
//! <root>/<session_id>/adapted.json   latest finished adaptation
//! ```
//!
//! Sessions are reloaded from disk when the service starts.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context as _;
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use plediff_core::env::{
    append_label, make_query_pairs, read_labels, LabelRecord, LabelSource, OracleKind, OracleSpec,
    SegmentRef, Side,
};
use plediff_core::pipeline::{adapt, AdaptedLatents, Planner};
use plediff_core::{FullTrajectory, Guidance, GuidanceWeights, InversionConfig};

const MAX_SAMPLES: usize = 1000;
const DEFAULT_SAMPLES: usize = 8;
const MAX_N_ADAPT: u64 = 1_000_000;
const PROGRESS_EVERY: usize = 10;

/// `{error: {code, message, field?}}` with an HTTP status.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            field: None,
        }
    }

    fn bad_field(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: Some(field.to_string()),
            ..Self::new(StatusCode::BAD_REQUEST, "invalid_field", message)
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut error = json!({ "code": self.code, "message": self.message });
        if let Some(f) = self.field {
            error["field"] = Value::String(f);
        }
        (self.status, Json(json!({ "error": error }))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionMeta {
    session_id: String,
    user: Option<String>,
    created_ms: u64,
    pair_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IssuedPair {
    pair_id: String,
    a: SegmentRef,
    b: SegmentRef,
}

/// What `adapted.json` stores: the latents plus the guidance to sample with.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionAdapted {
    job_id: String,
    weights: GuidanceWeights,
    latents: AdaptedLatents,
}

#[derive(Debug, Clone)]
enum Job {
    Idle,
    Running {
        job_id: String,
        step: usize,
        n_adapt: usize,
        loss: Option<f64>,
    },
    Done {
        job_id: String,
    },
    Failed {
        job_id: String,
        message: String,
    },
}

struct Session {
    meta: SessionMeta,
    dir: PathBuf,
    issued: Vec<IssuedPair>,
    labels: Vec<LabelRecord>,
    job: Job,
    jobs_started: usize,
    adapted: Option<SessionAdapted>,
    samples: HashMap<(usize, u64), Arc<Value>>,
}

impl Session {
    fn labels_path(&self) -> PathBuf {
        self.dir.join("labels.jsonl")
    }

    fn load(dir: &Path) -> anyhow::Result<Self> {
        let meta: SessionMeta = serde_json::from_slice(&fs::read(dir.join("session.json"))?)?;
        let issued = read_jsonl(&dir.join("pairs.jsonl"))?;
        let labels_path = dir.join("labels.jsonl");
        let labels = if labels_path.exists() {
            read_labels(&labels_path)?
        } else {
            Vec::new()
        };
        let adapted_path = dir.join("adapted.json");
        let adapted: Option<SessionAdapted> = if adapted_path.exists() {
            Some(serde_json::from_slice(&fs::read(&adapted_path)?)?)
        } else {
            None
        };
        let job = match &adapted {
            Some(a) => Job::Done {
                job_id: a.job_id.clone(),
            },
            None => Job::Idle,
        };
        Ok(Self {
            meta,
            dir: dir.to_path_buf(),
            issued,
            labels,
            jobs_started: adapted.is_some() as usize,
            job,
            adapted,
            samples: HashMap::new(),
        })
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

fn append_synced(path: &Path, value: &impl Serialize) -> std::io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(value).map_err(std::io::Error::other)?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    f.sync_data()
}

fn write_synced(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(tmp, path)
}

struct Shared {
    planner: Arc<Planner>,
    corpus: Arc<Vec<FullTrajectory>>,
    root: PathBuf,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

/// Cheaply cloneable handle shared by every request.
#[derive(Clone)]
pub struct AppState(Arc<Shared>);

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl AppState {
    /// Opens (or creates) the session root and reloads every session in it.
    pub fn open(
        planner: Planner,
        corpus: Vec<FullTrajectory>,
        root: &Path,
    ) -> anyhow::Result<Self> {
        fs::create_dir_all(root)
            .with_context(|| format!("creating session root {}", root.display()))?;
        let mut sessions = HashMap::new();
        for entry in fs::read_dir(root)? {
            let dir = entry?.path();
            if dir.join("session.json").exists() {
                let s = Session::load(&dir)
                    .with_context(|| format!("reloading session {}", dir.display()))?;
                sessions.insert(s.meta.session_id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        tracing::info!(n = sessions.len(), root = %root.display(), "sessions loaded");
        Ok(Self(Arc::new(Shared {
            planner: Arc::new(planner),
            corpus: Arc::new(corpus),
            root: root.to_path_buf(),
            sessions: Mutex::new(sessions),
        })))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        lock(&self.0.sessions).get(id).cloned().ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                "unknown_session",
                format!("no session {id:?}"),
            )
        })
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next-pair", get(next_pair))
        .route("/sessions/{id}/labels", post(post_label))
        .route("/sessions/{id}/adapt", post(start_adapt))
        .route("/sessions/{id}/adapt/status", get(adapt_status))
        .route("/sessions/{id}/samples", get(samples))
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("cannot listen on {addr} (port already in use?)"))?;
    tracing::info!(%addr, "serving");
    axum::serve(listener, router(state)).await?;
    Ok(())
}

/// Parses an optional JSON object body, rejecting keys outside `allowed`.
fn object_body(body: &Bytes, allowed: &[&str]) -> Result<Map<String, Value>, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(Map::new());
    }
    let value: Value = serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_json", e.to_string()))?;
    let Value::Object(map) = value else {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "malformed_json",
            "body must be a JSON object",
        ));
    };
    if let Some(k) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(ApiError::bad_field(k, format!("unknown field {k:?}")));
    }
    Ok(map)
}

fn opt_f64(map: &Map<String, Value>, field: &str) -> Result<Option<f64>, ApiError> {
    match map.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => match v.as_f64() {
            Some(x) if x.is_finite() && x >= 0.0 => Ok(Some(x)),
            _ => Err(ApiError::bad_field(
                field,
                format!("{field} must be a non-negative number"),
            )),
        },
    }
}

pub(crate) fn trajectory_json(m: ArrayView2<f64>, state_dim: usize) -> Value {
    let rows = |r: std::ops::Range<usize>| -> Vec<Vec<f64>> {
        m.outer_iter()
            .map(|row| row.iter().skip(r.start).take(r.len()).copied().collect())
            .collect()
    };
    json!({ "states": rows(0..state_dim), "actions": rows(state_dim..m.ncols()) })
}

pub(crate) fn rewards_json(m: ArrayView2<f64>, state_dim: usize) -> Value {
    let mut out = Map::new();
    for kind in OracleKind::ALL {
        out.insert(
            kind.name().into(),
            json!(OracleSpec::new(kind, 1).reward(m, state_dim)),
        );
    }
    Value::Object(out)
}

async fn healthz() -> impl IntoResponse {
    Json(json!({ "status": "ok" }))
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> ApiResult {
    let map = object_body(&body, &["user"])?;
    let user = match map.get("user") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(ApiError::bad_field("user", "user must be a string")),
    };
    let session_id = format!("s{:016x}", rand::random::<u64>());
    let meta = SessionMeta {
        session_id: session_id.clone(),
        user,
        created_ms: now_ms(),
        pair_seed: rand::random(),
    };
    let dir = state.0.root.join(&session_id);
    fs::create_dir_all(&dir).map_err(ApiError::internal)?;
    write_synced(
        &dir.join("session.json"),
        &serde_json::to_vec_pretty(&meta).map_err(ApiError::internal)?,
    )
    .map_err(ApiError::internal)?;
    write_synced(
        &dir.join("config.toml"),
        state.0.planner.config.to_toml_string().as_bytes(),
    )
    .map_err(ApiError::internal)?;
    let session = Session {
        meta,
        dir,
        issued: Vec::new(),
        labels: Vec::new(),
        job: Job::Idle,
        jobs_started: 0,
        adapted: None,
        samples: HashMap::new(),
    };
    lock(&state.0.sessions).insert(session_id.clone(), Arc::new(Mutex::new(session)));
    Ok((
        StatusCode::CREATED,
        Json(json!({ "session_id": session_id })),
    )
        .into_response())
}

async fn next_pair(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let session = state.session(&id)?;
    let mut s = lock(&session);
    let planner = &state.0.planner;
    let counter = s.issued.len() as u64;
    let seed = s.meta.pair_seed ^ counter.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let drawn = make_query_pairs(&state.0.corpus, 1, planner.horizon(), seed)
        .map_err(ApiError::internal)?
        .pop()
        .expect("one pair");
    let issued = IssuedPair {
        pair_id: format!("{id}-p{counter}"),
        a: drawn.a.source,
        b: drawn.b.source,
    };
    append_synced(&s.dir.join("pairs.jsonl"), &issued).map_err(ApiError::internal)?;
    s.issued.push(issued.clone());
    let sd = planner.state_dim();
    Ok(Json(json!({
        "pair_id": issued.pair_id,
        "a": trajectory_json(drawn.a.matrix.view(), sd),
        "b": trajectory_json(drawn.b.matrix.view(), sd),
    }))
    .into_response())
}

async fn post_label(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult {
    let session = state.session(&id)?;
    let map = object_body(&body, &["pair_id", "winner"])?;
    let pair_id = match map.get("pair_id") {
        Some(Value::String(p)) => p.clone(),
        Some(_) => return Err(ApiError::bad_field("pair_id", "pair_id must be a string")),
        None => return Err(ApiError::bad_field("pair_id", "missing pair_id")),
    };
    let winner = match map.get("winner").and_then(Value::as_str) {
        Some("a") => Side::A,
        Some("b") => Side::B,
        _ => {
            return Err(ApiError::bad_field(
                "winner",
                "winner must be \"a\" or \"b\"",
            ))
        }
    };
    let mut s = lock(&session);
    let Some(issued) = s.issued.iter().find(|p| p.pair_id == pair_id).cloned() else {
        return Err(ApiError {
            code: "unknown_pair",
            ..ApiError::bad_field(
                "pair_id",
                format!("pair {pair_id:?} was not issued by this session"),
            )
        });
    };
    if let Some(existing) = s.labels.iter().find(|l| l.pair_id == pair_id) {
        if existing.winner != winner {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "already_labeled",
                format!("pair {pair_id:?} already labeled with a different winner"),
            ));
        }
        let n = s.labels.len();
        return Ok(Json(json!({ "label_count": n, "duplicate": true })).into_response());
    }
    let record = LabelRecord {
        pair_id,
        a: issued.a,
        b: issued.b,
        winner,
        source: LabelSource::Human,
        timestamp: now_ms(),
    };
    // Write-ahead: the label is on disk before the client hears about it.
    append_label(&s.labels_path(), &record).map_err(ApiError::internal)?;
    s.labels.push(record);
    let n = s.labels.len();
    Ok(Json(json!({ "label_count": n, "duplicate": false })).into_response())
}

async fn start_adapt(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult {
    let session = state.session(&id)?;
    let map = object_body(&body, &["n_adapt", "u", "v"])?;
    let planner = state.0.planner.clone();
    let mut config: InversionConfig = planner.config.inversion;
    if let Some(v) = map.get("n_adapt").filter(|v| !v.is_null()) {
        match v.as_u64() {
            Some(n) if (1..=MAX_N_ADAPT).contains(&n) => config.n_adapt = n as usize,
            _ => {
                return Err(ApiError::bad_field(
                    "n_adapt",
                    format!("n_adapt must be an integer in 1..={MAX_N_ADAPT}"),
                ))
            }
        }
    }
    let mut weights = planner.config.guidance;
    if let Some(u) = opt_f64(&map, "u")? {
        weights.u = u;
    }
    if let Some(v) = opt_f64(&map, "v")? {
        weights.v = v;
    }

    let (job_id, records) = {
        let mut s = lock(&session);
        if s.labels.is_empty() {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "no_labels",
                "no labels: label at least one pair before adapting",
            ));
        }
        if let Job::Running { job_id, .. } = &s.job {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "job_running",
                format!("adaptation {job_id} is still running"),
            ));
        }
        s.jobs_started += 1;
        let job_id = format!("{id}-job{}", s.jobs_started);
        s.job = Job::Running {
            job_id: job_id.clone(),
            step: 0,
            n_adapt: config.n_adapt,
            loss: None,
        };
        (job_id, s.labels.clone())
    };

    let corpus = state.0.corpus.clone();
    let job = job_id.clone();
    let session_for_job = session.clone();
    tokio::task::spawn_blocking(move || {
        let progress = session_for_job.clone();
        let result = adapt(&planner, &records, &corpus, &config, |step| {
            if step.step % PROGRESS_EVERY == 0 || step.step == config.n_adapt {
                if let Job::Running { step: s, loss, .. } = &mut lock(&progress).job {
                    *s = step.step;
                    *loss = Some(step.loss);
                }
            }
        });
        let mut s = lock(&session_for_job);
        match result {
            Ok(latents) => {
                let adapted = SessionAdapted {
                    job_id: job.clone(),
                    weights,
                    latents,
                };
                let saved = serde_json::to_vec_pretty(&adapted)
                    .map_err(std::io::Error::other)
                    .and_then(|bytes| write_synced(&s.dir.join("adapted.json"), &bytes));
                match saved {
                    Ok(()) => {
                        s.adapted = Some(adapted);
                        s.samples.clear();
                        s.job = Job::Done { job_id: job };
                    }
                    Err(e) => {
                        s.job = Job::Failed {
                            job_id: job,
                            message: e.to_string(),
                        }
                    }
                }
            }
            Err(e) => {
                tracing::warn!(error = %e, "adaptation failed");
                s.job = Job::Failed {
                    job_id: job,
                    message: e.to_string(),
                };
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))).into_response())
}

async fn adapt_status(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let session = state.session(&id)?;
    let s = lock(&session);
    let labels = s.labels.len();
    let body = match &s.job {
        Job::Idle => json!({ "state": "idle", "step": 0, "loss": null, "label_count": labels }),
        Job::Running {
            job_id,
            step,
            n_adapt,
            loss,
        } => json!({
            "state": "running", "job_id": job_id, "step": step, "n_adapt": n_adapt,
            "loss": loss, "label_count": labels,
        }),
        Job::Done { job_id } => {
            let a = s.adapted.as_ref().expect("done implies adapted");
            json!({
                "state": "done", "job_id": job_id, "step": a.latents.inversion.n_adapt,
                "n_adapt": a.latents.inversion.n_adapt, "loss": a.latents.final_loss,
                "label_count": labels, "n_labels_used": a.latents.n_labels,
            })
        }
        Job::Failed { job_id, message } => json!({
            "state": "failed", "job_id": job_id, "step": 0, "loss": null,
            "message": message, "label_count": labels,
        }),
    };
    Ok(Json(body).into_response())
}

fn query_u64(q: &HashMap<String, String>, field: &str) -> Result<Option<u64>, ApiError> {
    q.get(field)
        .map(|v| {
            v.parse::<u64>().map_err(|_| {
                ApiError::bad_field(field, format!("{field} must be a non-negative integer"))
            })
        })
        .transpose()
}

async fn samples(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult {
    let session = state.session(&id)?;
    if let Some(k) = q.keys().find(|k| !["n", "seed"].contains(&k.as_str())) {
        return Err(ApiError::bad_field(
            k,
            format!("unknown query parameter {k:?}"),
        ));
    }
    let n = query_u64(&q, "n")?.unwrap_or(DEFAULT_SAMPLES as u64) as usize;
    if n == 0 || n > MAX_SAMPLES {
        return Err(ApiError::bad_field(
            "n",
            format!("n must lie in 1..={MAX_SAMPLES}"),
        ));
    }
    let seed = query_u64(&q, "seed")?.unwrap_or(0);
    let adapted = {
        let s = lock(&session);
        if let Some(cached) = s.samples.get(&(n, seed)) {
            return Ok(Json(cached.as_ref().clone()).into_response());
        }
        s.adapted.clone().ok_or_else(|| {
            ApiError::new(
                StatusCode::CONFLICT,
                "not_adapted",
                "no finished adaptation for this session",
            )
        })?
    };
    let planner = state.0.planner.clone();
    let drawn: Vec<Array2<f64>> = tokio::task::spawn_blocking(move || {
        planner.sample(
            Guidance::Dual {
                z_w: &adapted.latents.z_w,
                z_l: &adapted.latents.z_l,
                weights: adapted.weights,
            },
            n,
            seed,
        )
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(ApiError::internal)?;
    let sd = state.0.planner.state_dim();
    let list: Vec<Value> = drawn
        .iter()
        .map(|m| {
            let mut t = trajectory_json(m.view(), sd);
            t["rewards"] = rewards_json(m.view(), sd);
            t
        })
        .collect();
    let body = Arc::new(json!({ "session_id": id, "n": n, "seed": seed, "samples": list }));
    lock(&session).samples.insert((n, seed), body.clone());
    Ok(Json(body.as_ref().clone()).into_response())
}
