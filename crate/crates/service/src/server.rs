//! HTTP + WebSocket API over a [`ModelStore`].

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use fdvv_core::actuation::ActuationTable;
use fdvv_core::bspline::{BSplineCurve, CurveError};
use fdvv_core::compensation::{compensate_model, CompensationOptions};
use fdvv_core::model::{FdvvModel, FieldError};
use fdvv_core::optimizer::{optimize_with, BoConfig, Difficulty, RunConfig, SimulatedUser};
use fdvv_core::plant::VirtualPlant;
use fdvv_core::render::{run_press, PressTrajectory, RenderError, SimConfig};
use fdvv_core::vibration::{generate_templates, BurstFeatures, WaveTemplate};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::press::PressParams;
use crate::store::{Entry, ModelStore};

/// Largest optimization budget a request may ask for.
pub const MAX_BUDGET: usize = 500;

pub struct AppState {
    store: Mutex<ModelStore>,
    jobs: Mutex<BTreeMap<u64, Job>>,
    sessions: Mutex<BTreeMap<u64, RenderSession>>,
    next_id: AtomicU64,
}

pub type Shared = Arc<AppState>;

impl AppState {
    pub fn new(store: ModelStore) -> Shared {
        Arc::new(Self {
            store: Mutex::new(store),
            jobs: Mutex::new(BTreeMap::new()),
            sessions: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    fn fresh_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }

    fn update_job(&self, id: u64, f: impl FnOnce(&mut Job)) {
        if let Some(j) = self.jobs.lock().unwrap().get_mut(&id) {
            f(j);
        }
    }
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/models", get(list_models).post(create_model))
        .route("/models/{id}", get(get_model))
        .route("/models/{id}/control-points", put(put_control_points))
        .route("/models/{id}/compensate", post(start_compensation))
        .route("/jobs/{id}", get(get_job))
        .route("/simulate", post(simulate))
        .route("/vibration/{id}/rate", post(rate_vibration))
        .route("/vibration/{id}/templates", get(list_templates))
        .route("/optimize", post(start_optimization))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/ws/sessions/{id}", get(session_socket))
        .with_state(state)
}

// errors

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    Conflict { current: u64 },
    Invalid(Vec<FieldError>),
    Internal(String),
}

impl ApiError {
    fn field(field: &str, message: impl Into<String>) -> Self {
        ApiError::Invalid(vec![FieldError::new(field, message)])
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::NotFound(what) => (StatusCode::NOT_FOUND, json!({ "error": format!("{what} not found") })),
            ApiError::Conflict { current } => (
                StatusCode::CONFLICT,
                json!({ "error": "stale revision", "current_revision": current }),
            ),
            ApiError::Invalid(fields) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({ "error": "validation failed", "fields": fields }),
            ),
            ApiError::Internal(msg) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": msg })),
        };
        (status, Json(body)).into_response()
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::Internal(format!("workspace write failed: {e}"))
    }
}

impl From<RenderError> for ApiError {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::Config(fields) => ApiError::Invalid(fields),
            other => ApiError::field("simulation", other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn entry(state: &AppState, id: &str) -> ApiResult<Entry> {
    state
        .store
        .lock()
        .unwrap()
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::NotFound(format!("model {id:?}")))
}

fn plant(state: &AppState, id: &str) -> ApiResult<VirtualPlant> {
    state
        .store
        .lock()
        .unwrap()
        .plant(id)
        .ok_or_else(|| ApiError::field("plant_id", format!("unknown plant {id:?}")))
}

fn default_plant_id() -> String {
    "default".into()
}

// models

#[derive(Serialize)]
struct ModelSummary {
    button_id: String,
    revision: u64,
    travel_range_mm: f64,
    velocities: Vec<f64>,
    has_actuation: bool,
}

async fn list_models(State(state): State<Shared>) -> Json<Vec<ModelSummary>> {
    let store = state.store.lock().unwrap();
    Json(
        store
            .ids()
            .filter_map(|id| store.get(id).map(|e| (id, e)))
            .map(|(id, e)| ModelSummary {
                button_id: id.clone(),
                revision: e.revision,
                travel_range_mm: e.model.travel_range_mm,
                velocities: e.model.velocities(),
                has_actuation: e.actuation.is_some(),
            })
            .collect(),
    )
}

async fn create_model(State(state): State<Shared>, Json(model): Json<FdvvModel>) -> ApiResult<(StatusCode, Json<Entry>)> {
    model.validate().map_err(ApiError::Invalid)?;
    let mut store = state.store.lock().unwrap();
    let id = model.button_id.clone();
    if let Some(e) = store.get(&id) {
        return Err(ApiError::Conflict { current: e.revision });
    }
    match store.insert(&id, model)? {
        Some(_) => Ok((StatusCode::CREATED, Json(store.get(&id).cloned().expect("just inserted")))),
        None => Err(ApiError::field(
            "button_id",
            "must be a plain file name (letters, digits, '-', '_', '.')",
        )),
    }
}

async fn get_model(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Entry>> {
    entry(&state, &id).map(Json)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotations {
    pub travel_range_mm: Option<f64>,
    pub activation_point_mm: Option<f64>,
    pub vibration_onset_mm: Option<f64>,
}

#[derive(Debug, Deserialize)]
pub struct ControlPointsEdit {
    pub revision: u64,
    /// Press curve to edit; the slowest when absent.
    #[serde(default)]
    pub velocity_mm_s: Option<f64>,
    pub control_points: Vec<[f64; 2]>,
    #[serde(default)]
    pub annotations: Annotations,
}

/// Applies an edit to a copy of `model`. Curves other than the edited one are
/// stretched along displacement when the travel range changes.
pub fn apply_edit(model: &FdvvModel, edit: &ControlPointsEdit) -> Result<FdvvModel, Vec<FieldError>> {
    let mut m = model.clone();
    let idx = match edit.velocity_mm_s {
        None => 0,
        Some(v) => m
            .press_curves
            .iter()
            .position(|c| c.velocity_mm_s == v)
            .ok_or_else(|| vec![FieldError::new("velocity_mm_s", format!("no press curve at {v} mm/s"))])?,
    };
    let old = &m.press_curves[idx].curve;
    if edit.control_points.len() != old.len() {
        return Err(vec![FieldError::new(
            "control_points",
            format!("expected {} points, got {}", old.len(), edit.control_points.len()),
        )]);
    }
    let curve = BSplineCurve::new(old.degree(), edit.control_points.clone()).map_err(|e| {
        let field = match e {
            CurveError::Unordered { index, .. } | CurveError::NonFinite(index) => format!("control_points[{index}]"),
            _ => "control_points".into(),
        };
        vec![FieldError::new(field, e.to_string())]
    })?;
    let a = &edit.annotations;
    if let Some(t) = a.travel_range_mm {
        let scale = t / m.travel_range_mm;
        if scale.is_finite() && scale > 0.0 && scale != 1.0 {
            let stretch = |c: &BSplineCurve| {
                let pts = c.control_points().iter().map(|p| [p[0] * scale, p[1]]).collect();
                BSplineCurve::new(c.degree(), pts).expect("scaling keeps order")
            };
            for (i, c) in m.press_curves.iter_mut().enumerate() {
                if i != idx {
                    c.curve = stretch(&c.curve);
                }
            }
            if let Some(rc) = &mut m.release_curves {
                for c in rc {
                    c.curve = stretch(&c.curve);
                }
            }
        }
        m.travel_range_mm = t;
    }
    m.press_curves[idx].curve = curve;
    if let Some(ap) = a.activation_point_mm {
        m.activation_point_mm = ap;
    }
    if let Some(o) = a.vibration_onset_mm {
        match &mut m.vibration {
            Some(v) => v.onset_mm = o,
            None => {
                return Err(vec![FieldError::new(
                    "annotations.vibration_onset_mm",
                    "model has no vibration descriptor",
                )])
            }
        }
    }
    m.validate()?;
    Ok(m)
}

async fn put_control_points(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Json(edit): Json<ControlPointsEdit>,
) -> ApiResult<Json<Entry>> {
    // one lock across check and write: two edits at one revision cannot both land
    let mut store = state.store.lock().unwrap();
    let e = store.get(&id).ok_or_else(|| ApiError::NotFound(format!("model {id:?}")))?;
    if e.revision != edit.revision {
        return Err(ApiError::Conflict { current: e.revision });
    }
    let model = apply_edit(&e.model, &edit).map_err(ApiError::Invalid)?;
    store.replace_model(&id, model)?;
    Ok(Json(store.get(&id).cloned().expect("present")))
}

// jobs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct Job {
    pub id: u64,
    pub kind: &'static str,
    pub status: JobStatus,
    /// Fraction of the work finished, in [0, 1].
    pub progress: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn new_job(state: &AppState, kind: &'static str) -> u64 {
    let id = state.fresh_id();
    state.jobs.lock().unwrap().insert(
        id,
        Job {
            id,
            kind,
            status: JobStatus::Queued,
            progress: 0.0,
            result: None,
            error: None,
        },
    );
    id
}

fn finish_job(state: &AppState, id: u64, outcome: Result<Value, String>) {
    state.update_job(id, |j| {
        j.progress = 1.0;
        match outcome {
            Ok(v) => {
                j.status = JobStatus::Done;
                j.result = Some(v);
            }
            Err(e) => {
                j.status = JobStatus::Failed;
                j.error = Some(e);
            }
        }
    });
}

fn accepted(id: u64) -> (StatusCode, Json<Value>) {
    (
        StatusCode::ACCEPTED,
        Json(json!({ "job_id": id, "status_url": format!("/jobs/{id}") })),
    )
}

async fn get_job(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    id.parse::<u64>()
        .ok()
        .and_then(|n| state.jobs.lock().unwrap().get(&n).cloned())
        .map(Json)
        .ok_or_else(|| ApiError::NotFound(format!("job {id:?}")))
}

#[derive(Debug, Deserialize)]
pub struct CompensateRequest {
    #[serde(default = "default_plant_id")]
    pub plant_id: String,
    /// Model velocities when absent.
    #[serde(default)]
    pub velocities: Option<Vec<f64>>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub options: Option<CompensationOptions>,
}

fn default_runs() -> usize {
    4
}

async fn start_compensation(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<CompensateRequest>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let e = entry(&state, &id)?;
    let plant = plant(&state, &req.plant_id)?;
    let velocities = req.velocities.unwrap_or_else(|| e.model.velocities());
    if velocities.is_empty() || velocities.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(ApiError::field("velocities", "need at least one positive velocity"));
    }
    if !(1..=16).contains(&req.runs) {
        return Err(ApiError::field("runs", "must be in [1, 16]"));
    }
    let opts = req.options.unwrap_or_default();
    let job = new_job(&state, "compensate");
    let worker = state.clone();
    tokio::task::spawn_blocking(move || {
        worker.update_job(job, |j| j.status = JobStatus::Running);
        let outcome = compensate_model(&e.model, &plant, &velocities, req.runs, &opts)
            .map_err(|err| err.to_string())
            .and_then(|(table, reports)| {
                let mut store = worker.store.lock().unwrap();
                // an edit made while the job ran makes this table stale
                let current = store.get(&id).map(|x| x.revision);
                let stored = if current == Some(e.revision) {
                    Some(store.set_actuation(&id, table.clone()).map_err(|err| err.to_string())?)
                } else {
                    None
                };
                let errors: Vec<Value> = reports
                    .iter()
                    .map(|r| json!({ "velocity_mm_s": r.velocity_mm_s, "errors": r.runs.iter().map(|x| &x.errors).collect::<Vec<_>>() }))
                    .collect();
                Ok(json!({ "model_id": id, "revision": stored, "stored": stored.is_some(), "actuation": table, "errors": errors }))
            });
        if let Err(msg) = &outcome {
            log::warn!("compensation job {job} failed: {msg}");
        }
        finish_job(&worker, job, outcome);
    });
    Ok(accepted(job))
}

#[derive(Debug, Default, Deserialize)]
pub struct OptimizeRequest {
    pub budget: Option<usize>,
    pub trials_per_eval: Option<usize>,
    pub difficulty: Option<Difficulty>,
    pub user: Option<SimulatedUser>,
    pub bo: Option<BoConfig>,
    pub seed: Option<u64>,
}

impl OptimizeRequest {
    pub fn into_config(self) -> Result<RunConfig, Vec<FieldError>> {
        let d = RunConfig::default();
        let c = RunConfig {
            budget: self.budget.unwrap_or(d.budget),
            trials_per_eval: self.trials_per_eval.unwrap_or(d.trials_per_eval),
            difficulty: self.difficulty.unwrap_or(d.difficulty),
            user: self.user.unwrap_or(d.user),
            bo: self.bo.unwrap_or(d.bo),
            seed: self.seed.unwrap_or(d.seed),
        };
        let mut errs = Vec::new();
        if !(1..=MAX_BUDGET).contains(&c.budget) {
            errs.push(FieldError::new("budget", format!("must be in [1, {MAX_BUDGET}]")));
        }
        if !(1..=10_000).contains(&c.trials_per_eval) {
            errs.push(FieldError::new("trials_per_eval", "must be in [1, 10000]"));
        }
        if errs.is_empty() {
            Ok(c)
        } else {
            Err(errs)
        }
    }
}

async fn start_optimization(
    State(state): State<Shared>,
    Json(req): Json<OptimizeRequest>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let config = req.into_config().map_err(ApiError::Invalid)?;
    let job = new_job(&state, "optimize");
    let worker = state.clone();
    tokio::task::spawn_blocking(move || {
        worker.update_job(job, |j| j.status = JobStatus::Running);
        let budget = config.budget as f64;
        let outcome = optimize_with(&config, |h| {
            worker.update_job(job, |j| j.progress = (h.iteration + 1) as f64 / budget);
        })
        .map(|r| json!({ "best": r.best, "best_value": r.best_value, "history": r.history }))
        .map_err(|e| e.to_string());
        finish_job(&worker, job, outcome);
    });
    Ok(accepted(job))
}

// simulation

#[derive(Debug, Deserialize)]
pub struct SimulateRequest {
    /// Stored model supplying the target and, unless given, the actuation.
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub model: Option<FdvvModel>,
    #[serde(default)]
    pub actuation: Option<ActuationTable>,
    #[serde(default = "default_plant_id")]
    pub plant_id: String,
    #[serde(default)]
    pub trajectory: Option<PressTrajectory>,
    #[serde(default)]
    pub press: Option<PressParams>,
    #[serde(default)]
    pub config: Option<SimConfig>,
}

struct Prepared {
    target: Option<FdvvModel>,
    table: ActuationTable,
    config: SimConfig,
    plant: VirtualPlant,
}

fn prepare(
    state: &AppState,
    model_id: Option<&str>,
    model: Option<FdvvModel>,
    actuation: Option<ActuationTable>,
    plant_id: &str,
    config: Option<SimConfig>,
) -> ApiResult<Prepared> {
    let stored = model_id.map(|id| entry(state, id)).transpose()?;
    if let Some(m) = &model {
        m.validate().map_err(ApiError::Invalid)?;
    }
    let target = model.or_else(|| stored.as_ref().map(|e| e.model.clone()));
    let table = actuation
        .or_else(|| stored.and_then(|e| e.actuation))
        .ok_or_else(|| ApiError::field("actuation", "no actuation table; run compensation first or send one"))?;
    table.validate().map_err(|e| ApiError::field("actuation", e.to_string()))?;
    let config = match config {
        Some(c) => c,
        None => match &target {
            Some(m) => SimConfig::for_model(m),
            None => SimConfig::for_table(&table),
        },
    };
    config.validate()?;
    if let Some(m) = &target {
        if (m.travel_range_mm - table.travel_range_mm).abs() > 1e-9 {
            return Err(ApiError::field(
                "actuation.travel_range_mm",
                format!(
                    "actuation travel {} mm differs from model travel {} mm",
                    table.travel_range_mm, m.travel_range_mm
                ),
            ));
        }
    }
    if (config.travel_range_mm - table.travel_range_mm).abs() > 1e-9 {
        return Err(ApiError::field("config.travel_range_mm", "differs from the actuation travel range"));
    }
    Ok(Prepared {
        target,
        table,
        config,
        plant: plant(state, plant_id)?,
    })
}

fn trajectory_of(
    trajectory: Option<PressTrajectory>,
    press: Option<PressParams>,
    travel: f64,
) -> ApiResult<PressTrajectory> {
    match (trajectory, press) {
        (Some(t), _) => {
            t.validate()?;
            Ok(t)
        }
        (None, Some(p)) => p.trajectory(travel).map_err(|m| ApiError::field("press", m)),
        (None, None) => Err(ApiError::field("trajectory", "send a trajectory or a press")),
    }
}

async fn simulate(State(state): State<Shared>, Json(req): Json<SimulateRequest>) -> ApiResult<Response> {
    let p = prepare(
        &state,
        req.model_id.as_deref(),
        req.model,
        req.actuation,
        &req.plant_id,
        req.config,
    )?;
    let traj = trajectory_of(req.trajectory, req.press, p.table.travel_range_mm)?;
    let trace = tokio::task::spawn_blocking(move || run_press(&p.table.curves, p.target.as_ref(), &traj, &p.config, &p.plant))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(trace).into_response())
}

// vibration

fn bank(model: &FdvvModel) -> Vec<WaveTemplate> {
    model
        .vibration
        .as_ref()
        .map(|v| {
            generate_templates(BurstFeatures {
                duration_ms: v.duration_ms,
                frequency_hz: v.frequency_hz,
            })
        })
        .unwrap_or_default()
}

#[derive(Debug, Deserialize)]
pub struct RateRequest {
    pub template_id: String,
    pub score: i64,
    /// Slowest press curve when absent.
    #[serde(default)]
    pub velocity_mm_s: Option<f64>,
}

#[derive(Debug, Deserialize)]
pub struct TemplatesQuery {
    #[serde(default)]
    pub velocity_mm_s: Option<f64>,
}

fn ratings_view(store: &ModelStore, id: &str, model: &FdvvModel, velocity: f64) -> Value {
    let templates = bank(model);
    let best = model.vibration.as_ref().and_then(|v| {
        store.ratings.best_template(
            id,
            velocity,
            &templates,
            BurstFeatures {
                duration_ms: v.duration_ms,
                frequency_hz: v.frequency_hz,
            },
        )
    });
    let ratings: Vec<_> = store.ratings.ratings_for(id, velocity).cloned().collect();
    json!({ "button_id": id, "velocity_mm_s": velocity, "templates": templates, "ratings": ratings, "best_template": best })
}

fn slowest(model: &FdvvModel) -> f64 {
    model.velocities().first().copied().unwrap_or(0.0)
}

async fn rate_vibration(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<RateRequest>,
) -> ApiResult<Json<Value>> {
    let mut store = state.store.lock().unwrap();
    let model = store
        .get(&id)
        .map(|e| e.model.clone())
        .ok_or_else(|| ApiError::NotFound(format!("model {id:?}")))?;
    if !bank(&model).iter().any(|t| t.id == req.template_id) {
        return Err(ApiError::field(
            "template_id",
            format!("{:?} is not in this button's template bank", req.template_id),
        ));
    }
    let velocity = req.velocity_mm_s.unwrap_or_else(|| slowest(&model));
    store
        .ratings
        .rate(&id, velocity, &req.template_id, req.score)
        .map_err(|e| ApiError::field("score", e.to_string()))?;
    store.save_ratings()?;
    Ok(Json(ratings_view(&store, &id, &model, velocity)))
}

async fn list_templates(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<TemplatesQuery>,
) -> ApiResult<Json<Value>> {
    let store = state.store.lock().unwrap();
    let model = store
        .get(&id)
        .map(|e| e.model.clone())
        .ok_or_else(|| ApiError::NotFound(format!("model {id:?}")))?;
    let velocity = q.velocity_mm_s.unwrap_or_else(|| slowest(&model));
    Ok(Json(ratings_view(&store, &id, &model, velocity)))
}

// render sessions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Idle,
    Running,
    Done,
}

struct RenderSession {
    model_id: String,
    plant_id: String,
    target: Option<FdvvModel>,
    table: ActuationTable,
    config: SimConfig,
    plant: VirtualPlant,
    status: SessionStatus,
    ticks_sent: u64,
}

#[derive(Debug, Deserialize)]
pub struct SessionRequest {
    pub model_id: String,
    #[serde(default = "default_plant_id")]
    pub plant_id: String,
    #[serde(default)]
    pub actuation: Option<ActuationTable>,
    #[serde(default)]
    pub config: Option<SimConfig>,
}

async fn create_session(
    State(state): State<Shared>,
    Json(req): Json<SessionRequest>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let p = prepare(&state, Some(&req.model_id), None, req.actuation, &req.plant_id, req.config)?;
    let id = state.fresh_id();
    state.sessions.lock().unwrap().insert(
        id,
        RenderSession {
            model_id: req.model_id,
            plant_id: req.plant_id,
            target: p.target,
            table: p.table,
            config: p.config,
            plant: p.plant,
            status: SessionStatus::Idle,
            ticks_sent: 0,
        },
    );
    Ok((
        StatusCode::CREATED,
        Json(json!({ "session_id": id, "ws_url": format!("/ws/sessions/{id}") })),
    ))
}

fn session_id(raw: &str) -> ApiResult<u64> {
    raw.parse().map_err(|_| ApiError::NotFound(format!("session {raw:?}")))
}

async fn get_session(State(state): State<Shared>, Path(raw): Path<String>) -> ApiResult<Json<Value>> {
    let id = session_id(&raw)?;
    let sessions = state.sessions.lock().unwrap();
    let s = sessions.get(&id).ok_or_else(|| ApiError::NotFound(format!("session {raw:?}")))?;
    Ok(Json(json!({
        "session_id": id,
        "model_id": s.model_id,
        "plant_id": s.plant_id,
        "status": s.status,
        "ticks_sent": s.ticks_sent,
        "config": s.config,
    })))
}

/// Client message: one press per message.
#[derive(Debug, Deserialize)]
pub struct PressCommand {
    #[serde(default)]
    pub press: Option<PressParams>,
    #[serde(default)]
    pub trajectory: Option<PressTrajectory>,
    /// Pace ticks at 1 ms wall time instead of sending them at once.
    #[serde(default)]
    pub realtime: bool,
}

async fn session_socket(
    State(state): State<Shared>,
    Path(raw): Path<String>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let id = session_id(&raw)?;
    if !state.sessions.lock().unwrap().contains_key(&id) {
        return Err(ApiError::NotFound(format!("session {raw:?}")));
    }
    Ok(ws.on_upgrade(move |socket| stream_session(state, id, socket)))
}

async fn send_json(socket: &mut WebSocket, v: &Value) -> bool {
    socket.send(Message::Text(v.to_string().into())).await.is_ok()
}

async fn stream_session(state: Shared, id: u64, mut socket: WebSocket) {
    while let Some(Ok(msg)) = socket.recv().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Close(_) => break,
            _ => continue,
        };
        let cmd: PressCommand = match serde_json::from_str(&text) {
            Ok(c) => c,
            Err(e) => {
                if !send_json(&mut socket, &json!({ "error": format!("bad command: {e}") })).await {
                    break;
                }
                continue;
            }
        };
        let claimed = {
            let mut sessions = state.sessions.lock().unwrap();
            match sessions.get_mut(&id) {
                Some(s) if s.status == SessionStatus::Running => Err("a press is already running in this session".to_string()),
                Some(s) => {
                    s.status = SessionStatus::Running;
                    Ok((s.target.clone(), s.table.clone(), s.config.clone(), s.plant.clone()))
                }
                None => Err("session closed".to_string()),
            }
        };
        let (target, table, config, plant) = match claimed {
            Ok(x) => x,
            Err(e) => {
                if !send_json(&mut socket, &json!({ "error": e })).await {
                    break;
                }
                continue;
            }
        };
        let trace = trajectory_of(cmd.trajectory, cmd.press, table.travel_range_mm)
            .map_err(|e| format!("{e:?}"))
            .and_then(|t| run_press(&table.curves, target.as_ref(), &t, &config, &plant).map_err(|e| e.to_string()));
        let mut sent = 0u64;
        let mut open = true;
        match trace {
            Ok(trace) => {
                let mut pace = tokio::time::interval(Duration::from_millis(1));
                for r in &trace.records {
                    if cmd.realtime {
                        pace.tick().await;
                    }
                    let line = serde_json::to_string(r).expect("tick serializes");
                    if socket.send(Message::Text(line.into())).await.is_err() {
                        open = false;
                        break;
                    }
                    sent += 1;
                }
                if open {
                    open = send_json(&mut socket, &json!({ "done": { "ticks": sent, "summary": trace.summary } })).await;
                }
            }
            Err(e) => open = send_json(&mut socket, &json!({ "error": e })).await,
        }
        if let Some(s) = state.sessions.lock().unwrap().get_mut(&id) {
            s.status = SessionStatus::Done;
            s.ticks_sent += sent;
        }
        if !open {
            break;
        }
    }
}
