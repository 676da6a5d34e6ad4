//! HTTP session service.
//!
//! Sessions live in memory; when a data directory is configured every
//! session is mirrored to `<data>/sessions/<id>/` (PLY geometry plus a JSON
//! record) and reloaded on startup. Mutating jobs are exclusive per session;
//! renders read an immutable snapshot of the last committed scene.

use std::collections::HashMap;
use std::convert::Infallible;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use d4d_core::camera::{Camera, CameraRing, Pinhole};
use d4d_core::compose::{PhysicsConfig, Placement, PoseParams, PosePrior, PoseTraceRow};
use d4d_core::io;
use d4d_core::motion::{BundleConfig, Trajectory3D, ViewTrack};
use d4d_core::pointcloud::{FloorParams, FloorPlane, PointCloud};
use d4d_core::surfel::SurfelCloud;
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::watch;

use crate::error::Failure;
use crate::pipeline::{self, CameraRequest, PoseReport};

// ---- errors --------------------------------------------------------------

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

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} `{id}`"))
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }
}

impl From<Failure> for ApiError {
    fn from(f: Failure) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, f.line())
    }
}

impl From<d4d_core::Error> for ApiError {
    fn from(e: d4d_core::Error) -> Self {
        Failure::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

// ---- state ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectStatus {
    Placed,
    Optimizing,
    Optimized,
}

struct ObjectEntry {
    id: String,
    prior: PosePrior,
    source: Arc<PointCloud>,
    placement: Placement,
    status: ObjectStatus,
}

struct TrajectoryEntry {
    id: String,
    points: Vec<[f64; 3]>,
    trajectory: Trajectory3D,
    ring: CameraRing,
    fov: f64,
}

struct Session {
    id: String,
    scene: Arc<SurfelCloud>,
    points: Arc<PointCloud>,
    floor: FloorPlane,
    /// Scene with every optimized object fused in; what renders show.
    committed: Arc<SurfelCloud>,
    objects: Vec<ObjectEntry>,
    trajectories: Vec<TrajectoryEntry>,
    jobs: Vec<String>,
    active_job: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Running,
    Done,
    Failed,
    Cancelled,
}

impl JobState {
    fn is_terminal(self) -> bool {
        self != JobState::Running
    }
}

struct JobProgress {
    state: JobState,
    rows: Vec<PoseTraceRow>,
    report: Option<PoseReport>,
    error: Option<String>,
}

pub struct Job {
    id: String,
    session: String,
    object: String,
    progress: Mutex<JobProgress>,
    cancel: AtomicBool,
    changed: watch::Sender<()>,
}

impl Job {
    fn push(&self, row: PoseTraceRow) {
        self.progress.lock().expect("job lock").rows.push(row);
        self.changed.send_replace(());
    }

    fn finish(&self, state: JobState, report: Option<PoseReport>, error: Option<String>) {
        {
            let mut p = self.progress.lock().expect("job lock");
            p.state = state;
            p.report = report;
            p.error = error;
        }
        self.changed.send_replace(());
    }

    fn status_json(&self) -> serde_json::Value {
        let p = self.progress.lock().expect("job lock");
        json!({
            "id": self.id,
            "kind": "pose-optimize",
            "session": self.session,
            "object": self.object,
            "state": p.state,
            "iterations": p.rows.len(),
            "result": p.report,
            "error": p.error,
        })
    }
}

#[derive(Default)]
struct Store {
    sessions: HashMap<String, Session>,
    /// object id → session id
    objects: HashMap<String, String>,
    /// trajectory id → session id
    trajectories: HashMap<String, String>,
    jobs: HashMap<String, Arc<Job>>,
}

pub struct AppState {
    store: Mutex<Store>,
    data_dir: Option<PathBuf>,
    files_root: PathBuf,
}

pub type SharedState = Arc<AppState>;

fn new_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

impl AppState {
    /// Service state. File references in requests resolve against
    /// `data_dir` when set, else against the working directory; sessions
    /// persisted under `data_dir` are reloaded.
    pub fn open(data_dir: Option<PathBuf>) -> Result<SharedState, Failure> {
        let files_root = data_dir.clone().unwrap_or_else(|| PathBuf::from("."));
        let state = AppState {
            store: Mutex::new(Store::default()),
            data_dir,
            files_root,
        };
        state.reload()?;
        Ok(Arc::new(state))
    }

    fn resolve(&self, reference: &str) -> PathBuf {
        self.files_root.join(reference)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Store> {
        self.store.lock().expect("store lock")
    }

    fn session_dir(&self, id: &str) -> Option<PathBuf> {
        self.data_dir.as_ref().map(|d| d.join("sessions").join(id))
    }
}

// ---- persistence ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ObjectRecord {
    id: String,
    prior: PosePrior,
    pose: PoseParams,
    status: ObjectStatus,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    id: String,
    points: Vec<[f64; 3]>,
    ring: CameraRing,
    fov: f64,
}

#[derive(Serialize, Deserialize)]
struct SessionRecord {
    id: String,
    floor: FloorPlane,
    objects: Vec<ObjectRecord>,
    trajectories: Vec<TrajectoryRecord>,
}

const SESSION_RECORD: &str = "session.json";

impl AppState {
    fn persist_geometry(&self, s: &Session) -> Result<(), Failure> {
        let Some(dir) = self.session_dir(&s.id) else { return Ok(()) };
        fs::create_dir_all(&dir).map_err(|e| Failure::input(dir.display(), e))?;
        let p = dir.join("scene.ply");
        io::save_surfel_ply(&s.scene, &p).map_err(|e| Failure::input(p.display(), e))?;
        let p = dir.join("points.ply");
        io::save_point_ply(&s.points, &p).map_err(|e| Failure::input(p.display(), e))
    }

    fn persist_object(&self, sid: &str, o: &ObjectEntry) -> Result<(), Failure> {
        let Some(dir) = self.session_dir(sid) else { return Ok(()) };
        let p = dir.join(format!("object_{}.ply", o.id));
        io::save_point_ply(&o.source, &p).map_err(|e| Failure::input(p.display(), e))
    }

    fn persist_record(&self, s: &Session) -> Result<(), Failure> {
        let Some(dir) = self.session_dir(&s.id) else { return Ok(()) };
        let record = SessionRecord {
            id: s.id.clone(),
            floor: s.floor,
            objects: s
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    id: o.id.clone(),
                    prior: o.prior,
                    pose: o.placement.pose,
                    // an interrupted optimization restarts from its placement
                    status: if o.status == ObjectStatus::Optimizing { ObjectStatus::Placed } else { o.status },
                })
                .collect(),
            trajectories: s
                .trajectories
                .iter()
                .map(|t| TrajectoryRecord {
                    id: t.id.clone(),
                    points: t.points.clone(),
                    ring: t.ring.clone(),
                    fov: t.fov,
                })
                .collect(),
        };
        pipeline::write_json(&dir.join(SESSION_RECORD), &record)
    }

    fn reload(&self) -> Result<(), Failure> {
        let Some(root) = self.data_dir.as_ref().map(|d| d.join("sessions")) else { return Ok(()) };
        let Ok(entries) = fs::read_dir(&root) else { return Ok(()) };
        let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        dirs.sort();
        let mut store = self.lock();
        for dir in dirs.into_iter().filter(|d| d.join(SESSION_RECORD).is_file()) {
            let session = load_session(&dir)?;
            for o in &session.objects {
                store.objects.insert(o.id.clone(), session.id.clone());
            }
            for t in &session.trajectories {
                store.trajectories.insert(t.id.clone(), session.id.clone());
            }
            store.sessions.insert(session.id.clone(), session);
        }
        Ok(())
    }
}

fn load_session(dir: &Path) -> Result<Session, Failure> {
    let record: SessionRecord = pipeline::read_json(&dir.join(SESSION_RECORD))?;
    let scene = Arc::new(pipeline::read_surfels(&dir.join("scene.ply"))?);
    let points = Arc::new(pipeline::read_points(&dir.join("points.ply"))?);
    let mut objects = Vec::new();
    for o in record.objects {
        let source = Arc::new(pipeline::read_object(&dir.join(format!("object_{}.ply", o.id)))?);
        let mut placement = d4d_core::compose::place_initial(&source, &o.prior, &record.floor)?;
        placement.pose = o.pose;
        objects.push(ObjectEntry {
            id: o.id,
            prior: o.prior,
            source,
            placement,
            status: o.status,
        });
    }
    let mut trajectories = Vec::new();
    for t in record.trajectories {
        let trajectory = pipeline::TrajectoryFile { points: t.points.clone() }.trajectory()?;
        trajectories.push(TrajectoryEntry {
            id: t.id,
            points: t.points,
            trajectory,
            ring: t.ring,
            fov: t.fov,
        });
    }
    let mut s = Session {
        id: record.id,
        committed: scene.clone(),
        scene,
        points,
        floor: record.floor,
        objects,
        trajectories,
        jobs: Vec::new(),
        active_job: None,
    };
    s.committed = Arc::new(commit(&s)?);
    Ok(s)
}

/// Scene surfels with every optimized object fused in, in insertion order.
fn commit(s: &Session) -> Result<SurfelCloud, Failure> {
    let mut cloud = (*s.scene).clone();
    for o in s.objects.iter().filter(|o| o.status == ObjectStatus::Optimized) {
        cloud = pipeline::fuse_placement(&cloud, &o.placement)?;
    }
    Ok(cloud)
}

// ---- handlers ------------------------------------------------------------

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/render", get(render))
        .route("/sessions/{id}/objects", post(add_object))
        .route("/sessions/{id}/trajectory", post(add_trajectory))
        .route("/sessions/{id}/floor/pick", post(floor_pick))
        .route("/objects/{oid}/optimize", post(optimize))
        .route("/jobs/{jid}", get(job_status))
        .route("/jobs/{jid}/events", get(job_events))
        .route("/jobs/{jid}/cancel", post(cancel_job))
        .route("/bundles", post(bundles))
        .with_state(state)
}

#[derive(Deserialize)]
struct CreateSession {
    /// Surfel PLY reference.
    surfels: String,
    /// Point PLY with normals for composition; defaults to the surfel
    /// centers and normals.
    #[serde(default)]
    points: Option<String>,
    #[serde(default)]
    floor: Option<FloorPlane>,
    #[serde(default)]
    seed: u64,
}

async fn create_session(State(st): State<SharedState>, Json(req): Json<CreateSession>) -> ApiResult<impl IntoResponse> {
    let st2 = st.clone();
    let session = tokio::task::spawn_blocking(move || -> Result<Session, Failure> {
        let scene = pipeline::read_surfels(&st2.resolve(&req.surfels))?;
        let points = match &req.points {
            Some(p) => pipeline::read_points(&st2.resolve(p))?,
            None => pipeline::surfel_points(&scene)?,
        };
        let floor = match req.floor {
            Some(f) => f,
            None => pipeline::floor(
                &points,
                &FloorParams {
                    seed: req.seed,
                    ..Default::default()
                },
            )?,
        };
        let scene = Arc::new(scene);
        Ok(Session {
            id: new_id(),
            committed: scene.clone(),
            scene,
            points: Arc::new(points),
            floor,
            objects: Vec::new(),
            trajectories: Vec::new(),
            jobs: Vec::new(),
            active_job: None,
        })
    })
    .await
    .expect("session loader panicked")?;
    st.persist_geometry(&session)?;
    st.persist_record(&session)?;
    let body = json!({ "id": session.id, "floor": session.floor, "surfels": session.scene.len() });
    st.lock().sessions.insert(session.id.clone(), session);
    Ok((StatusCode::CREATED, Json(body)))
}

async fn get_session(State(st): State<SharedState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let store = st.lock();
    let s = store.sessions.get(&id).ok_or_else(|| ApiError::not_found("session", &id))?;
    Ok(Json(json!({
        "id": s.id,
        "floor": s.floor,
        "surfels": s.committed.len(),
        "objects": s.objects.iter().map(|o| json!({
            "id": o.id, "status": o.status, "pose": o.placement.pose, "prior": o.prior,
        })).collect::<Vec<_>>(),
        "trajectories": s.trajectories.iter().map(|t| &t.id).collect::<Vec<_>>(),
        "jobs": s.jobs,
        "active_job": s.active_job,
    })))
}

/// Query form of [`CameraRequest`]; `camera` is a JSON camera, `target` and
/// `background` are comma-separated triples.
#[derive(Deserialize, Default)]
pub struct RenderQuery {
    camera: Option<String>,
    ring: Option<usize>,
    azimuth: Option<f64>,
    elevation: Option<f64>,
    radius: Option<f64>,
    target: Option<String>,
    width: Option<usize>,
    height: Option<usize>,
    fov: Option<f64>,
    background: Option<String>,
}

fn triple(s: &str, what: &str) -> Result<[f64; 3], Failure> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Input(format!("{what}: {e}")))?;
    <[f64; 3]>::try_from(v).map_err(|_| Failure::Input(format!("{what} needs three comma-separated numbers")))
}

impl RenderQuery {
    fn request(&self) -> Result<(CameraRequest, [f64; 3]), Failure> {
        let camera = match &self.camera {
            Some(c) => Some(serde_json::from_str::<Camera>(c).map_err(|e| Failure::input("camera", e))?),
            None => None,
        };
        let req = CameraRequest {
            camera,
            ring: self.ring,
            azimuth: self.azimuth,
            elevation: self.elevation,
            radius: self.radius,
            target: self.target.as_deref().map(|t| triple(t, "target")).transpose()?,
            width: self.width,
            height: self.height,
            fov: self.fov,
        };
        let bg = self.background.as_deref().map(|b| triple(b, "background")).transpose()?;
        Ok((req, bg.unwrap_or([0.0; 3])))
    }
}

async fn render(
    State(st): State<SharedState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<RenderQuery>,
) -> ApiResult<Response> {
    let (req, bg) = q.request()?;
    let camera = req.resolve()?;
    let cloud = {
        let store = st.lock();
        store.sessions.get(&id).ok_or_else(|| ApiError::not_found("session", &id))?.committed.clone()
    };
    let png = tokio::task::spawn_blocking(move || pipeline::render_png(&cloud, &camera, bg))
        .await
        .expect("render panicked")?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Deserialize)]
struct AddObject {
    ply: String,
    prior: PosePrior,
}

async fn add_object(
    State(st): State<SharedState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<AddObject>,
) -> ApiResult<impl IntoResponse> {
    let floor = {
        let store = st.lock();
        store.sessions.get(&id).ok_or_else(|| ApiError::not_found("session", &id))?.floor
    };
    let path = st.resolve(&req.ply);
    let prior = req.prior;
    let (source, placement) = tokio::task::spawn_blocking(move || -> Result<_, Failure> {
        let source = pipeline::read_object(&path)?;
        let placement = d4d_core::compose::place_initial(&source, &prior, &floor)?;
        Ok((source, placement))
    })
    .await
    .expect("object loader panicked")?;
    let entry = ObjectEntry {
        id: new_id(),
        prior: req.prior,
        source: Arc::new(source),
        placement,
        status: ObjectStatus::Placed,
    };
    let body = json!({ "id": entry.id, "pose": entry.placement.pose, "up": entry.placement.up });
    let mut store = st.lock();
    let store = &mut *store;
    let s = store.sessions.get_mut(&id).ok_or_else(|| ApiError::not_found("session", &id))?;
    st.persist_object(&s.id, &entry)?;
    store.objects.insert(entry.id.clone(), s.id.clone());
    s.objects.push(entry);
    st.persist_record(s)?;
    Ok((StatusCode::CREATED, Json(body)))
}

async fn optimize(State(st): State<SharedState>, UrlPath(oid): UrlPath<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let cfg: PhysicsConfig = if body.iter().all(u8::is_ascii_whitespace) {
        PhysicsConfig::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| Failure::input("physics config", e))?
    };
    cfg.validate()?;
    let (job, points, floor, source, prior) = {
        let mut store = st.lock();
        let store = &mut *store;
        let sid = store.objects.get(&oid).ok_or_else(|| ApiError::not_found("object", &oid))?.clone();
        let s = store.sessions.get_mut(&sid).expect("object index points at a live session");
        if let Some(active) = &s.active_job {
            return Err(ApiError::conflict(format!("session `{sid}` already runs job `{active}`")));
        }
        let o = s.objects.iter_mut().find(|o| o.id == oid).expect("indexed object exists");
        o.status = ObjectStatus::Optimizing;
        let job = Arc::new(Job {
            id: new_id(),
            session: sid.clone(),
            object: oid.clone(),
            progress: Mutex::new(JobProgress {
                state: JobState::Running,
                rows: Vec::new(),
                report: None,
                error: None,
            }),
            cancel: AtomicBool::new(false),
            changed: watch::Sender::new(()),
        });
        let out = (job.clone(), s.points.clone(), s.floor, o.source.clone(), o.prior);
        s.active_job = Some(job.id.clone());
        s.jobs.push(job.id.clone());
        store.jobs.insert(job.id.clone(), job);
        out
    };
    if let Some(w) = pipeline::contact_scale_warning(&points, &cfg) {
        eprintln!("warning: {w}");
    }
    let jid = job.id.clone();
    let st2 = st.clone();
    tokio::task::spawn_blocking(move || {
        let outcome = pipeline::compose(&points, &floor, &source, &prior, &cfg, |row| {
            job.push(*row);
            if job.cancel.load(Ordering::Relaxed) {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        });
        finish_job(&st2, &job, outcome);
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job": jid }))))
}

fn finish_job(st: &AppState, job: &Job, outcome: Result<pipeline::ComposeOutcome, Failure>) {
    let mut store = st.lock();
    let s = store.sessions.get_mut(&job.session).expect("job session exists");
    s.active_job = None;
    let o = s.objects.iter_mut().find(|o| o.id == job.object).expect("job object exists");
    match outcome {
        Ok(out) => {
            o.placement = out.placement;
            o.status = ObjectStatus::Optimized;
            let committed = commit(s);
            let persisted = st.persist_record(s);
            match committed.and_then(|c| persisted.map(|_| c)) {
                Ok(c) => {
                    s.committed = Arc::new(c);
                    let state = if out.report.cancelled { JobState::Cancelled } else { JobState::Done };
                    job.finish(state, Some(out.report), None);
                }
                Err(e) => job.finish(JobState::Failed, Some(out.report), Some(e.line())),
            }
        }
        Err(e) => {
            o.status = ObjectStatus::Placed;
            job.finish(JobState::Failed, None, Some(e.line()));
        }
    }
}

fn find_job(st: &AppState, jid: &str) -> ApiResult<Arc<Job>> {
    st.lock().jobs.get(jid).cloned().ok_or_else(|| ApiError::not_found("job", jid))
}

async fn job_status(State(st): State<SharedState>, UrlPath(jid): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    Ok(Json(find_job(&st, &jid)?.status_json()))
}

async fn cancel_job(State(st): State<SharedState>, UrlPath(jid): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let job = find_job(&st, &jid)?;
    job.cancel.store(true, Ordering::Relaxed);
    Ok(Json(job.status_json()))
}

/// Payload of a progress event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub iteration: usize,
    #[serde(rename = "L_collision")]
    pub collision: f64,
    #[serde(rename = "L_gravity")]
    pub gravity: f64,
    pub total: f64,
    pub pose: PoseParams,
}

impl From<&PoseTraceRow> for ProgressEvent {
    fn from(r: &PoseTraceRow) -> Self {
        Self {
            iteration: r.iteration,
            collision: r.collision,
            gravity: r.gravity,
            total: r.total,
            pose: r.pose,
        }
    }
}

/// Payload of the final event, named after the terminal state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalEvent {
    pub state: JobState,
    pub result: Option<PoseReport>,
    pub error: Option<String>,
}

enum Next {
    Row(PoseTraceRow),
    End(TerminalEvent),
    Wait,
}

/// Replays the job's trace from the start, follows it live, and ends with
/// one terminal event.
async fn job_events(
    State(st): State<SharedState>,
    UrlPath(jid): UrlPath<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let job = find_job(&st, &jid)?;
    let rx = job.changed.subscribe();
    let stream = futures::stream::unfold((job, rx, 0usize, false), |(job, mut rx, cursor, ended)| async move {
        if ended {
            return None;
        }
        loop {
            rx.mark_unchanged();
            let next = {
                let p = job.progress.lock().expect("job lock");
                if cursor < p.rows.len() {
                    Next::Row(p.rows[cursor])
                } else if p.state.is_terminal() {
                    Next::End(TerminalEvent {
                        state: p.state,
                        result: p.report.clone(),
                        error: p.error.clone(),
                    })
                } else {
                    Next::Wait
                }
            };
            match next {
                Next::Row(row) => {
                    let ev = Event::default()
                        .event("progress")
                        .json_data(ProgressEvent::from(&row))
                        .expect("serializable");
                    return Some((Ok(ev), (job, rx, cursor + 1, false)));
                }
                Next::End(t) => {
                    let name = serde_json::to_value(t.state).expect("serializable");
                    let ev = Event::default()
                        .event(name.as_str().expect("state is a string"))
                        .json_data(&t)
                        .expect("serializable");
                    return Some((Ok(ev), (job, rx, cursor, true)));
                }
                Next::Wait => {
                    if rx.changed().await.is_err() {
                        // sender dropped with the job; loop once more to drain
                        tokio::task::yield_now().await;
                    }
                }
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

#[derive(Deserialize)]
struct AddTrajectory {
    points: Vec<[f64; 3]>,
    #[serde(default)]
    radius: Option<f64>,
    #[serde(default)]
    width: Option<usize>,
    #[serde(default)]
    height: Option<usize>,
    #[serde(default)]
    fov: Option<f64>,
}

#[derive(Serialize)]
struct TrajectoryResponse {
    id: String,
    ring: CameraRing,
    tracks: Vec<ViewTrack>,
}

async fn add_trajectory(
    State(st): State<SharedState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<AddTrajectory>,
) -> ApiResult<impl IntoResponse> {
    let trajectory = pipeline::TrajectoryFile { points: req.points.clone() }.trajectory()?;
    let ring = pipeline::trajectory_ring(&trajectory, req.radius.unwrap_or(pipeline::DEFAULT_RING_RADIUS));
    let width = req.width.unwrap_or(pipeline::DEFAULT_RENDER_SIZE);
    let fov = req.fov.unwrap_or(pipeline::DEFAULT_RENDER_FOV);
    let k = Pinhole::from_fov(width, req.height.unwrap_or(width), fov)?;
    let tracks = pipeline::project(&trajectory, &ring, &k)?;
    let entry = TrajectoryEntry {
        id: new_id(),
        points: req.points,
        trajectory,
        ring: ring.clone(),
        fov,
    };
    let body = TrajectoryResponse {
        id: entry.id.clone(),
        ring,
        tracks,
    };
    let mut store = st.lock();
    let store = &mut *store;
    let s = store.sessions.get_mut(&id).ok_or_else(|| ApiError::not_found("session", &id))?;
    store.trajectories.insert(entry.id.clone(), s.id.clone());
    s.trajectories.push(entry);
    st.persist_record(s)?;
    Ok((StatusCode::CREATED, Json(body)))
}

#[derive(Deserialize)]
struct FloorPick {
    u: f64,
    v: f64,
    camera: Camera,
}

async fn floor_pick(
    State(st): State<SharedState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<FloorPick>,
) -> ApiResult<Json<serde_json::Value>> {
    let floor = {
        let store = st.lock();
        store.sessions.get(&id).ok_or_else(|| ApiError::not_found("session", &id))?.floor
    };
    let point = pipeline::pick_floor(&floor, &req.camera, req.u, req.v)?;
    Ok(Json(json!({ "point": <[f64; 3]>::from(point) })))
}

#[derive(Deserialize)]
struct BundleRequest {
    trajectory: String,
    features: String,
    mask: String,
    #[serde(default)]
    k: Option<usize>,
    #[serde(default)]
    frames: Option<usize>,
    #[serde(default)]
    sigma: Option<f64>,
    #[serde(default)]
    seed: u64,
}

async fn bundles(State(st): State<SharedState>, Json(req): Json<BundleRequest>) -> ApiResult<Response> {
    let (trajectory, ring, fov, scene) = {
        let store = st.lock();
        let sid = store
            .trajectories
            .get(&req.trajectory)
            .ok_or_else(|| ApiError::not_found("trajectory", &req.trajectory))?;
        let t = store.sessions[sid]
            .trajectories
            .iter()
            .find(|t| t.id == req.trajectory)
            .expect("indexed trajectory exists");
        (t.trajectory.clone(), t.ring.clone(), t.fov, store.sessions[sid].committed.clone())
    };
    let cfg = BundleConfig {
        parts: req.k.unwrap_or(d4d_core::motion::DEFAULT_PARTS),
        sigma: req.sigma,
        frames: req.frames,
        seed: req.seed,
    };
    let features = st.resolve(&req.features);
    let mask = st.resolve(&req.mask);
    let scratch = std::env::temp_dir().join(format!("d4d-bundle-{}", new_id()));
    let tar = tokio::task::spawn_blocking(move || {
        let out = pipeline::conditioning(&trajectory, &ring, fov, &features, &mask, &cfg, ring.len(), Some(&scene), &scratch)
            .and_then(|_| pipeline::tar_dir(&scratch));
        let _ = fs::remove_dir_all(&scratch);
        out
    })
    .await
    .expect("bundle builder panicked")?;
    Ok(([(header::CONTENT_TYPE, "application/x-tar")], tar).into_response())
}

/// Serves the API on `addr` until interrupted.
pub async fn serve(state: SharedState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
