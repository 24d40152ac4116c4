//! HTTP service: sessions, fine-tune/sweep/auto jobs on a persisted queue,
//! and candidate retrieval.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{mpsc, Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use forgedit_core::editor::SweepKind;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{
    resolve_method, AutoOpts, CaptionOpts, DreamboothOpts, FinetuneOpts, SamplingOpts, Settings,
};
use crate::error::IoContext;
use crate::pipeline::{self, AutoRequest, FinetuneInput, Method, SweepRequest};
use crate::store::{is_safe_id, read_json, write_json, Kind, Staging, Store};
use crate::{imageio, Error, Model, Result, Run};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub image_id: String,
    pub caption: String,
    pub caption_source: String,
    pub created_unix: u64,
    pub runs: Vec<String>,
    pub sweeps: Vec<String>,
    pub autos: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Finetune,
    Sweep,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Task {
    Finetune { run_id: String, image_id: String, caption: String, method: Method },
    Sweep { run_id: String, sweep_id: String, request: SweepRequest },
    Auto { run_id: String, auto_id: String, request: AutoRequest },
}

/// Ids of what the job produces; valid once the job is done.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultRef {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auto_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: JobKind,
    pub session_id: String,
    pub state: JobState,
    pub progress: f64,
    pub result: ResultRef,
    pub error: Option<String>,
    pub task: Task,
}

impl Task {
    fn kind(&self) -> JobKind {
        match self {
            Task::Finetune { .. } => JobKind::Finetune,
            Task::Sweep { .. } => JobKind::Sweep,
            Task::Auto { .. } => JobKind::Auto,
        }
    }

    fn result(&self) -> ResultRef {
        match self {
            Task::Finetune { run_id, .. } => ResultRef { run_id: Some(run_id.clone()), ..ResultRef::default() },
            Task::Sweep { sweep_id, .. } => ResultRef { sweep_id: Some(sweep_id.clone()), ..ResultRef::default() },
            Task::Auto { auto_id, .. } => ResultRef { auto_id: Some(auto_id.clone()), ..ResultRef::default() },
        }
    }
}

/// Shared service state. Job records live in memory and are mirrored to
/// `jobs/<id>.json` on every change.
pub struct App {
    store: Store,
    model: Model,
    settings: Settings,
    jobs: Mutex<BTreeMap<String, JobRecord>>,
    sessions: Mutex<()>,
    queue: Mutex<mpsc::Sender<String>>,
}

impl App {
    /// Opens the data directory, loads the model, fails jobs interrupted by
    /// a previous shutdown and starts the workers.
    pub fn start(settings: Settings) -> Result<Arc<Self>> {
        let store = Store::open(settings.data_dir())?;
        let model = Model::load(&settings.model_dir())?;
        let mut jobs = BTreeMap::new();
        let dir = store.root().join(Kind::Job.dir());
        for entry in std::fs::read_dir(&dir).at(&dir)? {
            let path = entry.at(&dir)?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let mut rec: JobRecord = read_json(&path)?;
                if rec.state < JobState::Done {
                    rec.state = JobState::Failed;
                    rec.error = Some("interrupted by a service restart".into());
                    write_json(&path, &rec)?;
                }
                jobs.insert(rec.id.clone(), rec);
            }
        }
        let (tx, rx) = mpsc::channel::<String>();
        let app = Arc::new(Self {
            store,
            model,
            jobs: Mutex::new(jobs),
            sessions: Mutex::new(()),
            queue: Mutex::new(tx),
            settings,
        });
        let rx = Arc::new(Mutex::new(rx));
        for n in 0..app.settings.workers() {
            let (app, rx) = (Arc::clone(&app), Arc::clone(&rx));
            std::thread::Builder::new()
                .name(format!("forgedit-worker-{n}"))
                .spawn(move || loop {
                    let next = rx.lock().expect("queue lock").recv();
                    match next {
                        Ok(id) => app.execute(&id),
                        Err(_) => break,
                    }
                })
                .map_err(|e| Error::Config(format!("cannot spawn worker: {e}")))?;
        }
        Ok(app)
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn save_job(&self, rec: &JobRecord) {
        if let Err(e) = self.store.path(Kind::Job, &rec.id).and_then(|p| write_json(&p, rec)) {
            log::error!("persisting job {}: {e}", rec.id);
        }
    }

    fn update_job(&self, id: &str, f: impl FnOnce(&mut JobRecord) -> bool) {
        let mut jobs = self.jobs.lock().expect("jobs lock");
        if let Some(rec) = jobs.get_mut(id) {
            if f(rec) {
                self.save_job(rec);
            }
        }
    }

    fn execute(&self, id: &str) {
        let Some(rec) = self.jobs.lock().expect("jobs lock").get(id).cloned() else { return };
        self.update_job(id, |r| {
            r.state = JobState::Running;
            true
        });
        let mut progress = |f: f64| {
            self.update_job(id, |r| {
                let f = f.clamp(0.0, 1.0);
                let changed = f >= r.progress + 0.01 || (f == 1.0 && r.progress < 1.0);
                if changed {
                    r.progress = f;
                }
                changed
            })
        };
        let outcome = self.run_task(&rec, &mut progress);
        self.update_job(id, |r| {
            match outcome {
                Ok(()) => {
                    r.state = JobState::Done;
                    r.progress = 1.0;
                }
                Err(e) => {
                    log::warn!("job {id} failed: {e}");
                    r.state = JobState::Failed;
                    r.error = Some(e.to_string());
                }
            }
            true
        });
    }

    fn run_task(&self, rec: &JobRecord, progress: &mut dyn FnMut(f64)) -> Result<()> {
        match &rec.task {
            Task::Finetune { run_id, image_id, caption, method } => {
                let original = self.store.existing(Kind::Session, &rec.session_id)?.join("original.png");
                let image = imageio::read(&original)?;
                let input = FinetuneInput { image: &image, image_id, caption, method };
                pipeline::finetune(&self.model, &input, &self.store.path(Kind::Run, run_id)?, run_id, progress)?;
            }
            Task::Sweep { run_id, sweep_id, request } => {
                let run = Run::load(&self.store.existing(Kind::Run, run_id)?)?;
                pipeline::sweep(&run, request, &self.store.path(Kind::Sweep, sweep_id)?, progress)?;
            }
            Task::Auto { run_id, auto_id, request } => {
                let run = Run::load(&self.store.existing(Kind::Run, run_id)?)?;
                pipeline::auto(&run, request, &self.store.path(Kind::Auto, auto_id)?, progress)?;
            }
        }
        Ok(())
    }

    fn session(&self, id: &str) -> Result<Session> {
        read_json(&self.store.existing(Kind::Session, id)?.join("session.json"))
    }

    fn edit_session(&self, id: &str, f: impl FnOnce(&mut Session)) -> Result<Session> {
        let _guard = self.sessions.lock().expect("session lock");
        let mut s = self.session(id)?;
        f(&mut s);
        write_json(&self.store.path(Kind::Session, id)?.join("session.json"), &s)?;
        Ok(s)
    }

    pub fn create_session(&self, png: &[u8], image_id: Option<String>, caption: Option<String>) -> Result<Session> {
        let image = imageio::decode(png).map_err(|e| Error::Invalid(e.to_string()))?;
        let image_id = image_id.unwrap_or_else(|| "upload".into());
        let opts = CaptionOpts { caption, ..CaptionOpts::default() }.overlay(&self.settings.captions);
        let (caption, caption_source) = opts.resolve(&image_id, &image)?;
        let id = self.store.allocate(Kind::Session);
        let session = Session {
            id: id.clone(),
            image_id,
            caption,
            caption_source,
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            runs: Vec::new(),
            sweeps: Vec::new(),
            autos: Vec::new(),
        };
        let st = Staging::new(&self.store.path(Kind::Session, &id)?)?;
        imageio::write(&image, &st.file("original.png"))?;
        write_json(&st.file("session.json"), &session)?;
        st.publish()?;
        Ok(session)
    }

    fn enqueue(&self, session_id: &str, task: Task) -> Result<JobRecord> {
        let rec = {
            let mut jobs = self.jobs.lock().expect("jobs lock");
            if task.kind() == JobKind::Finetune
                && jobs.values().any(|j| {
                    j.session_id == session_id && j.kind == JobKind::Finetune && j.state < JobState::Done
                })
            {
                return Err(Error::Conflict(format!("session {session_id} already has a fine-tune in progress")));
            }
            let rec = JobRecord {
                id: self.store.allocate(Kind::Job),
                kind: task.kind(),
                session_id: session_id.into(),
                state: JobState::Queued,
                progress: 0.0,
                result: task.result(),
                error: None,
                task,
            };
            self.save_job(&rec);
            jobs.insert(rec.id.clone(), rec.clone());
            rec
        };
        self.edit_session(session_id, |s| match &rec.task {
            Task::Finetune { run_id, .. } => s.runs.push(run_id.clone()),
            Task::Sweep { sweep_id, .. } => s.sweeps.push(sweep_id.clone()),
            Task::Auto { auto_id, .. } => s.autos.push(auto_id.clone()),
        })?;
        self.queue.lock().expect("queue lock").send(rec.id.clone()).map_err(|_| Error::Conflict("job queue closed".into()))?;
        Ok(rec)
    }

    pub fn start_finetune(&self, session_id: &str, body: FinetuneBody) -> Result<JobRecord> {
        let session = self.session(session_id)?;
        let method = resolve_method(
            &body.finetune.overlay(&self.settings.finetune),
            &body.dreambooth.overlay(&self.settings.dreambooth),
        )
        .map_err(|e| Error::Invalid(e.to_string()))?;
        let caption = match body.caption {
            Some(c) if c.trim().is_empty() => return Err(Error::Invalid("caption is empty".into())),
            Some(c) => c,
            None => session.caption,
        };
        let task = Task::Finetune {
            run_id: self.store.allocate(Kind::Run),
            image_id: session.image_id,
            caption,
            method,
        };
        self.enqueue(session_id, task)
    }

    /// The run must belong to the session and be finished.
    fn finished_run(&self, session: &Session, run_id: &str) -> Result<()> {
        if !session.runs.iter().any(|r| r == run_id) {
            return Err(Error::NotFound(format!("run {run_id} in session {}", session.id)));
        }
        if !self.store.path(Kind::Run, run_id)?.exists() {
            return Err(Error::Conflict(format!("run {run_id} has not finished")));
        }
        Ok(())
    }

    pub fn start_sweep(&self, session_id: &str, body: SweepBody) -> Result<JobRecord> {
        let session = self.session(session_id)?;
        self.finished_run(&session, &body.run_id)?;
        let request = pipeline::prepare_sweep(&SweepRequest {
            target_prompt: body.target_prompt,
            combination: body.combination,
            strategy: body.strategy.unwrap_or_else(|| "none".into()),
            sampling: body.sampling.overlay(&self.settings.sampling).resolve(),
            allow_any_pairing: body.allow_any_pairing,
        })
        .map_err(|e| Error::Invalid(e.to_string()))?;
        let task = Task::Sweep { run_id: body.run_id, sweep_id: self.store.allocate(Kind::Sweep), request };
        self.enqueue(session_id, task)
    }

    pub fn start_auto(&self, session_id: &str, body: AutoBody) -> Result<JobRecord> {
        let session = self.session(session_id)?;
        self.finished_run(&session, &body.run_id)?;
        let opts = AutoOpts { min_alignment: body.min_alignment, min_fidelity: body.min_fidelity, strategies: body.strategies }
            .overlay(&self.settings.auto);
        let (request, _) = pipeline::prepare_auto(&AutoRequest {
            target_prompt: body.target_prompt,
            thresholds: opts.thresholds(),
            strategies: opts.strategies(),
            sampling: body.sampling.overlay(&self.settings.sampling).resolve(),
        })
        .map_err(|e| Error::Invalid(e.to_string()))?;
        let task = Task::Auto { run_id: body.run_id, auto_id: self.store.allocate(Kind::Auto), request };
        self.enqueue(session_id, task)
    }

    pub fn job(&self, id: &str) -> Result<JobRecord> {
        self.jobs.lock().expect("jobs lock").get(id).cloned().ok_or_else(|| Error::NotFound(format!("job {id}")))
    }

    /// Job as served over HTTP; a finished auto job carries its trace.
    pub fn job_document(&self, id: &str) -> Result<Value> {
        let rec = self.job(id)?;
        let mut doc = serde_json::to_value(&rec)?;
        if let (JobState::Done, Task::Auto { auto_id, .. }) = (rec.state, &rec.task) {
            let trace: Value = read_json(&self.store.path(Kind::Auto, auto_id)?.join("trace.json"))?;
            doc["trace"] = trace;
            doc["image"] = json!(format!("/images/{auto_id}_best.png"));
        }
        Ok(doc)
    }

    pub fn candidates(&self, sweep_id: &str) -> Result<Value> {
        let dir = self.store.path(Kind::Sweep, sweep_id)?;
        if !dir.exists() {
            let jobs = self.jobs.lock().expect("jobs lock");
            let job = jobs.values().find(|j| j.result.sweep_id.as_deref() == Some(sweep_id));
            return Err(match job {
                Some(j) if j.state == JobState::Failed => {
                    Error::Conflict(format!("sweep {sweep_id} failed: {}", j.error.clone().unwrap_or_default()))
                }
                Some(_) => Error::Conflict(format!("sweep {sweep_id} has not finished")),
                None => Error::NotFound(format!("sweep {sweep_id}")),
            });
        }
        let request: Value = read_json(&dir.join("request.json"))?;
        let rows = pipeline::read_rows(&dir)?;
        let candidates: Vec<Value> = rows
            .iter()
            .map(|r| {
                let mut v = serde_json::to_value(r).expect("row serializes");
                v["id"] = json!(format!("{sweep_id}_{:03}", r.index));
                v["image"] = json!(format!("/images/{sweep_id}_{:03}.png", r.index));
                v
            })
            .collect();
        Ok(json!({ "sweep_id": sweep_id, "request": request, "count": rows.len(), "candidates": candidates }))
    }

    /// Resolves `<sweep>_<NNN>`, `<auto>_best`, `<session>_original` or
    /// `<run>_source` to a stored PNG.
    pub fn image_path(&self, name: &str) -> Result<PathBuf> {
        let missing = || Error::NotFound(format!("image {name}"));
        let stem = name.strip_suffix(".png").ok_or_else(missing)?;
        let (owner, part) = stem.rsplit_once('_').ok_or_else(missing)?;
        if !is_safe_id(owner) {
            return Err(missing());
        }
        let kind = Kind::ALL
            .into_iter()
            .find(|k| owner.strip_prefix(k.prefix()).is_some_and(|r| r.starts_with('-')))
            .ok_or_else(missing)?;
        let file = match (kind, part) {
            (Kind::Sweep, p) if p.len() == 3 && p.bytes().all(|b| b.is_ascii_digit()) => format!("cand_{p}.png"),
            (Kind::Auto, "best") => "best.png".into(),
            (Kind::Session, "original") => "original.png".into(),
            (Kind::Run, "source") => "source.png".into(),
            _ => return Err(missing()),
        };
        let path = self.store.path(kind, owner)?.join(file);
        if path.is_file() {
            Ok(path)
        } else {
            Err(missing())
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionBody {
    pub image_png_base64: String,
    #[serde(default)]
    pub image_id: Option<String>,
    #[serde(default)]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneBody {
    pub finetune: FinetuneOpts,
    pub dreambooth: DreamboothOpts,
    pub caption: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBody {
    pub run_id: String,
    pub target_prompt: String,
    pub combination: SweepKind,
    #[serde(default)]
    pub strategy: Option<String>,
    #[serde(default)]
    pub sampling: SamplingOpts,
    #[serde(default)]
    pub allow_any_pairing: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoBody {
    pub run_id: String,
    pub target_prompt: String,
    #[serde(default)]
    pub min_alignment: Option<f64>,
    #[serde(default)]
    pub min_fidelity: Option<f64>,
    #[serde(default)]
    pub strategies: Option<Vec<String>>,
    #[serde(default)]
    pub sampling: SamplingOpts,
}

pub struct ApiError(StatusCode, String);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::Invalid(_) | Error::Image(_) | Error::Core(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;
type Shared = State<Arc<App>>;

fn body<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(bytes).map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
}

fn blocking<T>(f: impl FnOnce() -> Result<T>) -> ApiResult<T> {
    tokio::task::block_in_place(f).map_err(ApiError::from)
}

async fn create_session(State(app): Shared, raw: axum::body::Bytes) -> ApiResult<(StatusCode, Json<Session>)> {
    let b: CreateSessionBody = body(&raw)?;
    let png = base64::engine::general_purpose::STANDARD
        .decode(b.image_png_base64.trim())
        .map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, format!("image is not base64: {e}")))?;
    let s = blocking(|| app.create_session(&png, b.image_id, b.caption))?;
    Ok((StatusCode::CREATED, Json(s)))
}

async fn get_session(State(app): Shared, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Session>> {
    Ok(Json(blocking(|| app.session(&id))?))
}

async fn start_finetune(
    State(app): Shared,
    UrlPath(id): UrlPath<String>,
    raw: axum::body::Bytes,
) -> ApiResult<(StatusCode, Json<JobRecord>)> {
    let b: FinetuneBody = if raw.is_empty() { FinetuneBody::default() } else { body(&raw)? };
    Ok((StatusCode::ACCEPTED, Json(blocking(|| app.start_finetune(&id, b))?)))
}

async fn start_sweep(
    State(app): Shared,
    UrlPath(id): UrlPath<String>,
    raw: axum::body::Bytes,
) -> ApiResult<(StatusCode, Json<JobRecord>)> {
    let b: SweepBody = body(&raw)?;
    Ok((StatusCode::ACCEPTED, Json(blocking(|| app.start_sweep(&id, b))?)))
}

async fn start_auto(
    State(app): Shared,
    UrlPath(id): UrlPath<String>,
    raw: axum::body::Bytes,
) -> ApiResult<(StatusCode, Json<JobRecord>)> {
    let b: AutoBody = body(&raw)?;
    Ok((StatusCode::ACCEPTED, Json(blocking(|| app.start_auto(&id, b))?)))
}

async fn get_job(State(app): Shared, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    Ok(Json(blocking(|| app.job_document(&id))?))
}

async fn get_candidates(State(app): Shared, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    Ok(Json(blocking(|| app.candidates(&id))?))
}

async fn get_image(State(app): Shared, UrlPath(name): UrlPath<String>) -> ApiResult<Response> {
    let bytes = blocking(|| {
        let p = app.image_path(&name)?;
        std::fs::read(&p).at(&p)
    })?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/finetune", post(start_finetune))
        .route("/sessions/{id}/sweeps", post(start_sweep))
        .route("/sessions/{id}/auto", post(start_auto))
        .route("/jobs/{id}", get(get_job))
        .route("/sweeps/{id}/candidates", get(get_candidates))
        .route("/images/{name}", get(get_image))
        .with_state(app)
}

pub async fn serve(listener: tokio::net::TcpListener, app: Arc<App>) -> std::io::Result<()> {
    axum::serve(listener, router(app)).await
}

/// Applies `FORGEDIT_DATA_DIR` and `FORGEDIT_PORT` over the file settings.
pub fn apply_env(settings: &mut Settings) -> Result<()> {
    if let Some(dir) = std::env::var_os("FORGEDIT_DATA_DIR") {
        settings.data_dir = Some(dir.into());
    }
    if let Ok(port) = std::env::var("FORGEDIT_PORT") {
        settings.port = Some(port.parse().map_err(|_| Error::Config(format!("FORGEDIT_PORT={port:?} is not a port")))?);
    }
    Ok(())
}
