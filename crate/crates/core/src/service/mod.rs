//! HTTP service driving projects through a single FIFO job queue.
//!
//! Reads are served from per-project snapshots and files on disk, so they
//! never wait on inference. Every generation step runs as a job; mutations
//! are rejected with 409 while a job holds the project or when the client's
//! `expected_version` is stale, and are idempotent by `request_id`.

mod jobs;
mod routes;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use tokio::sync::mpsc;

pub use jobs::{Job, JobKind, JobStatus};
pub use routes::router;

use crate::backend::{Backend, Image};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, RandomProjection};
use crate::project::{NodeFilter, Project, Session, PROJECT_FILE};

pub(crate) struct ProjectEntry {
    session: Mutex<Session>,
    snapshot: RwLock<Project>,
}

impl ProjectEntry {
    fn new(session: Session) -> Self {
        let snapshot = RwLock::new(session.project().clone());
        Self {
            session: Mutex::new(session),
            snapshot,
        }
    }
}

/// Stored outcome of a mutation, replayed for repeated request ids.
#[derive(Clone)]
pub(crate) struct Recorded {
    status: u16,
    body: serde_json::Value,
}

pub struct AppState {
    root: PathBuf,
    backend: Arc<dyn Backend>,
    projects: RwLock<HashMap<String, Arc<ProjectEntry>>>,
    jobs: Mutex<BTreeMap<u64, Job>>,
    next_job: Mutex<u64>,
    next_project: Mutex<u64>,
    queue: mpsc::UnboundedSender<u64>,
    requests: Mutex<HashMap<String, Recorded>>,
}

impl AppState {
    /// Opens every project under `root` and starts the worker. Must be
    /// called inside a tokio runtime.
    pub fn start(root: &Path, backend: Arc<dyn Backend>) -> Result<Arc<Self>> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut projects = HashMap::new();
        let mut max_id = 0;
        for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
            let dir = entry.map_err(|e| Error::io(root, e))?.path();
            if !dir.join(PROJECT_FILE).is_file() {
                continue;
            }
            match Session::open(&dir, backend.clone()) {
                Ok(s) => {
                    if let Some(n) = s.project().id.strip_prefix('p').and_then(|n| n.parse::<u64>().ok()) {
                        max_id = max_id.max(n);
                    }
                    projects.insert(s.project().id.clone(), Arc::new(ProjectEntry::new(s)));
                }
                Err(e) => tracing::warn!("skipping {}: {e}", dir.display()),
            }
        }
        let (tx, rx) = mpsc::unbounded_channel();
        let state = Arc::new(Self {
            root: root.to_path_buf(),
            backend,
            projects: RwLock::new(projects),
            jobs: Mutex::new(BTreeMap::new()),
            next_job: Mutex::new(1),
            next_project: Mutex::new(max_id + 1),
            queue: tx,
            requests: Mutex::new(HashMap::new()),
        });
        tokio::spawn(worker(state.clone(), rx));
        Ok(state)
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub(crate) fn project(&self, id: &str) -> Option<Arc<ProjectEntry>> {
        self.projects.read().get(id).cloned()
    }

    pub(crate) fn new_project_dir(&self) -> (String, PathBuf) {
        let mut n = self.next_project.lock();
        loop {
            let id = format!("p{:04}", *n);
            *n += 1;
            let dir = self.root.join(&id);
            if !dir.exists() {
                return (id, dir);
            }
        }
    }

    pub(crate) fn insert_project(&self, session: Session) {
        let id = session.project().id.clone();
        self.projects.write().insert(id, Arc::new(ProjectEntry::new(session)));
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        let n: u64 = id.strip_prefix('j')?.parse().ok()?;
        self.jobs.lock().get(&n).cloned()
    }

    /// Queues a job and returns its initial state.
    pub fn enqueue(&self, project_id: &str, kind: JobKind) -> Job {
        let n = {
            let mut next = self.next_job.lock();
            let n = *next;
            *next += 1;
            n
        };
        let job = Job::new(format!("j{n}"), project_id.to_string(), kind);
        self.jobs.lock().insert(n, job.clone());
        if self.queue.send(n).is_err() {
            tracing::error!("job worker is gone; job {} will not run", job.id);
        }
        job
    }

    /// Whether a queued or running job targets the project.
    pub(crate) fn project_busy(&self, project_id: &str) -> bool {
        self.jobs
            .lock()
            .values()
            .any(|j| j.project_id == project_id && !j.status.is_finished())
    }

    pub(crate) fn recorded(&self, key: &str) -> Option<Recorded> {
        self.requests.lock().get(key).cloned()
    }

    pub(crate) fn record(&self, key: String, rec: Recorded) {
        self.requests.lock().insert(key, rec);
    }

    fn update_job(&self, n: u64, f: impl FnOnce(&mut Job)) {
        if let Some(j) = self.jobs.lock().get_mut(&n) {
            f(j);
        }
    }
}

async fn worker(state: Arc<AppState>, mut rx: mpsc::UnboundedReceiver<u64>) {
    while let Some(n) = rx.recv().await {
        let st = state.clone();
        let outcome = tokio::task::spawn_blocking(move || run_job(&st, n)).await;
        let outcome = outcome.unwrap_or_else(|e| Err(Error::BackendUnavailable(format!("job panicked: {e}"))));
        state.update_job(n, |j| match outcome {
            Ok(result) => {
                j.result = Some(result);
                j.transition(JobStatus::Done);
            }
            Err(e) => {
                j.error = Some(e.to_string());
                j.transition(JobStatus::Failed);
            }
        });
    }
}

fn run_job(state: &AppState, n: u64) -> Result<serde_json::Value> {
    let Some(job) = state.jobs.lock().get(&n).cloned() else {
        return Err(Error::InvalidArgument(format!("job {n} vanished")));
    };
    state.update_job(n, |j| {
        j.transition(JobStatus::Running);
    });
    let entry = state
        .project(&job.project_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown project {}", job.project_id)))?;
    let mut session = entry.session.lock();
    let mut progress = |p: f64| state.update_job(n, |j| j.advance(p));
    let result = match &job.kind {
        JobKind::Invert => {
            session.prepare_embeddings()?;
            serde_json::json!({ "embeddings": true })
        }
        JobKind::ExtractPose => {
            session.prepare_poses()?;
            let poses = &session.project().poses;
            serde_json::json!({
                "a": poses.a.as_ref().map(|s| s.source),
                "b": poses.b.as_ref().map(|s| s.source),
            })
        }
        JobKind::GenerateLevel { level } => {
            let filter = level.map_or(NodeFilter::All, NodeFilter::Level);
            serde_json::to_value(session.generate(&filter, &mut progress)?)?
        }
        JobKind::RegenerateSubtree { node, nodes } => {
            let nodes = match nodes {
                Some(set) => set.clone(),
                None => {
                    let tree = session.project().tree.as_ref().ok_or(Error::UnknownNode(*node))?;
                    tree.node(*node).ok_or(Error::UnknownNode(*node))?;
                    let mut set = tree.descendants(*node);
                    set.insert(*node);
                    set
                }
            };
            serde_json::to_value(session.generate(&NodeFilter::Nodes(nodes), &mut progress)?)?
        }
        JobKind::Evaluate => evaluate_session(&session)?,
    };
    *entry.snapshot.write() = session.project().clone();
    Ok(result)
}

fn evaluate_session(session: &Session) -> Result<serde_json::Value> {
    if !session.is_complete() {
        return Err(Error::InvalidConfig("project has missing frames".into()));
    }
    let inputs: Vec<Image> = session.input_images()?.into();
    let frames = session.frames()?;
    let sequences = BTreeMap::from([(session.project().config.scheme, vec![frames])]);
    let report = evaluate(&inputs, &sequences, &RandomProjection::default(), session.project().config.global_seed)?;
    Ok(serde_json::to_value(report)?)
}
