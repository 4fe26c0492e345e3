use std::collections::BTreeSet;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{AppState, JobKind, Recorded};
use crate::backend::Image;
use crate::error::Error;
use crate::inversion::InversionConfig;
use crate::pose::PoseSkeleton;
use crate::project::{Project, Prompts, Session};
use crate::tree::GenerationConfig;

type AppResult<T> = std::result::Result<T, ApiError>;

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

    fn not_found(what: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what}"))
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownNode(_) | Error::UnknownCandidate(_) => StatusCode::NOT_FOUND,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => StatusCode::NOT_FOUND,
            Error::Io { .. } | Error::BackendUnavailable(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({ "ok": true })) }))
        .route("/projects", post(create_project).get(list_projects))
        .route("/projects/{id}", get(get_project))
        .route("/projects/{id}/tree", get(get_tree))
        .route("/projects/{id}/jobs", post(enqueue_job))
        .route("/jobs/{job}", get(get_job))
        .route("/projects/{id}/nodes/{node}/candidates", get(list_candidates))
        .route("/projects/{id}/nodes/{node}/candidates/{cand}/image", get(candidate_image))
        .route("/projects/{id}/nodes/{node}/selection", post(post_selection))
        .route("/projects/{id}/nodes/{node}/prompt", post(post_prompt))
        .route("/projects/{id}/nodes/{node}/pose", post(post_pose))
        .route("/projects/{id}/frames/{index}", get(frame_image))
        .route("/projects/{id}/export", get(export_zip))
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(state)
}

fn snapshot(state: &AppState, id: &str) -> AppResult<Project> {
    let entry = state.project(id).ok_or_else(|| ApiError::not_found(format!("project {id}")))?;
    let p = entry.snapshot.read().clone();
    Ok(p)
}

async fn create_project(State(state): State<Arc<AppState>>, mut form: Multipart) -> AppResult<(StatusCode, Json<Value>)> {
    let mut images: [Option<Image>; 2] = [None, None];
    let mut prompts = Prompts::default();
    let mut config = GenerationConfig::default();
    let mut inversion = None;
    while let Some(field) = form.next_field().await.map_err(|e| ApiError::invalid(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(|e| ApiError::invalid(e.to_string()))?;
        let text = || String::from_utf8(data.to_vec()).map_err(|_| ApiError::invalid(format!("{name} is not UTF-8")));
        match name.as_str() {
            "image_a" | "image_b" => {
                let img = image::load_from_memory(&data)
                    .map_err(|e| ApiError::invalid(format!("{name}: {e}")))?
                    .to_rgb8();
                images[usize::from(name == "image_b")] = Some(Image::from_rgb8(&img));
            }
            "prompt" => prompts.positive = text()?,
            "negative_prompt" => prompts.negative = text()?,
            "config" => config = serde_json::from_str(&text()?).map_err(|e| ApiError::invalid(format!("config: {e}")))?,
            "inversion" => {
                inversion = Some(serde_json::from_str::<InversionConfig>(&text()?).map_err(|e| ApiError::invalid(format!("inversion: {e}")))?)
            }
            other => return Err(ApiError::invalid(format!("unexpected field {other:?}"))),
        }
    }
    let [Some(a), Some(b)] = images else {
        return Err(ApiError::invalid("both image_a and image_b are required"));
    };
    config.validate()?;
    let (id, dir) = state.new_project_dir();
    let backend = state.backend().clone();
    let id2 = id.clone();
    let session = tokio::task::spawn_blocking(move || Session::create(&dir, &id2, &a, &b, prompts, config, inversion, backend))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let project = session.project().clone();
    state.insert_project(session);
    Ok((StatusCode::CREATED, Json(json!({ "id": id, "project": project }))))
}

async fn list_projects(State(state): State<Arc<AppState>>) -> Json<Value> {
    let mut ids: Vec<String> = state.projects.read().keys().cloned().collect();
    ids.sort();
    Json(json!({ "projects": ids }))
}

async fn get_project(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> AppResult<Json<Value>> {
    let p = snapshot(&state, &id)?;
    let dir = state.root.join(&id);
    let frames: Vec<usize> = (0..=p.config.num_frames)
        .filter(|&i| dir.join(crate::project::frame_path(i)).is_file())
        .collect();
    Ok(Json(json!({ "project": p, "frames": frames, "busy": state.project_busy(&id) })))
}

async fn get_tree(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> AppResult<Json<Value>> {
    let p = snapshot(&state, &id)?;
    let stale = crate::project::stale_nodes(&p, &state.root.join(&id))?;
    let nodes: Vec<Value> = p
        .tree
        .iter()
        .flat_map(|t| t.nodes.iter())
        .map(|n| {
            json!({
                "node": n,
                "selected": p.selected(n.index),
                "candidates": p.candidates.get(&n.index).map(|c| c.candidates.len()).unwrap_or(0),
                // finalized means a generation pass would reuse it as is
                "finalized": !stale.contains(&n.index),
                "prompt_override": p.prompt_overrides.get(&n.index),
                "pose_override": p.pose_overrides.contains_key(&n.index),
            })
        })
        .collect();
    Ok(Json(json!({
        "version": p.version,
        "num_frames": p.config.num_frames,
        "timesteps": p.tree.as_ref().map(|t| t.timesteps.clone()),
        "nodes": nodes,
    })))
}

#[derive(Deserialize)]
struct JobRequest {
    #[serde(flatten)]
    kind: JobKind,
    #[serde(default)]
    request_id: Option<String>,
}

async fn enqueue_job(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> AppResult<Response> {
    let req: JobRequest = parse(&body)?;
    snapshot(&state, &id)?;
    idempotent(&state, &id, "job", req.request_id.as_deref(), || {
        let job = state.enqueue(&id, req.kind.clone());
        Ok((StatusCode::ACCEPTED, serde_json::to_value(job).map_err(Error::from)?))
    })
}

async fn get_job(State(state): State<Arc<AppState>>, Path(job): Path<String>) -> AppResult<Json<Value>> {
    let j = state.job(&job).ok_or_else(|| ApiError::not_found(format!("job {job}")))?;
    Ok(Json(serde_json::to_value(j).map_err(Error::from)?))
}

async fn list_candidates(State(state): State<Arc<AppState>>, Path((id, node)): Path<(String, usize)>) -> AppResult<Json<Value>> {
    let p = snapshot(&state, &id)?;
    let set = p.candidates.get(&node).ok_or_else(|| ApiError::not_found(format!("node {node}")))?;
    Ok(Json(serde_json::to_value(set).map_err(Error::from)?))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn candidate_image(
    State(state): State<Arc<AppState>>,
    Path((id, node, cand)): Path<(String, usize, usize)>,
) -> AppResult<Response> {
    let p = snapshot(&state, &id)?;
    let set = p.candidates.get(&node).ok_or_else(|| ApiError::not_found(format!("node {node}")))?;
    set.get(cand).ok_or_else(|| ApiError::not_found(format!("candidate {cand}")))?;
    let path = state.root.join(&id).join(crate::project::candidate_path(node, cand));
    let bytes = tokio::fs::read(&path).await.map_err(|e| Error::io(&path, e))?;
    Ok(png(bytes))
}

async fn frame_image(State(state): State<Arc<AppState>>, Path((id, index)): Path<(String, usize)>) -> AppResult<Response> {
    let p = snapshot(&state, &id)?;
    if index > p.config.num_frames {
        return Err(ApiError::not_found(format!("frame {index}")));
    }
    let path = state.root.join(&id).join(crate::project::frame_path(index));
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|_| ApiError::not_found(format!("frame {index} (not generated yet)")))?;
    Ok(png(bytes))
}

async fn export_zip(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> AppResult<Response> {
    let entry = state.project(&id).ok_or_else(|| ApiError::not_found(format!("project {id}")))?;
    let p = entry.snapshot.read().clone();
    let dir = state.root.join(&id);
    let n = p.config.num_frames;
    let bytes = tokio::task::spawn_blocking(move || crate::project::export_frames_zip(&dir, n))
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(|e| match e {
        Error::Io { .. } => ApiError::conflict(format!("sequence incomplete: {e}")),
        other => other.into(),
    })?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/zip".to_string()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{id}.zip\"")),
        ],
        bytes,
    )
        .into_response())
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> AppResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("invalid payload: {e}")))
}

/// Runs `apply` once per request id; repeats get the recorded response.
fn idempotent(
    state: &AppState,
    project: &str,
    route: &str,
    request_id: Option<&str>,
    apply: impl FnOnce() -> AppResult<(StatusCode, Value)>,
) -> AppResult<Response> {
    let key = request_id.map(|r| format!("{project}/{route}/{r}"));
    if let Some(rec) = key.as_deref().and_then(|k| state.recorded(k)) {
        let status = StatusCode::from_u16(rec.status).unwrap_or(StatusCode::OK);
        return Ok((status, Json(rec.body)).into_response());
    }
    let (status, body) = apply()?;
    if let Some(k) = key {
        state.record(
            k,
            Recorded {
                status: status.as_u16(),
                body: body.clone(),
            },
        );
    }
    Ok((status, Json(body)).into_response())
}

/// Applies `f` to the project's session unless a job holds it or the
/// client's view is stale, then refreshes the snapshot.
fn mutate<T>(
    state: &AppState,
    id: &str,
    expected_version: Option<u64>,
    f: impl FnOnce(&mut Session) -> crate::Result<T>,
) -> AppResult<T> {
    let entry = state.project(id).ok_or_else(|| ApiError::not_found(format!("project {id}")))?;
    if state.project_busy(id) {
        return Err(ApiError::conflict("a job is running on this project"));
    }
    let mut session = entry
        .session
        .try_lock()
        .ok_or_else(|| ApiError::conflict("project is being modified"))?;
    if let Some(v) = expected_version {
        let current = session.project().version;
        if v != current {
            return Err(ApiError::conflict(format!("stale version {v}, current is {current}")));
        }
    }
    let out = f(&mut session)?;
    *entry.snapshot.write() = session.project().clone();
    Ok(out)
}

#[derive(Deserialize)]
struct SelectionRequest {
    candidate: usize,
    #[serde(default)]
    request_id: Option<String>,
    #[serde(default)]
    expected_version: Option<u64>,
}

async fn post_selection(
    State(state): State<Arc<AppState>>,
    Path((id, node)): Path<(String, usize)>,
    body: Bytes,
) -> AppResult<Response> {
    let req: SelectionRequest = parse(&body)?;
    idempotent(&state, &id, &format!("selection/{node}"), req.request_id.as_deref(), || {
        let invalidated = mutate(&state, &id, req.expected_version, |s| s.select(node, req.candidate))?;
        let job = (!invalidated.is_empty()).then(|| {
            state.enqueue(
                &id,
                JobKind::RegenerateSubtree {
                    node,
                    nodes: Some(invalidated.clone()),
                },
            )
        });
        let version = snapshot(&state, &id)?.version;
        Ok((StatusCode::OK, json!({ "invalidated": invalidated, "job": job, "version": version })))
    })
}

#[derive(Deserialize)]
struct PromptRequest {
    prompt: Option<String>,
    #[serde(default)]
    request_id: Option<String>,
    #[serde(default)]
    expected_version: Option<u64>,
}

async fn post_prompt(
    State(state): State<Arc<AppState>>,
    Path((id, node)): Path<(String, usize)>,
    body: Bytes,
) -> AppResult<Response> {
    let req: PromptRequest = parse(&body)?;
    if req.prompt.as_deref().is_some_and(|p| p.trim().is_empty()) {
        return Err(ApiError::invalid("prompt must not be empty; send null to clear"));
    }
    idempotent(&state, &id, &format!("prompt/{node}"), req.request_id.as_deref(), || {
        let affected = mutate(&state, &id, req.expected_version, |s| s.set_prompt_override(node, req.prompt.clone()))?;
        override_response(&state, &id, affected)
    })
}

#[derive(Deserialize)]
struct PoseRequest {
    skeleton: Option<PoseSkeleton>,
    #[serde(default)]
    request_id: Option<String>,
    #[serde(default)]
    expected_version: Option<u64>,
}

async fn post_pose(
    State(state): State<Arc<AppState>>,
    Path((id, node)): Path<(String, usize)>,
    body: Bytes,
) -> AppResult<Response> {
    let req: PoseRequest = parse(&body)?;
    if let Some(s) = &req.skeleton {
        s.validate()?;
        if s.is_empty() {
            return Err(ApiError::invalid("skeleton has no keypoints; send null to clear"));
        }
    }
    idempotent(&state, &id, &format!("pose/{node}"), req.request_id.as_deref(), || {
        let affected = mutate(&state, &id, req.expected_version, |s| s.set_pose_override(node, req.skeleton.clone()))?;
        override_response(&state, &id, affected)
    })
}

fn override_response(state: &AppState, id: &str, affected: BTreeSet<usize>) -> AppResult<(StatusCode, Value)> {
    let version = snapshot(state, id)?.version;
    Ok((StatusCode::OK, json!({ "affected": affected, "version": version })))
}
