//! HTTP/JSON API for running studies on top of `cftraj`.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/v1/sessions` | build and persist a session, returns the participant payload |
//! | GET | `/v1/sessions/{id}` | participant payload |
//! | POST | `/v1/sessions/{id}/responses` | append answers |
//! | GET | `/v1/sessions/{id}/score` | per-participant scores |
//! | GET | `/v1/trajectories/{ref}/frames?from=` | playback frames |
//! | POST | `/v1/explorers` | start an interactive explorer |
//! | POST | `/v1/explorers/{id}/goto` | probe a counterfactual state |
//! | GET | `/v1/meta/artifacts` | known environments and policies |
//!
//! Trajectory refs: `<session>.e<i>` (explanation item), `<session>.q<i>.ctx`
//! (question context), `<session>.q<i>.c<j>` (continuation choice) and
//! `<explorer>.p<n>` (explorer probe).
//!
//! Participant-facing responses never include answer keys or policy ids.

pub mod artifacts;
pub mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response as HttpResponse};
use axum::routing::{get, post};
use axum::{Json, Router};
use cftraj::gridworld::{AgentState, Cell, Dir, EnvConfig, GridSpec};
use cftraj::render::{frame, trajectory_frames, FrameDescriptor, FrameMeta};
use cftraj::rng;
use cftraj::selection::{probe, Condition};
use cftraj::study::{
    build_task1_session, build_task2_session, check_response, score, Question, Response, SessionScore, StudyContext, StudyError,
    StudySession, Task, DEFAULT_QUESTIONS,
};
use cftraj::trajectory::{Outcome, Trajectory};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use artifacts::{ArtifactError, Artifacts};
pub use store::{Store, StoreError};

pub const API_VERSION: u32 = 1;
pub const DATA_DIR_VAR: &str = "CFTRAJ_DATA_DIR";
pub const ADDR_VAR: &str = "CFTRAJ_ADDR";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

/// Sizes used when building sessions.
#[derive(Debug, Clone, Copy)]
pub struct SessionSizes {
    pub dataset_episodes: usize,
    pub explanations: usize,
    pub questions: usize,
}

impl Default for SessionSizes {
    fn default() -> Self {
        SessionSizes { dataset_episodes: 100, explanations: cftraj::selection::DEFAULT_EXPLANATIONS, questions: DEFAULT_QUESTIONS }
    }
}

struct Explorer {
    env_id: String,
    policy_id: String,
    seed: u64,
    state: AgentState,
    probes: Vec<Trajectory>,
}

pub struct AppState {
    store: Store,
    artifacts: Artifacts,
    sizes: SessionSizes,
    explorers: Mutex<HashMap<String, Explorer>>,
    next_explorer: AtomicU64,
}

impl AppState {
    pub fn new(store: Store, artifacts: Artifacts, sizes: SessionSizes) -> Arc<Self> {
        Arc::new(AppState { store, artifacts, sizes, explorers: Mutex::new(HashMap::new()), next_explorer: AtomicU64::new(1) })
    }

    /// Store under `data_dir`, built-in environments plus whatever
    /// `data_dir/envs` and `data_dir/policies` hold.
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<Arc<Self>, ArtifactError> {
        let data_dir = data_dir.into();
        let store = Store::open(&data_dir)?;
        let mut artifacts = Artifacts::builtin();
        artifacts.load_dir(&data_dir)?;
        Ok(Self::new(store, artifacts, SessionSizes::default()))
    }

    pub fn artifacts(&self) -> &Artifacts {
        &self.artifacts
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, kind, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad-request", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not-found", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> HttpResponse {
        let body = json!({ "version": API_VERSION, "error": { "kind": self.kind, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        ApiError::internal(e.to_string())
    }
}

impl From<StudyError> for ApiError {
    fn from(e: StudyError) -> Self {
        match e {
            StudyError::QuestionOutOfRange { .. } | StudyError::ChoiceOutOfRange { .. } | StudyError::SessionMismatch { .. } => {
                ApiError::bad_request(e.to_string())
            }
            StudyError::StratificationFailure { .. } | StudyError::ContinuationCollision(_) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "build-failed", e.to_string())
            }
            other => ApiError::internal(other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/responses", post(post_responses))
        .route("/v1/sessions/{id}/score", get(get_score))
        .route("/v1/trajectories/{trajectory}/frames", get(get_frames))
        .route("/v1/explorers", post(create_explorer))
        .route("/v1/explorers/{id}/goto", post(explorer_goto))
        .route("/v1/meta/artifacts", get(get_artifacts))
        .with_state(state)
}

/// Binds `addr`, prints `listening on <addr>` to stdout and serves until
/// interrupted.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    println!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    /// 1 (behavior understanding) or 2 (performance evaluation).
    pub task: u8,
    pub condition: Condition,
    pub seed: u64,
    /// Test environment.
    pub env_id: String,
    pub policy_id: String,
}

async fn create_session(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, HttpResponse)> {
    let req: CreateSessionRequest = parse_body(&body)?;
    let task = Task::from_number(req.task).ok_or_else(|| ApiError::bad_request(format!("unknown task {}", req.task)))?;
    let st2 = st.clone();
    let session = blocking(move || {
        let st = st2;
        let a = &st.artifacts;
        let pol = a.policy(&req.policy_id).ok_or_else(|| ApiError::not_found(format!("unknown policy `{}`", req.policy_id)))?;
        let test_env = a.env(&req.env_id).ok_or_else(|| ApiError::not_found(format!("unknown environment `{}`", req.env_id)))?;
        let train_env = a.env(&pol.train_env).ok_or_else(|| ApiError::not_found(format!("unknown environment `{}`", pol.train_env)))?;
        if test_env.spec != pol.spec {
            return Err(ApiError::bad_request(format!("environment `{}` does not use the policy's layout", req.env_id)));
        }
        let oracle = a.oracle(pol.spec.id()).ok_or_else(|| ApiError::internal("no oracle for layout"))?;
        let ctx = StudyContext {
            policy: &pol.policy,
            policy_id: &pol.id,
            policy_label: &pol.train_env,
            train_env,
            test_env,
            oracle,
            dataset_episodes: st.sizes.dataset_episodes,
            explanations: st.sizes.explanations,
            questions: st.sizes.questions,
        };
        let mut session = match task {
            Task::BehaviorUnderstanding => build_task1_session(&ctx, req.condition, req.seed)?,
            Task::PerformanceEvaluation => build_task2_session(&ctx, req.condition, req.seed)?,
        };
        st.store.create_session(&mut session)?;
        Ok(session)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(session.participant_payload()).into_response()))
}

fn load_session(st: &AppState, id: &str) -> ApiResult<StudySession> {
    st.store.session(id)?.ok_or_else(|| ApiError::not_found(format!("unknown session `{id}`")))
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<HttpResponse> {
    let s = blocking(move || load_session(&st, &id)).await?;
    Ok(Json(s.participant_payload()).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseFragment {
    #[serde(default)]
    pub version: Option<u32>,
    pub participant_id: String,
    pub responses: Vec<Response>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResponseAck {
    pub version: u32,
    pub session_id: String,
    pub participant_id: String,
    /// Distinct questions this participant has answered so far.
    pub stored: usize,
}

async fn post_responses(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<ResponseAck>> {
    let frag: ResponseFragment = parse_body(&body)?;
    if frag.version.is_some_and(|v| v != cftraj::study::RESPONSE_VERSION) {
        return Err(ApiError::bad_request("unsupported response version"));
    }
    if frag.participant_id.is_empty() {
        return Err(ApiError::bad_request("participant_id must not be empty"));
    }
    blocking(move || {
        let session = load_session(&st, &id)?;
        for r in &frag.responses {
            check_response(&session, r)?;
        }
        let stored = st.store.append_responses(&id, &frag.participant_id, &frag.responses)?;
        Ok(Json(ResponseAck { version: API_VERSION, session_id: id, participant_id: frag.participant_id, stored }))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreFragment {
    pub version: u32,
    pub session_id: String,
    pub task: Task,
    pub condition: Condition,
    pub participants: Vec<SessionScore>,
}

async fn get_score(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ScoreFragment>> {
    blocking(move || {
        let session = load_session(&st, &id)?;
        let logs = st.store.responses(&id)?;
        if logs.is_empty() {
            return Err(ApiError::new(StatusCode::CONFLICT, "no-responses", format!("session `{id}` has no responses yet")));
        }
        let participants = logs.iter().map(|l| score(&session, l)).collect::<Result<Vec<_>, _>>()?;
        Ok(Json(ScoreFragment { version: API_VERSION, session_id: id, task: session.task, condition: session.condition, participants }))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct FramesQuery {
    pub from: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FrameStream {
    pub version: u32,
    #[serde(rename = "ref")]
    pub trajectory: String,
    pub from: usize,
    pub frames: Vec<FrameDescriptor>,
}

enum Target {
    Trajectory { traj: Trajectory, spec: GridSpec, default_from: usize },
    State { state: AgentState, spec: GridSpec },
}

fn index(s: &str, prefix: char) -> Option<usize> {
    s.strip_prefix(prefix)?.parse().ok()
}

fn resolve(st: &AppState, r: &str) -> ApiResult<Target> {
    let missing = || ApiError::not_found(format!("unknown trajectory `{r}`"));
    let (owner, rest) = r.split_once('.').ok_or_else(missing)?;
    if owner.starts_with("x-") {
        let n = index(rest, 'p').ok_or_else(missing)?;
        let ex = st.explorers.lock().unwrap_or_else(|e| e.into_inner());
        let e = ex.get(owner).ok_or_else(missing)?;
        let traj = e.probes.get(n).cloned().ok_or_else(missing)?;
        let spec = st.artifacts.env(&e.env_id).ok_or_else(missing)?.spec.clone();
        return Ok(Target::Trajectory { traj, spec, default_from: 0 });
    }
    let session = st.store.session(owner)?.ok_or_else(missing)?;
    let env_spec = |id: &str| {
        st.artifacts.env(id).map(|e| e.spec.clone()).ok_or_else(|| ApiError::internal(format!("environment `{id}` is not loaded")))
    };
    let parts: Vec<&str> = rest.split('.').collect();
    match parts.as_slice() {
        [e] if e.starts_with('e') => {
            let item = session.explanation.items.get(index(e, 'e').ok_or_else(missing)?).ok_or_else(missing)?;
            Ok(Target::Trajectory {
                traj: item.trajectory.anonymized(),
                spec: env_spec(&session.meta.train_env_id)?,
                default_from: item.display_start,
            })
        }
        [q, part] => {
            let q = session.questions.get(index(q, 'q').ok_or_else(missing)?).ok_or_else(missing)?;
            let spec = env_spec(&session.meta.test_env_id)?;
            match (q, *part) {
                (Question::BehaviorUnderstanding { context, .. }, "ctx") => {
                    Ok(Target::Trajectory { traj: context.anonymized(), spec, default_from: 0 })
                }
                (Question::BehaviorUnderstanding { choices, .. }, c) => {
                    let ch = choices.get(index(c, 'c').ok_or_else(missing)?).ok_or_else(missing)?;
                    Ok(Target::Trajectory { traj: ch.anonymized(), spec, default_from: 0 })
                }
                (Question::PerformanceEvaluation { context, .. }, "ctx") => Ok(Target::State { state: *context, spec }),
                _ => Err(missing()),
            }
        }
        _ => Err(missing()),
    }
}

async fn get_frames(State(st): State<Arc<AppState>>, Path(r): Path<String>, Query(q): Query<FramesQuery>) -> ApiResult<Json<FrameStream>> {
    blocking(move || {
        let (from, frames) = match resolve(&st, &r)? {
            Target::Trajectory { traj, spec, default_from } => {
                let from = q.from.unwrap_or(default_from);
                (from, trajectory_frames(&traj, &spec, from).map_err(|e| ApiError::bad_request(e.to_string()))?)
            }
            Target::State { state, spec } => {
                let from = q.from.unwrap_or(0);
                if from > 0 {
                    return Err(ApiError::bad_request(format!("start index {from} is past the end (0)")));
                }
                (0, vec![frame(&spec, state, FrameMeta::default()).map_err(|e| ApiError::internal(e.to_string()))?])
            }
        };
        Ok(Json(FrameStream { version: API_VERSION, trajectory: r, from, frames }))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateExplorerRequest {
    pub env_id: String,
    pub policy_id: String,
    pub seed: u64,
    /// Defaults to a draw from the environment's start distribution.
    #[serde(default)]
    pub start: Option<AgentState>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExplorerView {
    pub version: u32,
    pub explorer_id: String,
    pub env_id: String,
    pub policy_id: String,
    pub state: AgentState,
    pub frame: FrameDescriptor,
}

async fn create_explorer(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<ExplorerView>)> {
    let req: CreateExplorerRequest = parse_body(&body)?;
    let env = st.artifacts.env(&req.env_id).ok_or_else(|| ApiError::not_found(format!("unknown environment `{}`", req.env_id)))?;
    let pol = st.artifacts.policy(&req.policy_id).ok_or_else(|| ApiError::not_found(format!("unknown policy `{}`", req.policy_id)))?;
    if env.spec != pol.spec {
        return Err(ApiError::bad_request(format!("environment `{}` does not use the policy's layout", req.env_id)));
    }
    let state = match req.start {
        Some(s) if env.spec.is_valid_state(&s) => s,
        Some(s) => return Err(ApiError::bad_request(format!("start state {s} is not on an open cell"))),
        None => env.start.sample(&mut rng::stream(req.seed, 0)),
    };
    let id = format!("x-{}", st.next_explorer.fetch_add(1, Ordering::Relaxed));
    let fr = frame(&env.spec, state, FrameMeta::default()).map_err(|e| ApiError::internal(e.to_string()))?;
    st.explorers.lock().unwrap_or_else(|e| e.into_inner()).insert(
        id.clone(),
        Explorer { env_id: req.env_id.clone(), policy_id: req.policy_id.clone(), seed: req.seed, state, probes: vec![] },
    );
    Ok((
        StatusCode::CREATED,
        Json(ExplorerView { version: API_VERSION, explorer_id: id, env_id: req.env_id, policy_id: req.policy_id, state, frame: fr }),
    ))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GotoRequest {
    pub x: usize,
    pub y: usize,
    /// Heading at the target; when absent the heading with the shortest
    /// approach is used.
    #[serde(default)]
    pub dir: Option<Dir>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GotoResult {
    pub version: u32,
    pub probe: usize,
    #[serde(rename = "ref")]
    pub trajectory: String,
    pub exploration_frames: Vec<FrameDescriptor>,
    pub behavior_frames: Vec<FrameDescriptor>,
    pub outcome: Outcome,
    pub state: AgentState,
}

fn goto_target(env: &EnvConfig, from: AgentState, req: &GotoRequest) -> ApiResult<AgentState> {
    let cell = Cell::new(req.x, req.y);
    if !env.spec.in_bounds(cell) {
        return Err(ApiError::bad_request(format!("{cell} is outside the grid")));
    }
    if env.spec.is_wall(cell) {
        return Err(ApiError::bad_request(format!("{cell} is a wall")));
    }
    let dirs: Vec<Dir> = req.dir.map_or(Dir::ALL.to_vec(), |d| vec![d]);
    dirs.into_iter()
        .filter_map(|d| {
            let t = AgentState::at(cell, d);
            cftraj::gridworld::shortest_action_path(&env.spec, from, t).ok().map(|p| (p.len(), t))
        })
        .min_by_key(|(len, _)| *len)
        .map(|(_, t)| t)
        .ok_or_else(|| ApiError::bad_request(format!("{cell} is unreachable from {from}")))
}

async fn explorer_goto(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<GotoResult>> {
    let req: GotoRequest = parse_body(&body)?;
    blocking(move || {
        let mut ex = st.explorers.lock().unwrap_or_else(|e| e.into_inner());
        let e = ex.get_mut(&id).ok_or_else(|| ApiError::not_found(format!("unknown explorer `{id}`")))?;
        let env = st.artifacts.env(&e.env_id).ok_or_else(|| ApiError::internal("explorer environment vanished"))?;
        let pol = st.artifacts.policy(&e.policy_id).ok_or_else(|| ApiError::internal("explorer policy vanished"))?;
        let target = goto_target(env, e.state, &req)?;
        let n = e.probes.len();
        let mut r = rng::stream(e.seed, n as u64 + 1);
        let traj = probe(&pol.policy, &pol.id, env, e.state, target, &mut r).map_err(|err| ApiError::bad_request(err.to_string()))?;
        let k = traj.meta.exploration_len.unwrap_or(0);
        let mut frames = trajectory_frames(&traj, &env.spec, 0).map_err(|err| ApiError::internal(err.to_string()))?;
        let behavior_frames = frames.split_off(k);
        e.state = traj.final_state;
        let out = GotoResult {
            version: API_VERSION,
            probe: n,
            trajectory: format!("{id}.p{n}"),
            exploration_frames: frames,
            behavior_frames,
            outcome: traj.outcome,
            state: traj.final_state,
        };
        e.probes.push(traj);
        Ok(Json(out))
    })
    .await
}

async fn get_artifacts(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "version": API_VERSION,
        "envs": st.artifacts.env_summaries(),
        "policies": st.artifacts.policy_summaries(),
    }))
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/service.md")]
mod book {}
