//! HTTP service for live dialogues between a person (the user role) and a
//! trained agent checkpoint.
//!
//! Routes:
//! - `POST /sessions`
//! - `POST /sessions/{id}/messages`
//! - `GET /sessions/{id}`
//! - `POST /sessions/{id}/close`
//!
//! See `docs/api.md` in the repository for the JSON schema.

pub mod api;
pub mod error;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex as StdMutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokio::sync::Mutex;

use stratplan_core::agent::{AgentVoice, LlmVoice, TemplateVoice};
use stratplan_core::archive::append_archive;
use stratplan_core::catalog::{Catalog, TaskKind};
use stratplan_core::dialogue::{Scenario, DEFAULT_MAX_TURNS};
use stratplan_core::gateway::LlmBackend;
use stratplan_core::live::{LiveDialogue, LiveError};
use stratplan_core::planner::{FeatureLayout, PlannerError, SelectionMode};
use stratplan_core::reward::{JudgeOptions, RewardConfig, TranscriptJudge};
use stratplan_core::tom::TomMode;
use stratplan_core::trainer::{EpisodeContext, TurnError};
use stratplan_core::{derive_seed, Policy};

use api::{CloseSession, CreateSession, CreatedSession, MessageReply, Metrics, PostMessage, SessionView, UtteranceView};
use error::ApiError;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Checkpoints are looked up as `<dir>/<id>.json`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Finished and expired sessions are appended here.
    pub archive: Option<PathBuf>,
    pub max_sessions: usize,
    pub idle_timeout: Duration,
    pub max_turns: u32,
    pub tom_enabled: bool,
    pub gamma: f64,
    pub seed: u64,
    /// Scenarios selectable by id, besides the two reference scenarios.
    pub scenarios: Vec<Scenario>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            checkpoint_dir: None,
            archive: None,
            max_sessions: 64,
            idle_timeout: Duration::from_secs(30 * 60),
            max_turns: DEFAULT_MAX_TURNS,
            tom_enabled: true,
            gamma: 0.999,
            seed: 0,
            scenarios: Vec::new(),
        }
    }
}

/// Models behind the agent's words, user-state inference and goal judging.
#[derive(Clone)]
pub struct Engine {
    pub voice: Arc<dyn AgentVoice>,
    pub judge: Arc<dyn LlmBackend>,
    /// `None` uses rule-based inference.
    pub tom: Option<Arc<dyn LlmBackend>>,
}

impl Engine {
    /// Template utterances and the rule-based transcript judge; no network.
    pub fn scripted() -> Self {
        Engine { voice: Arc::new(TemplateVoice), judge: Arc::new(TranscriptJudge::default()), tom: None }
    }

    /// Everything served by one chat backend.
    pub fn remote(backend: Arc<dyn LlmBackend>) -> Self {
        Engine { voice: Arc::new(LlmVoice { backend: backend.clone() }), judge: backend.clone(), tom: Some(backend) }
    }
}

struct Session {
    id: String,
    checkpoint: String,
    params: Arc<Policy>,
    live: LiveDialogue<f64>,
    tom_enabled: bool,
    created_at: u64,
    last_active: Instant,
    rng: ChaCha8Rng,
    archived: bool,
}

struct Inner {
    config: ServiceConfig,
    engine: Engine,
    checkpoints: StdMutex<HashMap<String, Arc<Policy>>>,
    sessions: StdMutex<HashMap<String, Arc<Mutex<Session>>>>,
    created: AtomicU64,
    archive_lock: StdMutex<()>,
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

fn context<'a>(engine: &'a Engine, config: &ServiceConfig, task: TaskKind, tom_enabled: bool) -> EpisodeContext<'a> {
    let catalog = Catalog::bundled();
    let tom = match (tom_enabled, &engine.tom) {
        (false, _) => TomMode::Off,
        (true, None) => TomMode::Scripted,
        (true, Some(b)) => TomMode::Backend(b.as_ref()),
    };
    EpisodeContext {
        catalog,
        layout: FeatureLayout::for_task(task, catalog),
        voice: engine.voice.as_ref(),
        tom,
        judge: engine.judge.as_ref(),
        judge_options: JudgeOptions::default(),
        reward: RewardConfig::default(),
        gamma: config.gamma,
        max_turns: config.max_turns,
        selection: SelectionMode::Greedy,
    }
}

fn live_error(e: LiveError) -> ApiError {
    match e {
        LiveError::Terminal(_) => ApiError::session_terminal(),
        LiveError::EmptyText => ApiError::empty_text(),
        LiveError::BadDeclaration(_) => ApiError::invalid_outcome(e.to_string()),
        LiveError::TaskMismatch { .. } => ApiError::checkpoint_incompatible(e.to_string()),
        LiveError::Turn(TurnError::Planner(p)) => ApiError::internal(p.to_string()),
        LiveError::Turn(t) => ApiError::backend_failure(t.to_string()),
    }
}

fn valid_checkpoint_id(id: &str) -> bool {
    !id.is_empty() && !id.starts_with('.') && id.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl AppState {
    pub fn new(config: ServiceConfig, engine: Engine) -> Self {
        AppState(Arc::new(Inner {
            config,
            engine,
            checkpoints: StdMutex::new(HashMap::new()),
            sessions: StdMutex::new(HashMap::new()),
            created: AtomicU64::new(0),
            archive_lock: StdMutex::new(()),
        }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.0.config
    }

    /// Makes an in-memory policy available under `id`.
    pub fn register_checkpoint(&self, id: impl Into<String>, params: Policy) {
        self.0.checkpoints.lock().unwrap().insert(id.into(), Arc::new(params));
    }

    fn checkpoint(&self, id: &str, task: TaskKind) -> Result<Arc<Policy>, ApiError> {
        if let Some(p) = self.0.checkpoints.lock().unwrap().get(id) {
            return if p.task == task {
                Ok(p.clone())
            } else {
                Err(ApiError::checkpoint_incompatible(format!("checkpoint {id:?} is for {}", p.task)))
            };
        }
        let dir = match &self.0.config.checkpoint_dir {
            Some(dir) if valid_checkpoint_id(id) => dir,
            _ => return Err(ApiError::checkpoint_not_found(id)),
        };
        let path = dir.join(format!("{id}.json"));
        if !path.is_file() {
            return Err(ApiError::checkpoint_not_found(id));
        }
        let layout = FeatureLayout::for_task(task, Catalog::bundled());
        let params = Policy::load(&path, Some(&layout)).map_err(|e| match e {
            PlannerError::LayoutMismatch { .. } | PlannerError::Dimension { .. } => ApiError::checkpoint_incompatible(e.to_string()),
            other => ApiError::internal(other.to_string()),
        })?;
        if params.task != task {
            return Err(ApiError::checkpoint_incompatible(format!("checkpoint {id:?} is for {}", params.task)));
        }
        let params = Arc::new(params);
        self.0.checkpoints.lock().unwrap().insert(id.to_string(), params.clone());
        Ok(params)
    }

    fn scenario(&self, task: TaskKind, id: Option<&str>) -> Result<Scenario, ApiError> {
        let Some(id) = id else {
            return Ok(Scenario::reference(task));
        };
        let reference = TaskKind::ALL.map(Scenario::reference);
        let found = reference.iter().chain(&self.0.config.scenarios).find(|s| s.id == id).ok_or_else(|| ApiError::scenario_not_found(id))?;
        if found.task() != task {
            return Err(ApiError::invalid_request(format!("scenario {id:?} is for {}", found.task())));
        }
        Ok(found.clone())
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.0.sessions.lock().unwrap().get(id).cloned().ok_or_else(|| ApiError::session_not_found(id))
    }

    fn active_sessions(&self) -> usize {
        let sessions = self.0.sessions.lock().unwrap();
        sessions.values().filter(|s| s.try_lock().map(|s| !s.live.is_closed()).unwrap_or(true)).count()
    }

    fn view(&self, s: &Session) -> SessionView {
        let state = &s.live.state;
        SessionView {
            id: s.id.clone(),
            task: state.task(),
            scenario: state.scenario.clone(),
            checkpoint: s.checkpoint.clone(),
            tom_enabled: s.tom_enabled,
            status: state.status.into(),
            closed: s.live.is_closed(),
            turns: state.turn_count,
            max_turns: state.max_turns,
            transcript: state.history.iter().map(UtteranceView::from).collect(),
            sl_ratio: s.live.sl_ratio(),
            created_at: s.created_at,
            idle_timeout_secs: self.0.config.idle_timeout.as_secs(),
        }
    }

    /// Appends the session's record to the archive once it is closed.
    fn persist(&self, s: &mut Session) {
        if s.archived || !s.live.is_closed() {
            return;
        }
        s.archived = true;
        let Some(path) = &self.0.config.archive else {
            return;
        };
        let ctx = context(&self.0.engine, &self.0.config, s.live.state.task(), s.tom_enabled);
        let record = s.live.record(&ctx);
        let _guard = self.0.archive_lock.lock().unwrap();
        if let Err(e) = append_archive(path, &[record]) {
            log::error!("archiving session {}: {e}", s.id);
        }
    }

    /// Closes sessions idle past the deadline, archiving ongoing ones as
    /// incomplete, and forgets them. Returns how many were removed.
    pub fn sweep_expired(&self, now: Instant) -> usize {
        let timeout = self.0.config.idle_timeout;
        let candidates: Vec<(String, Arc<Mutex<Session>>)> =
            self.0.sessions.lock().unwrap().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let mut removed = 0;
        for (id, session) in candidates {
            // sessions busy with a request are not idle
            let Ok(mut s) = session.try_lock() else {
                continue;
            };
            if now.saturating_duration_since(s.last_active) < timeout {
                continue;
            }
            if !s.live.is_closed() {
                s.live.abandon();
                log::info!("session {id} expired");
            }
            self.persist(&mut s);
            self.0.sessions.lock().unwrap().remove(&id);
            removed += 1;
        }
        removed
    }

    async fn create(&self, req: CreateSession) -> Result<CreatedSession, ApiError> {
        let task = api::parse_task(&req.task)?;
        let params = self.checkpoint(&req.checkpoint, task)?;
        let scenario = self.scenario(task, req.scenario_id.as_deref())?;
        let max = self.0.config.max_sessions;
        if self.active_sessions() >= max {
            return Err(ApiError::capacity_exceeded(max));
        }
        let tom_enabled = req.tom.unwrap_or(self.0.config.tom_enabled);
        let n = self.0.created.fetch_add(1, Ordering::Relaxed);
        let id = uuid::Uuid::new_v4().simple().to_string();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.0.config.seed, &[n]));
        let state = self.clone();
        let checkpoint = req.checkpoint.clone();
        let session = tokio::task::spawn_blocking(move || {
            let ctx = context(&state.0.engine, &state.0.config, task, tom_enabled);
            let (live, _) = LiveDialogue::start(id.clone(), &params, scenario, &ctx, &mut rng).map_err(live_error)?;
            Ok::<_, ApiError>(Session {
                id,
                checkpoint,
                params,
                live,
                tom_enabled,
                created_at: unix_now(),
                last_active: Instant::now(),
                rng,
                archived: false,
            })
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
        let view = self.view(&session);
        let opening = view.transcript[0].clone();
        let mut sessions = self.0.sessions.lock().unwrap();
        sessions.insert(session.id.clone(), Arc::new(Mutex::new(session)));
        Ok(CreatedSession { session: view, opening })
    }

    async fn message(&self, id: &str, text: String) -> Result<MessageReply, ApiError> {
        let session = self.session(id)?;
        let guard = session.lock_owned().await;
        if guard.live.is_closed() {
            return Err(ApiError::session_terminal());
        }
        if text.trim().is_empty() {
            return Err(ApiError::empty_text());
        }
        let state = self.clone();
        tokio::task::spawn_blocking(move || {
            let mut guard = guard;
            let s = &mut *guard;
            s.last_active = Instant::now();
            let ctx = context(&state.0.engine, &state.0.config, s.live.state.task(), s.tom_enabled);
            let exchange = s.live.user_message(&text, &s.params, &ctx, &mut s.rng).map_err(live_error)?;
            state.persist(s);
            let st = &s.live.state;
            Ok(MessageReply {
                user: UtteranceView::from(&exchange.user),
                agent: exchange.agent.as_ref().map(UtteranceView::from),
                status: exchange.status,
                sl_ratio: exchange.sl_ratio,
                metrics: Metrics {
                    turns: st.turn_count,
                    max_turns: st.max_turns,
                    strategies: st.agent_strategies().map(str::to_string).collect(),
                },
            })
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
    }

    async fn get(&self, id: &str) -> Result<SessionView, ApiError> {
        let session = self.session(id)?;
        let s = session.lock().await;
        Ok(self.view(&s))
    }

    async fn close(&self, id: &str, req: CloseSession) -> Result<SessionView, ApiError> {
        let declared = req.to_outcome()?;
        let session = self.session(id)?;
        let mut s = session.lock().await;
        if s.live.is_closed() {
            return Err(ApiError::session_terminal());
        }
        s.last_active = Instant::now();
        match declared {
            Some(outcome) => {
                let ctx = context(&self.0.engine, &self.0.config, s.live.state.task(), s.tom_enabled);
                s.live.declare(outcome, &ctx).map_err(live_error)?;
            }
            None => s.live.abandon(),
        }
        self.persist(&mut s);
        Ok(self.view(&s))
    }
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::invalid_request(e.body_text()))
}

async fn create_session(
    State(state): State<AppState>,
    payload: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<CreatedSession>), ApiError> {
    let created = state.create(body(payload)?).await?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn post_message(
    State(state): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<PostMessage>, JsonRejection>,
) -> Result<Json<MessageReply>, ApiError> {
    // unknown session and terminal session take precedence over a bad body
    state.session(&id)?;
    let req = body(payload)?;
    state.message(&id, req.text).await.map(Json)
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    state.get(&id).await.map(Json)
}

async fn close_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
    payload: Option<Json<CloseSession>>,
) -> Result<Json<SessionView>, ApiError> {
    let req = payload.map(|Json(v)| v).unwrap_or_default();
    state.close(&id, req).await.map(Json)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/close", post(close_session))
        .with_state(state)
}

/// Serves until ctrl-c, sweeping idle sessions in the background. On
/// shutdown, every open session is archived as incomplete.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let sweeper = state.clone();
    let period = (sweeper.config().idle_timeout / 4).clamp(Duration::from_secs(1), Duration::from_secs(30));
    let handle = tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            sweeper.sweep_expired(Instant::now());
        }
    });
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    handle.abort();
    state.sweep_expired(Instant::now() + state.config().idle_timeout + Duration::from_secs(1));
    Ok(())
}

/// Loads extra scenarios from a JSON array file.
pub fn load_scenarios(path: &FsPath) -> Result<Vec<Scenario>, String> {
    stratplan_core::dialogue::load_scenarios(path)
}
