//! Routes. Each mutating route maps to exactly one orchestrator operation
//! and runs it on the blocking pool under the task's writer lock; reads
//! clone the latest snapshot without taking that lock.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, RwLock};

use anyhow::Context;
use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequestParts, Path as UrlPath, Query, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use laps_core::dataset::{record_violations, records_from_tasks, SplitSpec};
use laps_core::domains::{self, DomainConfig, BUILTIN_DOMAINS};
use laps_core::extraction::{ExtractionDraft, ValidationEdit};
use laps_core::guidance::AuditLog;
use laps_core::llm::LlmClient;
use laps_core::model::{DialogueAct, Role, ScenarioStep, Tier, Utterance};
use laps_core::orchestrator::{CollectionMode, Orchestrator, OrchestratorError, Phase, TaskState};
use laps_core::template::TemplateStore;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{info, warn};

use crate::auth::{ApiSession, Principal, TokenStore};
use crate::config::ServerConfig;
use crate::error::ApiError;
use crate::store::TaskStore;

struct TaskSlot {
    /// Single writer per task; also owns the nonce cache.
    writer: tokio::sync::Mutex<HashMap<String, (&'static str, Value)>>,
    snapshot: RwLock<Arc<TaskState>>,
}

impl TaskSlot {
    fn new(state: TaskState) -> Self {
        TaskSlot {
            writer: tokio::sync::Mutex::new(HashMap::new()),
            snapshot: RwLock::new(Arc::new(state)),
        }
    }

    fn current(&self) -> Arc<TaskState> {
        self.snapshot.read().expect("snapshot lock").clone()
    }
}

pub struct AppState {
    orchestrator: Orchestrator,
    domains: BTreeMap<String, DomainConfig>,
    tokens: TokenStore,
    worker_secret: Option<String>,
    store: Option<TaskStore>,
    tasks: RwLock<HashMap<String, Arc<TaskSlot>>>,
    // Serializes task creation so the busy check and insert are atomic.
    create: tokio::sync::Mutex<()>,
}

impl AppState {
    pub fn new(
        orchestrator: Orchestrator,
        domains: BTreeMap<String, DomainConfig>,
        tokens: TokenStore,
    ) -> Self {
        AppState {
            orchestrator,
            domains,
            tokens,
            worker_secret: None,
            store: None,
            tasks: RwLock::new(HashMap::new()),
            create: tokio::sync::Mutex::new(()),
        }
    }

    pub fn with_worker_secret(mut self, secret: Option<String>) -> Self {
        self.worker_secret = secret;
        self
    }

    /// Persists tasks under `store` and loads any already there.
    pub fn with_store(mut self, store: TaskStore) -> anyhow::Result<Self> {
        let loaded = store.load_all().context("loading stored tasks")?;
        {
            let mut tasks = self.tasks.write().expect("tasks lock");
            for t in loaded {
                tasks.insert(t.task_id.clone(), Arc::new(TaskSlot::new(t)));
            }
        }
        self.store = Some(store);
        Ok(self)
    }

    /// Wires every component from configuration with the given LLM client.
    pub fn from_config(config: &ServerConfig, llm: LlmClient) -> anyhow::Result<Self> {
        let templates = match &config.templates_dir {
            Some(dir) => TemplateStore::with_dir(dir).context("loading templates")?,
            None => TemplateStore::builtin(),
        };
        std::fs::create_dir_all(&config.storage_dir)
            .with_context(|| format!("creating {}", config.storage_dir.display()))?;
        let orchestrator = Orchestrator::new(
            llm,
            Arc::new(templates),
            config.stages.clone(),
            config.orchestrator.clone(),
        )
        .with_memory_root(config.memory_dir())
        .with_audit_log(Arc::new(AuditLog::new(config.audit_path())));
        let domains = load_domains(config.domains_dir.as_deref())?;
        let tokens = TokenStore::new(config.auth.token_ttl_secs, config.auth.admin_token.clone());
        AppState::new(orchestrator, domains, tokens)
            .with_worker_secret(config.auth.worker_secret.clone())
            .with_store(TaskStore::new(config.tasks_dir()))
    }

    pub fn orchestrator(&self) -> &Orchestrator {
        &self.orchestrator
    }

    pub fn task_snapshots(&self) -> Vec<Arc<TaskState>> {
        let mut v: Vec<Arc<TaskState>> = self
            .tasks
            .read()
            .expect("tasks lock")
            .values()
            .map(|s| s.current())
            .collect();
        v.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        v
    }

    fn slot(&self, task_id: &str) -> Result<Arc<TaskSlot>, ApiError> {
        self.tasks
            .read()
            .expect("tasks lock")
            .get(task_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("task"))
    }

    fn persist(&self, state: &TaskState) -> Result<(), ApiError> {
        match &self.store {
            Some(store) => store
                .save(state)
                .map_err(|e| ApiError::internal(format!("saving task: {e}"))),
            None => Ok(()),
        }
    }
}

/// Built-in domains plus every `*.toml` in `dir`; a file may override a
/// built-in of the same name.
pub fn load_domains(dir: Option<&Path>) -> anyhow::Result<BTreeMap<String, DomainConfig>> {
    let mut out = BTreeMap::new();
    for name in BUILTIN_DOMAINS {
        out.insert(name.to_string(), domains::builtin(name)?);
    }
    if let Some(dir) = dir {
        for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "toml") {
                let d = DomainConfig::load(&path)
                    .with_context(|| format!("loading {}", path.display()))?;
                out.insert(d.name().to_string(), d);
            }
        }
    }
    Ok(out)
}

/// Authenticated caller.
pub struct Auth(pub Principal);

impl FromRequestParts<Arc<AppState>> for Auth {
    type Rejection = ApiError;

    async fn from_request_parts(
        parts: &mut Parts,
        state: &Arc<AppState>,
    ) -> Result<Self, Self::Rejection> {
        let header = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|h| h.to_str().ok());
        Ok(Auth(state.tokens.authenticate(header, Utc::now())?))
    }
}

fn check_owner(principal: &Principal, task: &TaskState) -> Result<(), ApiError> {
    match principal {
        Principal::Admin => Ok(()),
        Principal::Worker(w) if w == task.worker_id() => Ok(()),
        Principal::Worker(_) => Err(ApiError::forbidden()),
    }
}

/// Worker ids name storage directories, so they are kept to a safe alphabet.
pub fn valid_worker_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceView {
    pub guidance_id: String,
    pub act: DialogueAct,
    pub tier: Option<Tier>,
    pub text: String,
    pub target_categories: Vec<String>,
    /// The assistant turn must contain a URL.
    pub url_required: bool,
}

/// What the console renders. Deliberately has no draft-utterance field:
/// the input box is never pre-filled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub worker_id: String,
    pub domain: String,
    pub mode: CollectionMode,
    pub phase: Phase,
    pub turn_owner: Option<Role>,
    pub session_index: u32,
    pub total_sessions: usize,
    pub scenario: ScenarioStep,
    pub pending_guidance: Option<GuidanceView>,
    pub regenerations_left: u32,
    pub dialogue: Vec<Utterance>,
    pub completed_sessions: usize,
    pub memory_size: usize,
    pub has_draft: bool,
    pub abandoned: bool,
    pub last_error: Option<String>,
}

impl TaskView {
    pub fn of(state: &TaskState, max_regenerations: u32) -> Self {
        let chatting = state.phase == Phase::Chatting;
        TaskView {
            task_id: state.task_id.clone(),
            worker_id: state.worker_id().to_string(),
            domain: state.domain().to_string(),
            mode: state.mode,
            phase: state.phase,
            turn_owner: chatting.then(|| state.current_session.next_role()),
            session_index: state.current_session.session_index,
            total_sessions: state.scenario.steps.len(),
            scenario: state.current_session.scenario.clone(),
            pending_guidance: state
                .pending_guidance
                .as_ref()
                .filter(|_| chatting)
                .map(|g| GuidanceView {
                    guidance_id: g.guidance_id.clone(),
                    act: g.act,
                    tier: g.act.tier(),
                    text: g.text.clone(),
                    target_categories: g.target_categories.clone(),
                    url_required: g.act == DialogueAct::Recommend,
                }),
            regenerations_left: max_regenerations.saturating_sub(state.regenerations),
            dialogue: state.current_session.utterances.clone(),
            completed_sessions: state.worker.completed_sessions.len(),
            memory_size: state.worker.memory.len(),
            has_draft: state.draft.is_some(),
            abandoned: state.abandoned,
            last_error: state.last_error.clone(),
        }
    }
}

fn view(app: &AppState, state: &TaskState) -> TaskView {
    TaskView::of(state, app.orchestrator.config().max_regenerations_per_turn)
}

#[derive(Debug, Deserialize)]
pub struct AuthRequest {
    pub worker_id: String,
    #[serde(default)]
    pub secret: Option<String>,
}

async fn issue_token(
    State(app): State<Arc<AppState>>,
    body: Result<Json<AuthRequest>, JsonRejection>,
) -> Result<Json<ApiSession>, ApiError> {
    let Json(req) = body?;
    if !valid_worker_id(&req.worker_id) {
        return Err(ApiError::field(
            "worker_id",
            "invalid_worker_id",
            "use 1-64 characters from [A-Za-z0-9._-]",
        ));
    }
    if let Some(secret) = &app.worker_secret {
        if req.secret.as_deref() != Some(secret.as_str()) {
            return Err(ApiError::new(
                StatusCode::UNAUTHORIZED,
                "bad_secret",
                "worker secret does not match",
            ));
        }
    }
    Ok(Json(app.tokens.issue(&req.worker_id, Utc::now())))
}

#[derive(Debug, Deserialize)]
pub struct CreateTask {
    pub domain: String,
    #[serde(default)]
    pub worker_id: Option<String>,
}

async fn create_task(
    State(app): State<Arc<AppState>>,
    Auth(principal): Auth,
    body: Result<Json<CreateTask>, JsonRejection>,
) -> Result<(StatusCode, Json<TaskView>), ApiError> {
    let Json(req) = body?;
    let worker_id = match (&principal, req.worker_id) {
        (Principal::Worker(w), None) => w.clone(),
        (Principal::Worker(w), Some(id)) if *w == id => id,
        (Principal::Worker(_), Some(_)) => return Err(ApiError::forbidden()),
        (Principal::Admin, Some(id)) => id,
        (Principal::Admin, None) => {
            return Err(ApiError::field(
                "worker_id",
                "required",
                "admin must name a worker",
            ))
        }
    };
    if !valid_worker_id(&worker_id) {
        return Err(ApiError::field(
            "worker_id",
            "invalid_worker_id",
            "use 1-64 characters from [A-Za-z0-9._-]",
        ));
    }
    let domain = app.domains.get(&req.domain).cloned().ok_or_else(|| {
        ApiError::field(
            "domain",
            "unknown_domain",
            format!("unknown domain `{}`", req.domain),
        )
    })?;

    let _guard = app.create.lock().await;
    let busy = app
        .task_snapshots()
        .iter()
        .any(|t| t.worker_id() == worker_id && !t.is_finished());
    if busy {
        return Err(OrchestratorError::WorkerBusy(worker_id).into());
    }
    let worker = worker_id.clone();
    let app2 = app.clone();
    let state = tokio::task::spawn_blocking(move || app2.orchestrator.start_task(&domain, &worker))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    app.persist(&state)?;
    info!(task = %state.task_id, worker = %worker_id, "task started");
    let v = view(&app, &state);
    app.tasks
        .write()
        .expect("tasks lock")
        .insert(state.task_id.clone(), Arc::new(TaskSlot::new(state)));
    Ok((StatusCode::CREATED, Json(v)))
}

async fn list_tasks(
    State(app): State<Arc<AppState>>,
    Auth(principal): Auth,
) -> Json<Vec<TaskView>> {
    let views = app
        .task_snapshots()
        .iter()
        .filter(|t| check_owner(&principal, t).is_ok())
        .map(|t| view(&app, t))
        .collect();
    Json(views)
}

async fn get_task(
    State(app): State<Arc<AppState>>,
    Auth(principal): Auth,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<TaskView>, ApiError> {
    let state = app.slot(&id)?.current();
    check_owner(&principal, &state)?;
    Ok(Json(view(&app, &state)))
}

async fn get_extraction(
    State(app): State<Arc<AppState>>,
    Auth(principal): Auth,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<ExtractionDraft>, ApiError> {
    let state = app.slot(&id)?.current();
    check_owner(&principal, &state)?;
    match (&state.phase, &state.draft) {
        (Phase::Validating, Some(draft)) => Ok(Json(draft.clone())),
        _ => Err(OrchestratorError::WrongPhase {
            expected: "validating",
            actual: state.phase.as_str(),
        }
        .into()),
    }
}

/// Runs one orchestrator operation on a task. A repeated `nonce` on the
/// same route returns the first result without re-running it.
async fn mutate<F>(
    app: Arc<AppState>,
    principal: Principal,
    task_id: String,
    route: &'static str,
    nonce: Option<String>,
    op: F,
) -> Result<Json<Value>, ApiError>
where
    F: FnOnce(&Orchestrator, &TaskState) -> Result<TaskState, OrchestratorError> + Send + 'static,
{
    let slot = app.slot(&task_id)?;
    check_owner(&principal, &slot.current())?;
    let mut nonces = slot.writer.lock().await;
    if let Some(n) = &nonce {
        match nonces.get(n) {
            Some((r, cached)) if *r == route => return Ok(Json(cached.clone())),
            Some(_) => {
                return Err(ApiError::field(
                    "nonce",
                    "nonce_reused",
                    "nonce already used on another route",
                ))
            }
            None => {}
        }
    }
    let current = slot.current();
    let app2 = app.clone();
    let next = tokio::task::spawn_blocking(move || op(&app2.orchestrator, &current))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .inspect_err(|e| warn!(task = %task_id, route, error = %e, "operation rejected"))?;
    app.persist(&next)?;
    let body =
        serde_json::to_value(view(&app, &next)).map_err(|e| ApiError::internal(e.to_string()))?;
    *slot.snapshot.write().expect("snapshot lock") = Arc::new(next);
    if let Some(n) = nonce {
        nonces.insert(n, (route, body.clone()));
    }
    Ok(Json(body))
}

#[derive(Debug, Deserialize)]
pub struct TurnRequest {
    pub text: String,
    #[serde(default)]
    pub nonce: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
pub struct NonceOnly {
    #[serde(default)]
    pub nonce: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct ValidationRequest {
    #[serde(default)]
    pub edits: Vec<ValidationEdit>,
    #[serde(default)]
    pub nonce: Option<String>,
}

/// Empty bodies are accepted where only a nonce may be sent.
fn optional_body<T: Default>(body: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    match body {
        Ok(Json(v)) => Ok(v),
        Err(JsonRejection::MissingJsonContentType(_)) => Ok(T::default()),
        Err(e) => Err(e.into()),
    }
}

async fn assistant_turn(
    State(app): State<Arc<AppState>>,
    Auth(p): Auth,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<TurnRequest>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let Json(req) = body?;
    mutate(app, p, id, "assistant-turn", req.nonce, move |o, s| {
        o.submit_assistant_turn(s, &req.text)
    })
    .await
}

async fn user_turn(
    State(app): State<Arc<AppState>>,
    Auth(p): Auth,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<TurnRequest>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let Json(req) = body?;
    mutate(app, p, id, "user-turn", req.nonce, move |o, s| {
        o.submit_user_turn(s, &req.text)
    })
    .await
}

async fn regenerate(
    State(app): State<Arc<AppState>>,
    Auth(p): Auth,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<NonceOnly>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let req = optional_body(body)?;
    mutate(app, p, id, "regenerate", req.nonce, |o, s| {
        o.regenerate_guidance(s)
    })
    .await
}

async fn retry_extraction(
    State(app): State<Arc<AppState>>,
    Auth(p): Auth,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<NonceOnly>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let req = optional_body(body)?;
    mutate(app, p, id, "extraction-retry", req.nonce, |o, s| {
        o.retry_extraction(s)
    })
    .await
}

async fn validation(
    State(app): State<Arc<AppState>>,
    Auth(p): Auth,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<ValidationRequest>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let Json(req) = body?;
    mutate(app, p, id, "validation", req.nonce, move |o, s| {
        o.finalize_session(s, &req.edits)
    })
    .await
}

async fn next_session(
    State(app): State<Arc<AppState>>,
    Auth(p): Auth,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<NonceOnly>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let req = optional_body(body)?;
    mutate(app, p, id, "next-session", req.nonce, |o, s| {
        o.start_next_session(s)
    })
    .await
}

async fn abandon(
    State(app): State<Arc<AppState>>,
    Auth(p): Auth,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<NonceOnly>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let req = optional_body(body)?;
    mutate(app, p, id, "abandon", req.nonce, |o, s| Ok(o.abandon(s))).await
}

#[derive(Debug, Deserialize)]
pub struct ExportQuery {
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub format: Option<String>,
}

/// Finished tasks (abandoned included) as a dataset file. Admin only.
async fn export(
    State(app): State<Arc<AppState>>,
    Auth(principal): Auth,
    Query(q): Query<ExportQuery>,
) -> Result<Response, ApiError> {
    if principal != Principal::Admin {
        return Err(ApiError::forbidden());
    }
    let finished: Vec<TaskState> = app
        .task_snapshots()
        .iter()
        .filter(|t| t.is_finished())
        .map(|t| (**t).clone())
        .collect();
    let records = records_from_tasks(&finished, &SplitSpec::with_seed(q.split_seed))
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let violations: usize = records.iter().map(|r| record_violations(r).len()).sum();
    let (body, content_type) = match q.format.as_deref() {
        None | Some("json") => (
            serde_json::to_string_pretty(&records)
                .map_err(|e| ApiError::internal(e.to_string()))?,
            "application/json",
        ),
        Some("ndjson") => {
            let mut out = String::new();
            for r in &records {
                out.push_str(
                    &serde_json::to_string(r).map_err(|e| ApiError::internal(e.to_string()))?,
                );
                out.push('\n');
            }
            (out, "application/x-ndjson")
        }
        Some(other) => {
            return Err(ApiError::field(
                "format",
                "unknown_format",
                format!("unknown format `{other}`"),
            ))
        }
    };
    let mut resp = body.into_response();
    let headers = resp.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static(content_type));
    headers.insert("x-laps-records", HeaderValue::from(records.len()));
    headers.insert("x-laps-violations", HeaderValue::from(violations));
    Ok(resp)
}

async fn list_domains(State(app): State<Arc<AppState>>) -> Json<Vec<String>> {
    Json(app.domains.keys().cloned().collect())
}

async fn health() -> &'static str {
    "ok"
}

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/auth", post(issue_token))
        .route("/domains", get(list_domains))
        .route("/tasks", post(create_task).get(list_tasks))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/assistant-turn", post(assistant_turn))
        .route("/tasks/{id}/user-turn", post(user_turn))
        .route("/tasks/{id}/guidance/regenerate", post(regenerate))
        .route("/tasks/{id}/extraction", get(get_extraction))
        .route("/tasks/{id}/extraction/retry", post(retry_extraction))
        .route("/tasks/{id}/validation", post(validation))
        .route("/tasks/{id}/next-session", post(next_session))
        .route("/tasks/{id}/abandon", post(abandon))
        .route("/export", get(export))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}
