//! Multi-session task orchestration.
//!
//! A `TaskState` is a value: every operation takes the current state and
//! returns the next one, so a failed operation leaves the caller's state
//! untouched. The orchestrator itself only tracks which workers have an
//! active task.

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};
use uuid::Uuid;

use crate::acts::{ActConfig, ActDecision, ActEngine, ActError};
use crate::domains::DomainConfig;
use crate::extraction::{
    apply_validation, ExtractionDraft, ExtractionError, Extractor, ValidationEdit,
};
use crate::guidance::{AuditLog, Guidance, GuidanceEngine, GuidanceError};
use crate::llm::{LlmClient, StageSettings};
use crate::memory::{MemoryError, MemoryStore};
use crate::model::{
    CategorySchema, DialogueAct, DialogueSession, Role, SessionStatus, TaskScenario, Utterance,
    WorkerProfile,
};
use crate::template::TemplateStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Chatting,
    Extracting,
    Validating,
    BetweenSessions,
    Done,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Chatting => "chatting",
            Phase::Extracting => "extracting",
            Phase::Validating => "validating",
            Phase::BetweenSessions => "between_sessions",
            Phase::Done => "done",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectionMode {
    #[default]
    SelfDialogue,
    Synthetic,
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("worker `{0}` already has an active task")]
    WorkerBusy(String),
    #[error("worker `{0}` already has committed sessions in this domain")]
    WorkerHasHistory(String),
    #[error("operation needs phase {expected}, task is in {actual}")]
    WrongPhase {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("it is the {expected} turn")]
    WrongTurn { expected: &'static str },
    #[error("recommendations must include at least one URL")]
    MissingUrl,
    #[error("utterance text is empty")]
    EmptyText,
    #[error("guidance was already regenerated for this turn")]
    RegenerationLimit,
    #[error("scenario has no step {0}")]
    MissingScenarioStep(u32),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Act(#[from] ActError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Everything about one worker's progress through a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub task_id: String,
    pub mode: CollectionMode,
    pub worker: WorkerProfile,
    pub scenario: TaskScenario,
    pub schema: CategorySchema,
    pub current_session: DialogueSession,
    pub pending_guidance: Option<Guidance>,
    pub pending_act: Option<DialogueAct>,
    pub pending_decision: Option<ActDecision>,
    pub phase: Phase,
    /// Extraction result awaiting worker validation.
    pub draft: Option<ExtractionDraft>,
    /// Drafts of completed sessions, aligned with `worker.completed_sessions`.
    pub drafts: Vec<ExtractionDraft>,
    /// Every guidance issued in this task, in order.
    pub guidance_log: Vec<Guidance>,
    /// Regenerations used on the pending assistant turn.
    pub regenerations: u32,
    pub abandoned: bool,
    /// Recoverable failure from the last operation (extraction or next-session start).
    pub last_error: Option<String>,
}

impl TaskState {
    pub fn worker_id(&self) -> &str {
        &self.worker.worker_id
    }

    pub fn domain(&self) -> &str {
        &self.schema.domain
    }

    pub fn is_finished(&self) -> bool {
        self.phase == Phase::Done
    }

    /// All sessions of the task: completed ones, then the current one when it
    /// was abandoned.
    pub fn sessions(&self) -> Vec<DialogueSession> {
        let mut out = self.worker.completed_sessions.clone();
        if self.current_session.status == SessionStatus::Abandoned {
            out.push(self.current_session.clone());
        }
        out
    }

    pub fn guidance(&self, guidance_id: &str) -> Option<&Guidance> {
        self.guidance_log
            .iter()
            .find(|g| g.guidance_id == guidance_id)
    }

    fn require_phase(&self, expected: Phase) -> Result<(), OrchestratorError> {
        if self.phase == expected {
            Ok(())
        } else {
            Err(OrchestratorError::WrongPhase {
                expected: expected.as_str(),
                actual: self.phase.as_str(),
            })
        }
    }
}

/// Assistant turns with a pending guidance whose act does not match, or
/// that reference no logged guidance.
pub fn guidance_integrity_violations(
    sessions: &[DialogueSession],
    log: &[Guidance],
) -> Vec<String> {
    let mut out = Vec::new();
    for s in sessions {
        for u in s.utterances.iter().filter(|u| u.role == Role::Assistant) {
            let Some(id) = &u.guidance_id else {
                out.push(format!(
                    "session {} turn {} has no guidance_id",
                    s.session_index, u.turn_index
                ));
                continue;
            };
            match log.iter().find(|g| &g.guidance_id == id) {
                None => out.push(format!(
                    "session {} turn {} references unknown guidance",
                    s.session_index, u.turn_index
                )),
                Some(g) if Some(g.act) != u.act => out.push(format!(
                    "session {} turn {}: guidance act {} differs from utterance act",
                    s.session_index, u.turn_index, g.act
                )),
                Some(_) => {}
            }
        }
    }
    out
}

fn url_pattern() -> &'static Regex {
    static URL: OnceLock<Regex> = OnceLock::new();
    URL.get_or_init(|| Regex::new(r"https?://\S+").expect("valid URL pattern"))
}

pub fn contains_url(text: &str) -> bool {
    url_pattern().is_match(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    pub act: ActConfig,
    /// Start the next session right after finalization instead of pausing.
    pub auto_advance: bool,
    pub max_regenerations_per_turn: u32,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            act: ActConfig::default(),
            auto_advance: true,
            max_regenerations_per_turn: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Orchestrator {
    acts: ActEngine,
    guidance: GuidanceEngine,
    extractor: Extractor,
    config: OrchestratorConfig,
    memory_root: Option<PathBuf>,
    active: Arc<Mutex<HashSet<String>>>,
}

impl Orchestrator {
    pub fn new(
        llm: LlmClient,
        templates: Arc<TemplateStore>,
        stages: StageSettings,
        config: OrchestratorConfig,
    ) -> Self {
        Orchestrator {
            acts: ActEngine::new(
                llm.clone(),
                templates.clone(),
                stages.act.clone(),
                config.act.clone(),
            ),
            guidance: GuidanceEngine::new(llm.clone(), templates.clone(), stages.guidance.clone()),
            extractor: Extractor::new(llm, templates, stages.extraction.clone()),
            config,
            memory_root: None,
            active: Arc::new(Mutex::new(HashSet::new())),
        }
    }

    /// Persist memory under `<root>/<domain>/<worker>/`.
    pub fn with_memory_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.memory_root = Some(root.into());
        self
    }

    pub fn with_audit_log(mut self, log: Arc<AuditLog>) -> Self {
        self.guidance = self.guidance.with_audit(log);
        self
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.config
    }

    pub fn memory_store(&self, domain: &str) -> Option<MemoryStore> {
        self.memory_root
            .as_ref()
            .map(|r| MemoryStore::new(r.join(domain)))
    }

    pub fn active_workers(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .active
            .lock()
            .expect("active lock")
            .iter()
            .cloned()
            .collect();
        v.sort();
        v
    }

    fn release(&self, worker_id: &str) {
        self.active.lock().expect("active lock").remove(worker_id);
    }

    pub fn start_task(
        &self,
        domain: &DomainConfig,
        worker_id: &str,
    ) -> Result<TaskState, OrchestratorError> {
        self.start_task_with_mode(domain, worker_id, CollectionMode::SelfDialogue)
    }

    pub fn start_task_with_mode(
        &self,
        domain: &DomainConfig,
        worker_id: &str,
        mode: CollectionMode,
    ) -> Result<TaskState, OrchestratorError> {
        if !self
            .active
            .lock()
            .expect("active lock")
            .insert(worker_id.to_string())
        {
            return Err(OrchestratorError::WorkerBusy(worker_id.to_string()));
        }
        let result = self.init_task(domain, worker_id, mode);
        if result.is_err() {
            self.release(worker_id);
        }
        result
    }

    fn init_task(
        &self,
        domain: &DomainConfig,
        worker_id: &str,
        mode: CollectionMode,
    ) -> Result<TaskState, OrchestratorError> {
        if let Some(store) = self.memory_store(domain.name()) {
            if !store.commits(worker_id)?.is_empty() {
                return Err(OrchestratorError::WorkerHasHistory(worker_id.to_string()));
            }
        }
        let step = domain
            .scenario
            .step(1)
            .ok_or(OrchestratorError::MissingScenarioStep(1))?
            .clone();
        let state = TaskState {
            task_id: Uuid::new_v4().to_string(),
            mode,
            worker: WorkerProfile::new(worker_id),
            scenario: domain.scenario.clone(),
            schema: domain.schema.clone(),
            current_session: DialogueSession::new(step),
            pending_guidance: None,
            pending_act: None,
            pending_decision: None,
            phase: Phase::Chatting,
            draft: None,
            drafts: Vec::new(),
            guidance_log: Vec::new(),
            regenerations: 0,
            abandoned: false,
            last_error: None,
        };
        info!(worker = worker_id, domain = domain.name(), "task started");
        self.decide_and_guide(state)
    }

    /// Chooses the next act for the current session and attaches guidance.
    fn decide_and_guide(&self, mut state: TaskState) -> Result<TaskState, OrchestratorError> {
        let session = &state.current_session;
        let decision = self.acts.next_act(
            &session.utterances,
            session.last_act(),
            session.session_index,
            &state.schema,
        )?;
        let guidance = self.guidance.generate(
            decision.act,
            &state.worker.memory.snapshot(),
            &session.utterances,
            &state.schema,
            session.session_index,
        )?;
        state.pending_act = Some(decision.act);
        state.pending_decision = Some(decision);
        state.guidance_log.push(guidance.clone());
        state.pending_guidance = Some(guidance);
        state.regenerations = 0;
        Ok(state)
    }

    pub fn submit_assistant_turn(
        &self,
        state: &TaskState,
        text: &str,
    ) -> Result<TaskState, OrchestratorError> {
        state.require_phase(Phase::Chatting)?;
        if state.current_session.next_role() != Role::Assistant {
            return Err(OrchestratorError::WrongTurn { expected: "user" });
        }
        let text = text.trim();
        if text.is_empty() {
            return Err(OrchestratorError::EmptyText);
        }
        let (Some(act), Some(guidance)) = (state.pending_act, state.pending_guidance.as_ref())
        else {
            return Err(OrchestratorError::WrongPhase {
                expected: "chatting",
                actual: "chatting without guidance",
            });
        };
        if act == DialogueAct::Recommend && !contains_url(text) {
            return Err(OrchestratorError::MissingUrl);
        }
        let mut next = state.clone();
        let turn = next.current_session.next_turn_index();
        next.current_session.utterances.push(Utterance::assistant(
            turn,
            text,
            act,
            Some(guidance.guidance_id.clone()),
        ));
        next.pending_guidance = None;
        next.pending_act = None;
        next.pending_decision = None;
        next.regenerations = 0;
        if act == DialogueAct::Goodbye {
            next.current_session.status = SessionStatus::AwaitingExtraction;
            next.phase = Phase::Extracting;
            return Ok(self.run_extraction(&next));
        }
        Ok(next)
    }

    pub fn submit_user_turn(
        &self,
        state: &TaskState,
        text: &str,
    ) -> Result<TaskState, OrchestratorError> {
        state.require_phase(Phase::Chatting)?;
        if state.current_session.next_role() != Role::User {
            return Err(OrchestratorError::WrongTurn {
                expected: "assistant",
            });
        }
        let text = text.trim();
        if text.is_empty() {
            return Err(OrchestratorError::EmptyText);
        }
        let mut next = state.clone();
        let turn = next.current_session.next_turn_index();
        next.current_session
            .utterances
            .push(Utterance::user(turn, text));
        self.decide_and_guide(next)
    }

    /// Runs extraction on a session awaiting it. Failure keeps the task in
    /// the extracting phase with `last_error` set, so it can be retried.
    pub fn run_extraction(&self, state: &TaskState) -> TaskState {
        let mut next = state.clone();
        if next.phase != Phase::Extracting {
            next.last_error = Some(format!(
                "extraction requested in phase {}",
                next.phase.as_str()
            ));
            return next;
        }
        match self.extractor.extract(&next.current_session, &next.schema) {
            Ok(draft) => {
                next.current_session.status = SessionStatus::AwaitingValidation;
                next.phase = Phase::Validating;
                next.draft = Some(draft);
                next.last_error = None;
            }
            Err(e) => {
                warn!(worker = next.worker_id(), error = %e, "extraction failed");
                next.last_error = Some(e.to_string());
            }
        }
        next
    }

    pub fn retry_extraction(&self, state: &TaskState) -> Result<TaskState, OrchestratorError> {
        state.require_phase(Phase::Extracting)?;
        Ok(self.run_extraction(state))
    }

    /// Applies validation edits, commits memory and moves on.
    pub fn finalize_session(
        &self,
        state: &TaskState,
        edits: &[ValidationEdit],
    ) -> Result<TaskState, OrchestratorError> {
        state.require_phase(Phase::Validating)?;
        let draft = state.draft.as_ref().ok_or(OrchestratorError::WrongPhase {
            expected: "validating",
            actual: "validating without draft",
        })?;
        let finals = apply_validation(draft, edits)?;
        let index = state.current_session.session_index;
        let memory = match self.memory_store(state.domain()) {
            Some(store) => store.commit(&state.worker.memory, index, &finals)?,
            None => state.worker.memory.commit_session(index, &finals)?,
        };

        let mut next = state.clone();
        next.worker.memory = memory;
        next.current_session.extracted = finals;
        next.current_session.status = SessionStatus::Completed;
        next.worker
            .completed_sessions
            .push(next.current_session.clone());
        next.drafts.push(draft.clone());
        next.draft = None;
        next.last_error = None;
        info!(
            worker = next.worker_id(),
            session = index,
            "session finalized"
        );

        if next.scenario.step(index + 1).is_none() {
            next.phase = Phase::Done;
            self.release(next.worker_id());
            return Ok(next);
        }
        next.phase = Phase::BetweenSessions;
        if !self.config.auto_advance {
            return Ok(next);
        }
        match self.start_next_session(&next) {
            Ok(started) => Ok(started),
            Err(e) => {
                // Memory is committed; the next session can be started later.
                warn!(worker = next.worker_id(), error = %e, "next session could not start");
                next.last_error = Some(e.to_string());
                Ok(next)
            }
        }
    }

    pub fn start_next_session(&self, state: &TaskState) -> Result<TaskState, OrchestratorError> {
        state.require_phase(Phase::BetweenSessions)?;
        let index = state.current_session.session_index + 1;
        let step = state
            .scenario
            .step(index)
            .ok_or(OrchestratorError::MissingScenarioStep(index))?
            .clone();
        let mut next = state.clone();
        next.current_session = DialogueSession::new(step);
        next.phase = Phase::Chatting;
        next.last_error = None;
        self.decide_and_guide(next)
    }

    /// Ends the task early. Completed sessions and memory are kept; the
    /// current session is marked abandoned unless it was already finalized.
    pub fn abandon(&self, state: &TaskState) -> TaskState {
        let mut next = state.clone();
        if next.phase != Phase::Done {
            if !matches!(next.phase, Phase::BetweenSessions) {
                next.current_session.status = SessionStatus::Abandoned;
            }
            next.abandoned = true;
            next.phase = Phase::Done;
            next.pending_guidance = None;
            next.pending_act = None;
            next.pending_decision = None;
            next.draft = None;
        }
        self.release(next.worker_id());
        next
    }

    /// Replaces the pending guidance with a fresh one for the same act.
    pub fn regenerate_guidance(&self, state: &TaskState) -> Result<TaskState, OrchestratorError> {
        state.require_phase(Phase::Chatting)?;
        let Some(act) = state.pending_act else {
            return Err(OrchestratorError::WrongTurn { expected: "user" });
        };
        if state.regenerations >= self.config.max_regenerations_per_turn {
            return Err(OrchestratorError::RegenerationLimit);
        }
        let session = &state.current_session;
        let guidance = self.guidance.generate(
            act,
            &state.worker.memory.snapshot(),
            &session.utterances,
            &state.schema,
            session.session_index,
        )?;
        let mut next = state.clone();
        next.guidance_log.push(guidance.clone());
        next.pending_guidance = Some(guidance);
        next.regenerations += 1;
        Ok(next)
    }
}
