//! Fully synthetic collection: the LLM writes both sides of the dialogue
//! through the same orchestrator operations a human worker would use.

use std::sync::Arc;

use thiserror::Error;

use crate::domains::DomainConfig;
use crate::llm::{ChatMessage, LlmClient, LlmError, StageConfig};
use crate::model::{render_history, DialogueAct, PreferencePair, Role};
use crate::orchestrator::{
    contains_url, CollectionMode, Orchestrator, OrchestratorError, Phase, TaskState,
};
use crate::template::{render, TemplateError, TemplateStore};

const URL_RULE: &str = "Recommend specific items and include a URL (starting with https://) for every recommended item.";
const URL_REMINDER: &str = "Your reply must include at least one URL starting with https:// for the recommended item. Rewrite it.";
const OPEN_PERSONA: &str =
    "- Decide on your own preferences and keep them consistent across sessions.";

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("the model produced an empty {0} turn")]
    EmptyTurn(&'static str),
    #[error("session {0} did not close within the step limit")]
    Runaway(u32),
}

#[derive(Debug, Clone)]
pub struct SyntheticDriver {
    llm: LlmClient,
    templates: Arc<TemplateStore>,
    stage: StageConfig,
}

/// Strips a leading `Assistant:`/`User:` label some models echo back.
fn clean_turn(raw: &str) -> String {
    let t = raw.trim();
    for label in ["Assistant:", "User:"] {
        if let Some(rest) = t.strip_prefix(label) {
            return rest.trim().to_string();
        }
    }
    t.to_string()
}

pub fn render_persona(persona: Option<&[PreferencePair]>) -> String {
    match persona {
        Some(pairs) if !pairs.is_empty() => pairs
            .iter()
            .map(|p| {
                let verb = match p.polarity {
                    crate::model::Polarity::Like => "like",
                    crate::model::Polarity::Dislike => "dislike",
                };
                format!("- {}: you {} {}", p.category, verb, p.attribute)
            })
            .collect::<Vec<_>>()
            .join("\n"),
        _ => OPEN_PERSONA.to_string(),
    }
}

impl SyntheticDriver {
    /// `stage` configures the role-playing calls; temperature 1.0 by default.
    pub fn new(llm: LlmClient, templates: Arc<TemplateStore>, stage: StageConfig) -> Self {
        SyntheticDriver {
            llm,
            templates,
            stage,
        }
    }

    pub fn assistant_prompt(&self, state: &TaskState) -> Result<String, TemplateError> {
        let template = self.templates.get(state.domain(), "synthetic/assistant")?;
        let guidance = state
            .pending_guidance
            .as_ref()
            .map(|g| g.text.as_str())
            .unwrap_or("");
        let url_rule = if state.pending_act == Some(DialogueAct::Recommend) {
            URL_RULE
        } else {
            ""
        };
        let history = render_history(&state.current_session.utterances);
        Ok(render(
            template,
            &[
                ("domain", state.domain()),
                ("url_rule", url_rule),
                ("guidance", guidance),
                ("dialogue_history", &history),
            ],
        ))
    }

    pub fn user_prompt(
        &self,
        state: &TaskState,
        persona: Option<&[PreferencePair]>,
    ) -> Result<String, TemplateError> {
        let template = self.templates.get(state.domain(), "synthetic/user")?;
        let history = render_history(&state.current_session.utterances);
        let persona = render_persona(persona);
        Ok(render(
            template,
            &[
                ("domain", state.domain()),
                ("scenario", &state.current_session.scenario.description),
                ("persona", &persona),
                ("dialogue_history", &history),
            ],
        ))
    }

    fn complete(&self, messages: Vec<ChatMessage>) -> Result<String, LlmError> {
        Ok(clean_turn(
            &self.llm.complete(&self.stage.request(messages))?.text,
        ))
    }

    fn assistant_turn(&self, state: &TaskState) -> Result<String, SyntheticError> {
        let prompt = self.assistant_prompt(state)?;
        let mut messages = vec![ChatMessage::user(prompt)];
        let text = self.complete(messages.clone())?;
        let needs_url = state.pending_act == Some(DialogueAct::Recommend);
        if !text.is_empty() && (!needs_url || contains_url(&text)) {
            return Ok(text);
        }
        messages.push(ChatMessage::assistant(text));
        messages.push(ChatMessage::user(if needs_url {
            URL_REMINDER
        } else {
            "Write a non-empty reply."
        }));
        let text = self.complete(messages)?;
        if text.is_empty() {
            return Err(SyntheticError::EmptyTurn("assistant"));
        }
        Ok(text)
    }

    fn user_turn(
        &self,
        state: &TaskState,
        persona: Option<&[PreferencePair]>,
    ) -> Result<String, SyntheticError> {
        let text = self.complete(vec![ChatMessage::user(self.user_prompt(state, persona)?)])?;
        if text.is_empty() {
            return Err(SyntheticError::EmptyTurn("user"));
        }
        Ok(text)
    }

    /// Runs every scenario session to completion. Extracted preferences are
    /// accepted as-is, standing in for the human validation pass.
    pub fn run_task(
        &self,
        orchestrator: &Orchestrator,
        domain: &DomainConfig,
        worker_id: &str,
        persona: Option<&[PreferencePair]>,
    ) -> Result<TaskState, SyntheticError> {
        let mut state =
            orchestrator.start_task_with_mode(domain, worker_id, CollectionMode::Synthetic)?;
        let result = self.drive(orchestrator, &mut state, persona);
        if result.is_err() && state.phase != Phase::Done {
            orchestrator.abandon(&state);
        }
        result.map(|_| state)
    }

    fn drive(
        &self,
        orchestrator: &Orchestrator,
        state: &mut TaskState,
        persona: Option<&[PreferencePair]>,
    ) -> Result<(), SyntheticError> {
        let step_limit = 2 * orchestrator.config().act.turn_budget as usize + 2;
        loop {
            match state.phase {
                Phase::Chatting => {
                    if state.current_session.utterances.len() > step_limit {
                        return Err(SyntheticError::Runaway(state.current_session.session_index));
                    }
                    *state = match state.current_session.next_role() {
                        Role::Assistant => {
                            let text = self.assistant_turn(state)?;
                            orchestrator.submit_assistant_turn(state, &text)?
                        }
                        Role::User => {
                            let text = self.user_turn(state, persona)?;
                            orchestrator.submit_user_turn(state, &text)?
                        }
                    };
                }
                Phase::Extracting => {
                    let next = orchestrator.retry_extraction(state)?;
                    if next.phase == Phase::Extracting {
                        let detail = next.last_error.clone().unwrap_or_default();
                        return Err(SyntheticError::Llm(LlmError::Rejected(detail)));
                    }
                    *state = next;
                }
                Phase::Validating => *state = orchestrator.finalize_session(state, &[])?,
                Phase::BetweenSessions => *state = orchestrator.start_next_session(state)?,
                Phase::Done => return Ok(()),
            }
        }
    }
}
