//! Shared domain types for guided self-dialogue collection.
//!
//! These are plain values: they carry invariant checks but no workflow
//! logic. The orchestrator is the only component that advances sessions.

use std::collections::HashSet;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::PreferenceMemory;

/// Speaker of an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Role::User => "User",
            Role::Assistant => "Assistant",
        }
    }

    pub fn other(&self) -> Role {
        match self {
            Role::User => Role::Assistant,
            Role::Assistant => Role::User,
        }
    }
}

/// Preference tier used to order elicitation within the first session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    MustHave,
    ShouldHave,
    CouldHave,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::MustHave, Tier::ShouldHave, Tier::CouldHave];

    pub fn label(&self) -> &'static str {
        match self {
            Tier::MustHave => "must-have",
            Tier::ShouldHave => "should-have",
            Tier::CouldHave => "could-have",
        }
    }

    /// The elicitation act that collects this tier.
    pub fn act(&self) -> DialogueAct {
        match self {
            Tier::MustHave => DialogueAct::ElicitMust,
            Tier::ShouldHave => DialogueAct::ElicitShould,
            Tier::CouldHave => DialogueAct::ElicitCould,
        }
    }
}

/// Assistant-side dialogue acts. The three `Elicit*` variants are the
/// tiered sub-acts of preference elicitation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogueAct {
    Greeting,
    ElicitMust,
    ElicitShould,
    ElicitCould,
    Recommend,
    FollowUp,
    Goodbye,
}

impl DialogueAct {
    pub const ALL: [DialogueAct; 7] = [
        DialogueAct::Greeting,
        DialogueAct::ElicitMust,
        DialogueAct::ElicitShould,
        DialogueAct::ElicitCould,
        DialogueAct::Recommend,
        DialogueAct::FollowUp,
        DialogueAct::Goodbye,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DialogueAct::Greeting => "greeting",
            DialogueAct::ElicitMust => "elicit_must",
            DialogueAct::ElicitShould => "elicit_should",
            DialogueAct::ElicitCould => "elicit_could",
            DialogueAct::Recommend => "recommend",
            DialogueAct::FollowUp => "follow_up",
            DialogueAct::Goodbye => "goodbye",
        }
    }

    pub fn tier(&self) -> Option<Tier> {
        match self {
            DialogueAct::ElicitMust => Some(Tier::MustHave),
            DialogueAct::ElicitShould => Some(Tier::ShouldHave),
            DialogueAct::ElicitCould => Some(Tier::CouldHave),
            _ => None,
        }
    }

    pub fn is_elicitation(&self) -> bool {
        self.tier().is_some()
    }
}

impl fmt::Display for DialogueAct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DialogueAct {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DialogueAct::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown dialogue act `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub role: Role,
    pub text: String,
    pub turn_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act: Option<DialogueAct>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<DateTime<Utc>>,
}

impl Utterance {
    pub fn user(turn_index: u32, text: impl Into<String>) -> Self {
        Utterance {
            role: Role::User,
            text: text.into(),
            turn_index,
            act: None,
            guidance_id: None,
            created_at: Some(Utc::now()),
        }
    }

    pub fn assistant(
        turn_index: u32,
        text: impl Into<String>,
        act: DialogueAct,
        guidance_id: Option<String>,
    ) -> Self {
        Utterance {
            role: Role::Assistant,
            text: text.into(),
            turn_index,
            act: Some(act),
            guidance_id,
            created_at: Some(Utc::now()),
        }
    }
}

/// Renders utterances as `Role: text` lines, the form used in every prompt.
pub fn render_history(utterances: &[Utterance]) -> String {
    utterances
        .iter()
        .map(|u| format!("{}: {}", u.role.label(), u.text.trim()))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    AwaitingExtraction,
    AwaitingValidation,
    Completed,
    Abandoned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioStep {
    pub session_index: u32,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueSession {
    pub session_index: u32,
    pub scenario: ScenarioStep,
    #[serde(default = "default_status")]
    pub status: SessionStatus,
    pub utterances: Vec<Utterance>,
    #[serde(rename = "preferences", default)]
    pub extracted: Vec<PreferencePair>,
}

fn default_status() -> SessionStatus {
    SessionStatus::Completed
}

impl DialogueSession {
    pub fn new(scenario: ScenarioStep) -> Self {
        DialogueSession {
            session_index: scenario.session_index,
            scenario,
            status: SessionStatus::Active,
            utterances: Vec::new(),
            extracted: Vec::new(),
        }
    }

    /// Role expected for the next utterance.
    pub fn next_role(&self) -> Role {
        self.utterances
            .last()
            .map(|u| u.role.other())
            .unwrap_or(Role::Assistant)
    }

    pub fn next_turn_index(&self) -> u32 {
        self.utterances.len() as u32 + 1
    }

    /// Act of the most recent assistant turn.
    pub fn last_act(&self) -> Option<DialogueAct> {
        self.utterances
            .iter()
            .rev()
            .find(|u| u.role == Role::Assistant)
            .and_then(|u| u.act)
    }

    /// Acts of all assistant turns, in order.
    pub fn acts(&self) -> Vec<DialogueAct> {
        self.utterances.iter().filter_map(|u| u.act).collect()
    }

    pub fn assistant_turns(&self) -> usize {
        self.utterances
            .iter()
            .filter(|u| u.role == Role::Assistant)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Like,
    Dislike,
}

impl Polarity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Polarity::Like => "like",
            Polarity::Dislike => "dislike",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    LlmExtracted,
    HumanEdited,
    HumanAdded,
}

/// One (category, attribute) preference with polarity and provenance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreferencePair {
    pub category: String,
    pub attribute: String,
    pub polarity: Polarity,
    pub source_session: u32,
    #[serde(default = "default_origin")]
    pub origin: Origin,
    #[serde(default)]
    pub validated: bool,
}

fn default_origin() -> Origin {
    Origin::LlmExtracted
}

/// Identity of a preference for set semantics.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairKey {
    pub category: String,
    pub attribute: String,
    pub polarity: Polarity,
}

impl PreferencePair {
    pub fn new(
        category: impl Into<String>,
        attribute: impl Into<String>,
        polarity: Polarity,
        source_session: u32,
    ) -> Self {
        PreferencePair {
            category: category.into(),
            attribute: attribute.into().trim().to_string(),
            polarity,
            source_session,
            origin: Origin::LlmExtracted,
            validated: false,
        }
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }

    pub fn validated(mut self) -> Self {
        self.validated = true;
        self
    }

    pub fn key(&self) -> PairKey {
        PairKey {
            category: self.category.clone(),
            attribute: self.attribute.clone(),
            polarity: self.polarity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub category: String,
    pub tier: Tier,
    #[serde(default)]
    pub elicitation_hint: String,
}

/// Tiered preference categories for one domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySchema {
    pub domain: String,
    pub entries: Vec<CategoryEntry>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("duplicate category `{0}`")]
    DuplicateCategory(String),
    #[error("no {} categories", .0.label())]
    EmptyTier(Tier),
    #[error("scenario steps must be numbered 1..{expected} without gaps (found {found:?})")]
    StepNumbering { expected: u32, found: Vec<u32> },
    #[error("scenario has {steps} steps but max_sessions = {max_sessions}")]
    StepCount { steps: usize, max_sessions: u32 },
}

impl CategorySchema {
    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.category.as_str()) {
                return Err(SchemaError::DuplicateCategory(e.category.clone()));
            }
        }
        for tier in Tier::ALL {
            if !self.entries.iter().any(|e| e.tier == tier) {
                return Err(SchemaError::EmptyTier(tier));
            }
        }
        Ok(())
    }

    pub fn contains(&self, category: &str) -> bool {
        self.entries.iter().any(|e| e.category == category)
    }

    pub fn entry(&self, category: &str) -> Option<&CategoryEntry> {
        self.entries.iter().find(|e| e.category == category)
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.category.as_str())
    }

    pub fn tier_entries(&self, tier: Tier) -> impl Iterator<Item = &CategoryEntry> {
        self.entries.iter().filter(move |e| e.tier == tier)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskScenario {
    pub domain: String,
    pub steps: Vec<ScenarioStep>,
    pub max_sessions: u32,
}

impl TaskScenario {
    pub fn validate(&self) -> Result<(), SchemaError> {
        let found: Vec<u32> = self.steps.iter().map(|s| s.session_index).collect();
        if !found.iter().copied().eq(1..=found.len() as u32) {
            return Err(SchemaError::StepNumbering {
                expected: found.len() as u32,
                found,
            });
        }
        if self.steps.len() as u32 != self.max_sessions {
            return Err(SchemaError::StepCount {
                steps: self.steps.len(),
                max_sessions: self.max_sessions,
            });
        }
        Ok(())
    }

    pub fn step(&self, session_index: u32) -> Option<&ScenarioStep> {
        self.steps.iter().find(|s| s.session_index == session_index)
    }

    /// Copy of the scenario limited to its first `sessions` steps.
    pub fn truncated(&self, sessions: u32) -> TaskScenario {
        let steps: Vec<_> = self
            .steps
            .iter()
            .filter(|s| s.session_index <= sessions)
            .cloned()
            .collect();
        TaskScenario {
            domain: self.domain.clone(),
            max_sessions: steps.len() as u32,
            steps,
        }
    }
}

/// A human agent and everything they have completed so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerProfile {
    pub worker_id: String,
    pub completed_sessions: Vec<DialogueSession>,
    pub memory: PreferenceMemory,
}

impl WorkerProfile {
    pub fn new(worker_id: impl Into<String>) -> Self {
        let worker_id = worker_id.into();
        WorkerProfile {
            memory: PreferenceMemory::new(worker_id.clone()),
            worker_id,
            completed_sessions: Vec::new(),
        }
    }
}

/// Checks every `DialogueSession` invariant, returning one message per breach.
pub fn validate_session(session: &DialogueSession) -> Vec<String> {
    let mut violations = Vec::new();

    if session.session_index == 0 {
        violations.push("session_index must be at least 1".to_string());
    }

    let mut alternation_reported = false;
    for (i, u) in session.utterances.iter().enumerate() {
        if u.text.trim().is_empty() {
            violations.push(format!("utterance {} has empty text", i + 1));
        }
        if u.turn_index != i as u32 + 1 {
            violations.push(format!(
                "turn_index {} at position {} (indices must be contiguous from 1)",
                u.turn_index,
                i + 1
            ));
        }
        if u.role == Role::User && u.guidance_id.is_some() {
            violations.push(format!("user turn {} carries a guidance_id", i + 1));
        }
        if u.role == Role::User && u.act.is_some() {
            violations.push(format!("user turn {} carries a dialogue act", i + 1));
        }
        if i == 0 && u.role != Role::Assistant {
            violations.push("dialogue must open with an assistant turn".to_string());
        }
        if i > 0 && session.utterances[i - 1].role == u.role && !alternation_reported {
            violations.push("roles must alternate".to_string());
            alternation_reported = true;
        }
    }

    violations.extend(act_order_violations(&session.acts()));

    let extracted_allowed = matches!(
        session.status,
        SessionStatus::AwaitingValidation | SessionStatus::Completed
    );
    if !session.extracted.is_empty() && !extracted_allowed {
        violations.push("preferences present before extraction".to_string());
    }

    if session.status == SessionStatus::Completed
        && !session.acts().contains(&DialogueAct::Recommend)
    {
        violations.push("completed session lacks recommendation".to_string());
    }

    let mut keys = HashSet::new();
    for p in &session.extracted {
        if !keys.insert(p.key()) {
            violations.push(format!(
                "duplicate preference ({}, {}, {})",
                p.category,
                p.attribute,
                p.polarity.as_str()
            ));
        }
        if p.attribute.trim().is_empty() {
            violations.push(format!("empty attribute in category {}", p.category));
        }
    }

    violations
}

fn act_order_violations(acts: &[DialogueAct]) -> Vec<String> {
    let mut out = Vec::new();
    let greeting_at = acts.iter().position(|a| *a == DialogueAct::Greeting);
    if let Some(first_elicit) = acts.iter().position(|a| a.is_elicitation()) {
        if greeting_at.is_none_or(|g| g > first_elicit) {
            out.push("elicitation before greeting".to_string());
        }
    }
    let first_rec = acts.iter().position(|a| *a == DialogueAct::Recommend);
    if let Some(first_fu) = acts.iter().position(|a| *a == DialogueAct::FollowUp) {
        if first_rec.is_none_or(|r| r > first_fu) {
            out.push("follow_up before any recommendation".to_string());
        }
    }
    if let Some(bye) = acts.iter().position(|a| *a == DialogueAct::Goodbye) {
        if bye + 1 != acts.len() {
            out.push("goodbye must be the final act".to_string());
        }
    }
    out
}
