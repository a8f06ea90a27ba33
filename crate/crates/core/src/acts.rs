//! Dialogue-act state machine.
//!
//! Acts progress greeting → elicit_must → elicit_should → elicit_could →
//! recommend → follow_up → goodbye. Elicitation acts advance when an
//! LLM-evaluated completion predicate returns true; follow_up loops back to
//! recommend until the user accepts. Sessions after the first start eliciting
//! at the could-have tier. A turn budget bounds every session.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::llm::{parse_boolean_verdict, ChatMessage, LlmClient, LlmError, StageConfig};
use crate::model::{render_history, CategorySchema, DialogueAct, Role, Tier, Utterance};
use crate::template::{render, TemplateError, TemplateStore};

pub const ELICITATION_QUESTION: &str = "Has the user shared any of the preferences listed above? Has the assistant collected why the user has the preference?";
pub const ACCEPTANCE_QUESTION: &str = "Has the user accepted the recommended item? Has the assistant confirmed why the user likes or dislikes the recommendation?";

/// Smallest budget that fits greeting, one elicitation, recommend,
/// follow_up and goodbye.
pub const MIN_TURN_BUDGET: u32 = 5;

#[derive(Debug, Error)]
pub enum ActError {
    #[error("predicate verdict unparseable after reprompt: {0}")]
    PredicateFailure(String),
    #[error("predicate call failed: {0}")]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("session already closed with goodbye")]
    SessionClosed,
    #[error("session_index must be at least 1")]
    InvalidSessionIndex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateCheck {
    pub question: String,
    pub verdict: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActDecision {
    pub act: DialogueAct,
    pub predicate_trace: Vec<PredicateCheck>,
    pub reason: String,
}

impl ActDecision {
    fn fixed(act: DialogueAct, reason: impl Into<String>) -> Self {
        ActDecision {
            act,
            predicate_trace: Vec::new(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActConfig {
    /// Maximum assistant turns per session, goodbye included.
    pub turn_budget: u32,
}

impl Default for ActConfig {
    fn default() -> Self {
        ActConfig { turn_budget: 30 }
    }
}

#[derive(Debug, Clone)]
pub struct ActEngine {
    llm: LlmClient,
    templates: Arc<TemplateStore>,
    stage: StageConfig,
    config: ActConfig,
}

fn first_tier(session_index: u32) -> Tier {
    if session_index == 1 {
        Tier::MustHave
    } else {
        Tier::CouldHave
    }
}

fn next_tier(tier: Tier) -> Option<Tier> {
    match tier {
        Tier::MustHave => Some(Tier::ShouldHave),
        Tier::ShouldHave => Some(Tier::CouldHave),
        Tier::CouldHave => None,
    }
}

impl ActEngine {
    pub fn new(
        llm: LlmClient,
        templates: Arc<TemplateStore>,
        stage: StageConfig,
        config: ActConfig,
    ) -> Self {
        let config = ActConfig {
            turn_budget: config.turn_budget.max(MIN_TURN_BUDGET),
        };
        ActEngine {
            llm,
            templates,
            stage,
            config,
        }
    }

    pub fn config(&self) -> &ActConfig {
        &self.config
    }

    /// Chooses the act for the next assistant turn.
    pub fn next_act(
        &self,
        history: &[Utterance],
        prev_act: Option<DialogueAct>,
        session_index: u32,
        schema: &CategorySchema,
    ) -> Result<ActDecision, ActError> {
        if session_index == 0 {
            return Err(ActError::InvalidSessionIndex);
        }
        let budget = self.config.turn_budget;
        // 1-based position, among assistant turns, of the act being chosen.
        let position = history.iter().filter(|u| u.role == Role::Assistant).count() as u32 + 1;

        let Some(prev) = prev_act else {
            return Ok(ActDecision::fixed(
                DialogueAct::Greeting,
                "session opens with a greeting",
            ));
        };

        let decision = match prev {
            DialogueAct::Goodbye => return Err(ActError::SessionClosed),
            DialogueAct::Greeting => {
                let tier = first_tier(session_index);
                ActDecision::fixed(
                    tier.act(),
                    format!("greeting done; eliciting {} preferences", tier.label()),
                )
            }
            DialogueAct::ElicitMust | DialogueAct::ElicitShould | DialogueAct::ElicitCould => {
                let tier = prev.tier().expect("elicitation act has a tier");
                // Another elicitation must leave room for recommend, follow_up and goodbye.
                if position + 3 > budget {
                    ActDecision::fixed(
                        DialogueAct::Recommend,
                        "turn budget reached; moving to recommendation",
                    )
                } else {
                    self.advance_elicitation(history, tier, schema)?
                }
            }
            DialogueAct::Recommend => {
                ActDecision::fixed(DialogueAct::FollowUp, "follow up on the recommendation")
            }
            DialogueAct::FollowUp => {
                // A revised recommendation must leave room for follow_up and goodbye.
                if position + 2 > budget {
                    ActDecision::fixed(DialogueAct::Goodbye, "turn budget reached; closing")
                } else {
                    let accepted = self.user_accepted(history, &schema.domain)?;
                    let check = PredicateCheck {
                        question: ACCEPTANCE_QUESTION.to_string(),
                        verdict: accepted,
                    };
                    if accepted {
                        ActDecision {
                            act: DialogueAct::Goodbye,
                            predicate_trace: vec![check],
                            reason: "user accepted the recommendation".into(),
                        }
                    } else {
                        ActDecision {
                            act: DialogueAct::Recommend,
                            predicate_trace: vec![check],
                            reason: "user did not accept; revise the recommendation".into(),
                        }
                    }
                }
            }
        };
        debug!(act = %decision.act, position, "next act decided");
        Ok(decision)
    }

    /// Checks the pending tier and, when it is complete, the following tiers
    /// in order, so preferences volunteered early let the dialogue skip ahead.
    fn advance_elicitation(
        &self,
        history: &[Utterance],
        pending: Tier,
        schema: &CategorySchema,
    ) -> Result<ActDecision, ActError> {
        let mut trace = Vec::new();
        let mut tier = pending;
        loop {
            let done = self.elicitation_complete(history, tier, schema)?;
            trace.push(PredicateCheck {
                question: ELICITATION_QUESTION.to_string(),
                verdict: done,
            });
            if !done {
                let reason = if tier == pending {
                    format!("{} preferences still incomplete", tier.label())
                } else {
                    format!("moving on to {} preferences", tier.label())
                };
                return Ok(ActDecision {
                    act: tier.act(),
                    predicate_trace: trace,
                    reason,
                });
            }
            match next_tier(tier) {
                Some(next) => tier = next,
                None => {
                    return Ok(ActDecision {
                        act: DialogueAct::Recommend,
                        predicate_trace: trace,
                        reason: "preferences collected; recommend".into(),
                    })
                }
            }
        }
    }

    pub fn render_elicitation_predicate(
        &self,
        history: &[Utterance],
        tier: Tier,
        schema: &CategorySchema,
    ) -> Result<String, ActError> {
        let template = self
            .templates
            .get(&schema.domain, "predicates/elicitation")?;
        let categories = schema
            .tier_entries(tier)
            .map(|e| {
                if e.elicitation_hint.is_empty() {
                    format!("- {}", e.category)
                } else {
                    format!("- {}: {}", e.category, e.elicitation_hint)
                }
            })
            .collect::<Vec<_>>()
            .join("\n");
        let dialogue = render_history(history);
        Ok(render(
            template,
            &[
                ("domain", &schema.domain),
                ("tier", tier.label()),
                ("categories", &categories),
                ("dialogue_history", &dialogue),
            ],
        ))
    }

    /// Asks the LLM whether the tier's preferences have been collected.
    pub fn elicitation_complete(
        &self,
        history: &[Utterance],
        tier: Tier,
        schema: &CategorySchema,
    ) -> Result<bool, ActError> {
        let prompt = self.render_elicitation_predicate(history, tier, schema)?;
        self.ask_verdict(&schema.domain, prompt)
    }

    /// Asks the LLM whether the user accepted the latest recommendation.
    pub fn user_accepted(&self, history: &[Utterance], domain: &str) -> Result<bool, ActError> {
        let template = self.templates.get(domain, "predicates/acceptance")?;
        let dialogue = render_history(history);
        let prompt = render(
            template,
            &[("domain", domain), ("dialogue_history", &dialogue)],
        );
        self.ask_verdict(domain, prompt)
    }

    fn ask_verdict(&self, domain: &str, prompt: String) -> Result<bool, ActError> {
        let mut messages = vec![ChatMessage::user(prompt)];
        let first = self.llm.complete(&self.stage.request(messages.clone()))?;
        if let Ok(v) = parse_boolean_verdict(&first.text) {
            return Ok(v);
        }
        messages.push(ChatMessage::assistant(first.text.clone()));
        messages.push(ChatMessage::user(
            self.templates.get(domain, "predicates/reprompt")?,
        ));
        let second = self.llm.complete(&self.stage.request(messages))?;
        parse_boolean_verdict(&second.text).map_err(|_| ActError::PredicateFailure(second.text))
    }
}

/// Whether a session's act sequence follows the progression: session 1 is
/// `greeting elicit_must+ elicit_should* elicit_could* (recommend follow_up)+ goodbye`
/// and later sessions are `greeting elicit_could+ (recommend follow_up)+ goodbye`.
/// With `closed = false` any prefix of a valid sequence is accepted.
pub fn act_sequence_valid(acts: &[DialogueAct], session_index: u32, closed: bool) -> bool {
    use DialogueAct::*;
    // States: 0 start, 1 greeted, 2 must, 3 should, 4 could, 5 recommend,
    // 6 follow_up, 7 goodbye.
    let mut state = 0u8;
    for act in acts {
        state = match (state, act) {
            (0, Greeting) => 1,
            (1, ElicitMust) if session_index == 1 => 2,
            (1, ElicitCould) if session_index > 1 => 4,
            (2, ElicitMust) => 2,
            (2 | 3, ElicitShould) => 3,
            (2..=4, ElicitCould) => 4,
            (2..=4, Recommend) if session_index == 1 || state == 4 => 5,
            (6, Recommend) => 5,
            (5, FollowUp) => 6,
            (6, Goodbye) => 7,
            _ => return false,
        };
    }
    !closed || state == 7
}
