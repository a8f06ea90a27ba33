//! Guidance generation: a chain-of-thought prompt per dialogue act, filled
//! with the preference memory and dialogue so far, whose Step-5 JSON payload
//! becomes the short coaching text shown to the human agent.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::warn;
use uuid::Uuid;

use crate::llm::{parse_cot_json, ChatMessage, LlmClient, LlmError, StageConfig};
use crate::memory::{render_memory_lines, MemorySnapshot};
use crate::model::{render_history, CategorySchema, DialogueAct, Utterance};
use crate::template::{render, TemplateError, TemplateStore};

pub const GOODBYE_GUIDANCE: &str = "Thank the user and close the session";

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("guidance unavailable after reprompt: {0}")]
    GuidanceUnavailable(LlmError),
    #[error(transparent)]
    Llm(LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("audit log: {0}")]
    Audit(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guidance {
    pub guidance_id: String,
    pub act: DialogueAct,
    pub text: String,
    #[serde(default)]
    pub target_categories: Vec<String>,
    /// Raw completions, first attempt first; empty for static guidance.
    #[serde(default)]
    pub cot_trace: String,
    #[serde(default)]
    pub prompt_hash: String,
}

impl Guidance {
    pub fn goodbye() -> Self {
        Guidance {
            guidance_id: Uuid::new_v4().to_string(),
            act: DialogueAct::Goodbye,
            text: GOODBYE_GUIDANCE.to_string(),
            target_categories: Vec::new(),
            cot_trace: String::new(),
            prompt_hash: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub guidance_id: String,
    pub session: u32,
    pub act: DialogueAct,
    pub prompt_hash: String,
    pub cot_trace: String,
}

/// Append-only NDJSON log of generated guidance.
#[derive(Debug)]
pub struct AuditLog {
    path: PathBuf,
    lock: Mutex<()>,
}

impl AuditLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        AuditLog {
            path: path.into(),
            lock: Mutex::new(()),
        }
    }

    pub fn append(&self, record: &AuditRecord) -> std::io::Result<()> {
        let _guard = self.lock.lock().expect("audit lock");
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        let line = serde_json::to_string(record).map_err(std::io::Error::other)?;
        writeln!(file, "{line}")?;
        file.sync_data()
    }

    pub fn read(&self) -> std::io::Result<Vec<AuditRecord>> {
        let text = match std::fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
            .collect()
    }
}

fn template_names(act: DialogueAct) -> [String; 2] {
    let shared = if act.is_elicitation() {
        "elicitation"
    } else {
        act.as_str()
    };
    [
        format!("guidance/{}", act.as_str()),
        format!("guidance/{shared}"),
    ]
}

fn preference_examples(memory: &MemorySnapshot, schema: &CategorySchema) -> String {
    let from_memory: Vec<String> = memory
        .pairs()
        .iter()
        .filter(|p| p.validated)
        .take(3)
        .map(|p| format!("{} ({})", p.attribute, p.category))
        .collect();
    if from_memory.is_empty() {
        schema.categories().take(3).collect::<Vec<_>>().join(", ")
    } else {
        from_memory.join(", ")
    }
}

/// Fills the act's guidance template. Pure: equal inputs give equal prompts.
pub fn render_guidance_prompt(
    templates: &TemplateStore,
    act: DialogueAct,
    memory: &MemorySnapshot,
    history: &[Utterance],
    schema: &CategorySchema,
) -> Result<String, TemplateError> {
    let names = template_names(act);
    let template = templates.first_of(&schema.domain, &[&names[0], &names[1]])?;
    let memory_block = render_memory_lines(memory.pairs());
    let dialogue = render_history(history);
    let (tier, categories) = match act.tier() {
        Some(tier) => (
            tier.label(),
            schema
                .tier_entries(tier)
                .map(|e| {
                    if e.elicitation_hint.is_empty() {
                        format!("- {}", e.category)
                    } else {
                        format!("- {}: {}", e.category, e.elicitation_hint)
                    }
                })
                .collect::<Vec<_>>()
                .join("\n"),
        ),
        None => ("", String::new()),
    };
    let examples = preference_examples(memory, schema);
    Ok(render(
        template,
        &[
            ("domain", &schema.domain),
            ("act", act.as_str()),
            ("tier", tier),
            ("categories", &categories),
            ("memory", &memory_block),
            ("dialogue_history", &dialogue),
            ("preference_examples", &examples),
        ],
    ))
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone)]
pub struct GuidanceEngine {
    llm: LlmClient,
    templates: Arc<TemplateStore>,
    stage: StageConfig,
    audit: Option<Arc<AuditLog>>,
}

impl GuidanceEngine {
    pub fn new(llm: LlmClient, templates: Arc<TemplateStore>, stage: StageConfig) -> Self {
        GuidanceEngine {
            llm,
            templates,
            stage,
            audit: None,
        }
    }

    pub fn with_audit(mut self, audit: Arc<AuditLog>) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn templates(&self) -> &TemplateStore {
        &self.templates
    }

    /// Generates guidance for `act`; goodbye returns the static text without
    /// an LLM call.
    pub fn generate(
        &self,
        act: DialogueAct,
        memory: &MemorySnapshot,
        history: &[Utterance],
        schema: &CategorySchema,
        session_index: u32,
    ) -> Result<Guidance, GuidanceError> {
        if act == DialogueAct::Goodbye {
            return Ok(Guidance::goodbye());
        }
        let prompt = render_guidance_prompt(&self.templates, act, memory, history, schema)?;
        let hash = prompt_hash(&prompt);
        let required: &[&str] = if act.is_elicitation() {
            &["guidance", "target_categories"]
        } else {
            &["guidance"]
        };

        let mut messages = vec![ChatMessage::user(prompt)];
        let first = self
            .llm
            .complete(&self.stage.request(messages.clone()))
            .map_err(GuidanceError::Llm)?;
        let mut trace = first.text.clone();
        let parsed =
            match parse_cot_json(&first.text, required).and_then(|m| non_empty_text(m, required)) {
                Ok(map) => map,
                Err(err) => {
                    warn!(act = %act, error = %err, "guidance unparseable; reprompting");
                    let reprompt = render(
                        self.templates.get(&schema.domain, "json_reprompt")?,
                        &[("keys", &required.join(", "))],
                    );
                    messages.push(ChatMessage::assistant(first.text));
                    messages.push(ChatMessage::user(reprompt));
                    let second = self
                        .llm
                        .complete(&self.stage.request(messages))
                        .map_err(GuidanceError::Llm)?;
                    trace.push_str("\n\n");
                    trace.push_str(&second.text);
                    parse_cot_json(&second.text, required)
                        .and_then(|m| non_empty_text(m, required))
                        .map_err(GuidanceError::GuidanceUnavailable)?
                }
            };

        let text = parsed["guidance"]
            .as_text()
            .map(str::trim)
            .unwrap_or_default()
            .to_string();
        let target_categories = if act.is_elicitation() {
            let mut targets = Vec::new();
            for c in parsed["target_categories"].items() {
                let c = c.trim().to_string();
                if !schema.contains(&c) {
                    warn!(category = %c, "guidance targeted a category outside the schema");
                } else if !targets.contains(&c) {
                    targets.push(c);
                }
            }
            targets
        } else {
            Vec::new()
        };
        let guidance = Guidance {
            guidance_id: Uuid::new_v4().to_string(),
            act,
            text,
            target_categories,
            cot_trace: trace,
            prompt_hash: hash,
        };
        if let Some(audit) = &self.audit {
            audit.append(&AuditRecord {
                guidance_id: guidance.guidance_id.clone(),
                session: session_index,
                act,
                prompt_hash: guidance.prompt_hash.clone(),
                cot_trace: guidance.cot_trace.clone(),
            })?;
        }
        Ok(guidance)
    }
}

fn non_empty_text(
    map: crate::llm::CotMap,
    required: &[&str],
) -> Result<crate::llm::CotMap, LlmError> {
    let ok = required.first().is_none_or(|k| {
        map.get(*k)
            .and_then(|v| v.as_text())
            .is_some_and(|t| !t.trim().is_empty())
    });
    if ok {
        Ok(map)
    } else {
        Err(LlmError::MalformedOutput)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains;
    use crate::llm::{FnBackend, ScriptedBackend};
    use crate::model::{Polarity, PreferencePair};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn engine(backend: impl crate::llm::ChatBackend + 'static) -> GuidanceEngine {
        GuidanceEngine::new(
            LlmClient::new(backend),
            Arc::new(TemplateStore::builtin()),
            StageConfig::new("m", 0.7, 256),
        )
    }

    fn nut_memory() -> MemorySnapshot {
        MemorySnapshot::from_pairs(vec![PreferencePair::new(
            "allergy",
            "nuts",
            Polarity::Dislike,
            1,
        )
        .validated()])
    }

    #[test]
    fn elicitation_prompt_structure() {
        let schema = domains::recipe().schema;
        let p = render_guidance_prompt(
            &TemplateStore::builtin(),
            DialogueAct::ElicitMust,
            &MemorySnapshot::default(),
            &[],
            &schema,
        )
        .unwrap();
        assert!(p.contains("collects information about user's preferences"));
        assert!(p.contains("recipe"));
        assert!(p.contains("Preference memory:\n\n"));
        assert!(p.trim_end().ends_with("Let's think step by step:"));
        for step in 1..=5 {
            assert!(p.contains(&format!("Step {step}:")));
        }
        assert!(p.contains("- allergy"));
    }

    #[test]
    fn recommend_prompt_carries_memory_and_url_rule() {
        let schema = domains::recipe().schema;
        let store = TemplateStore::builtin();
        let history = [Utterance::user(2, "Something quick please.")];
        let p = render_guidance_prompt(
            &store,
            DialogueAct::Recommend,
            &nut_memory(),
            &history,
            &schema,
        )
        .unwrap();
        assert!(p.contains("allergy: nuts (dislike)"));
        assert!(p.contains("URL"));
        assert!(p.contains("effectively utilize the user's preferences"));
        let again = render_guidance_prompt(
            &store,
            DialogueAct::Recommend,
            &nut_memory(),
            &history,
            &schema,
        )
        .unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn unvalidated_pairs_stay_out_of_prompts() {
        let schema = domains::recipe().schema;
        let memory = MemorySnapshot::from_pairs(vec![
            PreferencePair::new("cuisine", "thai", Polarity::Like, 1),
            PreferencePair::new("allergy", "nuts", Polarity::Dislike, 1).validated(),
        ]);
        let p = render_guidance_prompt(
            &TemplateStore::builtin(),
            DialogueAct::Greeting,
            &memory,
            &[],
            &schema,
        )
        .unwrap();
        assert!(!p.contains("thai"));
        assert_eq!(p.matches("allergy: nuts (dislike)").count(), 1);
    }

    #[test]
    fn step5_passthrough() {
        let g = engine(FnBackend::constant(
            "Step 1: none\nStep 5: {\"guidance\":\"Ask about dietary restrictions\",\"target_categories\":[\"diet\"]}",
        ))
        .generate(DialogueAct::ElicitMust, &MemorySnapshot::default(), &[], &domains::recipe().schema, 1)
        .unwrap();
        assert_eq!(g.text, "Ask about dietary restrictions");
        assert_eq!(g.target_categories, vec!["diet".to_string()]);
        assert!(g.cot_trace.starts_with("Step 1: none"));
        assert!(Uuid::parse_str(&g.guidance_id).is_ok());
    }

    #[test]
    fn unknown_targets_are_filtered() {
        let g = engine(FnBackend::constant(
            r#"{"guidance":"Ask","target_categories":["diet","mood","diet"]}"#,
        ))
        .generate(
            DialogueAct::ElicitMust,
            &MemorySnapshot::default(),
            &[],
            &domains::recipe().schema,
            1,
        )
        .unwrap();
        assert_eq!(g.target_categories, vec!["diet".to_string()]);
    }

    #[test]
    fn prose_only_is_unavailable_after_one_reprompt() {
        let backend = Arc::new(ScriptedBackend::texts(["no json", "still none"]));
        let e = GuidanceEngine::new(
            LlmClient::from_arc(backend.clone()),
            Arc::new(TemplateStore::builtin()),
            StageConfig::new("m", 0.7, 256),
        );
        let err = e
            .generate(
                DialogueAct::Recommend,
                &MemorySnapshot::default(),
                &[],
                &domains::recipe().schema,
                1,
            )
            .unwrap_err();
        assert!(matches!(err, GuidanceError::GuidanceUnavailable(_)));
        assert_eq!(backend.requests().len(), 2);
    }

    #[test]
    fn reprompt_recovers_and_trace_keeps_both() {
        let g = engine(ScriptedBackend::texts([
            "oops",
            r#"{"guidance":"Recommend a salad with a link"}"#,
        ]))
        .generate(
            DialogueAct::Recommend,
            &MemorySnapshot::default(),
            &[],
            &domains::recipe().schema,
            1,
        )
        .unwrap();
        assert_eq!(g.text, "Recommend a salad with a link");
        assert!(g.cot_trace.contains("oops"));
    }

    #[test]
    fn elicitation_requires_targets() {
        let err = engine(FnBackend::constant(r#"{"guidance":"Ask"}"#))
            .generate(
                DialogueAct::ElicitCould,
                &MemorySnapshot::default(),
                &[],
                &domains::recipe().schema,
                2,
            )
            .unwrap_err();
        assert!(matches!(
            err,
            GuidanceError::GuidanceUnavailable(LlmError::MissingKeys(_))
        ));
    }

    #[test]
    fn goodbye_is_static() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let g = engine(FnBackend::new(move |_| {
            c.fetch_add(1, Ordering::SeqCst);
            String::new()
        }))
        .generate(
            DialogueAct::Goodbye,
            &nut_memory(),
            &[],
            &domains::recipe().schema,
            1,
        )
        .unwrap();
        assert_eq!(g.text, GOODBYE_GUIDANCE);
        assert_eq!(calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn audit_log_records_each_generation() {
        let dir = tempfile::tempdir().unwrap();
        let log = Arc::new(AuditLog::new(dir.path().join("audit.ndjson")));
        let e = engine(FnBackend::constant(r#"{"guidance":"Say hello"}"#)).with_audit(log.clone());
        let schema = domains::recipe().schema;
        let a = e
            .generate(
                DialogueAct::Greeting,
                &MemorySnapshot::default(),
                &[],
                &schema,
                1,
            )
            .unwrap();
        let b = e
            .generate(
                DialogueAct::Recommend,
                &MemorySnapshot::default(),
                &[],
                &schema,
                1,
            )
            .unwrap();
        let records = log.read().unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].guidance_id, a.guidance_id);
        assert_eq!(records[1].act, DialogueAct::Recommend);
        assert_eq!(records[1].prompt_hash, b.prompt_hash);
        assert_eq!(records[0].cot_trace, r#"{"guidance":"Say hello"}"#);
    }
}
