//! Post-session preference extraction and human validation.
//!
//! Extraction issues one chain-of-thought prompt per schema category and asks
//! for liked and disliked attributes separately. The worker then confirms,
//! edits, deletes or adds pairs; only the validated result reaches memory.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::llm::{parse_cot_json, ChatMessage, CotMap, LlmClient, StageConfig};
use crate::model::{
    render_history, CategorySchema, DialogueSession, Origin, PairKey, Polarity, PreferencePair,
    SessionStatus,
};
use crate::template::{render, TemplateError, TemplateStore};

#[derive(Debug, Error, PartialEq)]
pub enum ExtractionError {
    #[error("session is {0:?}, extraction needs awaiting_extraction")]
    WrongStatus(SessionStatus),
    #[error("invalid edit #{index}: {reason}")]
    InvalidEdit { index: usize, reason: String },
    #[error("no draft pairs to score")]
    EmptyInput,
    #[error("{drafts} drafts but {finals} final sets")]
    Misaligned { drafts: usize, finals: usize },
    #[error("template: {0}")]
    Template(String),
}

impl From<TemplateError> for ExtractionError {
    fn from(e: TemplateError) -> Self {
        ExtractionError::Template(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryFailure {
    pub category: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionDraft {
    pub session_index: u32,
    pub pairs: Vec<PreferencePair>,
    pub model_id: String,
    /// Categories an edit or addition may use.
    #[serde(default)]
    pub categories: Vec<String>,
    /// Categories whose extraction failed even after a reprompt.
    #[serde(default)]
    pub failures: Vec<CategoryFailure>,
    /// Schema violations and other dropped output.
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ExtractionDraft {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOp {
    Confirm,
    Edit,
    Delete,
    Add,
}

/// One worker decision on a draft. `target` indexes `ExtractionDraft::pairs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationEdit {
    pub op: EditOp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement: Option<PreferencePair>,
}

impl ValidationEdit {
    pub fn confirm(target: usize) -> Self {
        ValidationEdit {
            op: EditOp::Confirm,
            target: Some(target),
            replacement: None,
        }
    }

    pub fn edit(target: usize, replacement: PreferencePair) -> Self {
        ValidationEdit {
            op: EditOp::Edit,
            target: Some(target),
            replacement: Some(replacement),
        }
    }

    pub fn delete(target: usize) -> Self {
        ValidationEdit {
            op: EditOp::Delete,
            target: Some(target),
            replacement: None,
        }
    }

    pub fn add(pair: PreferencePair) -> Self {
        ValidationEdit {
            op: EditOp::Add,
            target: None,
            replacement: Some(pair),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Extractor {
    llm: LlmClient,
    templates: Arc<TemplateStore>,
    stage: StageConfig,
}

enum CategoryOutcome {
    Pairs(Vec<PreferencePair>, Vec<String>),
    Failed(String),
}

impl Extractor {
    pub fn new(llm: LlmClient, templates: Arc<TemplateStore>, stage: StageConfig) -> Self {
        Extractor {
            llm,
            templates,
            stage,
        }
    }

    pub fn render_prompt(
        &self,
        session: &DialogueSession,
        schema: &CategorySchema,
        category: &str,
    ) -> Result<String, TemplateError> {
        let template = self.templates.get(&schema.domain, "extraction")?;
        let hint = schema
            .entry(category)
            .map(|e| e.elicitation_hint.as_str())
            .unwrap_or("");
        let dialogue = render_history(&session.utterances);
        Ok(render(
            template,
            &[
                ("domain", &schema.domain),
                ("category", category),
                ("hint", hint),
                ("dialogue_history", &dialogue),
            ],
        ))
    }

    /// Extracts a draft from a closed session, one call per category, run
    /// concurrently. Failed categories are listed rather than fatal.
    pub fn extract(
        &self,
        session: &DialogueSession,
        schema: &CategorySchema,
    ) -> Result<ExtractionDraft, ExtractionError> {
        if session.status != SessionStatus::AwaitingExtraction {
            return Err(ExtractionError::WrongStatus(session.status));
        }
        let categories: Vec<String> = schema.categories().map(str::to_string).collect();
        let prompts = categories
            .iter()
            .map(|c| self.render_prompt(session, schema, c))
            .collect::<Result<Vec<_>, _>>()?;
        let reprompt = render(
            self.templates.get(&schema.domain, "json_reprompt")?,
            &[("keys", "category, liked, disliked")],
        );

        let outcomes: Vec<CategoryOutcome> = thread::scope(|s| {
            let handles: Vec<_> = categories
                .iter()
                .zip(prompts)
                .map(|(category, prompt)| {
                    let reprompt = reprompt.as_str();
                    s.spawn(move || {
                        self.extract_category(
                            category,
                            prompt,
                            reprompt,
                            schema,
                            session.session_index,
                        )
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("extraction worker panicked"))
                .collect()
        });

        let mut draft = ExtractionDraft {
            session_index: session.session_index,
            pairs: Vec::new(),
            model_id: self.stage.model_id.clone(),
            categories: categories.clone(),
            failures: Vec::new(),
            warnings: Vec::new(),
        };
        let mut seen = BTreeSet::new();
        for (category, outcome) in categories.iter().zip(outcomes) {
            match outcome {
                CategoryOutcome::Pairs(pairs, warnings) => {
                    draft.warnings.extend(warnings);
                    for p in pairs {
                        if seen.insert(p.key()) {
                            draft.pairs.push(p);
                        }
                    }
                }
                CategoryOutcome::Failed(error) => {
                    warn!(category = %category, error = %error, "extraction failed for category");
                    draft.failures.push(CategoryFailure {
                        category: category.clone(),
                        error,
                    });
                }
            }
        }
        Ok(draft)
    }

    fn extract_category(
        &self,
        category: &str,
        prompt: String,
        reprompt: &str,
        schema: &CategorySchema,
        session_index: u32,
    ) -> CategoryOutcome {
        let required = ["liked", "disliked"];
        let mut messages = vec![ChatMessage::user(prompt)];
        let first = match self.llm.complete(&self.stage.request(messages.clone())) {
            Ok(r) => r,
            Err(e) => return CategoryOutcome::Failed(e.to_string()),
        };
        let map = match parse_cot_json(&first.text, &required) {
            Ok(map) => map,
            Err(_) => {
                messages.push(ChatMessage::assistant(first.text));
                messages.push(ChatMessage::user(reprompt));
                let second = match self.llm.complete(&self.stage.request(messages)) {
                    Ok(r) => r,
                    Err(e) => return CategoryOutcome::Failed(e.to_string()),
                };
                match parse_cot_json(&second.text, &required) {
                    Ok(map) => map,
                    Err(e) => return CategoryOutcome::Failed(e.to_string()),
                }
            }
        };
        pairs_from_answer(&map, category, schema, session_index)
    }
}

fn pairs_from_answer(
    map: &CotMap,
    requested: &str,
    schema: &CategorySchema,
    session_index: u32,
) -> CategoryOutcome {
    let mut warnings = Vec::new();
    let reported = map
        .get("category")
        .and_then(|v| v.as_text())
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .unwrap_or(requested);
    if !schema.contains(reported) {
        let msg = format!(
            "schema violation: category `{reported}` is not in the {} schema",
            schema.domain
        );
        warn!("{msg}");
        warnings.push(msg);
        return CategoryOutcome::Pairs(Vec::new(), warnings);
    }
    if reported != requested {
        warnings.push(format!(
            "asked for `{requested}`, answer reported `{reported}`"
        ));
    }
    let mut pairs = Vec::new();
    for (key, polarity) in [("liked", Polarity::Like), ("disliked", Polarity::Dislike)] {
        for attribute in map.get(key).map(|v| v.items()).unwrap_or_default() {
            if !attribute.trim().is_empty() {
                pairs.push(PreferencePair::new(
                    reported,
                    attribute,
                    polarity,
                    session_index,
                ));
            }
        }
    }
    CategoryOutcome::Pairs(pairs, warnings)
}

fn invalid(index: usize, reason: impl Into<String>) -> ExtractionError {
    ExtractionError::InvalidEdit {
        index,
        reason: reason.into(),
    }
}

fn human_pair(
    index: usize,
    draft: &ExtractionDraft,
    pair: &PreferencePair,
    origin: Origin,
) -> Result<PreferencePair, ExtractionError> {
    let attribute = pair.attribute.trim();
    if attribute.is_empty() {
        return Err(invalid(index, "attribute is empty"));
    }
    if !draft.categories.is_empty() && !draft.categories.contains(&pair.category) {
        return Err(invalid(
            index,
            format!("category `{}` is not in the schema", pair.category),
        ));
    }
    Ok(PreferencePair::new(
        pair.category.clone(),
        attribute,
        pair.polarity,
        draft.session_index,
    )
    .with_origin(origin)
    .validated())
}

/// Applies worker edits to a draft. Draft pairs no edit touches count as
/// confirmed. Every survivor is validated and triples are unique.
pub fn apply_validation(
    draft: &ExtractionDraft,
    edits: &[ValidationEdit],
) -> Result<Vec<PreferencePair>, ExtractionError> {
    // None = deleted; Some(pair) = current value.
    let mut slots: Vec<Option<PreferencePair>> = draft.pairs.iter().cloned().map(Some).collect();
    let mut touched = vec![false; draft.pairs.len()];
    let mut added = Vec::new();

    for (index, edit) in edits.iter().enumerate() {
        match edit.op {
            EditOp::Add => {
                let pair = edit
                    .replacement
                    .as_ref()
                    .ok_or_else(|| invalid(index, "add requires a replacement"))?;
                if edit.target.is_some() {
                    return Err(invalid(index, "add takes no target"));
                }
                added.push(human_pair(index, draft, pair, Origin::HumanAdded)?);
            }
            EditOp::Confirm if edit.target.is_none() => {}
            op => {
                let target = edit
                    .target
                    .ok_or_else(|| invalid(index, "edit and delete require a target"))?;
                if target >= slots.len() {
                    return Err(invalid(
                        index,
                        format!("target {target} out of range (draft has {})", slots.len()),
                    ));
                }
                if touched[target] {
                    return Err(invalid(
                        index,
                        format!("target {target} already decided by an earlier edit"),
                    ));
                }
                touched[target] = true;
                match op {
                    EditOp::Confirm => {}
                    EditOp::Delete => slots[target] = None,
                    EditOp::Edit => {
                        let pair = edit
                            .replacement
                            .as_ref()
                            .ok_or_else(|| invalid(index, "edit requires a replacement"))?;
                        slots[target] = Some(human_pair(index, draft, pair, Origin::HumanEdited)?);
                    }
                    EditOp::Add => unreachable!("handled above"),
                }
            }
        }
    }

    let mut seen: BTreeSet<PairKey> = BTreeSet::new();
    let finals = slots
        .into_iter()
        .flatten()
        .chain(added)
        .map(|mut p| {
            p.validated = true;
            p
        })
        .filter(|p| seen.insert(p.key()))
        .collect();
    Ok(finals)
}

/// Share of draft pairs the worker edited or deleted, over all drafts.
pub fn extraction_error_rate(
    drafts: &[ExtractionDraft],
    finals: &[Vec<PreferencePair>],
) -> Result<f64, ExtractionError> {
    if drafts.len() != finals.len() {
        return Err(ExtractionError::Misaligned {
            drafts: drafts.len(),
            finals: finals.len(),
        });
    }
    let total: usize = drafts.iter().map(|d| d.pairs.len()).sum();
    if total == 0 {
        return Err(ExtractionError::EmptyInput);
    }
    let mut changed = 0usize;
    for (draft, fin) in drafts.iter().zip(finals) {
        let kept: BTreeSet<PairKey> = fin
            .iter()
            .filter(|p| p.origin == Origin::LlmExtracted)
            .map(PreferencePair::key)
            .collect();
        changed += draft
            .pairs
            .iter()
            .filter(|p| !kept.contains(&p.key()))
            .count();
    }
    Ok(changed as f64 / total as f64)
}
