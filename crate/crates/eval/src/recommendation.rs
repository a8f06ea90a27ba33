//! Recommendation experiment: memory prompting against raw-history
//! prompting, scored by Preference Utilization (PU).
//!
//! PU compares preference attribute strings, without categories. P^pred and
//! P^ref are the universe attributes mentioned by the predicted and the
//! reference recommendation. A ratio with an empty denominator is undefined
//! and is excluded from aggregation, never scored 0.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use laps_core::dataset::DatasetRecord;
use laps_core::domains;
use laps_core::extraction::Extractor;
use laps_core::llm::{count_tokens, ChatMessage, LlmClient, LlmError, StageConfig};
use laps_core::memory::MemorySnapshot;
use laps_core::model::{
    render_history, DialogueAct, DialogueSession, PreferencePair, Role, SessionStatus, Utterance,
};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{compare, SignificanceResult};

pub const DEFAULT_RUNS: usize = 10;
pub const DEFAULT_PAGE_BYTES: usize = 64 * 1024;

const INSTRUCTION: &str = "You are a personal {domain} recommendation assistant. Using what you know about the user and the current dialogue, recommend one specific item that fits their preferences, include a URL for it, and explain how it meets those preferences.";
const MEMORY_HEADER: &str = "User preferences from previous sessions:";
const HISTORY_HEADER: &str = "Dialogue history of previous sessions:";
const CURRENT_HEADER: &str = "Current dialogue:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMethod {
    Standard,
    Memory,
}

impl PromptMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            PromptMethod::Standard => "standard",
            PromptMethod::Memory => "memory",
        }
    }
}

impl fmt::Display for PromptMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(PromptMethod::Standard),
            "memory" => Ok(PromptMethod::Memory),
            other => Err(format!("unknown prompting method `{other}`")),
        }
    }
}

fn assemble(
    domain: &str,
    context: Option<(&str, String)>,
    current_history: &[Utterance],
) -> String {
    let mut out = INSTRUCTION.replace("{domain}", domain);
    if let Some((header, body)) = context {
        out.push_str("\n\n");
        out.push_str(header);
        out.push('\n');
        out.push_str(&body);
    }
    out.push_str("\n\n");
    out.push_str(CURRENT_HEADER);
    if !current_history.is_empty() {
        out.push('\n');
        out.push_str(&render_history(current_history));
    }
    out.push_str("\nAssistant:");
    out
}

/// Instruction, one line per memory pair in snapshot order, then the current
/// session. An empty memory contributes no section at all.
pub fn build_memory_prompt(
    domain: &str,
    current_history: &[Utterance],
    memory: &MemorySnapshot,
) -> String {
    let context = (!memory.is_empty()).then(|| {
        let lines: Vec<String> = memory
            .pairs()
            .iter()
            .map(|p| {
                format!(
                    "- {}: {} ({})",
                    p.category,
                    p.attribute,
                    p.polarity.as_str()
                )
            })
            .collect();
        (MEMORY_HEADER, lines.join("\n"))
    });
    assemble(domain, context, current_history)
}

/// Instruction, every prior transcript verbatim, then the current session.
/// With no prior sessions this equals the empty-memory prompt.
pub fn build_standard_prompt(
    domain: &str,
    current_history: &[Utterance],
    sessions: &[DialogueSession],
) -> String {
    let context = (!sessions.is_empty()).then(|| {
        let body = sessions
            .iter()
            .map(|s| {
                format!(
                    "Session {}:\n{}",
                    s.session_index,
                    render_history(&s.utterances)
                )
            })
            .collect::<Vec<_>>()
            .join("\n\n");
        (HISTORY_HEADER, body)
    });
    assemble(domain, context, current_history)
}

pub fn build_prompt(
    method: PromptMethod,
    domain: &str,
    current_history: &[Utterance],
    prior_sessions: &[DialogueSession],
    memory: &MemorySnapshot,
) -> String {
    match method {
        PromptMethod::Standard => build_standard_prompt(domain, current_history, prior_sessions),
        PromptMethod::Memory => build_memory_prompt(domain, current_history, memory),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationRun {
    pub method: PromptMethod,
    pub prompt: String,
    pub prompt_tokens: u32,
    pub response: String,
    /// 1-based.
    pub run_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run_index: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Generation {
    pub runs: Vec<RecommendationRun>,
    pub failures: Vec<RunFailure>,
}

/// Issues `runs` independent completions of one prompt. Failed runs are
/// listed and the rest are kept.
pub fn generate_recommendation(
    prompt: &str,
    llm: &LlmClient,
    stage: &StageConfig,
    method: PromptMethod,
    runs: usize,
) -> Generation {
    let request = stage.request(vec![ChatMessage::user(prompt)]);
    let mut out = Generation::default();
    for run_index in 1..=runs as u32 {
        match llm.complete(&request) {
            Ok(resp) => {
                let prompt_tokens = if resp.usage.estimated {
                    count_tokens(prompt)
                } else {
                    resp.usage.prompt_tokens
                };
                out.runs.push(RecommendationRun {
                    method,
                    prompt: prompt.to_string(),
                    prompt_tokens,
                    response: resp.text,
                    run_index,
                });
            }
            Err(e) => out.failures.push(RunFailure {
                run_index,
                error: e.to_string(),
            }),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("could not resolve {url}: {reason}")]
pub struct UrlResolutionFailure {
    pub url: String,
    pub reason: String,
}

pub trait UrlResolver: Send + Sync {
    /// Visible plain text of the page behind `url`.
    fn resolve(&self, url: &str) -> Result<String, UrlResolutionFailure>;
}

/// Offline resolver backed by a URL-to-page map; pages are stripped like
/// live ones.
#[derive(Debug, Clone, Default)]
pub struct FixtureResolver {
    pages: HashMap<String, String>,
}

impl FixtureResolver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_page(mut self, url: impl Into<String>, html: impl Into<String>) -> Self {
        self.pages.insert(url.into(), html.into());
        self
    }

    /// Reads a JSON object mapping URLs to page bodies.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(FixtureResolver {
            pages: serde_json::from_str(text)?,
        })
    }
}

impl UrlResolver for FixtureResolver {
    fn resolve(&self, url: &str) -> Result<String, UrlResolutionFailure> {
        self.pages
            .get(url)
            .map(|html| strip_markup(html))
            .ok_or_else(|| UrlResolutionFailure {
                url: url.into(),
                reason: "no fixture page".into(),
            })
    }
}

/// Fetches pages over HTTP. Bodies are truncated to `max_bytes` before
/// markup is stripped.
pub struct LiveResolver {
    client: reqwest::blocking::Client,
    max_bytes: usize,
}

impl LiveResolver {
    pub fn new(max_bytes: usize, timeout: Duration) -> Result<Self, reqwest::Error> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()?;
        Ok(LiveResolver { client, max_bytes })
    }
}

impl UrlResolver for LiveResolver {
    fn resolve(&self, url: &str) -> Result<String, UrlResolutionFailure> {
        let fail = |reason: String| UrlResolutionFailure {
            url: url.into(),
            reason,
        };
        let resp = self
            .client
            .get(url)
            .send()
            .map_err(|e| fail(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(fail(format!("HTTP {}", resp.status())));
        }
        let bytes = resp.bytes().map_err(|e| fail(e.to_string()))?;
        let cut = &bytes[..bytes.len().min(self.max_bytes)];
        Ok(strip_markup(&String::from_utf8_lossy(cut)))
    }
}

fn markup_patterns() -> &'static (Regex, Regex, Regex) {
    static PATTERNS: std::sync::OnceLock<(Regex, Regex, Regex)> = std::sync::OnceLock::new();
    PATTERNS.get_or_init(|| {
        (
            Regex::new(r"(?is)<(script|style)\b.*?</(script|style)\s*>|<!--.*?-->")
                .expect("static regex"),
            Regex::new(r"(?s)<[^>]*>").expect("static regex"),
            Regex::new(r"\s+").expect("static regex"),
        )
    })
}

/// Visible text of an HTML page: scripts, styles, comments and tags removed,
/// common entities decoded, whitespace collapsed.
pub fn strip_markup(html: &str) -> String {
    let (hidden, tags, space) = markup_patterns();
    let text = hidden.replace_all(html, " ");
    let text = tags.replace_all(&text, " ");
    let text = text
        .replace("&nbsp;", " ")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&#39;", "'")
        .replace("&amp;", "&");
    space.replace_all(&text, " ").trim().to_string()
}

pub fn find_urls(text: &str) -> Vec<String> {
    static URL: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let re = URL.get_or_init(|| Regex::new(r"https?://[^\s<>()\[\]]+").expect("static regex"));
    re.find_iter(text)
        .map(|m| {
            m.as_str()
                .trim_end_matches(['.', ',', ';', ':', '!', '?', '"', '\''])
                .to_string()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Lowercased attribute is a substring of the lowercased source.
    #[default]
    Substring,
    /// As substring, but the match may not touch an alphanumeric character.
    TokenBoundary,
}

fn occurs(haystack: &str, needle: &str, mode: MatchMode) -> bool {
    if needle.is_empty() {
        return false;
    }
    match mode {
        MatchMode::Substring => haystack.contains(needle),
        MatchMode::TokenBoundary => haystack.match_indices(needle).any(|(i, m)| {
            let before = haystack[..i].chars().next_back();
            let after = haystack[i + m.len()..].chars().next();
            !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
        }),
    }
}

/// Distinct normalized attribute strings of a preference set.
pub fn attribute_universe(pairs: &[PreferencePair]) -> BTreeSet<String> {
    pairs
        .iter()
        .map(|p| normalize(&p.attribute))
        .filter(|a| !a.is_empty())
        .collect()
}

fn normalize(attribute: &str) -> String {
    attribute.trim().to_lowercase()
}

/// Earliest disclosing session of every attribute.
pub fn attribute_sessions(pairs: &[PreferencePair]) -> BTreeMap<String, u32> {
    let mut out: BTreeMap<String, u32> = BTreeMap::new();
    for p in pairs {
        let a = normalize(&p.attribute);
        if a.is_empty() {
            continue;
        }
        let s = out.entry(a).or_insert(p.source_session);
        *s = (*s).min(p.source_session);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Mentions {
    pub attributes: BTreeSet<String>,
    pub failures: Vec<UrlResolutionFailure>,
}

/// Universe attributes mentioned in `text` or, when a resolver is given, in
/// the pages behind its URLs.
pub fn mentioned_preferences(
    text: &str,
    universe: &BTreeSet<String>,
    resolver: Option<&dyn UrlResolver>,
    mode: MatchMode,
) -> Mentions {
    let mut sources = vec![text.to_lowercase()];
    let mut failures = Vec::new();
    if let Some(resolver) = resolver {
        for url in find_urls(text) {
            match resolver.resolve(&url) {
                Ok(page) => sources.push(page.to_lowercase()),
                Err(e) => failures.push(e),
            }
        }
    }
    let attributes = universe
        .iter()
        .filter(|a| sources.iter().any(|s| occurs(s, a, mode)))
        .cloned()
        .collect();
    Mentions {
        attributes,
        failures,
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PuScore {
    /// `None` when nothing from the universe was predicted.
    pub precision: Option<f64>,
    /// `None` when the reference mentions nothing from the universe.
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub matched: BTreeSet<String>,
    pub pred_mentioned: BTreeSet<String>,
    pub ref_mentioned: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<UrlResolutionFailure>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Harmonic mean; 0 when both are 0, `None` when either is undefined.
pub fn harmonic(p: Option<f64>, r: Option<f64>) -> Option<f64> {
    match (p, r) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    }
}

impl PuScore {
    pub fn from_sets(pred: BTreeSet<String>, reference: BTreeSet<String>) -> Self {
        let matched: BTreeSet<String> = pred.intersection(&reference).cloned().collect();
        let precision = ratio(matched.len(), pred.len());
        let recall = ratio(matched.len(), reference.len());
        PuScore {
            precision,
            recall,
            f1: harmonic(precision, recall),
            matched,
            pred_mentioned: pred,
            ref_mentioned: reference,
            failures: Vec::new(),
        }
    }

    /// The score recomputed on the attributes `keep` admits.
    pub fn restricted(&self, keep: impl Fn(&str) -> bool) -> PuScore {
        let filter = |s: &BTreeSet<String>| s.iter().filter(|a| keep(a)).cloned().collect();
        PuScore::from_sets(filter(&self.pred_mentioned), filter(&self.ref_mentioned))
    }
}

/// Both texts are matched the same way, so URLs are resolved on each side.
pub fn pu_scores(
    pred_text: &str,
    ref_text: &str,
    universe: &BTreeSet<String>,
    resolver: Option<&dyn UrlResolver>,
    mode: MatchMode,
) -> PuScore {
    let pred = mentioned_preferences(pred_text, universe, resolver, mode);
    let reference = mentioned_preferences(ref_text, universe, resolver, mode);
    let mut score = PuScore::from_sets(pred.attributes, reference.attributes);
    score.failures = pred
        .failures
        .into_iter()
        .chain(reference.failures)
        .collect();
    score
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PuAggregate {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Harmonic mean of the aggregate precision and recall.
    pub f1: Option<f64>,
    pub samples: usize,
    pub precision_excluded: usize,
    pub recall_excluded: usize,
    pub matched: usize,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Means over samples where each ratio is defined.
pub fn aggregate<'a>(scores: impl IntoIterator<Item = &'a PuScore>) -> PuAggregate {
    let (mut ps, mut rs) = (Vec::new(), Vec::new());
    let mut agg = PuAggregate::default();
    for s in scores {
        agg.samples += 1;
        agg.matched += s.matched.len();
        match s.precision {
            Some(p) => ps.push(p),
            None => agg.precision_excluded += 1,
        }
        match s.recall {
            Some(r) => rs.push(r),
            None => agg.recall_excluded += 1,
        }
    }
    agg.precision = mean(&ps);
    agg.recall = mean(&rs);
    agg.f1 = harmonic(agg.precision, agg.recall);
    agg
}

/// A scored recommendation with the disclosure session of each attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuSample {
    pub eval_session: u32,
    pub score: PuScore,
    pub attribute_sessions: BTreeMap<String, u32>,
}

/// PU restricted to the preferences disclosed in each session, over the
/// samples of `eval_session`. Matched counts partition the total.
pub fn pu_by_disclosure_session(
    samples: &[PuSample],
    eval_session: u32,
) -> BTreeMap<u32, PuAggregate> {
    let chosen: Vec<&PuSample> = samples
        .iter()
        .filter(|s| s.eval_session == eval_session)
        .collect();
    let sessions: BTreeSet<u32> = chosen
        .iter()
        .flat_map(|s| {
            s.score
                .pred_mentioned
                .iter()
                .chain(&s.score.ref_mentioned)
                .filter_map(|a| s.attribute_sessions.get(a))
        })
        .copied()
        .chain(1..=eval_session)
        .collect();
    sessions
        .into_iter()
        .map(|k| {
            let restricted: Vec<PuScore> = chosen
                .iter()
                .map(|s| {
                    s.score
                        .restricted(|a| s.attribute_sessions.get(a) == Some(&k))
                })
                .collect();
            (k, aggregate(&restricted))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtractionScore {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub true_positives: usize,
}

/// Case-insensitive exact (category, attribute) match over deduplicated sets.
pub fn exact_match_extraction_eval(
    predicted: &[PreferencePair],
    gold: &[PreferencePair],
) -> ExtractionScore {
    let key = |p: &PreferencePair| (normalize(&p.category), normalize(&p.attribute));
    let pred: BTreeSet<_> = predicted.iter().map(key).collect();
    let gold: BTreeSet<_> = gold.iter().map(key).collect();
    let tp = pred.intersection(&gold).count();
    let precision = ratio(tp, pred.len());
    let recall = ratio(tp, gold.len());
    ExtractionScore {
        precision,
        recall,
        f1: harmonic(precision, recall),
        true_positives: tp,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceSource {
    /// Validated pairs stored with each session.
    #[default]
    Gold,
    /// Pairs re-extracted from each transcript.
    Extracted,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no session of index 2 or later has a reference recommendation")]
    EmptyDataset,
    #[error("extracted preferences requested but no extractor was supplied")]
    MissingExtractor,
    #[error("domain: {0}")]
    Domain(#[from] laps_core::domains::DomainError),
    #[error("extraction for worker `{worker}` session {session}: {source}")]
    Extraction {
        worker: String,
        session: u32,
        source: laps_core::extraction::ExtractionError,
    },
    #[error("every run failed for worker `{worker}` session {session}: {error}")]
    Generation {
        worker: String,
        session: u32,
        error: String,
    },
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMethodsConfig {
    pub methods: Vec<PromptMethod>,
    pub runs: usize,
    pub preferences: PreferenceSource,
    pub match_mode: MatchMode,
}

impl Default for EvalMethodsConfig {
    fn default() -> Self {
        EvalMethodsConfig {
            methods: vec![PromptMethod::Standard, PromptMethod::Memory],
            runs: DEFAULT_RUNS,
            preferences: PreferenceSource::Gold,
            match_mode: MatchMode::Substring,
        }
    }
}

/// One evaluable session: the accepted recommendation and what precedes it.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub worker_id: String,
    pub domain: String,
    pub session_index: u32,
    pub history: Vec<Utterance>,
    pub reference: String,
    pub prior_sessions: Vec<DialogueSession>,
}

/// Index of the accepted recommendation: the last recommend-act turn, or the
/// last assistant turn with a URL when acts were not recorded.
pub fn reference_turn(session: &DialogueSession) -> Option<usize> {
    let assistant = |u: &&Utterance| u.role == Role::Assistant;
    let by_act = session
        .utterances
        .iter()
        .enumerate()
        .filter(|(_, u)| assistant(u) && u.act == Some(DialogueAct::Recommend))
        .map(|(i, _)| i)
        .next_back();
    by_act.or_else(|| {
        session
            .utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| assistant(u) && u.act.is_none() && !find_urls(&u.text).is_empty())
            .map(|(i, _)| i)
            .next_back()
    })
}

/// Sessions of index 2 or later with a reference, in (worker, session) order.
pub fn eval_items(records: &[DatasetRecord]) -> Vec<EvalItem> {
    let mut items = Vec::new();
    for r in records {
        let mut sessions: Vec<&DialogueSession> = r
            .sessions
            .iter()
            .filter(|s| s.status != SessionStatus::Abandoned)
            .collect();
        sessions.sort_by_key(|s| s.session_index);
        for (pos, s) in sessions.iter().enumerate() {
            if s.session_index < 2 {
                continue;
            }
            let Some(turn) = reference_turn(s) else {
                continue;
            };
            items.push(EvalItem {
                worker_id: r.worker_id.clone(),
                domain: r.domain.clone(),
                session_index: s.session_index,
                history: s.utterances[..turn].to_vec(),
                reference: s.utterances[turn].text.clone(),
                prior_sessions: sessions[..pos].iter().map(|s| (*s).clone()).collect(),
            });
        }
    }
    items.sort_by(|a, b| (&a.worker_id, a.session_index).cmp(&(&b.worker_id, b.session_index)));
    items
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodItem {
    pub prompt_tokens: u32,
    pub runs: Vec<PuScore>,
    /// Mean run F over runs where F is defined.
    pub f1: Option<f64>,
    pub failed_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemReport {
    pub worker_id: String,
    pub session_index: u32,
    pub references: BTreeSet<String>,
    pub universe: BTreeSet<String>,
    pub methods: BTreeMap<PromptMethod, MethodItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: PromptMethod,
    pub mean_prompt_tokens: f64,
    /// Over every (dialogue, run) sample.
    pub pu: PuAggregate,
    /// Keyed by evaluated session, then by disclosing session.
    pub by_disclosure: BTreeMap<u32, BTreeMap<u32, PuAggregate>>,
    pub failed_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodsReport {
    pub universe: PreferenceSource,
    pub match_mode: MatchMode,
    pub runs: usize,
    pub dialogues: usize,
    pub methods: Vec<MethodReport>,
    /// Welch test on per-dialogue F of the first two methods.
    pub t_test: Option<SignificanceResult>,
    pub items: Vec<ItemReport>,
}

/// Per-(worker, session) preference pairs for the selected source.
fn session_preferences(
    item: &EvalItem,
    current: &DialogueSession,
    source: PreferenceSource,
    extractor: Option<&Extractor>,
) -> Result<Vec<PreferencePair>, EvalError> {
    let sessions = item.prior_sessions.iter().chain(std::iter::once(current));
    match source {
        PreferenceSource::Gold => Ok(sessions.flat_map(|s| s.extracted.iter().cloned()).collect()),
        PreferenceSource::Extracted => {
            let extractor = extractor.ok_or(EvalError::MissingExtractor)?;
            let schema = domains::builtin(&item.domain)?.schema;
            let mut pairs = Vec::new();
            for s in sessions {
                let mut closed = s.clone();
                closed.status = SessionStatus::AwaitingExtraction;
                let draft = extractor.extract(&closed, &schema).map_err(|source| {
                    EvalError::Extraction {
                        worker: item.worker_id.clone(),
                        session: s.session_index,
                        source,
                    }
                })?;
                pairs.extend(draft.pairs);
            }
            Ok(pairs)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate_item(
    item: &EvalItem,
    current: &DialogueSession,
    config: &EvalMethodsConfig,
    llm: &LlmClient,
    stage: &StageConfig,
    extractor: Option<&Extractor>,
    resolver: Option<&dyn UrlResolver>,
) -> Result<(ItemReport, Vec<(PromptMethod, PuSample)>), EvalError> {
    let pairs = session_preferences(item, current, config.preferences, extractor)?;
    let universe = attribute_universe(&pairs);
    let sessions = attribute_sessions(&pairs);
    let memory = MemorySnapshot::from_pairs(
        pairs
            .iter()
            .filter(|p| p.source_session < item.session_index)
            .cloned()
            .collect(),
    );
    let references =
        mentioned_preferences(&item.reference, &universe, resolver, config.match_mode).attributes;
    let mut methods = BTreeMap::new();
    let mut samples = Vec::new();
    for &method in &config.methods {
        let prompt = build_prompt(
            method,
            &item.domain,
            &item.history,
            &item.prior_sessions,
            &memory,
        );
        let generation = generate_recommendation(&prompt, llm, stage, method, config.runs);
        if generation.runs.is_empty() && !generation.failures.is_empty() {
            return Err(EvalError::Generation {
                worker: item.worker_id.clone(),
                session: item.session_index,
                error: generation.failures[0].error.clone(),
            });
        }
        let runs: Vec<PuScore> = generation
            .runs
            .iter()
            .map(|r| {
                pu_scores(
                    &r.response,
                    &item.reference,
                    &universe,
                    resolver,
                    config.match_mode,
                )
            })
            .collect();
        samples.extend(runs.iter().map(|score| {
            (
                method,
                PuSample {
                    eval_session: item.session_index,
                    score: score.clone(),
                    attribute_sessions: sessions.clone(),
                },
            )
        }));
        let f1s: Vec<f64> = runs.iter().filter_map(|s| s.f1).collect();
        methods.insert(
            method,
            MethodItem {
                prompt_tokens: count_tokens(&prompt),
                f1: mean(&f1s),
                runs,
                failed_runs: generation.failures.len(),
            },
        );
    }
    let report = ItemReport {
        worker_id: item.worker_id.clone(),
        session_index: item.session_index,
        references,
        universe,
        methods,
    };
    Ok((report, samples))
}

/// Runs every configured method on every eligible session and aggregates PU
/// per method. Items are scored in parallel; output order is deterministic.
pub fn evaluate_methods(
    records: &[DatasetRecord],
    config: &EvalMethodsConfig,
    llm: &LlmClient,
    stage: &StageConfig,
    extractor: Option<&Extractor>,
    resolver: Option<&dyn UrlResolver>,
) -> Result<MethodsReport, EvalError> {
    let items = eval_items(records);
    if items.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let by_key: HashMap<(&str, u32), &DialogueSession> = records
        .iter()
        .flat_map(|r| {
            r.sessions
                .iter()
                .map(move |s| ((r.worker_id.as_str(), s.session_index), s))
        })
        .collect();
    let results: Vec<(ItemReport, Vec<(PromptMethod, PuSample)>)> = items
        .par_iter()
        .map(|item| {
            let current = by_key[&(item.worker_id.as_str(), item.session_index)];
            evaluate_item(item, current, config, llm, stage, extractor, resolver)
        })
        .collect::<Result<_, _>>()?;

    let mut methods = Vec::new();
    for &method in &config.methods {
        let samples: Vec<PuSample> = results
            .iter()
            .flat_map(|(_, s)| {
                s.iter()
                    .filter(|(m, _)| *m == method)
                    .map(|(_, s)| s.clone())
            })
            .collect();
        let tokens: Vec<f64> = results
            .iter()
            .map(|(r, _)| r.methods[&method].prompt_tokens as f64)
            .collect();
        let eval_sessions: BTreeSet<u32> = samples.iter().map(|s| s.eval_session).collect();
        methods.push(MethodReport {
            method,
            mean_prompt_tokens: mean(&tokens).unwrap_or(0.0),
            pu: aggregate(samples.iter().map(|s| &s.score)),
            by_disclosure: eval_sessions
                .into_iter()
                .map(|k| (k, pu_by_disclosure_session(&samples, k)))
                .collect(),
            failed_runs: results
                .iter()
                .map(|(r, _)| r.methods[&method].failed_runs)
                .sum(),
        });
    }
    let t_test = match config.methods.as_slice() {
        [a, b, ..] => {
            let f1 = |m: &PromptMethod| -> Vec<f64> {
                results
                    .iter()
                    .filter_map(|(r, _)| r.methods[m].f1)
                    .collect()
            };
            compare(a.as_str(), b.as_str(), "f1_pu", &f1(a), &f1(b)).ok()
        }
        _ => None,
    };
    Ok(MethodsReport {
        universe: config.preferences,
        match_mode: config.match_mode,
        runs: config.runs,
        dialogues: results.len(),
        methods,
        t_test,
        items: results.into_iter().map(|(r, _)| r).collect(),
    })
}

impl fmt::Display for MethodsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
        writeln!(
            f,
            "{:<10} {:>10} {:>8} {:>8} {:>8}",
            "Method", "#Tokens", "P_PU", "R_PU", "F_PU"
        )?;
        for m in &self.methods {
            writeln!(
                f,
                "{:<10} {:>10.1} {:>8} {:>8} {:>8}",
                m.method.as_str(),
                m.mean_prompt_tokens,
                show(m.pu.precision),
                show(m.pu.recall),
                show(m.pu.f1)
            )?;
        }
        if let Some(t) = &self.t_test {
            writeln!(
                f,
                "Welch t = {:.3}, p = {:.4} ({} vs {})",
                t.t, t.p_value, t.dataset_a, t.dataset_b
            )?;
        }
        write!(
            f,
            "dialogues = {}, runs = {}, universe = {:?}, match = {:?}",
            self.dialogues, self.runs, self.universe, self.match_mode
        )
    }
}
