//! Lexical diversity: Dist-n, Ent-n and Self-BLEU over utterance corpora,
//! with cutoff-normalized resampling of whole dialogues.
//!
//! N-grams never span utterance boundaries. Entropy uses the natural log.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use laps_core::dataset::DatasetRecord;
use laps_core::model::{Role, SessionStatus};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CUTOFF: usize = 7012;
pub const DEFAULT_RESAMPLES: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no utterance has at least {0} tokens")]
    NoNgrams(usize),
    #[error("self-BLEU needs at least 2 utterances, corpus has {0}")]
    TooFewUtterances(usize),
    #[error("corpus has {available} words, cutoff is {cutoff}")]
    CorpusTooSmall { available: usize, cutoff: usize },
    #[error("n must be at least 1")]
    InvalidOrder,
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
}

fn is_trimmed(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2026}'
        )
}

/// Lowercases, splits on whitespace and trims punctuation from both ends of
/// each token; empty tokens are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(is_trimmed))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleFilter {
    #[default]
    All,
    User,
    Assistant,
}

impl RoleFilter {
    fn admits(&self, role: Role) -> bool {
        match self {
            RoleFilter::All => true,
            RoleFilter::User => role == Role::User,
            RoleFilter::Assistant => role == Role::Assistant,
        }
    }
}

impl FromStr for RoleFilter {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(RoleFilter::All),
            "user" => Ok(RoleFilter::User),
            "assistant" => Ok(RoleFilter::Assistant),
            other => Err(format!("unknown role filter `{other}`")),
        }
    }
}

/// A dialogue as a list of (role, text) turns; the unit of resampling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Dialogue {
    pub fn word_count(&self, filter: RoleFilter) -> usize {
        self.turns
            .iter()
            .filter(|t| filter.admits(t.role))
            .map(|t| tokenize(&t.text).len())
            .sum()
    }
}

/// Dialogues of a dataset, one per session. Abandoned sessions are skipped.
pub fn dialogues_from_records(records: &[DatasetRecord]) -> Vec<Dialogue> {
    records
        .iter()
        .flat_map(|r| r.sessions.iter())
        .filter(|s| s.status != SessionStatus::Abandoned)
        .map(|s| Dialogue {
            turns: s
                .utterances
                .iter()
                .map(|u| Turn {
                    role: u.role,
                    text: u.text.clone(),
                })
                .collect(),
        })
        .collect()
}

/// Generic adapter: a JSON array of dialogues, each an array of
/// `{"role": "user"|"assistant", "text": ...}`.
pub fn dialogues_from_generic_json(text: &str) -> Result<Vec<Dialogue>, serde_json::Error> {
    let raw: Vec<Vec<Turn>> = serde_json::from_str(text)?;
    Ok(raw.into_iter().map(|turns| Dialogue { turns }).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusUtterance {
    pub role: Option<Role>,
    pub tokens: Vec<String>,
}

/// Tokenized utterances; utterances without tokens are never stored.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub utterances: Vec<CorpusUtterance>,
    pub source: String,
    pub role_filter: RoleFilter,
}

impl Corpus {
    pub fn from_token_lists(lists: Vec<Vec<String>>) -> Self {
        Corpus {
            utterances: lists
                .into_iter()
                .filter(|t| !t.is_empty())
                .map(|tokens| CorpusUtterance { role: None, tokens })
                .collect(),
            source: String::new(),
            role_filter: RoleFilter::All,
        }
    }

    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        Self::from_token_lists(texts.iter().map(|t| tokenize(t.as_ref())).collect())
    }

    pub fn from_dialogues<'a>(
        dialogues: impl IntoIterator<Item = &'a Dialogue>,
        filter: RoleFilter,
    ) -> Self {
        let utterances = dialogues
            .into_iter()
            .flat_map(|d| d.turns.iter())
            .filter(|t| filter.admits(t.role))
            .map(|t| CorpusUtterance {
                role: Some(t.role),
                tokens: tokenize(&t.text),
            })
            .filter(|u| !u.tokens.is_empty())
            .collect();
        Corpus {
            utterances,
            source: String::new(),
            role_filter: filter,
        }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn word_count(&self) -> usize {
        self.utterances.iter().map(|u| u.tokens.len()).sum()
    }

    fn token_lists(&self) -> impl Iterator<Item = &[String]> {
        self.utterances.iter().map(|u| u.tokens.as_slice())
    }
}

/// Splits a corpus into its user and assistant utterances; role-less
/// utterances go to neither side.
pub fn role_split(corpus: &Corpus) -> (Corpus, Corpus) {
    let side = |role: Role, filter: RoleFilter| Corpus {
        utterances: corpus
            .utterances
            .iter()
            .filter(|u| u.role == Some(role))
            .cloned()
            .collect(),
        source: corpus.source.clone(),
        role_filter: filter,
    };
    (
        side(Role::User, RoleFilter::User),
        side(Role::Assistant, RoleFilter::Assistant),
    )
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

fn corpus_ngram_counts(
    corpus: &Corpus,
    n: usize,
) -> Result<(HashMap<&[String], usize>, usize), MetricError> {
    if n == 0 {
        return Err(MetricError::InvalidOrder);
    }
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    let mut total = 0usize;
    for tokens in corpus.token_lists() {
        if tokens.len() >= n {
            for g in tokens.windows(n) {
                *counts.entry(g).or_insert(0) += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        Err(MetricError::NoNgrams(n))
    } else {
        Ok((counts, total))
    }
}

/// Distinct n-grams over all n-grams.
pub fn dist_n(corpus: &Corpus, n: usize) -> Result<f64, MetricError> {
    let (counts, total) = corpus_ngram_counts(corpus, n)?;
    Ok(counts.len() as f64 / total as f64)
}

/// Entropy of the corpus n-gram frequency distribution.
pub fn ent_n(corpus: &Corpus, n: usize) -> Result<f64, MetricError> {
    let (counts, total) = corpus_ngram_counts(corpus, n)?;
    let total = total as f64;
    // Summed in sorted count order so the result is independent of hash order.
    let mut freqs: Vec<usize> = counts.into_values().collect();
    freqs.sort_unstable();
    Ok(-freqs
        .into_iter()
        .map(|f| {
            let p = f as f64 / total;
            p * p.ln()
        })
        .sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuMode {
    /// Each utterance scored once against all others as joint references.
    #[default]
    MultiReference,
    /// Each utterance scored against every other utterance separately.
    PerPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    #[default]
    None,
    /// Adds 0.1 to zero numerators.
    Method1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfBleuConfig {
    pub mode: BleuMode,
    pub smoothing: Smoothing,
    pub max_order: usize,
}

impl Default for SelfBleuConfig {
    fn default() -> Self {
        SelfBleuConfig {
            mode: BleuMode::MultiReference,
            smoothing: Smoothing::None,
            max_order: 4,
        }
    }
}

/// Clipped match counts and hypothesis n-gram totals per order 1..=max.
struct Precisions {
    matched: Vec<usize>,
    totals: Vec<usize>,
}

/// Cumulative BLEU for every maximum order 1..=max_order, uniform weights.
fn cumulative_bleu(
    p: &Precisions,
    hyp_len: usize,
    ref_len: usize,
    smoothing: Smoothing,
) -> Vec<f64> {
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let logs: Vec<Option<f64>> = p
        .matched
        .iter()
        .zip(&p.totals)
        .map(|(&m, &t)| {
            let denom = t.max(1) as f64;
            match (m, smoothing) {
                (0, Smoothing::None) => None,
                (0, Smoothing::Method1) => Some((0.1 / denom).ln()),
                (m, _) => Some((m as f64 / denom).ln()),
            }
        })
        .collect();
    (1..=logs.len())
        .map(|order| {
            let mut sum = 0.0;
            for l in &logs[..order] {
                match l {
                    Some(v) => sum += v,
                    None => return 0.0,
                }
            }
            bp * (sum / order as f64).exp()
        })
        .collect()
}

/// Closest reference length to `hyp_len`, ties resolved toward the shorter.
fn closest_length(hyp_len: usize, lengths: &BTreeMap<usize, usize>) -> usize {
    let below = lengths.range(..=hyp_len).next_back().map(|(l, _)| *l);
    let above = lengths.range(hyp_len..).next().map(|(l, _)| *l);
    match (below, above) {
        (Some(b), Some(a)) => {
            if hyp_len - b <= a - hyp_len {
                b
            } else {
                a
            }
        }
        (Some(b), None) => b,
        (None, Some(a)) => a,
        (None, None) => 0,
    }
}

/// Top two (count, utterance) holders of one n-gram.
#[derive(Clone, Copy, Default)]
struct TopTwo {
    first: (usize, usize),
    second: (usize, usize),
}

impl TopTwo {
    fn push(&mut self, count: usize, owner: usize) {
        if count > self.first.0 {
            self.second = self.first;
            self.first = (count, owner);
        } else if count > self.second.0 {
            self.second = (count, owner);
        }
    }

    fn max_excluding(&self, owner: usize) -> usize {
        if self.first.1 == owner && self.first.0 > 0 {
            self.second.0
        } else {
            self.first.0
        }
    }
}

/// Mean BLEU over (utterance, order) when every utterance is scored against
/// the rest of the corpus.
pub fn self_bleu(corpus: &Corpus, config: &SelfBleuConfig) -> Result<f64, MetricError> {
    let n_utt = corpus.len();
    if n_utt < 2 {
        return Err(MetricError::TooFewUtterances(n_utt));
    }
    if config.max_order == 0 {
        return Err(MetricError::InvalidOrder);
    }
    let lists: Vec<&[String]> = corpus.token_lists().collect();
    let per_order: Vec<Vec<HashMap<&[String], usize>>> = (1..=config.max_order)
        .map(|n| lists.iter().map(|t| ngram_counts(t, n)).collect())
        .collect();

    let scores: Vec<f64> = match config.mode {
        BleuMode::MultiReference => {
            let tops: Vec<HashMap<&[String], TopTwo>> = per_order
                .iter()
                .map(|counts| {
                    let mut top: HashMap<&[String], TopTwo> = HashMap::new();
                    for (owner, c) in counts.iter().enumerate() {
                        for (g, &k) in c {
                            top.entry(g).or_default().push(k, owner);
                        }
                    }
                    top
                })
                .collect();
            let mut lengths: BTreeMap<usize, usize> = BTreeMap::new();
            for t in &lists {
                *lengths.entry(t.len()).or_insert(0) += 1;
            }
            (0..n_utt)
                .into_par_iter()
                .map(|h| {
                    let mut others = lengths.clone();
                    let own = others.get_mut(&lists[h].len()).expect("own length present");
                    *own -= 1;
                    if *own == 0 {
                        others.remove(&lists[h].len());
                    }
                    let ref_len = closest_length(lists[h].len(), &others);
                    let mut p = Precisions {
                        matched: Vec::new(),
                        totals: Vec::new(),
                    };
                    for (order, counts) in per_order.iter().enumerate() {
                        let mut matched = 0;
                        for (g, &k) in &counts[h] {
                            matched += k.min(tops[order][g].max_excluding(h));
                        }
                        p.matched.push(matched);
                        p.totals.push(lists[h].len().saturating_sub(order));
                    }
                    let s = cumulative_bleu(&p, lists[h].len(), ref_len, config.smoothing);
                    s.iter().sum::<f64>() / s.len() as f64
                })
                .collect()
        }
        BleuMode::PerPair => (0..n_utt)
            .into_par_iter()
            .map(|h| {
                let mut total = 0.0;
                for r in (0..n_utt).filter(|r| *r != h) {
                    let mut p = Precisions {
                        matched: Vec::new(),
                        totals: Vec::new(),
                    };
                    for (order, counts) in per_order.iter().enumerate() {
                        let matched = counts[h]
                            .iter()
                            .map(|(g, &k)| k.min(counts[r].get(g).copied().unwrap_or(0)))
                            .sum();
                        p.matched.push(matched);
                        p.totals.push(lists[h].len().saturating_sub(order));
                    }
                    let s = cumulative_bleu(&p, lists[h].len(), lists[r].len(), config.smoothing);
                    total += s.iter().sum::<f64>() / s.len() as f64;
                }
                total / (n_utt - 1) as f64
            })
            .collect(),
    };
    Ok(scores.iter().sum::<f64>() / n_utt as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Dist1,
    Dist2,
    Ent4,
    SelfBleu,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Dist1, Metric::Dist2, Metric::Ent4, Metric::SelfBleu];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Dist1 => "dist1",
            Metric::Dist2 => "dist2",
            Metric::Ent4 => "ent4",
            Metric::SelfBleu => "self_bleu",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Metric::Dist1 => "Dist-1",
            Metric::Dist2 => "Dist-2",
            Metric::Ent4 => "Ent-4",
            Metric::SelfBleu => "Self-BLEU",
        }
    }

    pub fn compute(&self, corpus: &Corpus, bleu: &SelfBleuConfig) -> Result<f64, MetricError> {
        match self {
            Metric::Dist1 => dist_n(corpus, 1),
            Metric::Dist2 => dist_n(corpus, 2),
            Metric::Ent4 => ent_n(corpus, 4),
            Metric::SelfBleu => self_bleu(corpus, bleu),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = MetricError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase().replace(['-', '_'], "");
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str().replace('_', "") == key)
            .ok_or_else(|| MetricError::UnknownMetric(s.to_string()))
    }
}

/// Shuffles dialogues with `seed` and takes whole dialogues until the
/// admitted word count reaches `cutoff`.
pub fn sample_with_cutoff(
    dialogues: &[Dialogue],
    cutoff: usize,
    seed: u64,
    filter: RoleFilter,
) -> Result<Vec<&Dialogue>, MetricError> {
    let words: Vec<usize> = dialogues.iter().map(|d| d.word_count(filter)).collect();
    let available: usize = words.iter().sum();
    if available < cutoff {
        return Err(MetricError::CorpusTooSmall { available, cutoff });
    }
    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut taken = Vec::new();
    let mut count = 0;
    for i in order {
        if count >= cutoff && !taken.is_empty() {
            break;
        }
        taken.push(&dialogues[i]);
        count += words[i];
    }
    Ok(taken)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub metrics: Vec<Metric>,
    pub resamples: usize,
    pub cutoff: usize,
    pub seed: u64,
    pub role_filter: RoleFilter,
    pub bleu: SelfBleuConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metrics: Metric::ALL.to_vec(),
            resamples: DEFAULT_RESAMPLES,
            cutoff: DEFAULT_CUTOFF,
            seed: 0,
            role_filter: RoleFilter::All,
            bleu: SelfBleuConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    pub per_sample: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single sample.
    pub std: f64,
    pub log_base: String,
    pub bleu_mode: BleuMode,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Per-resample seeds, drawn in order from a generator seeded with `master`.
pub fn resample_seeds(master: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..count).map(|_| rng.random()).collect()
}

/// Scores every metric on `resamples` cutoff samples. Deterministic for a
/// given seed regardless of thread count.
pub fn evaluate_dataset(
    dialogues: &[Dialogue],
    config: &EvalConfig,
) -> Result<Vec<MetricReport>, MetricError> {
    let seeds = resample_seeds(config.seed, config.resamples);
    let samples: Vec<Vec<f64>> = seeds
        .par_iter()
        .map(|&seed| {
            let picked = sample_with_cutoff(dialogues, config.cutoff, seed, config.role_filter)?;
            let corpus = Corpus::from_dialogues(picked, config.role_filter);
            config
                .metrics
                .iter()
                .map(|m| m.compute(&corpus, &config.bleu))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    Ok(config
        .metrics
        .iter()
        .enumerate()
        .map(|(j, &metric)| {
            let per_sample: Vec<f64> = samples.iter().map(|s| s[j]).collect();
            let (mean, std) = mean_std(&per_sample);
            MetricReport {
                metric,
                per_sample,
                mean,
                std,
                log_base: "e".into(),
                bleu_mode: config.bleu.mode,
            }
        })
        .collect())
}

/// Table with one row per dataset and one column per metric.
pub fn render_table(rows: &[(String, Vec<MetricReport>)]) -> String {
    let metrics: Vec<Metric> = rows
        .first()
        .map(|(_, r)| r.iter().map(|m| m.metric).collect())
        .unwrap_or_default();
    let mut out = format!("{:<24}", "Dataset");
    for m in &metrics {
        out.push_str(&format!(" {:>16}", m.label()));
    }
    out.push('\n');
    for (name, reports) in rows {
        out.push_str(&format!("{name:<24}"));
        for r in reports {
            out.push_str(&format!(" {:>16}", format!("{:.3} ± {:.3}", r.mean, r.std)));
        }
        out.push('\n');
    }
    out
}
