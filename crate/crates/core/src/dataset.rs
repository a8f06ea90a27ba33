//! Dataset export, splitting and statistics.
//!
//! The canonical file is a UTF-8 JSON array with one record per worker task.
//! Splits are assigned per worker so no worker's preferences leak across
//! splits.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{validate_session, DialogueAct, DialogueSession, SessionStatus};
use crate::orchestrator::{guidance_integrity_violations, CollectionMode, Phase, TaskState};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("task of worker `{0}` is not finished")]
    Unfinished(String),
    #[error(
        "split fractions must be non-negative and sum to at most 1 (train {train}, val {val})"
    )]
    BadSplit { train: f64, val: f64 },
    #[error("dataset file: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn label(&self) -> &'static str {
        match self {
            Split::Train => "Train",
            Split::Val => "Val",
            Split::Test => "Test",
        }
    }
}

/// Guidance shown for an assistant turn, kept for referential checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceRef {
    pub guidance_id: String,
    pub act: DialogueAct,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub worker_id: String,
    pub domain: String,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default)]
    pub mode: CollectionMode,
    pub sessions: Vec<DialogueSession>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub guidance: Vec<GuidanceRef>,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train: f64,
    pub val: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            seed: 0,
            train: 0.7,
            val: 0.1,
        }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        SplitSpec {
            seed,
            ..SplitSpec::default()
        }
    }

    fn check(&self) -> Result<(), DatasetError> {
        let ok = self.train >= 0.0 && self.val >= 0.0 && self.train + self.val <= 1.0 + 1e-12;
        if ok {
            Ok(())
        } else {
            Err(DatasetError::BadSplit {
                train: self.train,
                val: self.val,
            })
        }
    }
}

/// Seeded assignment of workers to splits. Workers are sorted, shuffled, and
/// cut at `round(n * train)` and `round(n * (train + val))`.
pub fn assign_splits(
    worker_ids: &[String],
    spec: &SplitSpec,
) -> Result<HashMap<String, Split>, DatasetError> {
    spec.check()?;
    let mut ids: Vec<String> = worker_ids.to_vec();
    ids.sort();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ids.shuffle(&mut rng);
    let n = ids.len() as f64;
    let train_end = (n * spec.train).round() as usize;
    let val_end = ((n * (spec.train + spec.val)).round() as usize).max(train_end);
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < train_end {
                Split::Train
            } else if i < val_end {
                Split::Val
            } else {
                Split::Test
            };
            (id, split)
        })
        .collect())
}

pub fn record_from_task(task: &TaskState, split: Split) -> DatasetRecord {
    DatasetRecord {
        worker_id: task.worker_id().to_string(),
        domain: task.domain().to_string(),
        split,
        mode: task.mode,
        sessions: task.sessions(),
        guidance: task
            .guidance_log
            .iter()
            .map(|g| GuidanceRef {
                guidance_id: g.guidance_id.clone(),
                act: g.act,
                text: g.text.clone(),
            })
            .collect(),
    }
}

/// Builds split-labelled records from finished tasks.
pub fn records_from_tasks(
    tasks: &[TaskState],
    spec: &SplitSpec,
) -> Result<Vec<DatasetRecord>, DatasetError> {
    if let Some(t) = tasks.iter().find(|t| t.phase != Phase::Done) {
        return Err(DatasetError::Unfinished(t.worker_id().to_string()));
    }
    let ids: Vec<String> = tasks.iter().map(|t| t.worker_id().to_string()).collect();
    let splits = assign_splits(&ids, spec)?;
    Ok(tasks
        .iter()
        .map(|t| record_from_task(t, splits[t.worker_id()]))
        .collect())
}

/// Session-level invariant breaches and guidance-link problems, prefixed
/// with the worker id.
pub fn record_violations(record: &DatasetRecord) -> Vec<String> {
    let mut out = Vec::new();
    for s in &record.sessions {
        for v in validate_session(s) {
            out.push(format!(
                "{} session {}: {v}",
                record.worker_id, s.session_index
            ));
        }
    }
    if !record.guidance.is_empty() {
        let log: Vec<crate::guidance::Guidance> = record
            .guidance
            .iter()
            .map(|g| crate::guidance::Guidance {
                guidance_id: g.guidance_id.clone(),
                act: g.act,
                text: g.text.clone(),
                target_categories: Vec::new(),
                cot_trace: String::new(),
                prompt_hash: String::new(),
            })
            .collect();
        for v in guidance_integrity_violations(&record.sessions, &log) {
            out.push(format!("{}: {v}", record.worker_id));
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRow {
    /// Number of dialogue sets keyed by how many sessions they contain.
    pub sets_by_sessions: BTreeMap<usize, usize>,
    pub prefs: usize,
    pub utts: usize,
    pub dials: usize,
}

impl StatsRow {
    pub fn sets(&self, sessions: usize) -> usize {
        self.sets_by_sessions.get(&sessions).copied().unwrap_or(0)
    }

    fn add(&mut self, other: &StatsRow) {
        for (k, v) in &other.sets_by_sessions {
            *self.sets_by_sessions.entry(*k).or_default() += v;
        }
        self.prefs += other.prefs;
        self.utts += other.utts;
        self.dials += other.dials;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub by_split: BTreeMap<Split, StatsRow>,
    pub total: StatsRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StatsOptions {
    pub include_abandoned: bool,
}

fn counted(s: &DialogueSession, options: StatsOptions) -> bool {
    options.include_abandoned || s.status != SessionStatus::Abandoned
}

/// Set counts, preferences, utterances and dialogues per split and in total.
pub fn compute_stats(records: &[DatasetRecord], options: StatsOptions) -> DatasetStats {
    let mut stats = DatasetStats::default();
    for r in records {
        let sessions: Vec<&DialogueSession> =
            r.sessions.iter().filter(|s| counted(s, options)).collect();
        let mut row = StatsRow::default();
        if !sessions.is_empty() {
            row.sets_by_sessions.insert(sessions.len(), 1);
        }
        row.dials = sessions.len();
        row.utts = sessions.iter().map(|s| s.utterances.len()).sum();
        row.prefs = sessions.iter().map(|s| s.extracted.len()).sum();
        stats.by_split.entry(r.split).or_default().add(&row);
        stats.total.add(&row);
    }
    stats
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "Split", "Single", "Two", "Three", "#Pref", "#Utt", "#Dial"
        )?;
        let line = |f: &mut fmt::Formatter<'_>, label: &str, r: &StatsRow| {
            writeln!(
                f,
                "{:<6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
                label,
                r.sets(1),
                r.sets(2),
                r.sets(3),
                r.prefs,
                r.utts,
                r.dials
            )
        };
        for split in Split::ALL {
            if let Some(r) = self.by_split.get(&split) {
                line(f, split.label(), r)?;
            }
        }
        line(f, "Total", &self.total)
    }
}

pub fn save_dataset(path: &Path, records: &[DatasetRecord]) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(records)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a JSON array of records, or one record per line.
pub fn parse_dataset(text: &str) -> Result<Vec<DatasetRecord>, DatasetError> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return Ok(serde_json::from_str(trimmed)?);
    }
    trimmed
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(DatasetError::from))
        .collect()
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>, DatasetError> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportReport {
    pub records: Vec<DatasetRecord>,
    pub stats: DatasetStats,
    pub violations: Vec<String>,
}

/// Writes the canonical file and reports statistics and invariant breaches.
pub fn export_dataset(
    tasks: &[TaskState],
    spec: &SplitSpec,
    path: &Path,
) -> Result<ExportReport, DatasetError> {
    let records = records_from_tasks(tasks, spec)?;
    save_dataset(path, &records)?;
    let stats = compute_stats(&records, StatsOptions::default());
    let violations = records.iter().flat_map(record_violations).collect();
    Ok(ExportReport {
        records,
        stats,
        violations,
    })
}
