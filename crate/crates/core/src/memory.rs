//! Per-worker preference memory: the union of validated preference sets of
//! every completed session, plus its on-disk commit log.
//!
//! On-disk layout (one directory per worker):
//!
//! ```text
//! <root>/<worker_id>/commit-<k>.json   {"worker_id", "session_index", "pairs": [...]}
//! <root>/<worker_id>/snapshot.json     {"worker_id", "last_committed_session", "pairs": [...]}
//! ```
//!
//! Commit files are the source of truth and are replayed on load; the
//! snapshot is a compaction that is rewritten after every commit.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{PairKey, PreferencePair};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("commit for session {got} out of order (expected {expected})")]
    OutOfOrderCommit { expected: u32, got: u32 },
    #[error("unvalidated preference ({category}, {attribute})")]
    UnvalidatedPreference { category: String, attribute: String },
    #[error("memory storage: {0}")]
    Io(#[from] std::io::Error),
    #[error("memory storage format: {0}")]
    Format(#[from] serde_json::Error),
    #[error("corrupt memory log for {worker_id}: {detail}")]
    Corrupt { worker_id: String, detail: String },
    #[error("injected fault at {0:?}")]
    InjectedFault(WriteStep),
}

/// Accumulated validated preferences of one worker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceMemory {
    pub worker_id: String,
    pairs: Vec<PreferencePair>,
    pub last_committed_session: u32,
}

impl PreferenceMemory {
    pub fn new(worker_id: impl Into<String>) -> Self {
        PreferenceMemory {
            worker_id: worker_id.into(),
            pairs: Vec::new(),
            last_committed_session: 0,
        }
    }

    pub fn pairs(&self) -> &[PreferencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Returns a new memory with `prefs` merged in and `k` advanced by one.
    /// A triple that is already present keeps its original provenance.
    pub fn commit_session(
        &self,
        session_index: u32,
        prefs: &[PreferencePair],
    ) -> Result<PreferenceMemory, MemoryError> {
        let expected = self.last_committed_session + 1;
        if session_index != expected {
            return Err(MemoryError::OutOfOrderCommit {
                expected,
                got: session_index,
            });
        }
        if let Some(p) = prefs.iter().find(|p| !p.validated) {
            return Err(MemoryError::UnvalidatedPreference {
                category: p.category.clone(),
                attribute: p.attribute.clone(),
            });
        }
        let mut by_key: BTreeMap<PairKey, PreferencePair> =
            self.pairs.iter().map(|p| (p.key(), p.clone())).collect();
        for p in prefs {
            by_key.entry(p.key()).or_insert_with(|| p.clone());
        }
        let mut pairs: Vec<PreferencePair> = by_key.into_values().collect();
        sort_for_prompt(&mut pairs);
        Ok(PreferenceMemory {
            worker_id: self.worker_id.clone(),
            pairs,
            last_committed_session: session_index,
        })
    }

    /// Immutable copy of the current pairs.
    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot(self.pairs.clone())
    }
}

/// Prompt order: by disclosing session, then category, then attribute, so a
/// later stance on the same attribute appears after the earlier one.
pub fn sort_for_prompt(pairs: &mut [PreferencePair]) {
    pairs.sort_by(|a, b| {
        (a.source_session, &a.category, &a.attribute, a.polarity).cmp(&(
            b.source_session,
            &b.category,
            &b.attribute,
            b.polarity,
        ))
    });
}

/// Keeps the first pair per triple; on prompt-ordered input that is the
/// earliest disclosure.
fn dedup_keys(pairs: &mut Vec<PreferencePair>) {
    let mut seen = std::collections::BTreeSet::new();
    pairs.retain(|p| seen.insert(p.key()));
}

/// Frozen view of a memory at one point in time.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemorySnapshot(Vec<PreferencePair>);

impl MemorySnapshot {
    pub fn from_pairs(mut pairs: Vec<PreferencePair>) -> Self {
        sort_for_prompt(&mut pairs);
        dedup_keys(&mut pairs);
        MemorySnapshot(pairs)
    }

    pub fn pairs(&self) -> &[PreferencePair] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn keys(&self) -> std::collections::BTreeSet<PairKey> {
        self.0.iter().map(PreferencePair::key).collect()
    }

    /// One `category: attribute (like|dislike)` line per validated pair.
    pub fn render_lines(&self) -> String {
        render_memory_lines(&self.0)
    }
}

/// Serializes validated pairs one per line in prompt order; unvalidated pairs
/// never reach a prompt.
pub fn render_memory_lines(pairs: &[PreferencePair]) -> String {
    let mut validated: Vec<PreferencePair> =
        pairs.iter().filter(|p| p.validated).cloned().collect();
    sort_for_prompt(&mut validated);
    dedup_keys(&mut validated);
    validated
        .iter()
        .map(|p| format!("{}: {} ({})", p.category, p.attribute, p.polarity.as_str()))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub worker_id: String,
    pub session_index: u32,
    pub pairs: Vec<PreferencePair>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SnapshotRecord {
    worker_id: String,
    last_committed_session: u32,
    pairs: Vec<PreferencePair>,
}

/// Points in a commit where a test can force a failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteStep {
    /// Commit temp file written, not yet renamed into place.
    BeforeCommitRename,
    /// Commit file in place, snapshot not yet rewritten.
    BeforeSnapshot,
    /// Snapshot temp file written, not yet renamed.
    BeforeSnapshotRename,
}

/// Filesystem persistence for worker memories.
#[derive(Debug, Clone)]
pub struct MemoryStore {
    root: PathBuf,
    fault: Option<WriteStep>,
}

impl MemoryStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        MemoryStore {
            root: root.into(),
            fault: None,
        }
    }

    /// Fail the next commits at `step`; used by crash-safety tests.
    pub fn with_fault(mut self, step: WriteStep) -> Self {
        self.fault = Some(step);
        self
    }

    pub fn worker_dir(&self, worker_id: &str) -> PathBuf {
        self.root.join(sanitize(worker_id))
    }

    fn check_fault(&self, step: WriteStep) -> Result<(), MemoryError> {
        if self.fault == Some(step) {
            Err(MemoryError::InjectedFault(step))
        } else {
            Ok(())
        }
    }

    /// Validates and merges, then persists: the commit file first (atomic
    /// rename), then the compacted snapshot.
    pub fn commit(
        &self,
        memory: &PreferenceMemory,
        session_index: u32,
        prefs: &[PreferencePair],
    ) -> Result<PreferenceMemory, MemoryError> {
        let next = memory.commit_session(session_index, prefs)?;
        let dir = self.worker_dir(&memory.worker_id);
        fs::create_dir_all(&dir)?;

        let record = CommitRecord {
            worker_id: memory.worker_id.clone(),
            session_index,
            pairs: prefs.to_vec(),
        };
        let commit_path = dir.join(format!("commit-{session_index}.json"));
        let tmp = write_temp(&commit_path, &serde_json::to_vec_pretty(&record)?)?;
        self.check_fault(WriteStep::BeforeCommitRename)?;
        fs::rename(&tmp, &commit_path)?;

        self.check_fault(WriteStep::BeforeSnapshot)?;
        let snapshot = SnapshotRecord {
            worker_id: next.worker_id.clone(),
            last_committed_session: next.last_committed_session,
            pairs: next.pairs.clone(),
        };
        let snap_path = dir.join("snapshot.json");
        let tmp = write_temp(&snap_path, &serde_json::to_vec_pretty(&snapshot)?)?;
        self.check_fault(WriteStep::BeforeSnapshotRename)?;
        fs::rename(&tmp, &snap_path)?;
        Ok(next)
    }

    /// Rebuilds a worker's memory by replaying its commit log.
    pub fn load(&self, worker_id: &str) -> Result<PreferenceMemory, MemoryError> {
        let mut memory = PreferenceMemory::new(worker_id);
        for record in self.commits(worker_id)? {
            memory = memory.commit_session(record.session_index, &record.pairs)?;
        }
        let snap_path = self.worker_dir(worker_id).join("snapshot.json");
        if snap_path.exists() {
            let snap: SnapshotRecord = serde_json::from_slice(&fs::read(&snap_path)?)?;
            if snap.last_committed_session > memory.last_committed_session {
                return Err(MemoryError::Corrupt {
                    worker_id: worker_id.to_string(),
                    detail: format!(
                        "snapshot at session {} but log ends at {}",
                        snap.last_committed_session, memory.last_committed_session
                    ),
                });
            }
        }
        Ok(memory)
    }

    /// Commit records in session order; the log must be contiguous from 1.
    pub fn commits(&self, worker_id: &str) -> Result<Vec<CommitRecord>, MemoryError> {
        let dir = self.worker_dir(worker_id);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut records = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default();
            if name.starts_with("commit-") && name.ends_with(".json") {
                let record: CommitRecord = serde_json::from_slice(&fs::read(&path)?)?;
                records.push(record);
            }
        }
        records.sort_by_key(|r| r.session_index);
        for (i, r) in records.iter().enumerate() {
            if r.session_index != i as u32 + 1 {
                return Err(MemoryError::Corrupt {
                    worker_id: worker_id.to_string(),
                    detail: format!("commit log has a gap before session {}", r.session_index),
                });
            }
        }
        Ok(records)
    }
}

fn write_temp(target: &Path, bytes: &[u8]) -> std::io::Result<PathBuf> {
    let tmp = target.with_extension("json.tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(tmp)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}
