//! Exhaustive exploration of act-engine predicate verdicts, shared by the
//! core tests and the acceptance suite.
#![allow(dead_code)]

use std::sync::{Arc, Mutex};

use laps_core::acts::{act_sequence_valid, ActConfig, ActEngine};
use laps_core::domains;
use laps_core::llm::{BackendError, BackendReply, ChatBackend, LlmClient, LlmRequest, StageConfig};
use laps_core::model::{DialogueAct, Utterance};
use laps_core::template::TemplateStore;
use regex::Regex;

/// Answers predicate calls from a fixed verdict prefix and notes when the
/// prefix runs out.
pub struct Verdicts {
    bits: Vec<bool>,
    cursor: Mutex<usize>,
}

impl ChatBackend for Verdicts {
    fn send(&self, _: &LlmRequest) -> Result<BackendReply, BackendError> {
        let mut c = self.cursor.lock().unwrap();
        let bit = self.bits.get(*c).copied();
        *c += 1;
        match bit {
            Some(b) => Ok(BackendReply::text(b.to_string())),
            None => Err(BackendError::permanent(None, "prefix exhausted")),
        }
    }
}

pub enum Outcome {
    Finished(Vec<DialogueAct>),
    NeedsMoreBits,
}

pub fn simulate(bits: &[bool], session_index: u32, budget: u32) -> Outcome {
    let backend = Arc::new(Verdicts {
        bits: bits.to_vec(),
        cursor: Mutex::new(0),
    });
    let engine = ActEngine::new(
        LlmClient::from_arc(backend),
        Arc::new(TemplateStore::builtin()),
        StageConfig::new("m", 0.0, 8),
        ActConfig {
            turn_budget: budget,
        },
    );
    let budget = engine.config().turn_budget;
    let schema = domains::recipe().schema;
    let mut history: Vec<Utterance> = Vec::new();
    let mut acts = Vec::new();
    let mut prev = None;
    loop {
        let decision = match engine.next_act(&history, prev, session_index, &schema) {
            Ok(d) => d,
            Err(_) => return Outcome::NeedsMoreBits,
        };
        let turn = history.len() as u32 + 1;
        history.push(Utterance::assistant(
            turn,
            format!("a{turn}"),
            decision.act,
            None,
        ));
        history.push(Utterance::user(turn + 1, format!("u{turn}")));
        acts.push(decision.act);
        prev = Some(decision.act);
        if decision.act == DialogueAct::Goodbye {
            return Outcome::Finished(acts);
        }
        assert!(acts.len() <= budget as usize, "budget overrun: {acts:?}");
    }
}

/// Every complete act sequence reachable under some verdict assignment.
pub fn all_paths(session_index: u32, budget: u32) -> Vec<Vec<DialogueAct>> {
    let mut out = Vec::new();
    let mut stack = vec![Vec::new()];
    while let Some(prefix) = stack.pop() {
        match simulate(&prefix, session_index, budget) {
            Outcome::Finished(acts) => out.push(acts),
            Outcome::NeedsMoreBits => {
                for b in [false, true] {
                    let mut p = prefix.clone();
                    p.push(b);
                    stack.push(p);
                }
            }
        }
    }
    out
}

pub fn letters(acts: &[DialogueAct]) -> String {
    acts.iter()
        .map(|a| match a {
            DialogueAct::Greeting => 'G',
            DialogueAct::ElicitMust => 'M',
            DialogueAct::ElicitShould => 'S',
            DialogueAct::ElicitCould => 'C',
            DialogueAct::Recommend => 'R',
            DialogueAct::FollowUp => 'F',
            DialogueAct::Goodbye => 'B',
        })
        .collect()
}

/// Every path for one session index and budget, checked against the
/// regular-language oracle and the structural rules. Returns the path count.
pub fn check_paths(session_index: u32, budget: u32) -> Result<usize, String> {
    let first = Regex::new(r"^GM+S*C*(RF)+B$").unwrap();
    let later = Regex::new(r"^GC+(RF)+B$").unwrap();
    let paths = all_paths(session_index, budget);
    if paths.is_empty() {
        return Err(format!(
            "session {session_index} budget {budget}: no complete path"
        ));
    }
    for acts in &paths {
        let word = letters(acts);
        let oracle = if session_index == 1 { &first } else { &later };
        let ok = oracle.is_match(&word)
            && act_sequence_valid(acts, session_index, true)
            && acts.len() <= budget.max(5) as usize
            && word.contains('R')
            && word.ends_with('B')
            && (session_index == 1 || !(word.contains('M') || word.contains('S')));
        if !ok {
            return Err(format!("session {session_index} budget {budget}: {word}"));
        }
    }
    Ok(paths.len())
}

/// Sessions 1 to 3 over budgets 5 to 10.
pub fn state_machine_exhaustive() -> Result<String, String> {
    let mut total = 0;
    for session in 1..=3 {
        for budget in 5..=10 {
            total += check_paths(session, budget)?;
        }
    }
    Ok(format!(
        "{total} act sequences over sessions 1-3, budgets 5-10"
    ))
}
