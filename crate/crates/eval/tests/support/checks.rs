//! Criterion checks shared by the eval tests and the acceptance suite. Each
//! returns a one-line summary on success and the first mismatch otherwise.

use std::collections::BTreeSet;

use laps_core::llm::{count_tokens, FnBackend, LlmClient, LlmRequest, StageSettings};
use laps_core::memory::MemorySnapshot;
use laps_core::model::{DialogueAct, PreferencePair};
use laps_eval::diversity::{dist_n, ent_n, self_bleu, BleuMode, Corpus, SelfBleuConfig};
use laps_eval::recommendation::{
    build_memory_prompt, build_standard_prompt, evaluate_methods, pu_scores, EvalMethodsConfig,
    MatchMode, PromptMethod,
};
use laps_eval::stats::welch_t_test;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use super::{
    compression_fixture, dist_oracle, ent_oracle, pu_fixtures, pu_oracle, random_corpus,
    scripted_recommender, self_bleu_oracle, self_bleu_pairwise_oracle, PuFixture, WELCH_CASES,
};

pub type Check = Result<String, String>;

const METRIC_TOL: f64 = 1e-9;
const WELCH_TOL: f64 = 1e-6;

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() <= METRIC_TOL,
        (None, None) => true,
        _ => false,
    }
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

pub fn metrics_oracle() -> Check {
    let cfg = SelfBleuConfig::default();
    let pair = SelfBleuConfig {
        mode: BleuMode::PerPair,
        ..cfg
    };
    let mut compared = 0;
    for seed in 0..50 {
        let raw = random_corpus(seed);
        let corpus = Corpus::from_token_lists(raw.clone());
        for n in 1..=4 {
            ensure!(
                close(dist_n(&corpus, n).ok(), dist_oracle(&raw, n)),
                "dist-{n} differs on corpus {seed}"
            );
            ensure!(
                close(ent_n(&corpus, n).ok(), ent_oracle(&raw, n)),
                "ent-{n} differs on corpus {seed}"
            );
        }
        ensure!(
            close(self_bleu(&corpus, &cfg).ok(), self_bleu_oracle(&raw)),
            "self-bleu differs on corpus {seed}"
        );
        ensure!(
            close(
                self_bleu(&corpus, &pair).ok(),
                self_bleu_pairwise_oracle(&raw)
            ),
            "per-pair self-bleu differs on corpus {seed}"
        );
        compared += 10;
    }
    Ok(format!(
        "50 corpora, {compared} values within {METRIC_TOL:e}"
    ))
}

pub fn corpus_strategy() -> impl Strategy<Value = Vec<Vec<String>>> {
    let token = prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(str::to_string);
    prop::collection::vec(prop::collection::vec(token, 1..10), 2..12)
}

pub fn prop_bounds(raw: Vec<Vec<String>>) -> Result<(), TestCaseError> {
    let c = Corpus::from_token_lists(raw.clone());
    let total: usize = raw.iter().map(Vec::len).sum();
    let d1 = dist_n(&c, 1).unwrap();
    prop_assert!(d1 > 0.0 && d1 <= 1.0);
    if let Ok(d2) = dist_n(&c, 2) {
        prop_assert!(d2 > 0.0 && d2 <= 1.0);
    }
    let e1 = ent_n(&c, 1).unwrap();
    prop_assert!(e1 >= 0.0 && e1 <= (total as f64).ln() + 1e-12);
    let b = self_bleu(&c, &SelfBleuConfig::default()).unwrap();
    prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
    Ok(())
}

pub fn prop_permutation(raw: Vec<Vec<String>>, rot: usize) -> Result<(), TestCaseError> {
    let mut shuffled = raw.clone();
    shuffled.reverse();
    let k = rot % shuffled.len();
    shuffled.rotate_left(k);
    let (a, b) = (
        Corpus::from_token_lists(raw),
        Corpus::from_token_lists(shuffled),
    );
    let cfg = SelfBleuConfig::default();
    for n in 1..=2 {
        prop_assert_eq!(dist_n(&a, n).ok(), dist_n(&b, n).ok());
        prop_assert!(close(ent_n(&a, n).ok(), ent_n(&b, n).ok()));
    }
    prop_assert!(close(self_bleu(&a, &cfg).ok(), self_bleu(&b, &cfg).ok()));
    Ok(())
}

/// Duplicating an utterance of at least 4 tokens never raises Dist-n and
/// never lowers Self-BLEU.
pub fn prop_duplicate(
    mut raw: Vec<Vec<String>>,
    pick: usize,
    extra: Vec<String>,
) -> Result<(), TestCaseError> {
    let i = pick % raw.len();
    raw[i] = extra;
    let mut dup = raw.clone();
    dup.push(raw[i].clone());
    let (a, b) = (Corpus::from_token_lists(raw), Corpus::from_token_lists(dup));
    for n in 1..=2 {
        prop_assert!(dist_n(&b, n).unwrap() <= dist_n(&a, n).unwrap() + 1e-12);
    }
    let cfg = SelfBleuConfig::default();
    prop_assert!(self_bleu(&b, &cfg).unwrap() + 1e-12 >= self_bleu(&a, &cfg).unwrap());
    Ok(())
}

/// k distinct equally frequent 4-grams give ln k; one repeated 4-gram gives 0.
pub fn prop_entropy(k: usize, reps: usize) -> Result<(), TestCaseError> {
    let mut raw = Vec::new();
    for i in 0..k {
        for _ in 0..reps {
            raw.push(vec![format!("w{i}"), "x".into(), "y".into(), "z".into()]);
        }
    }
    let e = ent_n(&Corpus::from_token_lists(raw), 4).unwrap();
    prop_assert!((e - (k as f64).ln()).abs() < 1e-9);
    let same = vec![vec!["p".to_string(), "q".into(), "r".into(), "s".into()]; reps + 1];
    prop_assert_eq!(ent_n(&Corpus::from_token_lists(same), 4).unwrap(), 0.0);
    Ok(())
}

pub fn extra_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-e]", 4..8)
}

/// All four properties, `cases` generated inputs each.
pub fn metric_invariants(cases: u32) -> Check {
    let run = |name: &str,
               f: &mut dyn FnMut(&mut TestRunner) -> Result<(), String>|
     -> Result<(), String> {
        let mut runner = TestRunner::new(Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        });
        f(&mut runner).map_err(|e| format!("{name}: {e}"))
    };
    run("bounds", &mut |r| {
        r.run(&corpus_strategy(), prop_bounds)
            .map_err(|e| e.to_string())
    })?;
    run("permutation", &mut |r| {
        r.run(&(corpus_strategy(), 0usize..12), |(raw, rot)| {
            prop_permutation(raw, rot)
        })
        .map_err(|e| e.to_string())
    })?;
    run("duplicate", &mut |r| {
        r.run(
            &(corpus_strategy(), 0usize..12, extra_strategy()),
            |(raw, pick, extra)| prop_duplicate(raw, pick, extra),
        )
        .map_err(|e| e.to_string())
    })?;
    run("entropy", &mut |r| {
        r.run(&(1usize..40, 1usize..5), |(k, reps)| prop_entropy(k, reps))
            .map_err(|e| e.to_string())
    })?;
    Ok(format!("4 properties x {cases} cases"))
}

pub struct OracleSample {
    pub eval_session: u32,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub matched: usize,
    pub per_session_matched: [usize; 3],
}

/// Brute force over one fixture: every session from 2 on, one sample per
/// run, universe = attributes disclosed up to that session.
pub fn fixture_oracle(f: &PuFixture, method: PromptMethod, runs: usize) -> Vec<OracleSample> {
    let mut out = Vec::new();
    let sessions = &f.record.sessions;
    for (pos, s) in sessions.iter().enumerate().skip(1) {
        let rec = s
            .utterances
            .iter()
            .rposition(|u| u.act == Some(DialogueAct::Recommend))
            .unwrap();
        let history = &s.utterances[..rec];
        let reference = &s.utterances[rec].text;
        let universe: Vec<String> = f
            .disclosed
            .iter()
            .filter(|(_, k)| **k <= s.session_index)
            .map(|(a, _)| a.clone())
            .collect();
        let prior = &sessions[..pos];
        let memory: Vec<PreferencePair> = prior.iter().flat_map(|p| p.extracted.clone()).collect();
        let prompt = match method {
            PromptMethod::Memory => {
                build_memory_prompt("recipe", history, &MemorySnapshot::from_pairs(memory))
            }
            PromptMethod::Standard => build_standard_prompt("recipe", history, prior),
        };
        let pred = scripted_recommender(&prompt);
        let (precision, recall, matched) = pu_oracle(&pred, reference, &universe);
        let mut per_session_matched = [0; 3];
        for (k, slot) in per_session_matched.iter_mut().enumerate() {
            let sub: Vec<String> = universe
                .iter()
                .filter(|a| f.disclosed[*a] == k as u32 + 1)
                .cloned()
                .collect();
            *slot = pu_oracle(&pred, reference, &sub).2;
        }
        for _ in 0..runs {
            out.push(OracleSample {
                eval_session: s.session_index,
                precision,
                recall,
                matched,
                per_session_matched,
            });
        }
    }
    out
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn scripted_llm() -> LlmClient {
    LlmClient::new(FnBackend::new(|req: &LlmRequest| {
        scripted_recommender(&req.messages[0].content)
    }))
}

pub fn pu_scores_equivalence() -> Check {
    let fixtures = pu_fixtures();
    ensure!(
        fixtures.len() == 20,
        "expected 20 fixtures, got {}",
        fixtures.len()
    );
    let mut compared = 0;
    for (i, f) in fixtures.iter().enumerate() {
        let universe: Vec<String> = f.disclosed.keys().cloned().collect();
        let uset: BTreeSet<String> = universe.iter().cloned().collect();
        for s in &f.record.sessions {
            let reference = &s
                .utterances
                .iter()
                .rev()
                .find(|u| u.act == Some(DialogueAct::Recommend))
                .unwrap()
                .text;
            for pred in [
                scripted_recommender("x"),
                scripted_recommender("xy"),
                reference.clone(),
                String::new(),
            ] {
                let got = pu_scores(&pred, reference, &uset, None, MatchMode::Substring);
                let (p, r, m) = pu_oracle(&pred, reference, &universe);
                ensure!(
                    (got.precision, got.recall, got.matched.len()) == (p, r, m),
                    "fixture {i} session {}: {:?} vs oracle {:?}",
                    s.session_index,
                    (got.precision, got.recall, got.matched.len()),
                    (p, r, m)
                );
                compared += 1;
            }
        }
    }
    Ok(format!("{compared} pu_scores calls"))
}

pub fn evaluate_methods_equivalence() -> Check {
    let fixtures = pu_fixtures();
    let records: Vec<_> = fixtures.iter().map(|f| f.record.clone()).collect();
    let config = EvalMethodsConfig {
        runs: 2,
        ..EvalMethodsConfig::default()
    };
    let stage = StageSettings::default().recommendation;
    let report = evaluate_methods(&records, &config, &scripted_llm(), &stage, None, None)
        .map_err(|e| e.to_string())?;
    ensure!(
        report.dialogues == 40,
        "expected 40 evaluated dialogues, got {}",
        report.dialogues
    );
    let mut partitions = 0;
    for m in &report.methods {
        let samples: Vec<OracleSample> = fixtures
            .iter()
            .flat_map(|f| fixture_oracle(f, m.method, 2))
            .collect();
        let name = m.method;
        ensure!(m.pu.samples == samples.len(), "{name}: sample count");
        ensure!(
            m.pu.precision == mean(samples.iter().filter_map(|s| s.precision)),
            "{name}: mean precision"
        );
        ensure!(
            m.pu.recall == mean(samples.iter().filter_map(|s| s.recall)),
            "{name}: mean recall"
        );
        ensure!(
            m.pu.precision_excluded == samples.iter().filter(|s| s.precision.is_none()).count(),
            "{name}: precision exclusions"
        );
        ensure!(
            m.pu.recall_excluded == samples.iter().filter(|s| s.recall.is_none()).count(),
            "{name}: recall exclusions"
        );
        ensure!(
            m.pu.matched == samples.iter().map(|s| s.matched).sum::<usize>(),
            "{name}: matched total"
        );
        for (k, breakdown) in &m.by_disclosure {
            let here: Vec<&OracleSample> =
                samples.iter().filter(|s| s.eval_session == *k).collect();
            let total: usize = here.iter().map(|s| s.matched).sum();
            ensure!(
                breakdown.values().map(|a| a.matched).sum::<usize>() == total,
                "{name}: session {k} partition does not sum to the total"
            );
            for (d, agg) in breakdown {
                let expected: usize = here
                    .iter()
                    .map(|s| s.per_session_matched[*d as usize - 1])
                    .sum();
                ensure!(
                    agg.matched == expected,
                    "{name}: eval {k} disclosure {d} matched"
                );
            }
            partitions += 1;
        }
    }
    Ok(format!(
        "{} dialogues x {} methods, {partitions} partitions",
        report.dialogues,
        report.methods.len()
    ))
}

pub fn pu_oracle_equivalence() -> Check {
    Ok(format!(
        "{}; {}",
        pu_scores_equivalence()?,
        evaluate_methods_equivalence()?
    ))
}

/// Memory and standard prompt token counts for the in-progress third session.
pub fn token_pair(turns: usize, seed: u64) -> (u32, u32) {
    let record = compression_fixture(seed, turns);
    let history = &record.sessions[2].utterances;
    let prior = &record.sessions[..2];
    let memory: Vec<PreferencePair> = prior.iter().flat_map(|s| s.extracted.clone()).collect();
    let mem = build_memory_prompt("recipe", history, &MemorySnapshot::from_pairs(memory));
    let std = build_standard_prompt("recipe", history, prior);
    (count_tokens(&mem), count_tokens(&std))
}

pub fn prompt_compression() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let record = compression_fixture(seed, 15);
        ensure!(
            record.sessions[..2]
                .iter()
                .all(|s| s.utterances.len() >= 15),
            "fixture {seed} is too short"
        );
        let (mem, std) = token_pair(15, seed);
        ensure!(
            2 * mem <= std,
            "fixture {seed}: memory {mem} tokens vs standard {std}"
        );
        worst = worst.max(mem as f64 / std as f64);
    }
    Ok(format!(
        "10 workers, largest memory/standard ratio {worst:.3}"
    ))
}

pub fn welch_cross_check() -> Check {
    let mut worst: f64 = 0.0;
    for (i, (a, b, t, p)) in WELCH_CASES.iter().enumerate() {
        let r = welch_t_test(a, b).map_err(|e| e.to_string())?;
        ensure!((r.t - t).abs() < WELCH_TOL, "case {i}: t {} vs {t}", r.t);
        ensure!(
            (r.p_value - p).abs() < WELCH_TOL,
            "case {i}: p {} vs {p}",
            r.p_value
        );
        worst = worst.max((r.p_value - p).abs());
        let same = welch_t_test(a, a).map_err(|e| e.to_string())?;
        ensure!(
            same.p_value == 1.0,
            "case {i}: identical samples give p = {}",
            same.p_value
        );
    }
    Ok(format!(
        "10 pairs, max |dp| {worst:.1e}, identical samples p = 1"
    ))
}
