//! Independent oracles and fixture builders shared by the eval tests and the
//! acceptance suite. Oracles use naive list arithmetic on purpose; none of
//! them call into the code under test.
#![allow(dead_code)]
// Reference samples are data, not approximations of named constants.
#![allow(clippy::approx_constant, clippy::excessive_precision)]

pub mod checks;

use std::collections::{BTreeMap, BTreeSet};

use laps_core::dataset::{DatasetRecord, Split};
use laps_core::model::{
    DialogueAct, DialogueSession, Polarity, PreferencePair, ScenarioStep, SessionStatus, Utterance,
};
use laps_core::orchestrator::CollectionMode;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= tokens.len() {
        out.push(tokens[i..i + n].to_vec());
        i += 1;
    }
    out
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

pub fn dist_oracle(corpus: &[Vec<String>], n: usize) -> Option<f64> {
    let mut all = Vec::new();
    for u in corpus {
        all.extend(ngrams(u, n));
    }
    if all.is_empty() {
        return None;
    }
    let total = all.len();
    all.sort();
    all.dedup();
    Some(all.len() as f64 / total as f64)
}

pub fn ent_oracle(corpus: &[Vec<String>], n: usize) -> Option<f64> {
    let mut all = Vec::new();
    for u in corpus {
        all.extend(ngrams(u, n));
    }
    if all.is_empty() {
        return None;
    }
    let mut distinct = all.clone();
    distinct.sort();
    distinct.dedup();
    let total = all.len() as f64;
    let mut h = 0.0;
    for g in &distinct {
        let p = count(&all, g) as f64 / total;
        h -= p * p.ln();
    }
    Some(h)
}

/// Mean of cumulative BLEU-1..4 for one hypothesis against `refs`.
fn bleu_oracle(hyp: &[String], refs: &[&Vec<String>]) -> f64 {
    let mut logp = Vec::new();
    for n in 1..=4 {
        let hg = ngrams(hyp, n);
        let mut distinct = hg.clone();
        distinct.sort();
        distinct.dedup();
        let mut clipped = 0;
        for g in &distinct {
            let max_ref = refs
                .iter()
                .map(|r| count(&ngrams(r, n), g))
                .max()
                .unwrap_or(0);
            clipped += count(&hg, g).min(max_ref);
        }
        logp.push(if clipped == 0 {
            None
        } else {
            Some((clipped as f64 / hg.len() as f64).ln())
        });
    }
    let h = hyp.len() as i64;
    let mut best: Option<i64> = None;
    for r in refs {
        let l = r.len() as i64;
        best = match best {
            None => Some(l),
            Some(b)
                if (l - h).abs() < (b - h).abs() || ((l - h).abs() == (b - h).abs() && l < b) =>
            {
                Some(l)
            }
            keep => keep,
        };
    }
    let r = best.unwrap() as f64;
    let bp = if hyp.len() as f64 > r {
        1.0
    } else {
        (1.0 - r / hyp.len() as f64).exp()
    };
    let mut total = 0.0;
    for k in 1..=4 {
        let parts = &logp[..k];
        if parts.iter().all(Option::is_some) {
            let s: f64 = parts.iter().map(|v| v.unwrap()).sum();
            total += bp * (s / k as f64).exp();
        }
    }
    total / 4.0
}

pub fn self_bleu_oracle(corpus: &[Vec<String>]) -> Option<f64> {
    if corpus.len() < 2 {
        return None;
    }
    let mut sum = 0.0;
    for (i, hyp) in corpus.iter().enumerate() {
        let refs: Vec<&Vec<String>> = corpus
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, r)| r)
            .collect();
        sum += bleu_oracle(hyp, &refs);
    }
    Some(sum / corpus.len() as f64)
}

pub fn self_bleu_pairwise_oracle(corpus: &[Vec<String>]) -> Option<f64> {
    if corpus.len() < 2 {
        return None;
    }
    let mut sum = 0.0;
    for (i, hyp) in corpus.iter().enumerate() {
        let mut s = 0.0;
        for (j, r) in corpus.iter().enumerate() {
            if i != j {
                s += bleu_oracle(hyp, &[r]);
            }
        }
        sum += s / (corpus.len() - 1) as f64;
    }
    Some(sum / corpus.len() as f64)
}

/// Random corpus of 1..=20 non-empty utterances of at most 15 tokens drawn
/// from a small vocabulary, so n-grams repeat often.
pub fn random_corpus(seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = ["a", "b", "c", "d", "e", "f", "g"];
    let vocab_size = rng.random_range(2..=vocab.len());
    let n_utt = rng.random_range(1..=20);
    (0..n_utt)
        .map(|_| {
            let len = rng.random_range(1..=15);
            (0..len)
                .map(|_| vocab[rng.random_range(0..vocab_size)].to_string())
                .collect()
        })
        .collect()
}

pub fn contains_ci(text: &str, attribute: &str) -> bool {
    text.to_lowercase().contains(&attribute.to_lowercase())
}

/// Brute-force PU for one pair of texts: (precision, recall, |matched|).
pub fn pu_oracle(
    pred: &str,
    reference: &str,
    universe: &[String],
) -> (Option<f64>, Option<f64>, usize) {
    let p: Vec<&String> = universe.iter().filter(|a| contains_ci(pred, a)).collect();
    let r: Vec<&String> = universe
        .iter()
        .filter(|a| contains_ci(reference, a))
        .collect();
    let both = p.iter().filter(|a| r.contains(a)).count();
    let prec = if p.is_empty() {
        None
    } else {
        Some(both as f64 / p.len() as f64)
    };
    let rec = if r.is_empty() {
        None
    } else {
        Some(both as f64 / r.len() as f64)
    };
    (prec, rec, both)
}

pub const ATTRIBUTES: [&str; 12] = [
    "vegan",
    "thai",
    "spicy",
    "gluten-free",
    "mushrooms",
    "quick",
    "grilled",
    "peanuts",
    "pasta",
    "sweet",
    "low carb",
    "curry",
];
pub const CATEGORIES: [&str; 4] = ["diet", "cuisine", "flavor", "ingredient"];

fn session_with(index: u32, turns: Vec<Utterance>, prefs: Vec<PreferencePair>) -> DialogueSession {
    let mut s = DialogueSession::new(ScenarioStep {
        session_index: index,
        description: format!("scenario {index}"),
    });
    s.utterances = turns;
    s.extracted = prefs;
    s.status = SessionStatus::Completed;
    s
}

/// One fixture worker: three sessions, each disclosing a few attributes
/// and ending in an accepted recommendation.
pub struct PuFixture {
    pub record: DatasetRecord,
    /// Attribute to disclosing session, lowercased.
    pub disclosed: BTreeMap<String, u32>,
}

pub fn pu_fixture(seed: u64) -> PuFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<&str> = ATTRIBUTES.to_vec();
    let mut disclosed = BTreeMap::new();
    let mut sessions = Vec::new();
    for index in 1..=3u32 {
        let take = rng.random_range(1..=3).min(pool.len());
        let mut prefs = Vec::new();
        let mut turns = vec![Utterance::assistant(
            0,
            "Hello! What are you looking for today?",
            DialogueAct::Greeting,
            None,
        )];
        for _ in 0..take {
            let pos = rng.random_range(0..pool.len());
            let attr = pool.remove(pos);
            let cat = *CATEGORIES.choose(&mut rng).unwrap();
            let pol = if rng.random_bool(0.7) {
                Polarity::Like
            } else {
                Polarity::Dislike
            };
            prefs.push(PreferencePair::new(cat, attr, pol, index).validated());
            disclosed.insert(attr.to_string(), index);
            let t = turns.len() as u32;
            turns.push(Utterance::user(t, format!("I am into {attr} things.")));
            turns.push(Utterance::assistant(
                t + 1,
                "Noted. Anything else?",
                DialogueAct::ElicitShould,
                None,
            ));
        }
        let t = turns.len() as u32;
        turns.push(Utterance::user(t, "That is all."));
        // The reference mentions a random subset of everything disclosed so far.
        let known: Vec<String> = disclosed.keys().cloned().collect();
        let mentioned: Vec<&String> = known.iter().filter(|_| rng.random_bool(0.5)).collect();
        let text = format!(
            "Try this dish, it is {}: https://example.org/{seed}/{index}",
            mentioned
                .iter()
                .map(|s| s.to_uppercase())
                .collect::<Vec<_>>()
                .join(" and ")
        );
        turns.push(Utterance::assistant(
            t + 1,
            text,
            DialogueAct::Recommend,
            None,
        ));
        turns.push(Utterance::user(t + 2, "Sounds great, thanks."));
        turns.push(Utterance::assistant(
            t + 3,
            "Enjoy, goodbye!",
            DialogueAct::Goodbye,
            None,
        ));
        sessions.push(session_with(index, turns, prefs));
    }
    PuFixture {
        record: DatasetRecord {
            worker_id: format!("fixture-{seed:02}"),
            domain: "recipe".into(),
            split: Split::Test,
            mode: CollectionMode::SelfDialogue,
            sessions,
            guidance: Vec::new(),
        },
        disclosed,
    }
}

pub fn pu_fixtures() -> Vec<PuFixture> {
    (0..20).map(|i| pu_fixture(1000 + i)).collect()
}

/// Scripted recommender: mentions every attribute of the vocabulary whose
/// position parity matches the prompt length parity. Pure in the prompt.
pub fn scripted_recommender(prompt: &str) -> String {
    let parity = prompt.len() % 2;
    let picks: Vec<&str> = ATTRIBUTES
        .iter()
        .enumerate()
        .filter(|(i, _)| i % 2 == parity)
        .map(|(_, a)| *a)
        .collect();
    format!("I suggest something {} for you.", picks.join(", "))
}

/// Worker with two long prior sessions and a short current one, for the
/// prompt-size comparison.
pub fn compression_fixture(seed: u64, turns_per_session: usize) -> DatasetRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fillers = [
        "I usually cook on weekday evenings after work so it cannot take too long",
        "My partner is not a big fan of anything too heavy or greasy at night",
        "We tried a new place last week and the sauce was honestly amazing",
        "Could you suggest something that uses what I already have in the fridge",
        "I do not mind a bit of chopping as long as the cleanup stays simple",
        "That sounds close but I would rather avoid anything deep fried please",
    ];
    let mut sessions = Vec::new();
    for index in 1..=3u32 {
        let n = if index < 3 { turns_per_session } else { 6 };
        let mut turns = Vec::new();
        let mut prefs = Vec::new();
        for t in 0..n {
            if t % 2 == 0 {
                let act = if t == 0 {
                    DialogueAct::Greeting
                } else {
                    DialogueAct::ElicitShould
                };
                turns.push(Utterance::assistant(
                    t as u32,
                    "Tell me a little more about what you would enjoy eating this time around",
                    act,
                    None,
                ));
            } else {
                let attr = ATTRIBUTES[rng.random_range(0..ATTRIBUTES.len())];
                turns.push(Utterance::user(
                    t as u32,
                    format!("{} and I like {attr}", fillers.choose(&mut rng).unwrap()),
                ));
                if prefs.len() < 4 {
                    prefs.push(
                        PreferencePair::new(CATEGORIES[prefs.len()], attr, Polarity::Like, index)
                            .validated(),
                    );
                }
            }
        }
        if index < 3 {
            let t = turns.len() as u32;
            turns.push(Utterance::assistant(
                t,
                "How about this one: https://example.org/x",
                DialogueAct::Recommend,
                None,
            ));
            turns.push(Utterance::user(t + 1, "Perfect."));
            turns.push(Utterance::assistant(
                t + 2,
                "Goodbye!",
                DialogueAct::Goodbye,
                None,
            ));
        }
        sessions.push(session_with(index, turns, prefs));
    }
    DatasetRecord {
        worker_id: format!("compress-{seed}"),
        domain: "recipe".into(),
        split: Split::Test,
        mode: CollectionMode::SelfDialogue,
        sessions,
        guidance: Vec::new(),
    }
}

pub fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// Welch reference cases: (a, b, t, two-sided p) from an independent
/// statistics package, frozen.
pub type WelchCase = (&'static [f64], &'static [f64], f64, f64);

pub const WELCH_CASES: [WelchCase; 10] = [
    (
        &[
            0.5496, -0.5147, -0.1287, 0.2876, 0.467, 0.0018, 0.398, -0.4569, -0.6808, -0.8087,
            -0.109, 0.2221, -0.0851, -0.1191, -0.4323, 0.0118, -0.3447, -0.3792, 0.3764, 0.3848,
            0.011, -0.0102, 0.3623, 0.1218, 0.2598, 0.1457, 0.1786,
        ],
        &[
            2.1529, 0.1961, -0.6498, 0.0126, 1.4281, 1.1532, 1.7869, -0.393, -0.0643, 2.0779,
            0.2353, -0.394, 1.9511, -0.7234, -0.1078, 0.6328, 0.2528, 0.9335, 1.4676, 0.3213,
            1.8229, 0.4161, 1.6652, 1.2574, -0.8564, -0.1748, 0.3256, -1.0476, -0.3545, 0.9757,
            1.1363,
        ],
        -3.127777002521705e+00,
        3.287071921216870e-03,
    ),
    (
        &[
            -0.3655, -0.453, 0.2198, -0.1193, -0.6738, -1.8051, 0.0396, -0.7742, 0.4683, 0.3165,
            0.0028, -0.259, 1.0227, -0.5149, -1.0318, -0.3353, -0.8182, -0.375, -0.5229, 0.9404,
            -0.1549,
        ],
        &[
            -1.8577, -1.8478, -1.0802, -1.9546, -0.4647, -0.9163, -0.4499, -1.2434, -1.2553,
            -0.4077, 1.3749, -2.4126, -2.8613, -1.5238, -1.708,
        ],
        3.337568118834497e+00,
        2.993281702051744e-03,
    ),
    (
        &[
            -0.2075, 0.1391, 0.1658, -0.0529, -0.2184, 0.5522, -0.1734, 1.305, -1.1216, -1.3496,
            0.5145, 0.3745, -0.5381, 0.8997, -1.3897, 0.4091, 0.4533, 0.9888, -0.3505, 0.8894,
            -0.0102, -0.9036, -1.3861, 0.3963, -0.1362, -1.1766, -0.155, 0.8638, 1.4983, 0.0321,
            -0.0036, -0.6934, 0.2729,
        ],
        &[0.1772, 0.1262, -0.1099, 0.081, 0.0255],
        -4.453052938524176e-01,
        6.587675804581152e-01,
    ),
    (
        &[
            0.2106, 0.3023, 0.2569, -0.0934, -0.0994, 0.2349, 0.0832, -0.1836, 0.2263, 0.1777,
            -0.1179, 0.491, -0.0156, 0.2121, 0.2081, 0.1031, 0.1417, 0.4999, 0.1855, 0.0635,
            0.1894, 0.0985, 0.2864, 0.1955,
        ],
        &[
            0.7215, 0.662, 0.4298, 0.3213, 0.7077, 0.6632, 0.8318, 0.2113, 0.6231, 0.2674, 0.5889,
            0.0718, 0.5418, 0.5363,
        ],
        -5.249221523639759e+00,
        2.853077859068043e-05,
    ),
    (
        &[
            0.3222, 0.4006, 0.3661, 0.1543, 0.5991, 0.5306, 0.5012, -0.0367, 0.4609, 0.0181,
            0.4709, 0.1318, 0.4349, 0.3819, 0.8167, -0.1705, 0.09, 0.2533, 0.4682, 0.466, 0.3314,
            0.2824, 0.3908, 0.2702, 0.2391, 0.5381, 0.601, 0.2347, 0.451, 0.1523, 0.4868, 0.2922,
            0.5147, 0.3757, 0.5811, 0.2384, 0.172,
        ],
        &[
            1.1189, -1.5962, -1.7182, 0.0705, -3.097, -3.2469, -5.1148, 0.6888, -3.9894, -0.2974,
            -2.1627, 0.3924, -2.036, 0.6197, 0.578, -2.6979, -0.3351, 3.7124, -0.1853, -0.9305,
            0.8522, -1.2738, 0.1564, -1.0525, -3.6098, -1.0977, 0.6517, 0.5057, 0.2971,
        ],
        3.432745665251618e+00,
        1.847239238197891e-03,
    ),
    (
        &[
            -0.6868, -0.6828, -1.1971, 0.0467, -1.2953, 0.6882, 0.7036, -0.9871, 0.2676, 1.6071,
            -0.4342, -0.4082, 0.096, -0.4007, 0.0663, -0.5642, 0.4324, 0.1502, 0.3306, -1.0746,
            -0.4869, -0.6634, -1.1776, 0.1174, -0.4768, -0.2894, -0.9515, -0.1386,
        ],
        &[
            -1.2218, -1.557, -0.5291, -0.0094, -0.3297, -0.1713, -3.0219, -2.6705, -0.0636,
            -0.9436, 0.5506, -0.4386, -0.318, -2.3603, -2.0266, -2.096, -1.3614, -0.8694, 0.3145,
            -0.576, -1.3221, -0.2038, -1.5967, -1.648, -0.068, -0.0145, 0.591, -0.8708, -0.1708,
            -1.3804, -0.4946, -1.1616, -1.597, 1.0548, -1.2665, -1.479, 0.328,
        ],
        2.841629177750051e+00,
        6.045485459398128e-03,
    ),
    (
        &[
            0.6607, -0.1033, 0.5157, -1.9718, 2.3201, 0.1249, -1.5267, 0.5663, 0.8046, 0.2969,
            1.153, 0.8099, -0.5271, 1.8218, 2.5658, -1.357, 1.2552, -0.9958,
        ],
        &[
            -0.7051, 0.7589, 0.116, -3.5314, -0.2233, 1.5602, 1.1055, 1.3775, -3.2595, 0.409,
            -0.451, -1.7427, 3.1866, -3.5158,
        ],
        1.136999524557309e+00,
        2.685499491825761e-01,
    ),
    (
        &[
            -1.4537, 0.01, -4.1062, -0.5748, -0.4679, -2.6233, -2.4232, -3.1089, -0.3908,
        ],
        &[
            -0.2156, -0.3143, 0.3551, -0.0821, 0.6426, 0.0081, -0.1383, 0.0087, 0.0047, 0.7141,
            0.1957, 0.7289, 0.431, 0.4235, 0.3284, -0.0073, -0.7531, 0.1786, -0.0097, 0.0039,
            0.8501, 0.7775, 0.0, -0.155, 1.0997, -0.183, -0.3237, 0.3881, 1.2018, 0.4059, 0.4632,
            0.5598, -0.4224, 0.0601, -1.1546, 0.5359, 0.0968, 1.1896, 1.1257,
        ],
        -3.922785780043308e+00,
        3.921498389176678e-03,
    ),
    (
        &[
            1.2168, 0.7287, -0.2087, 0.9242, 0.9496, 2.0882, 0.5509, 1.1053, 0.4163, 0.3346,
            0.4133, 0.3238, 1.5029, 1.4367, 1.5557, -0.3101, 1.1172, 0.7101, 0.2696, 0.3826,
            0.2298, 0.6155, 1.3614, 0.1646, 0.5975, 0.5688, 0.0226, 1.2691, 1.7839, -0.0757,
            0.3799, 0.388, 0.9449, 0.3826, 0.4081, 0.7575, 1.2674, 0.3509,
        ],
        &[
            -0.2968, -1.2373, -0.3592, -0.8496, -0.6838, -0.8783, -1.7342, -0.9046, -1.1224,
            -1.5321, -0.9391, -1.1003, -1.314, -0.9806, -0.7417, -0.9957, -0.7037, -0.7788,
            -1.3881, -0.5476, -1.0878, -0.6622, -0.7239, -0.8869, -0.3962, -0.5707, -1.6248,
            -0.9958, -1.239, -0.4855, -1.7393, -1.2247, -0.5052, -0.7621, -1.4614, -1.3478,
            -1.1255, -0.6606,
        ],
        1.520597336062568e+01,
        3.839997081398220e-23,
    ),
    (
        &[
            2.7952, 2.3208, 0.5943, 0.3325, 1.3872, -3.4103, -0.3054, -1.137, -1.0224, 3.4515,
            -1.2645, 1.6946, 1.6094, 0.1251, -1.1695, 1.4378, -0.7687, -2.5533, 2.817, -1.1897,
        ],
        &[
            0.7221, 2.4373, 0.9721, -2.4082, -1.2265, -1.7702, 0.6906, -0.4833, 0.4136, 1.6613,
            0.0222, 1.8678, 1.425, -2.3524, 0.0628, -0.1188, -2.397, -0.3417, -2.7103, 0.9781,
        ],
        7.600969258721663e-01,
        4.520395842166651e-01,
    ),
];
