//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safechat::config::ServiceConfig;
use safechat::corpus::{compute_stats, load_corpus, Corpus};
use safechat::evalharness::simulate::run_simulation;
use safechat::evalharness::{mann_whitney, PopulationSpec, ScoreDistribution, Variant, Verdict};
use safechat::nlu::{classify, train, IntentModel};
use safechat::paraphrase::{paraphrase_corpus, ParaphraseSet, RuleParaphraser};
use safechat::safety::{guard, replay_bytes, verify_bytes, verify_chain, Decision, SafetyPolicy};
use safechat::service::{router, AppState, Engine};
use serde_json::{json, Value};
use tower::ServiceExt;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/fixtures");

const STATS_LIMIT: Duration = Duration::from_secs(1);
const FUZZ_LIMIT: Duration = Duration::from_secs(30);
const RCT_LIMIT: Duration = Duration::from_secs(60);
const FUZZ_UTTERANCES: usize = 10_000;
const ORACLE_TOLERANCE: f64 = 1e-9;
const SELF_RECALL_MIN: f64 = 0.999;
const DNA_THRESHOLDS: [f64; 3] = [0.1, 0.5, 0.9];
const AUDIT_TURNS: usize = 1_000;
const AUDIT_MUTATIONS: usize = 300;
const CALIBRATION_SEEDS: u64 = 100;
const CALIBRATION_USERS: usize = 100;
const CALIBRATION_TARGET: f64 = 0.05;
const CALIBRATION_TOLERANCE: f64 = 0.03;
const SEPARATED_USERS: usize = 200;

type Outcome = Result<String, String>;
type Check<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

struct Fixture {
    corpus: Corpus,
    sets: Vec<ParaphraseSet>,
    model: IntentModel,
}

fn fixture(name: &str, label: &str) -> Fixture {
    let corpus = load_corpus(format!("{FIXTURES}/{name}"), label).unwrap();
    let sets = paraphrase_corpus(&RuleParaphraser::builtin(), &corpus, 3).unwrap();
    let model = train(&corpus, &sets).unwrap();
    Fixture { corpus, sets, model }
}

fn round(x: f64, places: i32) -> f64 {
    let f = 10f64.powi(places);
    (x * f).round() / f
}

fn corpus_statistics() -> Outcome {
    let start = Instant::now();
    let sc = compute_stats(&load_corpus(format!("{FIXTURES}/sc_faq.csv"), "SC").unwrap()).unwrap();
    let ms = compute_stats(&load_corpus(format!("{FIXTURES}/ms_faq.csv"), "MS").unwrap()).unwrap();
    let elapsed = start.elapsed();
    let got_sc = (sc.n_pairs, sc.n_topics, round(sc.avg_question_len, 1), round(sc.avg_answer_len, 1));
    // 7.75 is reported to two places
    let got_ms = (ms.n_pairs, ms.n_topics, round(ms.avg_question_len, 2), round(ms.avg_answer_len, 1));
    let detail = format!("SC {got_sc:?}, MS {got_ms:?}, {elapsed:?}");
    if got_sc == (30, 10, 10.9, 80.9) && got_ms == (12, 5, 7.75, 119.5) && elapsed < STATS_LIMIT {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn paraphrase_expansion(sc: &Fixture) -> Outcome {
    let n = sc.model.utterances().len();
    let detail = format!("{n} indexed utterances for {} entries at k=3", sc.corpus.len());
    if n == 120 && sc.sets.iter().all(|s| s.len() == 3) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gibberish(rng: &mut impl Rng) -> String {
    (0..rng.random_range(4..=10)).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

fn groundedness_fuzz(sc: &Fixture, policy: &SafetyPolicy) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let vocab: Vec<&String> = sc.model.vocabulary().keys().collect();
    let questions: Vec<&str> = sc.corpus.entries().iter().map(|e| e.question.as_str()).collect();
    let probes: Vec<String> = policy.dna_patterns().iter().map(|p| p.as_str().replace('*', "ballot")).collect();
    let (mut answers, mut ungrounded, mut below) = (0usize, 0usize, 0usize);
    for i in 0..FUZZ_UTTERANCES {
        let mut parts: Vec<String> = Vec::new();
        for _ in 0..rng.random_range(1..=8) {
            parts.push(match rng.random_range(0..10) {
                0..=4 => vocab.choose(&mut rng).unwrap().to_string(),
                5..=6 => gibberish(&mut rng),
                7 => probes.choose(&mut rng).unwrap().clone(),
                _ => questions.choose(&mut rng).unwrap().to_string(),
            });
        }
        let text = parts.join(" ");
        let d = guard(&classify(&sc.model, &text), &text, policy, &sc.model, &sc.corpus, i as u64);
        if let Decision::Answer { answer, confidence, .. } = &d {
            answers += 1;
            if !sc.corpus.entries().iter().any(|e| e.answer.as_bytes() == answer.as_bytes()) {
                ungrounded += 1;
            }
            if *confidence < policy.confidence_threshold() {
                below += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "{FUZZ_UTTERANCES} utterances, {answers} answers, {ungrounded} ungrounded, {below} below threshold, {elapsed:?}"
    );
    if ungrounded == 0 && below == 0 && elapsed < FUZZ_LIMIT {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn dna_dominance(fixtures: &[&Fixture], policy: &SafetyPolicy) -> Outcome {
    let mut probes = 0usize;
    let mut failures = Vec::new();
    for f in fixtures {
        for t in DNA_THRESHOLDS {
            let p = policy.with_threshold(t).unwrap();
            for pattern in policy.dna_patterns() {
                let core = pattern.as_str().replace('*', "ballot");
                // bare, wrapped in a real question, and shouted
                let q = &f.corpus.entries()[probes % f.corpus.len()].question;
                for text in [core.clone(), format!("{q} {core}?"), format!("{}!!", core.to_uppercase())] {
                    probes += 1;
                    let d = guard(&classify(&f.model, &text), &text, &p, &f.model, &f.corpus, 0);
                    if !matches!(d, Decision::Deflect { .. }) {
                        failures.push(format!("{text:?}@{t}"));
                    }
                }
            }
        }
    }
    if failures.is_empty() {
        Ok(format!("{probes} probes deflected at thresholds {DNA_THRESHOLDS:?}"))
    } else {
        Err(format!("{} of {probes} probes not deflected, e.g. {}", failures.len(), failures[0]))
    }
}

fn classifier_self_recall(fixtures: &[&Fixture]) -> Outcome {
    let (mut total, mut misses, mut min_conf) = (0usize, Vec::new(), 1.0f64);
    for f in fixtures {
        for (i, e) in f.corpus.entries().iter().enumerate() {
            let intent = f.model.intent_for_entry(&e.id).unwrap();
            for u in std::iter::once(&e.question).chain(f.sets[i].variants()) {
                total += 1;
                let c = classify(&f.model, u);
                let top = c.top().unwrap();
                min_conf = min_conf.min(top.confidence);
                if top.intent != intent || top.confidence < SELF_RECALL_MIN {
                    misses.push(u.clone());
                }
            }
        }
    }

    let provider = RuleParaphraser::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0ac1e);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let corpus = common::random_corpus(&mut rng);
        let sets = paraphrase_corpus(&provider, &corpus, 3).unwrap();
        let model = train(&corpus, &sets).unwrap();
        let mut queries: Vec<String> = (0..10).map(|_| common::random_question(&mut rng)).collect();
        queries.extend(corpus.entries().iter().map(|e| e.question.clone()));
        match common::max_deviation(&corpus, &sets, &model, &queries) {
            Ok(d) => worst = worst.max(d),
            Err(e) => return Err(format!("oracle mismatch: {e}")),
        }
    }
    let detail = format!(
        "top-1 {}/{total}, min confidence {min_conf:.6}, oracle max deviation {worst:.2e} over 100 corpora",
        total - misses.len()
    );
    if misses.is_empty() && worst < ORACLE_TOLERANCE {
        Ok(detail)
    } else {
        Err(format!("{detail}; first miss {:?}", misses.first()))
    }
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> Value {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert!(resp.status().is_success(), "{method} {uri}: {}", resp.status());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    }
}

fn audit_integrity(sc: &Fixture, policy: &SafetyPolicy) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(format!("{FIXTURES}/sc_faq.csv"), dir.path().join("faq.csv")).unwrap();
    Engine::train(sc.corpus.clone(), 3).unwrap().model.save(dir.path().join("model.txt")).unwrap();
    let config = ServiceConfig::from_toml(
        "state_label = \"SC\"\ncorpus_path = \"faq.csv\"\nmodel_path = \"model.txt\"\naudit_log_path = \"audit.jsonl\"\n",
        dir.path(),
    )
    .unwrap();
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(0xa0d17);
    let mut utterances: Vec<String> = sc.corpus.entries().iter().map(|e| e.question.clone()).collect();
    utterances.extend(sc.sets.iter().flat_map(|s| s.variants().iter().cloned()));
    utterances.extend(policy.dna_patterns().iter().map(|p| p.as_str().replace('*', "ballot")));
    let served: Vec<(String, Vec<String>)> = rt.block_on(async {
        let app = router(Arc::new(AppState::start(config.clone()).unwrap()));
        let mut served: Vec<(String, Vec<String>)> = Vec::new();
        let mut turns = 0;
        while turns < AUDIT_TURNS {
            let s = call(&app, "POST", "/api/session", None).await;
            let sid = s["session_id"].as_str().unwrap().to_string();
            let mut texts = Vec::new();
            let n = rng.random_range(1..=9).min(AUDIT_TURNS - turns);
            for k in 0..n {
                let u = if k + 1 == n {
                    "bye".to_string()
                } else if rng.random_bool(0.1) {
                    gibberish(&mut rng)
                } else {
                    utterances.choose(&mut rng).unwrap().clone()
                };
                let r = call(&app, "POST", "/api/chat", Some(json!({"session_id": sid, "utterance": u}))).await;
                texts.push(r["text"].as_str().unwrap().to_string());
                turns += 1;
            }
            served.push((sid, texts));
        }
        served
    });

    let log_path = dir.path().join("audit.jsonl");
    let report = verify_chain(&log_path).unwrap();
    if !report.is_valid() || report.records != AUDIT_TURNS as u64 {
        return Err(format!("fresh chain: {report:?}"));
    }

    let bytes = std::fs::read(&log_path).unwrap();
    let mut missed = Vec::new();
    for _ in 0..AUDIT_MUTATIONS {
        let pos = rng.random_range(0..bytes.len());
        let mut mutated = bytes.clone();
        mutated[pos] ^= rng.random_range(1..=255u8);
        let expected = bytes[..pos].iter().filter(|b| **b == b'\n').count() as u64 + 1;
        let r = verify_bytes(&mutated);
        if r.first_broken != Some(expected) {
            missed.push((pos, expected, r.first_broken));
        }
    }

    // restart: fresh state over the same files
    let mismatched = rt.block_on(async {
        let app = router(Arc::new(AppState::start(config).unwrap()));
        let mut mismatched = 0usize;
        for (sid, texts) in &served {
            let t = call(&app, "GET", &format!("/api/transcript/{sid}"), None).await;
            let replayed: Vec<&str> =
                t["turns"].as_array().unwrap().iter().map(|x| x["response"]["text"].as_str().unwrap()).collect();
            if replayed.len() != texts.len() || replayed.iter().zip(texts).any(|(a, b)| a.as_bytes() != b.as_bytes()) {
                mismatched += 1;
            }
        }
        mismatched
    });

    let detail = format!(
        "{} records valid; {}/{AUDIT_MUTATIONS} mutations located; {}/{} sessions replayed identically after restart",
        report.records,
        AUDIT_MUTATIONS - missed.len(),
        served.len() - mismatched,
        served.len()
    );
    if missed.is_empty() && mismatched == 0 {
        Ok(detail)
    } else {
        Err(format!("{detail}; first missed mutation {:?}", missed.first()))
    }
}

fn rct_statistics(sc: &Fixture, policy: &SafetyPolicy) -> Outcome {
    let start = Instant::now();
    let worked = mann_whitney(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    let worked_ok = worked.u == 0.0 && worked.exact && (worked.p_value - 0.1).abs() < 1e-12;
    let same = mann_whitney(&[2.0, 3.0, 4.0, 4.0], &[2.0, 3.0, 4.0, 4.0]).unwrap();
    let identical_ok = (same.p_value - 1.0).abs() < 1e-12;

    let shared = ScoreDistribution([0.1, 0.15, 0.25, 0.3, 0.2]);
    let mut calib = PopulationSpec::new(CALIBRATION_USERS, shared.clone(), shared);
    calib.paraphrase_probability = 0.3;
    let (mut tested, mut flagged) = (0usize, 0usize);
    for seed in 0..CALIBRATION_SEEDS {
        let r = run_simulation(&sc.corpus, &sc.model, policy, &calib, seed).unwrap().report;
        tested += r.questions_tested;
        flagged += r.questions_significant;
    }
    let rate = flagged as f64 / tested as f64;
    let calib_ok = (rate - CALIBRATION_TARGET).abs() <= CALIBRATION_TOLERANCE;

    let sep =
        PopulationSpec::new(SEPARATED_USERS, ScoreDistribution::uniform(&[4, 5]), ScoreDistribution::uniform(&[1, 2]));
    let a = run_simulation(&sc.corpus, &sc.model, policy, &sep, 42).unwrap();
    let b = run_simulation(&sc.corpus, &sc.model, policy, &sep, 42).unwrap();
    let separated_ok = a.report.questions_tested == sc.corpus.len()
        && a.report.questions_significant == sc.corpus.len()
        && a.report.verdict == Verdict::Effective;
    let deterministic = a.report.to_json() == b.report.to_json() && a.audit_log.len() == b.audit_log.len();
    let elapsed = start.elapsed();

    let detail = format!(
        "worked example U={} p={}; identical p={}; calibration {flagged}/{tested} = {rate:.4}; separated {}/{} flagged; deterministic {deterministic}; {elapsed:?}",
        worked.u, worked.p_value, same.p_value, a.report.questions_significant, a.report.questions_tested
    );
    if worked_ok && identical_ok && calib_ok && separated_ok && deterministic && elapsed < RCT_LIMIT {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn control_arm_contract(sc: &Fixture, policy: &SafetyPolicy) -> Outcome {
    let mut spec =
        PopulationSpec::new(120, ScoreDistribution::uniform(&[3, 4, 5]), ScoreDistribution::uniform(&[3, 4, 5]));
    spec.paraphrase_probability = 0.5;
    spec.gibberish_probability = 0.1;
    spec.dna_probability = 0.1;
    let sim = run_simulation(&sc.corpus, &sc.model, policy, &spec, 7).unwrap();
    let urls: HashMap<&str, &str> = sc.corpus.entries().iter().map(|e| (e.id.as_str(), e.source_url.as_str())).collect();
    let (mut sessions, mut links, mut leaks, mut missing_url) = (0usize, 0usize, 0usize, 0usize);
    for s in sim.sessions.iter().filter(|s| s.variant == Variant::Control) {
        sessions += 1;
        for turn in replay_bytes(&sim.audit_log, &s.session_id).unwrap() {
            let text = &turn.response.text;
            if sc.corpus.entries().iter().any(|e| text.contains(e.answer.as_str())) {
                leaks += 1;
            }
            if let Some(entry) = &turn.response.entry_id {
                links += 1;
                if !text.contains(urls[entry.as_str()]) {
                    missing_url += 1;
                }
            }
        }
    }
    let detail = format!("{sessions} control sessions, {links} link turns, {missing_url} without URL, {leaks} answer bodies");
    if sessions > 0 && links > 0 && leaks == 0 && missing_url == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let policy = SafetyPolicy::builtin();
    let sc = fixture("sc_faq.csv", "SC");
    let ms = fixture("ms_faq.csv", "MS");

    let checks: Vec<Check> = vec![
        ("corpus-statistics", Box::new(corpus_statistics)),
        ("paraphrase-expansion", Box::new(|| paraphrase_expansion(&sc))),
        ("groundedness-fuzz", Box::new(|| groundedness_fuzz(&sc, &policy))),
        ("dna-dominance", Box::new(|| dna_dominance(&[&sc, &ms], &policy))),
        ("classifier-self-recall", Box::new(|| classifier_self_recall(&[&sc, &ms]))),
        ("audit-integrity", Box::new(|| audit_integrity(&sc, &policy))),
        ("rct-statistics", Box::new(|| rct_statistics(&sc, &policy))),
        ("control-arm-contract", Box::new(|| control_arm_contract(&sc, &policy))),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
