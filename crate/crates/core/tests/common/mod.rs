//! Independent TF-IDF / cosine reference used by the oracle and acceptance tests.

use std::collections::HashMap;

use chrono::NaiveDate;
use rand::seq::IndexedRandom;
use rand::Rng;
use safechat::corpus::{Corpus, FaqEntry};
use safechat::nlu::IntentModel;
use safechat::paraphrase::ParaphraseSet;

const WORDS: &[&str] = &[
    "register", "vote", "ballot", "absentee", "polling", "place", "deadline", "county", "id", "photo", "mail",
    "early", "voting", "how", "do", "i", "where", "is", "my", "when", "can", "the", "a", "to", "for", "change",
    "address", "name", "party", "primary", "runoff", "provisional", "sample", "military", "overseas",
];

pub fn oracle_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Scores per entry index: max over that entry's training utterances of
/// cos(tf*idf(query), tf*idf(utt)), idf = ln((1+N)/(1+df)) + 1.
pub fn oracle_scores(training: &[(usize, Vec<String>)], query: &str) -> HashMap<usize, f64> {
    let n = training.len() as f64;
    let mut df: HashMap<&str, f64> = HashMap::new();
    for (_, toks) in training {
        let mut seen: Vec<&str> = toks.iter().map(String::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_default() += 1.0;
        }
    }
    let vec_of = |toks: &[String]| -> HashMap<String, f64> {
        let mut v: HashMap<String, f64> = HashMap::new();
        for t in toks {
            if let Some(d) = df.get(t.as_str()) {
                *v.entry(t.clone()).or_default() += ((1.0 + n) / (1.0 + d)).ln() + 1.0;
            }
        }
        v
    };
    let norm = |v: &HashMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let q = vec_of(&oracle_tokens(query));
    let qn = norm(&q);
    let mut out: HashMap<usize, f64> = HashMap::new();
    if qn == 0.0 {
        return out;
    }
    for (entry, toks) in training {
        let d = vec_of(toks);
        let dn = norm(&d);
        if dn == 0.0 {
            continue;
        }
        let dot: f64 = q.iter().map(|(t, w)| w * d.get(t).copied().unwrap_or(0.0)).sum();
        let cos = dot / (qn * dn);
        if cos > 0.0 {
            let slot = out.entry(*entry).or_default();
            *slot = slot.max(cos.min(1.0));
        }
    }
    out
}

pub fn random_question(rng: &mut impl Rng) -> String {
    let len = rng.random_range(3..=9);
    let mut words: Vec<&str> = (0..len).map(|_| *WORDS.choose(rng).unwrap()).collect();
    // keep at least one content word so paraphrasing has something to retain
    words.push(["ballot", "register", "deadline", "polling"][rng.random_range(0..4)]);
    let mut q = words.join(" ");
    q.push('?');
    q
}

pub fn random_corpus(rng: &mut impl Rng) -> Corpus {
    let n = rng.random_range(1..=5);
    let mut entries = Vec::new();
    let mut seen = Vec::new();
    while entries.len() < n {
        let q = random_question(rng);
        if seen.contains(&q) {
            continue;
        }
        seen.push(q.clone());
        let i = entries.len();
        entries.push(FaqEntry {
            id: format!("e{i}"),
            question: q,
            answer: format!("Answer {i}."),
            topic: "t".into(),
            source_url: format!("https://example.gov/{i}"),
            last_updated: NaiveDate::from_ymd_opt(2022, 1, 1).unwrap(),
        });
    }
    Corpus::from_entries(entries, "T").unwrap()
}

/// Largest deviation between `classify` and the oracle over `queries`, or
/// an error describing a ranking mismatch.
pub fn max_deviation(corpus: &Corpus, sets: &[ParaphraseSet], model: &IntentModel, queries: &[String]) -> Result<f64, String> {
    let training: Vec<(usize, Vec<String>)> = corpus
        .entries()
        .iter()
        .enumerate()
        .flat_map(|(i, e)| {
            std::iter::once(e.question.clone())
                .chain(sets[i].variants().iter().cloned())
                .map(move |u| (i, oracle_tokens(&u)))
        })
        .collect();
    let index: HashMap<&str, usize> = corpus.entries().iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
    let mut worst = 0.0f64;
    for q in queries {
        let expected = oracle_scores(&training, q);
        let got = safechat::nlu::classify(model, q);
        if got.ranked.len() != expected.len() {
            return Err(format!("query {q:?}: {} intents ranked, oracle has {}", got.ranked.len(), expected.len()));
        }
        for r in &got.ranked {
            let idx = model.entry_for(&r.intent).and_then(|e| index.get(e)).ok_or("unknown intent")?;
            let want = expected.get(idx).ok_or_else(|| format!("query {q:?}: oracle has no score for {}", r.intent))?;
            worst = worst.max((r.confidence - want).abs());
        }
    }
    Ok(worst)
}
