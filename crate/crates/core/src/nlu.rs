//! Understanding pipeline: tokenizer, TF-IDF featurizer, max-cosine intent
//! classifier and response selector.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{generate_intents, Corpus};
use crate::paraphrase::ParaphraseSet;

pub const MODEL_FORMAT: &str = "safechat-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NluError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("no paraphrase set for entry `{0}`")]
    MissingParaphrases(String),
    #[error("paraphrase set references unknown entry `{0}`")]
    UnknownEntry(String),
    #[error("more than one paraphrase set for entry `{0}`")]
    DuplicateParaphrases(String),
    #[error("unknown intent `{0}`")]
    UnknownIntent(String),
    #[error("model file line {line}: {reason}")]
    ModelFormat { line: usize, reason: String },
    #[error("model i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Lowercase tokens with no whitespace and no empty entries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }
}

/// Lowercase, split on whitespace, strip leading and trailing punctuation.
/// Stop-words are kept.
pub fn tokenize(text: &str) -> TokenSeq {
    TokenSeq(
        text.split_whitespace()
            .map(|w| w.to_lowercase().trim_matches(|c: char| !c.is_alphanumeric()).to_string())
            .filter(|t| !t.is_empty())
            .collect(),
    )
}

/// Sparse TF-IDF vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVector {
    weights: BTreeMap<String, f64>,
    norm: f64,
}

impl FeatureVector {
    pub fn from_weights(weights: BTreeMap<String, f64>) -> Self {
        let norm = weights.values().map(|w| w * w).sum::<f64>().sqrt();
        Self { weights, norm }
    }

    pub fn weights(&self) -> &BTreeMap<String, f64> {
        &self.weights
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedUtterance {
    pub intent: String,
    pub vector: FeatureVector,
}

/// Trained intent classifier. Immutable once built.
#[derive(Debug, Clone)]
pub struct IntentModel {
    vocabulary: BTreeMap<String, u32>,
    n_utterances: usize,
    utterances: Vec<IndexedUtterance>,
    intents: BTreeMap<String, String>,
    trained_at: DateTime<Utc>,
    corpus_hash: String,
    provider: String,
    paraphrase_k: usize,
    // derived on construction
    idf: HashMap<String, f64>,
    postings: HashMap<String, Vec<(usize, f64)>>,
}

pub fn idf(n_utterances: usize, df: u32) -> f64 {
    ((1.0 + n_utterances as f64) / (1.0 + df as f64)).ln() + 1.0
}

impl IntentModel {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        vocabulary: BTreeMap<String, u32>,
        n_utterances: usize,
        utterances: Vec<IndexedUtterance>,
        intents: BTreeMap<String, String>,
        trained_at: DateTime<Utc>,
        corpus_hash: String,
        provider: String,
        paraphrase_k: usize,
    ) -> Self {
        let idf_map = vocabulary.iter().map(|(t, &df)| (t.clone(), idf(n_utterances, df))).collect();
        let mut postings: HashMap<String, Vec<(usize, f64)>> = HashMap::new();
        for (i, u) in utterances.iter().enumerate() {
            for (t, &w) in &u.vector.weights {
                postings.entry(t.clone()).or_default().push((i, w));
            }
        }
        Self {
            vocabulary,
            n_utterances,
            utterances,
            intents,
            trained_at,
            corpus_hash,
            provider,
            paraphrase_k,
            idf: idf_map,
            postings,
        }
    }

    pub fn vocabulary(&self) -> &BTreeMap<String, u32> {
        &self.vocabulary
    }

    pub fn utterances(&self) -> &[IndexedUtterance] {
        &self.utterances
    }

    /// Intent name to owning entry id.
    pub fn intents(&self) -> &BTreeMap<String, String> {
        &self.intents
    }

    pub fn entry_for(&self, intent: &str) -> Option<&str> {
        self.intents.get(intent).map(String::as_str)
    }

    pub fn intent_for_entry(&self, entry_id: &str) -> Option<&str> {
        self.intents.iter().find(|(_, e)| *e == entry_id).map(|(i, _)| i.as_str())
    }

    pub fn trained_at(&self) -> DateTime<Utc> {
        self.trained_at
    }

    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    pub fn provider(&self) -> &str {
        &self.provider
    }

    pub fn paraphrase_k(&self) -> usize {
        self.paraphrase_k
    }

    pub fn featurize(&self, text: &str) -> FeatureVector {
        let mut tf: BTreeMap<String, f64> = BTreeMap::new();
        for t in tokenize(text).into_inner() {
            if self.idf.contains_key(&t) {
                *tf.entry(t).or_insert(0.0) += 1.0;
            }
        }
        for (t, w) in tf.iter_mut() {
            *w *= self.idf[t];
        }
        FeatureVector::from_weights(tf)
    }
}

/// Builds the model from the corpus and one paraphrase set per entry.
pub fn train(corpus: &Corpus, paraphrases: &[ParaphraseSet]) -> Result<IntentModel, NluError> {
    train_at(corpus, paraphrases, Utc::now())
}

pub fn train_at(
    corpus: &Corpus,
    paraphrases: &[ParaphraseSet],
    trained_at: DateTime<Utc>,
) -> Result<IntentModel, NluError> {
    if corpus.is_empty() {
        return Err(NluError::EmptyCorpus);
    }
    let mut by_entry: HashMap<&str, &ParaphraseSet> = HashMap::new();
    for set in paraphrases {
        if corpus.get(set.entry_id()).is_none() {
            return Err(NluError::UnknownEntry(set.entry_id().to_string()));
        }
        if by_entry.insert(set.entry_id(), set).is_some() {
            return Err(NluError::DuplicateParaphrases(set.entry_id().to_string()));
        }
    }

    let tags = generate_intents(corpus);
    let mut training: Vec<(String, Vec<String>)> = Vec::new();
    let mut intents = BTreeMap::new();
    let mut k = usize::MAX;
    let mut provider = String::new();
    for (entry, tag) in corpus.entries().iter().zip(&tags) {
        let set = by_entry.get(entry.id.as_str()).ok_or_else(|| NluError::MissingParaphrases(entry.id.clone()))?;
        k = k.min(set.len());
        if provider.is_empty() {
            provider = set.provider().to_string();
        } else if provider != set.provider() && !provider.contains(set.provider()) {
            provider = format!("{provider};{}", set.provider());
        }
        intents.insert(tag.name.clone(), entry.id.clone());
        training.push((tag.name.clone(), tokenize(&entry.question).into_inner()));
        for v in set.variants() {
            training.push((tag.name.clone(), tokenize(v).into_inner()));
        }
    }

    let n = training.len();
    let mut vocabulary: BTreeMap<String, u32> = BTreeMap::new();
    for (_, toks) in &training {
        let mut uniq: Vec<&String> = toks.iter().collect();
        uniq.sort();
        uniq.dedup();
        for t in uniq {
            *vocabulary.entry(t.clone()).or_insert(0) += 1;
        }
    }

    let utterances = training
        .into_iter()
        .map(|(intent, toks)| {
            let mut w: BTreeMap<String, f64> = BTreeMap::new();
            for t in toks {
                *w.entry(t).or_insert(0.0) += 1.0;
            }
            for (t, v) in w.iter_mut() {
                *v *= idf(n, vocabulary[t]);
            }
            IndexedUtterance { intent, vector: FeatureVector::from_weights(w) }
        })
        .collect();

    Ok(IntentModel::assemble(vocabulary, n, utterances, intents, trained_at, corpus.digest(), provider, k))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedIntent {
    pub intent: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Classification {
    pub ranked: Vec<RankedIntent>,
}

impl Classification {
    pub fn top(&self) -> Option<&RankedIntent> {
        self.ranked.first()
    }
}

/// Confidence of an intent is the best cosine similarity between the
/// utterance and any of that intent's indexed utterances.
pub fn classify(model: &IntentModel, utterance: &str) -> Classification {
    let q = model.featurize(utterance);
    if q.norm == 0.0 {
        return Classification::default();
    }
    let mut dots = vec![0.0f64; model.utterances.len()];
    for (term, qw) in &q.weights {
        if let Some(list) = model.postings.get(term) {
            for &(i, dw) in list {
                dots[i] += qw * dw;
            }
        }
    }
    let mut best: HashMap<&str, f64> = HashMap::new();
    for (u, dot) in model.utterances.iter().zip(dots) {
        if dot <= 0.0 || u.vector.norm == 0.0 {
            continue;
        }
        let cos = (dot / (q.norm * u.vector.norm)).clamp(0.0, 1.0);
        let slot = best.entry(u.intent.as_str()).or_insert(0.0);
        if cos > *slot {
            *slot = cos;
        }
    }
    let mut ranked: Vec<RankedIntent> = best
        .into_iter()
        .filter(|(_, c)| *c > 0.0)
        .map(|(i, c)| RankedIntent { intent: i.to_string(), confidence: c })
        .collect();
    ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.intent.cmp(&b.intent)));
    Classification { ranked }
}

/// The owning entry's answer and source URL, byte-for-byte.
pub fn select_response<'c>(
    model: &IntentModel,
    corpus: &'c Corpus,
    intent: &str,
) -> Result<(&'c str, &'c str), NluError> {
    let entry = model
        .entry_for(intent)
        .and_then(|id| corpus.get(id))
        .ok_or_else(|| NluError::UnknownIntent(intent.to_string()))?;
    Ok((&entry.answer, &entry.source_url))
}

// Model file: tab-separated lines.
//
//   safechat-model  1
//   corpus_hash     <hex>
//   trained_at      <rfc3339>
//   provider        <name>
//   paraphrase_k    <k>
//   n_utterances    <N>
//   intent          <name>  <entry id>           (one per intent)
//   term            <term>  <df>                 (one per vocabulary term)
//   utt             <intent> (<term> <weight>)*  (one per indexed utterance)
//   checksum        <sha-256 of every preceding byte>

impl IntentModel {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MODEL_FORMAT}\t{MODEL_VERSION}");
        let _ = writeln!(s, "corpus_hash\t{}", self.corpus_hash);
        let _ = writeln!(s, "trained_at\t{}", self.trained_at.to_rfc3339_opts(SecondsFormat::Nanos, true));
        let _ = writeln!(s, "provider\t{}", self.provider);
        let _ = writeln!(s, "paraphrase_k\t{}", self.paraphrase_k);
        let _ = writeln!(s, "n_utterances\t{}", self.n_utterances);
        for (name, id) in &self.intents {
            let _ = writeln!(s, "intent\t{name}\t{id}");
        }
        for (t, df) in &self.vocabulary {
            let _ = writeln!(s, "term\t{t}\t{df}");
        }
        for u in &self.utterances {
            s.push_str("utt\t");
            s.push_str(&u.intent);
            for (t, w) in &u.vector.weights {
                let _ = write!(s, "\t{t}\t{w}");
            }
            s.push('\n');
        }
        let sum = hex::encode(Sha256::digest(s.as_bytes()));
        let _ = writeln!(s, "checksum\t{sum}");
        s
    }

    pub fn from_text(text: &str) -> Result<Self, NluError> {
        let err = |line: usize, reason: &str| NluError::ModelFormat { line, reason: reason.to_string() };
        let body_end = text.rfind("checksum\t").ok_or_else(|| err(0, "missing checksum"))?;
        let (body, tail) = text.split_at(body_end);
        let expected = tail.trim_end().strip_prefix("checksum\t").unwrap_or_default();
        if hex::encode(Sha256::digest(body.as_bytes())) != expected {
            return Err(err(body.lines().count() + 1, "checksum mismatch"));
        }

        let mut header: HashMap<&str, &str> = HashMap::new();
        let mut intents = BTreeMap::new();
        let mut vocabulary = BTreeMap::new();
        let mut utterances = Vec::new();
        for (i, line) in body.lines().enumerate() {
            let ln = i + 1;
            let cols: Vec<&str> = line.split('\t').collect();
            match cols[0] {
                MODEL_FORMAT if ln == 1 => {
                    if cols.get(1) != Some(&MODEL_VERSION.to_string().as_str()) {
                        return Err(err(ln, "unsupported model version"));
                    }
                }
                _ if ln == 1 => return Err(err(ln, "not a safechat model file")),
                "corpus_hash" | "trained_at" | "provider" | "paraphrase_k" | "n_utterances" if cols.len() == 2 => {
                    header.insert(cols[0], cols[1]);
                }
                "intent" if cols.len() == 3 => {
                    intents.insert(cols[1].to_string(), cols[2].to_string());
                }
                "term" if cols.len() == 3 => {
                    let df: u32 = cols[2].parse().map_err(|_| err(ln, "bad document frequency"))?;
                    vocabulary.insert(cols[1].to_string(), df);
                }
                "utt" if cols.len() >= 2 && cols.len().is_multiple_of(2) => {
                    let intent = cols[1].to_string();
                    if !intents.contains_key(&intent) {
                        return Err(err(ln, "utterance for undeclared intent"));
                    }
                    let mut w = BTreeMap::new();
                    for pair in cols[2..].chunks(2) {
                        let v: f64 = pair[1].parse().map_err(|_| err(ln, "bad weight"))?;
                        if !(v >= 0.0 && v.is_finite()) {
                            return Err(err(ln, "negative or non-finite weight"));
                        }
                        w.insert(pair[0].to_string(), v);
                    }
                    utterances.push(IndexedUtterance { intent, vector: FeatureVector::from_weights(w) });
                }
                _ => return Err(err(ln, "unrecognized line")),
            }
        }
        let get = |key: &str| header.get(key).copied().ok_or_else(|| err(0, &format!("missing `{key}`")));
        let trained_at = DateTime::parse_from_rfc3339(get("trained_at")?)
            .map_err(|_| err(0, "bad trained_at"))?
            .with_timezone(&Utc);
        let n_utterances: usize = get("n_utterances")?.parse().map_err(|_| err(0, "bad n_utterances"))?;
        let paraphrase_k: usize = get("paraphrase_k")?.parse().map_err(|_| err(0, "bad paraphrase_k"))?;
        if n_utterances != utterances.len() {
            return Err(err(0, "utterance count does not match header"));
        }
        Ok(Self::assemble(
            vocabulary,
            n_utterances,
            utterances,
            intents,
            trained_at,
            get("corpus_hash")?.to_string(),
            get("provider")?.to_string(),
            paraphrase_k,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NluError> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_text())?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NluError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
