//! Official FAQ corpus: loading, validation, statistics and intent tagging.
//!
//! The corpus is the only permissible source of answer text. Everything the
//! bot says as an answer must be byte-identical to an [`FaqEntry::answer`].

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::sync::LazyLock;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Column layout of the corpus CSV, in order.
pub const CSV_HEADER: [&str; 6] = ["id", "question", "answer", "topic", "source_url", "last_updated"];

pub const STOPLIST_VERSION: &str = "en-v1";
const STOPLIST_DATA: &str = include_str!("../data/stoplist_en_v1.txt");

static STOPLIST: LazyLock<HashSet<&'static str>> = LazyLock::new(|| {
    STOPLIST_DATA
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
});

/// Maximum number of content tokens joined into an intent name.
pub const INTENT_NGRAM: usize = 4;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus header must be `{}`, found `{found}`", CSV_HEADER.join(","))]
    BadHeader { found: String },
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("duplicate id `{id}` on rows {first_row} and {row}")]
    DuplicateId { id: String, first_row: usize, row: usize },
    #[error("corpus has no entries")]
    EmptyCorpus,
}

/// One official question/answer pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaqEntry {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub topic: String,
    pub source_url: String,
    pub last_updated: NaiveDate,
}

impl FaqEntry {
    fn validate(&self, row: usize) -> Result<(), CorpusError> {
        let malformed = |reason: String| CorpusError::MalformedRow { row, reason };
        if self.id.trim().is_empty() {
            return Err(malformed("empty id".into()));
        }
        if self.id.chars().any(char::is_whitespace) {
            return Err(malformed(format!("id `{}` contains whitespace", self.id)));
        }
        if self.question.trim().is_empty() {
            return Err(malformed("empty question".into()));
        }
        if self.answer.trim().is_empty() {
            return Err(malformed("empty answer".into()));
        }
        if self.topic.trim().is_empty() {
            return Err(malformed("empty topic".into()));
        }
        match url::Url::parse(&self.source_url) {
            Ok(u) if u.has_host() => Ok(()),
            _ => Err(malformed(format!("source_url `{}` is not an absolute URL", self.source_url))),
        }
    }
}

/// An ordered, validated collection of FAQ entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    entries: Vec<FaqEntry>,
    state_label: String,
    stoplist_version: String,
}

impl Corpus {
    /// Builds a corpus from already-parsed entries, enforcing every entry and
    /// corpus invariant. Row numbers in errors are 1-based entry positions.
    pub fn from_entries(entries: Vec<FaqEntry>, state_label: impl Into<String>) -> Result<Self, CorpusError> {
        if entries.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            let row = i + 1;
            e.validate(row)?;
            if let Some(&first_row) = seen.get(e.id.as_str()) {
                return Err(CorpusError::DuplicateId { id: e.id.clone(), first_row, row });
            }
            seen.insert(&e.id, row);
        }
        Ok(Self {
            entries,
            state_label: state_label.into(),
            stoplist_version: STOPLIST_VERSION.to_string(),
        })
    }

    pub fn entries(&self) -> &[FaqEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn state_label(&self) -> &str {
        &self.state_label
    }

    pub fn stoplist_version(&self) -> &str {
        &self.stoplist_version
    }

    pub fn get(&self, id: &str) -> Option<&FaqEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn topics(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.topic.as_str()).collect()
    }

    /// True if `text` is byte-identical to some entry's answer.
    pub fn contains_answer(&self, text: &str) -> bool {
        self.entries.iter().any(|e| e.answer == text)
    }

    /// Canonical CSV serialization (header plus one record per entry).
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for e in &self.entries {
            let date = e.last_updated.format("%Y-%m-%d").to_string();
            w.write_record([&e.id, &e.question, &e.answer, &e.topic, &e.source_url, &date])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }

    /// SHA-256 over the canonical CSV serialization, lowercase hex.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }

    /// Entries of `self` followed by those of `other`. Fails on id clashes.
    pub fn concat(&self, other: &Corpus) -> Result<Corpus, CorpusError> {
        let entries = self.entries.iter().chain(other.entries.iter()).cloned().collect();
        Corpus::from_entries(entries, format!("{}+{}", self.state_label, other.state_label))
    }
}

/// Parses corpus CSV from any reader.
pub fn parse_corpus<R: Read>(reader: R, state_label: &str) -> Result<Corpus, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();

    let header = match records.next() {
        None => return Err(CorpusError::EmptyCorpus),
        Some(r) => r.map_err(|e| CorpusError::MalformedRow { row: 0, reason: e.to_string() })?,
    };
    let found: Vec<&str> = header.iter().collect();
    // tolerate a UTF-8 byte order mark on the first column
    let first_ok = found.first().map(|f| f.trim_start_matches('\u{feff}') == CSV_HEADER[0]).unwrap_or(false);
    if found.len() != CSV_HEADER.len() || !first_ok || found[1..] != CSV_HEADER[1..] {
        return Err(CorpusError::BadHeader { found: found.join(",") });
    }

    let mut entries = Vec::new();
    for (i, rec) in records.enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| CorpusError::MalformedRow { row, reason: e.to_string() })?;
        if rec.len() != CSV_HEADER.len() {
            let missing = CSV_HEADER.get(rec.len()).copied().unwrap_or("extra");
            return Err(CorpusError::MalformedRow {
                row,
                reason: format!("expected {} columns, found {} (column `{missing}`)", CSV_HEADER.len(), rec.len()),
            });
        }
        let date_raw = rec[5].trim();
        let last_updated = NaiveDate::parse_from_str(date_raw, "%Y-%m-%d").map_err(|_| CorpusError::MalformedRow {
            row,
            reason: format!("last_updated `{date_raw}` is not an ISO-8601 date"),
        })?;
        entries.push(FaqEntry {
            id: rec[0].trim().to_string(),
            question: rec[1].to_string(),
            answer: rec[2].to_string(),
            topic: rec[3].trim().to_string(),
            source_url: rec[4].trim().to_string(),
            last_updated,
        });
    }
    Corpus::from_entries(entries, state_label)
}

pub fn load_corpus(path: impl AsRef<Path>, state_label: &str) -> Result<Corpus, CorpusError> {
    let file = File::open(path.as_ref())?;
    parse_corpus(file, state_label)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub n_pairs: usize,
    pub avg_question_len: f64,
    pub avg_answer_len: f64,
    pub n_topics: usize,
}

/// Words are maximal runs of non-whitespace; punctuation stays attached.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn compute_stats(corpus: &Corpus) -> Result<CorpusStats, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let n = corpus.len();
    let q: usize = corpus.entries.iter().map(|e| word_count(&e.question)).sum();
    let a: usize = corpus.entries.iter().map(|e| word_count(&e.answer)).sum();
    Ok(CorpusStats {
        n_pairs: n,
        avg_question_len: q as f64 / n as f64,
        avg_answer_len: a as f64 / n as f64,
        n_topics: corpus.topics().len(),
    })
}

pub fn is_stopword(token: &str) -> bool {
    STOPLIST.contains(token)
}

/// Lowercases, trims punctuation from both ends of each whitespace token and
/// drops stop-words. Order is preserved.
pub fn remove_stopwords(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.to_lowercase().trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|t| !t.is_empty() && !is_stopword(t))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentTag {
    pub name: String,
    pub entry_id: String,
}

fn sanitize(token: &str) -> String {
    token.chars().filter(|c| c.is_ascii_lowercase() || c.is_ascii_digit()).collect()
}

/// Base intent name for a single entry, before collision handling.
pub fn generate_intent(entry: &FaqEntry) -> IntentTag {
    let parts: Vec<String> = remove_stopwords(&entry.question)
        .iter()
        .map(|t| sanitize(t))
        .filter(|t| !t.is_empty())
        .take(INTENT_NGRAM)
        .collect();
    let name = if parts.is_empty() {
        let id: String = entry
            .id
            .to_lowercase()
            .chars()
            .map(|c| if c.is_ascii_lowercase() || c.is_ascii_digit() { c } else { '_' })
            .collect();
        format!("q_{id}")
    } else {
        parts.join("_")
    };
    IntentTag { name, entry_id: entry.id.clone() }
}

/// Intent tags for every entry in corpus order, with collisions resolved by
/// `_2`, `_3`, ... suffixes.
pub fn generate_intents(corpus: &Corpus) -> Vec<IntentTag> {
    let mut used: HashSet<String> = HashSet::new();
    corpus
        .entries
        .iter()
        .map(|e| {
            let mut tag = generate_intent(e);
            if used.contains(&tag.name) {
                let base = tag.name.clone();
                let mut n = 2;
                while used.contains(&format!("{base}_{n}")) {
                    n += 1;
                }
                tag.name = format!("{base}_{n}");
            }
            used.insert(tag.name.clone());
            tag
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, q: &str) -> FaqEntry {
        FaqEntry {
            id: id.into(),
            question: q.into(),
            answer: "See the official page.".into(),
            topic: "general".into(),
            source_url: "https://example.gov/faq".into(),
            last_updated: NaiveDate::from_ymd_opt(2021, 9, 1).unwrap(),
        }
    }

    const HEADER: &str = "id,question,answer,topic,source_url,last_updated\n";

    #[test]
    fn stopwords_removed_in_order() {
        assert_eq!(remove_stopwords("How do I register to vote?"), vec!["register", "vote"]);
        assert!(remove_stopwords("").is_empty());
        assert!(remove_stopwords("the is why").is_empty());
    }

    #[test]
    fn intent_names() {
        assert_eq!(generate_intent(&entry("q1", "How do I register to vote?")).name, "register_vote");
        assert_eq!(generate_intent(&entry("q7", "Why is it so?")).name, "q_q7");
        let tag = generate_intent(&entry("q9", "When must absentee ballots be received by the clerk?"));
        assert_eq!(tag.name, "must_absentee_ballots_received");
    }

    #[test]
    fn intent_collisions_get_suffixes() {
        let c = Corpus::from_entries(
            vec![
                entry("a", "Absentee ballot?"),
                entry("b", "The absentee ballot"),
                entry("c", "An absentee ballot!"),
            ],
            "T",
        )
        .unwrap();
        let names: Vec<_> = generate_intents(&c).into_iter().map(|t| t.name).collect();
        assert_eq!(names, ["absentee_ballot", "absentee_ballot_2", "absentee_ballot_3"]);
    }

    #[test]
    fn duplicate_id_reports_rows() {
        let csv = format!(
            "{HEADER}q1,A?,a,t,https://x.gov/,2021-01-01\nq2,B?,b,t,https://x.gov/,2021-01-01\nq3,C?,c,t,https://x.gov/,2021-01-01\nq4,D?,d,t,https://x.gov/,2021-01-01\nq1,E?,e,t,https://x.gov/,2021-01-01\n"
        );
        match parse_corpus(csv.as_bytes(), "T") {
            Err(CorpusError::DuplicateId { id, first_row, row }) => {
                assert_eq!(id, "q1");
                assert_eq!((first_row, row), (1, 5));
            }
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_malformed_row() {
        let csv = format!("{HEADER}q1,A?,a,t,https://x.gov/,2021-01-01\nq2,B?,b,t\n");
        match parse_corpus(csv.as_bytes(), "T") {
            Err(CorpusError::MalformedRow { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected MalformedRow, got {other:?}"),
        }
    }

    #[test]
    fn empty_and_bad_header() {
        assert!(matches!(parse_corpus(HEADER.as_bytes(), "T"), Err(CorpusError::EmptyCorpus)));
        assert!(matches!(parse_corpus("".as_bytes(), "T"), Err(CorpusError::EmptyCorpus)));
        assert!(matches!(
            parse_corpus("id,q,a\n".as_bytes(), "T"),
            Err(CorpusError::BadHeader { .. })
        ));
    }

    #[test]
    fn rejects_relative_url_and_blank_answer() {
        let csv = format!("{HEADER}q1,A?,a,t,/faq/page,2021-01-01\n");
        assert!(matches!(parse_corpus(csv.as_bytes(), "T"), Err(CorpusError::MalformedRow { row: 1, .. })));
        let csv = format!("{HEADER}q1,A?,\"   \",t,https://x.gov/,2021-01-01\n");
        assert!(matches!(parse_corpus(csv.as_bytes(), "T"), Err(CorpusError::MalformedRow { row: 1, .. })));
    }

    #[test]
    fn stats_arithmetic() {
        let mut a = entry("a", "one two three four");
        a.answer = "x".into();
        let mut b = entry("b", "one two three four five six");
        b.answer = "x y z".into();
        let s = compute_stats(&Corpus::from_entries(vec![a, b], "T").unwrap()).unwrap();
        assert_eq!(s.avg_question_len, 5.0);
        assert_eq!(s.avg_answer_len, 2.0);

        let mut v = entry("v", "vote");
        v.answer = "vote".into();
        let s = compute_stats(&Corpus::from_entries(vec![v], "T").unwrap()).unwrap();
        assert_eq!((s.n_pairs, s.avg_question_len, s.avg_answer_len, s.n_topics), (1, 1.0, 1.0, 1));
    }

    #[test]
    fn stoplist_is_versioned() {
        assert!(STOPLIST_DATA.contains(STOPLIST_VERSION));
        assert!(is_stopword("the") && is_stopword("why") && !is_stopword("vote"));
    }
}
