//! Append-only, hash-chained audit log stored as JSON lines.
//!
//! Each line is one [`AuditRecord`] with fields in canonical order. The
//! record digest is `SHA-256(prev_digest || payload)` where `payload` is the
//! compact JSON of the record without `prev_digest` and `digest`. The genesis
//! record chains to 64 zeros. Verification also requires every stored line to
//! equal its canonical re-serialization, so a mutation that parses to the
//! same values is still reported.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const GENESIS_DIGEST: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit storage failure: {0}")]
    StorageFailure(#[source] std::io::Error),
    #[error("cannot read audit log {path}: {source}")]
    UnreadableLog { path: PathBuf, source: std::io::Error },
    #[error("audit chain broken at seq {seq}: {reason}")]
    ChainBroken { seq: u64, reason: String },
    #[error("no turns recorded for session `{0}`")]
    UnknownSession(String),
}

/// What kind of response a turn produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    Answer,
    Deflect,
    Fallback,
    Closing,
    Link,
    /// Operator events such as a corpus reload.
    System,
}

impl ResponseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ResponseKind::Answer => "answer",
            ResponseKind::Deflect => "deflect",
            ResponseKind::Fallback => "fallback",
            ResponseKind::Closing => "closing",
            ResponseKind::Link => "link",
            ResponseKind::System => "system",
        }
    }

    /// A user question, as opposed to a closing or system event.
    pub fn is_question(self) -> bool {
        matches!(self, ResponseKind::Answer | ResponseKind::Deflect | ResponseKind::Fallback | ResponseKind::Link)
    }
}

/// The served response, exactly as the user saw it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionSummary {
    pub kind: ResponseKind,
    pub text: String,
    pub intent: Option<String>,
    pub entry_id: Option<String>,
    pub source_url: Option<String>,
    pub rule: Option<String>,
}

/// Caller-supplied part of a record.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditPayload {
    pub session_id: String,
    pub user_utterance: String,
    pub decision: DecisionSummary,
    pub confidence: Option<f64>,
    pub corpus_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRecord {
    pub seq: u64,
    pub timestamp: String,
    pub session_id: String,
    pub user_utterance: String,
    pub decision: DecisionSummary,
    pub confidence: Option<f64>,
    pub corpus_hash: String,
    pub prev_digest: String,
    pub digest: String,
}

#[derive(Serialize)]
struct CanonicalPayload<'a> {
    seq: u64,
    timestamp: &'a str,
    session_id: &'a str,
    user_utterance: &'a str,
    decision: &'a DecisionSummary,
    confidence: Option<f64>,
    corpus_hash: &'a str,
}

impl AuditRecord {
    fn payload_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&CanonicalPayload {
            seq: self.seq,
            timestamp: &self.timestamp,
            session_id: &self.session_id,
            user_utterance: &self.user_utterance,
            decision: &self.decision,
            confidence: self.confidence,
            corpus_hash: &self.corpus_hash,
        })
        .expect("audit payload serializes")
    }

    /// Digest of this record given its `prev_digest`.
    pub fn compute_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.prev_digest.as_bytes());
        h.update(self.payload_bytes());
        hex::encode(h.finalize())
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("audit record serializes")
    }
}

enum Sink {
    File { file: File, path: PathBuf },
    Memory(Vec<u8>),
}

/// Single-writer handle. Sequence numbers are assigned here.
pub struct AuditLog {
    sink: Sink,
    next_seq: u64,
    last_digest: String,
    // cleared only on reopen; a failed write leaves a partial line behind
    poisoned: bool,
}

impl std::fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuditLog").field("next_seq", &self.next_seq).field("last_digest", &self.last_digest).finish()
    }
}

impl AuditLog {
    /// Opens (or creates) a log file for append. An existing log must verify.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, AuditError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(AuditError::StorageFailure)?;
        }
        let existing = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(source) => return Err(AuditError::UnreadableLog { path, source }),
        };
        let (next_seq, last_digest) = resume_point(&existing)?;
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(AuditError::StorageFailure)?;
        Ok(Self { sink: Sink::File { file, path }, next_seq, last_digest, poisoned: false })
    }

    pub fn in_memory() -> Self {
        Self { sink: Sink::Memory(Vec::new()), next_seq: 1, last_digest: GENESIS_DIGEST.to_string(), poisoned: false }
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.sink {
            Sink::File { path, .. } => Some(path),
            Sink::Memory(_) => None,
        }
    }

    /// Contents written so far, for in-memory logs.
    pub fn memory_bytes(&self) -> Option<&[u8]> {
        match &self.sink {
            Sink::Memory(b) => Some(b),
            Sink::File { .. } => None,
        }
    }

    /// Current log contents, read back from storage for file logs.
    pub fn snapshot(&self) -> Result<Vec<u8>, AuditError> {
        match &self.sink {
            Sink::Memory(b) => Ok(b.clone()),
            Sink::File { path, .. } => {
                std::fs::read(path).map_err(|source| AuditError::UnreadableLog { path: path.clone(), source })
            }
        }
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn last_digest(&self) -> &str {
        &self.last_digest
    }

    /// Appends one record; for file logs the line is fsynced before return.
    pub fn append(&mut self, payload: AuditPayload) -> Result<AuditRecord, AuditError> {
        if self.poisoned {
            return Err(AuditError::StorageFailure(std::io::Error::other("log poisoned by an earlier failed write")));
        }
        let mut record = AuditRecord {
            seq: self.next_seq,
            timestamp: Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true),
            session_id: payload.session_id,
            user_utterance: payload.user_utterance,
            decision: payload.decision,
            confidence: payload.confidence.filter(|c| c.is_finite()),
            corpus_hash: payload.corpus_hash,
            prev_digest: self.last_digest.clone(),
            digest: String::new(),
        };
        record.digest = record.compute_digest();
        let mut line = record.to_line();
        line.push('\n');
        match &mut self.sink {
            Sink::Memory(buf) => buf.extend_from_slice(line.as_bytes()),
            Sink::File { file, .. } => {
                let res = file.write_all(line.as_bytes()).and_then(|_| file.sync_data());
                if let Err(e) = res {
                    self.poisoned = true;
                    return Err(AuditError::StorageFailure(e));
                }
            }
        }
        self.next_seq += 1;
        self.last_digest = record.digest.clone();
        Ok(record)
    }
}

fn resume_point(bytes: &[u8]) -> Result<(u64, String), AuditError> {
    let report = verify_bytes(bytes);
    if let Some(seq) = report.first_broken {
        return Err(AuditError::ChainBroken { seq, reason: report.reason.unwrap_or_default() });
    }
    let last = parse_records(bytes).pop();
    Ok(match last {
        Some(r) => (r.seq + 1, r.digest),
        None => (1, GENESIS_DIGEST.to_string()),
    })
}

/// Result of recomputing every digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChainReport {
    pub records: u64,
    pub first_broken: Option<u64>,
    pub reason: Option<String>,
}

impl ChainReport {
    pub fn is_valid(&self) -> bool {
        self.first_broken.is_none()
    }
}

/// Verifies raw log bytes. The broken seq is the 1-based line position.
pub fn verify_bytes(bytes: &[u8]) -> ChainReport {
    let mut prev = GENESIS_DIGEST.to_string();
    let mut count = 0u64;
    let broken = |seq: u64, count: u64, reason: String| ChainReport {
        records: count,
        first_broken: Some(seq),
        reason: Some(reason),
    };
    if bytes.is_empty() {
        return ChainReport { records: 0, first_broken: None, reason: None };
    }
    let mut lines: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    // a well-formed log ends in a newline, leaving one empty trailing piece
    let terminated = lines.last().is_some_and(|l| l.is_empty());
    if terminated {
        lines.pop();
    }
    let n_lines = lines.len();
    for (i, raw) in lines.into_iter().enumerate() {
        let seq = i as u64 + 1;
        if !terminated && i + 1 == n_lines {
            return broken(seq, count, "record is not newline-terminated".into());
        }
        let Ok(line) = std::str::from_utf8(raw) else {
            return broken(seq, count, "record is not valid UTF-8".into());
        };
        let rec: AuditRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => return broken(seq, count, format!("unparseable record: {e}")),
        };
        if rec.seq != seq {
            return broken(seq, count, format!("expected seq {seq}, found {}", rec.seq));
        }
        if rec.prev_digest != prev {
            return broken(seq, count, "prev_digest does not match predecessor".into());
        }
        if rec.compute_digest() != rec.digest {
            return broken(seq, count, "digest mismatch".into());
        }
        if rec.to_line() != line {
            return broken(seq, count, "record is not in canonical form".into());
        }
        prev = rec.digest;
        count += 1;
    }
    ChainReport { records: count, first_broken: None, reason: None }
}

pub fn verify_chain(path: impl AsRef<Path>) -> Result<ChainReport, AuditError> {
    let path = path.as_ref();
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(source) => return Err(AuditError::UnreadableLog { path: path.to_path_buf(), source }),
    };
    Ok(verify_bytes(&bytes))
}

/// Parses records without verifying; stops at the first unparseable line.
pub fn parse_records(bytes: &[u8]) -> Vec<AuditRecord> {
    bytes
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map_while(|l| serde_json::from_slice(l).ok())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptTurn {
    pub seq: u64,
    pub utterance: String,
    pub response: DecisionSummary,
    pub confidence: Option<f64>,
}

/// Turns of one session in seq order. The chain must verify first.
pub fn replay_bytes(bytes: &[u8], session_id: &str) -> Result<Vec<TranscriptTurn>, AuditError> {
    let report = verify_bytes(bytes);
    if let Some(seq) = report.first_broken {
        return Err(AuditError::ChainBroken { seq, reason: report.reason.unwrap_or_default() });
    }
    let turns: Vec<TranscriptTurn> = parse_records(bytes)
        .into_iter()
        .filter(|r| r.session_id == session_id)
        .map(|r| TranscriptTurn { seq: r.seq, utterance: r.user_utterance, response: r.decision, confidence: r.confidence })
        .collect();
    if turns.is_empty() {
        return Err(AuditError::UnknownSession(session_id.to_string()));
    }
    Ok(turns)
}

pub fn replay(path: impl AsRef<Path>, session_id: &str) -> Result<Vec<TranscriptTurn>, AuditError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| AuditError::UnreadableLog { path: path.to_path_buf(), source })?;
    replay_bytes(&bytes, session_id)
}
