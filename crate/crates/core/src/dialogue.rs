//! Session state machine and per-turn orchestration.
//!
//! A turn is either a closing utterance (matched against the library's
//! closing lexicon) or a question that runs classify, guard and the audit
//! append. There is no free-text generation path: every response text is a
//! corpus answer, a library or policy template, or a control-arm link.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::evalharness::control_response;
use crate::nlu::{classify, tokenize, IntentModel};
use crate::safety::{guard, AuditError, AuditLog, AuditPayload, Decision, DecisionSummary, ResponseKind, SafetyPolicy};

const DEFAULT_LIBRARY: &str = include_str!("../data/utterances_v1.toml");

#[derive(Debug, Error)]
pub enum DialogueError {
    #[error("session `{0}` is closed")]
    SessionClosed(String),
    /// The turn was computed but its audit record is not durable.
    #[error("audit append failed: {source}")]
    AuditFailed { response: Box<BotResponse>, source: AuditError },
    #[error("utterance library: {0}")]
    Library(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Experimental,
    Control,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Experimental => "experimental",
            Variant::Control => "control",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Opened,
    Active,
    AwaitingFeedback,
    Closed,
}

impl SessionState {
    fn can_move_to(self, next: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, next),
            (Opened, Active) | (Active, AwaitingFeedback) | (AwaitingFeedback, Active) | (Active, Closed)
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeedbackError {
    #[error("entry `{0}` was not answered in this session")]
    NotAnswered(String),
    #[error("entry `{0}` already has feedback in this session")]
    AlreadyRated(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct Session {
    session_id: String,
    state: SessionState,
    turn_count: u64,
    variant: Variant,
    created_at: DateTime<Utc>,
    ordinal: u64,
    answered: BTreeSet<String>,
    rated: BTreeSet<String>,
}

impl Session {
    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn turn_count(&self) -> u64 {
        self.turn_count
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn created_at(&self) -> DateTime<Utc> {
        self.created_at
    }

    /// Entries answered (or linked) so far in this session.
    pub fn answered(&self) -> &BTreeSet<String> {
        &self.answered
    }

    pub fn is_closed(&self) -> bool {
        self.state == SessionState::Closed
    }

    fn transition(&mut self, next: SessionState) {
        if self.state == next {
            return;
        }
        assert!(self.state.can_move_to(next), "illegal session transition {:?} -> {next:?}", self.state);
        self.state = next;
    }

    /// Marks feedback for an answered entry. At most once per entry.
    pub fn accept_feedback(&mut self, entry_id: &str) -> Result<(), FeedbackError> {
        if !self.answered.contains(entry_id) {
            return Err(FeedbackError::NotAnswered(entry_id.to_string()));
        }
        if !self.rated.insert(entry_id.to_string()) {
            return Err(FeedbackError::AlreadyRated(entry_id.to_string()));
        }
        if self.state == SessionState::AwaitingFeedback {
            self.transition(SessionState::Active);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceLibrary {
    #[serde(default)]
    pub version: String,
    pub openings: Vec<String>,
    pub closings: Vec<String>,
    pub feedback_prompts: Vec<String>,
    #[serde(default = "default_closing_triggers")]
    pub closing_triggers: Vec<String>,
}

fn default_closing_triggers() -> Vec<String> {
    ["bye", "goodbye", "quit", "exit", "thanks, bye"].map(String::from).to_vec()
}

impl UtteranceLibrary {
    pub fn builtin() -> Self {
        Self::from_toml(DEFAULT_LIBRARY).expect("bundled library is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, DialogueError> {
        let lib: Self = toml::from_str(text).map_err(|e| DialogueError::Library(e.to_string()))?;
        for (name, list) in [("openings", &lib.openings), ("closings", &lib.closings), ("feedback_prompts", &lib.feedback_prompts)] {
            if list.is_empty() {
                return Err(DialogueError::Library(format!("{name} must not be empty")));
            }
        }
        Ok(lib)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DialogueError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| DialogueError::Library(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn is_closing(&self, utterance: &str) -> bool {
        let said = tokenize(utterance).into_inner().join(" ");
        !said.is_empty() && self.closing_triggers.iter().any(|t| tokenize(t).into_inner().join(" ") == said)
    }
}

fn pick(list: &[String], n: u64) -> &str {
    &list[(n % list.len() as u64) as usize]
}

/// Issues sessions with unique ids and a rotating greeting.
#[derive(Debug)]
pub struct SessionFactory {
    nonce: u64,
    counter: AtomicU64,
}

impl SessionFactory {
    /// `nonce` distinguishes id spaces across process lifetimes.
    pub fn new(nonce: u64) -> Self {
        Self { nonce, counter: AtomicU64::new(0) }
    }

    pub fn random() -> Self {
        Self::new(rand::random())
    }

    pub fn open_session(&self, library: &UtteranceLibrary, variant: Variant) -> (Session, String) {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let session = Session {
            session_id: format!("s{:016x}-{n:06}", self.nonce),
            state: SessionState::Opened,
            turn_count: 0,
            variant,
            created_at: Utc::now(),
            ordinal: n,
            answered: BTreeSet::new(),
            rated: BTreeSet::new(),
        };
        (session, pick(&library.openings, n).to_string())
    }
}

/// What the user sees for one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BotResponse {
    pub text: String,
    pub kind: ResponseKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_url: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entry_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feedback_prompt: Option<String>,
    /// Audit sequence number of this turn.
    pub seq: u64,
}

/// Read-only inputs for a turn.
#[derive(Debug, Clone, Copy)]
pub struct TurnContext<'a> {
    pub model: &'a IntentModel,
    pub corpus: &'a Corpus,
    pub policy: &'a SafetyPolicy,
    pub library: &'a UtteranceLibrary,
}

pub fn open_session(factory: &SessionFactory, library: &UtteranceLibrary) -> (Session, String) {
    factory.open_session(library, Variant::Experimental)
}

/// Runs one user turn and appends its audit record.
pub fn handle_turn(
    session: &mut Session,
    utterance: &str,
    ctx: TurnContext<'_>,
    audit: &mut AuditLog,
) -> Result<BotResponse, DialogueError> {
    if session.is_closed() {
        return Err(DialogueError::SessionClosed(session.session_id.clone()));
    }
    if session.state == SessionState::Opened || session.state == SessionState::AwaitingFeedback {
        session.transition(SessionState::Active);
    }

    let rotation = audit.next_seq();
    let (summary, confidence) = if ctx.library.is_closing(utterance) {
        let text = pick(&ctx.library.closings, session.ordinal).to_string();
        (
            DecisionSummary { kind: ResponseKind::Closing, text, intent: None, entry_id: None, source_url: None, rule: None },
            None,
        )
    } else {
        let classification = classify(ctx.model, utterance);
        let decision = guard(&classification, utterance, ctx.policy, ctx.model, ctx.corpus, rotation);
        summarize(&decision, session.variant, ctx.corpus)
    };

    let payload = AuditPayload {
        session_id: session.session_id.clone(),
        user_utterance: utterance.to_string(),
        decision: summary.clone(),
        confidence,
        corpus_hash: ctx.model.corpus_hash().to_string(),
    };
    let appended = audit.append(payload);

    let mut response = BotResponse {
        text: summary.text,
        kind: summary.kind,
        source_url: summary.source_url,
        confidence,
        entry_id: summary.entry_id,
        feedback_prompt: None,
        seq: rotation,
    };
    match summary.kind {
        ResponseKind::Closing => session.transition(SessionState::Closed),
        kind => {
            session.turn_count += 1;
            if matches!(kind, ResponseKind::Answer | ResponseKind::Link) {
                if let Some(id) = &response.entry_id {
                    session.answered.insert(id.clone());
                }
                response.feedback_prompt = Some(pick(&ctx.library.feedback_prompts, rotation).to_string());
                session.transition(SessionState::AwaitingFeedback);
            }
        }
    }
    match appended {
        Ok(_) => Ok(response),
        Err(source) => Err(DialogueError::AuditFailed { response: Box::new(response), source }),
    }
}

fn summarize(decision: &Decision, variant: Variant, corpus: &Corpus) -> (DecisionSummary, Option<f64>) {
    match decision {
        Decision::Answer { intent, entry_id, answer, source_url, confidence } => {
            let (kind, text) = match variant {
                Variant::Experimental => (ResponseKind::Answer, answer.clone()),
                Variant::Control => (
                    ResponseKind::Link,
                    control_response(decision, corpus).expect("decision is an answer from this corpus"),
                ),
            };
            (
                DecisionSummary {
                    kind,
                    text,
                    intent: Some(intent.clone()),
                    entry_id: Some(entry_id.clone()),
                    source_url: Some(source_url.clone()),
                    rule: None,
                },
                Some(*confidence),
            )
        }
        Decision::Deflect { rule, template } => (
            DecisionSummary {
                kind: ResponseKind::Deflect,
                text: template.clone(),
                intent: None,
                entry_id: None,
                source_url: None,
                rule: Some(rule.to_string()),
            },
            None,
        ),
        Decision::Fallback { template, top_confidence } => (
            DecisionSummary {
                kind: ResponseKind::Fallback,
                text: template.clone(),
                intent: None,
                entry_id: None,
                source_url: None,
                rule: None,
            },
            *top_confidence,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FaqEntry;
    use crate::nlu::train;
    use crate::paraphrase::{paraphrase_corpus, RuleParaphraser};
    use chrono::NaiveDate;

    struct Fx {
        corpus: Corpus,
        model: IntentModel,
        policy: SafetyPolicy,
        library: UtteranceLibrary,
    }

    impl Fx {
        fn new() -> Self {
            let corpus = Corpus::from_entries(
                vec![FaqEntry {
                    id: "q1".into(),
                    question: "How do I register to vote?".into(),
                    answer: "Register online at the state portal.".into(),
                    topic: "t".into(),
                    source_url: "https://x.gov/register".into(),
                    last_updated: NaiveDate::from_ymd_opt(2021, 1, 1).unwrap(),
                }],
                "T",
            )
            .unwrap();
            let sets = paraphrase_corpus(&RuleParaphraser::builtin(), &corpus, 3).unwrap();
            let model = train(&corpus, &sets).unwrap();
            Self { corpus, model, policy: SafetyPolicy::builtin(), library: UtteranceLibrary::builtin() }
        }

        fn ctx(&self) -> TurnContext<'_> {
            TurnContext { model: &self.model, corpus: &self.corpus, policy: &self.policy, library: &self.library }
        }
    }

    #[test]
    fn greeting_rotation_and_unique_ids() {
        let lib = UtteranceLibrary::builtin();
        let f = SessionFactory::new(7);
        let (a, g0) = open_session(&f, &lib);
        let (b, g1) = open_session(&f, &lib);
        let (_, g2) = open_session(&f, &lib);
        let (_, g3) = open_session(&f, &lib);
        assert_eq!(g0, lib.openings[0]);
        assert_eq!(g1, lib.openings[1]);
        assert_eq!(g2, lib.openings[2 % lib.openings.len()]);
        assert_eq!(g3, lib.openings[3 % lib.openings.len()]);
        assert_ne!(a.session_id(), b.session_id());
        assert_eq!(a.state(), SessionState::Opened);
    }

    #[test]
    fn bye_closes_session() {
        let fx = Fx::new();
        let mut log = AuditLog::in_memory();
        let (mut s, _) = open_session(&SessionFactory::new(1), &fx.library);
        let r = handle_turn(&mut s, "Bye!", fx.ctx(), &mut log).unwrap();
        assert_eq!(r.kind, ResponseKind::Closing);
        assert_eq!(r.text, fx.library.closings[0]);
        assert!(s.is_closed());
        assert!(matches!(handle_turn(&mut s, "hello", fx.ctx(), &mut log), Err(DialogueError::SessionClosed(_))));
        assert!(fx.library.is_closing("thanks, bye"));
        assert!(fx.library.is_closing("Thanks bye"));
        assert!(!fx.library.is_closing("bye bye now"));
    }

    #[test]
    fn verbatim_question_answers_with_source() {
        let fx = Fx::new();
        let mut log = AuditLog::in_memory();
        let (mut s, _) = open_session(&SessionFactory::new(1), &fx.library);
        let r = handle_turn(&mut s, "How do I register to vote?", fx.ctx(), &mut log).unwrap();
        assert_eq!(r.kind, ResponseKind::Answer);
        assert_eq!(r.text, "Register online at the state portal.");
        assert_eq!(r.source_url.as_deref(), Some("https://x.gov/register"));
        assert_eq!(s.state(), SessionState::AwaitingFeedback);
        assert_eq!(s.turn_count(), 1);
        assert!(r.feedback_prompt.is_some());
        s.accept_feedback("q1").unwrap();
        assert_eq!(s.state(), SessionState::Active);
        assert_eq!(s.accept_feedback("q1"), Err(FeedbackError::AlreadyRated("q1".into())));
        assert_eq!(s.accept_feedback("q9"), Err(FeedbackError::NotAnswered("q9".into())));
    }

    #[test]
    fn gibberish_falls_back_and_is_audited() {
        let fx = Fx::new();
        let mut log = AuditLog::in_memory();
        let (mut s, _) = open_session(&SessionFactory::new(1), &fx.library);
        let r = handle_turn(&mut s, "zzqx", fx.ctx(), &mut log).unwrap();
        assert_eq!(r.kind, ResponseKind::Fallback);
        assert!(fx.policy.fallback_templates().contains(&r.text));
        assert_eq!(log.next_seq(), 2);
    }

    #[test]
    fn control_variant_links_instead_of_answering() {
        let fx = Fx::new();
        let mut log = AuditLog::in_memory();
        let (mut s, _) = SessionFactory::new(1).open_session(&fx.library, Variant::Control);
        let r = handle_turn(&mut s, "How do I register to vote?", fx.ctx(), &mut log).unwrap();
        assert_eq!(r.kind, ResponseKind::Link);
        assert!(r.text.contains("https://x.gov/register"));
        assert!(!r.text.contains("Register online at the state portal."));
        assert!(s.answered().contains("q1"));
    }

    #[test]
    fn empty_library_lists_rejected() {
        assert!(UtteranceLibrary::from_toml("openings=[]\nclosings=[\"a\"]\nfeedback_prompts=[\"b\"]").is_err());
    }
}
