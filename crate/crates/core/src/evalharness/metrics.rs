//! Chatbot health metrics computed from the audit log and session registry.
//!
//! - activation: sessions with at least one question / sessions opened
//! - fallback: fallback turns / question turns
//! - retention: users with two or more sessions / users
//! - self-service: question sessions without any fallback / question sessions
//! - confusion triggers: most frequent fallback utterances (normalized)
//!
//! A zero denominator yields a rate of 0 and the metric's name in `undefined`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::dialogue::Variant;
use crate::nlu::tokenize;
use crate::safety::{AuditRecord, ResponseKind};

pub const DEFAULT_CONFUSION_TOP_K: usize = 5;

/// Registry view of one opened session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub user_id: String,
    pub variant: Variant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTrigger {
    pub utterance: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HealthMetrics {
    pub activation_rate: f64,
    pub fallback_rate: f64,
    pub retention_rate: f64,
    pub self_service_rate: f64,
    pub confusion_triggers: Vec<ConfusionTrigger>,
    pub sessions_opened: u64,
    pub question_sessions: u64,
    pub question_turns: u64,
    pub fallback_turns: u64,
    pub users: u64,
    pub returning_users: u64,
    /// Metrics whose denominator was zero.
    pub undefined: Vec<String>,
}

fn rate(num: u64, den: u64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        (num as f64 / den as f64).clamp(0.0, 1.0)
    }
}

pub fn compute_metrics(records: &[AuditRecord], sessions: &[SessionInfo], top_k: usize) -> HealthMetrics {
    let mut questions_by_session: HashMap<&str, (u64, u64)> = HashMap::new();
    let mut confusion: BTreeMap<String, u64> = BTreeMap::new();
    let (mut question_turns, mut fallback_turns) = (0u64, 0u64);
    for r in records.iter().filter(|r| r.decision.kind.is_question()) {
        question_turns += 1;
        let slot = questions_by_session.entry(r.session_id.as_str()).or_default();
        slot.0 += 1;
        if r.decision.kind == ResponseKind::Fallback {
            fallback_turns += 1;
            slot.1 += 1;
            let key = tokenize(&r.user_utterance).into_inner().join(" ");
            *confusion.entry(key).or_default() += 1;
        }
    }

    let opened: BTreeSet<&str> = sessions.iter().map(|s| s.session_id.as_str()).collect();
    let activated = opened.iter().filter(|id| questions_by_session.contains_key(*id)).count() as u64;
    let question_sessions = questions_by_session.len() as u64;
    let self_served = questions_by_session.values().filter(|(_, fb)| *fb == 0).count() as u64;

    let mut per_user: HashMap<&str, BTreeSet<&str>> = HashMap::new();
    for s in sessions {
        per_user.entry(s.user_id.as_str()).or_default().insert(s.session_id.as_str());
    }
    let users = per_user.len() as u64;
    let returning = per_user.values().filter(|s| s.len() >= 2).count() as u64;

    let mut triggers: Vec<ConfusionTrigger> =
        confusion.into_iter().map(|(utterance, count)| ConfusionTrigger { utterance, count }).collect();
    triggers.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.utterance.cmp(&b.utterance)));
    triggers.truncate(top_k);

    let mut undefined = Vec::new();
    HealthMetrics {
        activation_rate: rate(activated, opened.len() as u64, "activation_rate", &mut undefined),
        fallback_rate: rate(fallback_turns, question_turns, "fallback_rate", &mut undefined),
        retention_rate: rate(returning, users, "retention_rate", &mut undefined),
        self_service_rate: rate(self_served, question_sessions, "self_service_rate", &mut undefined),
        confusion_triggers: triggers,
        sessions_opened: opened.len() as u64,
        question_sessions,
        question_turns,
        fallback_turns,
        users,
        returning_users: returning,
        undefined,
    }
}
